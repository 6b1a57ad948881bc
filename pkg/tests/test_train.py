import json

import numpy as np
import pytest

from sal import autodiff as ad
from sal.beamform import beamform, build_steering
from sal.dataset import make_dataset
from sal.simulate import ArrayConfig
from sal.subsample import apply_discrete
from sal.train import (Adam, BASELINE_STREAM, CSV_HEADER, EvalReport,
                       TrainConfig, _stream, baseline_random_best, batch_loss,
                       evaluate_design, psnr, random_design_values,
                       reconstruct_maps, ssim, train, uniform_design_values,
                       validation_records, write_history, write_metrics_csv)
from oracles import brute_psnr, brute_ssim, fd_grad, rel_err


def tiny_cfg():
    return ArrayConfig(n_tx=1, n_rx=8, n_range=8, n_azimuth=8)


@pytest.fixture(scope="module")
def tiny_data():
    return make_dataset(tiny_cfg(), n_train=20, n_test=5, noise_sigma=0.4,
                        master_seed=404)


# ---------------------------------------------------------------------------
# loss and optimizer

def test_batch_loss_value_and_gradient():
    rng = np.random.default_rng(0)
    out0 = np.abs(rng.standard_normal((3, 5, 4)))
    refs = np.abs(rng.standard_normal((3, 5, 4)))

    def run(v, learn):
        node = ad.leaf(v.reshape(3, 5, 4), learnable=learn)
        return batch_loss(node, refs), node

    root, leaf = run(out0, True)
    want_val = np.mean([np.linalg.norm(out0[i] - refs[i]) for i in range(3)])
    assert abs(float(root.value) - want_val) < 1e-12
    got = ad.backward(root)[leaf]
    want = fd_grad(lambda v: float(run(v, False)[0].value),
                   out0.reshape(-1), h=1e-6).reshape(3, 5, 4)
    assert rel_err(got, want) < 1e-6


def test_adam_known_first_step_and_zero_lr():
    p = ad.param(np.array([2.0, -1.0]))
    opt = Adam([(p, 0.1)])
    opt.step({p: np.array([1.0, 1.0])})
    # bias-corrected first step moves by ~lr regardless of gradient scale
    assert np.max(np.abs(p.value - [1.9, -1.1])) < 1e-8
    frozen = ad.param(np.array([3.0, 4.0]))
    opt2 = Adam([(frozen, 0.0)])
    before = frozen.value.tobytes()
    for _ in range(5):
        opt2.step({frozen: np.array([0.5, -2.0])})
    assert frozen.value.tobytes() == before
    # params missing from the grad map are left alone
    opt3 = Adam([(p, 0.1)])
    snap = p.value.tobytes()
    opt3.step({})
    assert p.value.tobytes() == snap


def test_adam_per_group_learning_rates():
    a = ad.param(np.zeros(2))
    b = ad.param(np.zeros(2))
    opt = Adam([(a, 0.1), (b, 0.001)])
    g = np.ones(2)
    opt.step({a: g, b: g})
    assert abs(a.value[0] / b.value[0] - 100.0) < 1e-6


# ---------------------------------------------------------------------------
# image quality metrics

def test_psnr_anchors():
    ref = np.array([[4.0, 0.0], [0.0, 0.0]])
    assert psnr(ref, ref) == 99.0
    img = ref.copy()
    img[0, 0] = 2.0   # mse = 1, peak 4 -> 20 log10(4)
    assert abs(psnr(img, ref) - 20 * np.log10(4.0)) < 1e-12
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 3)), ref)


def test_ssim_anchors():
    rng = np.random.default_rng(1)
    ref = np.abs(rng.standard_normal((9, 9))) + 0.1
    assert abs(ssim(ref, ref) - 1.0) < 1e-12
    assert ssim(ref * 0.2 + 0.5, ref) < 0.999
    with pytest.raises(ValueError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))


def test_metrics_match_brute_force_twins():
    rng = np.random.default_rng(2)
    for _ in range(20):
        ref = np.abs(rng.standard_normal((12, 10))) + 0.05
        img = np.abs(ref + 0.3 * rng.standard_normal((12, 10)))
        assert abs(psnr(img, ref) - brute_psnr(img, ref)) < 1e-10
        assert abs(ssim(img, ref) - brute_ssim(img, ref)) < 1e-10


# ---------------------------------------------------------------------------
# training

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(scenario="fancy")
    with pytest.raises(ValueError):
        TrainConfig(budget=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(design_lr=-1.0)


def test_train_input_validation(tiny_data):
    with pytest.raises(ValueError):
        train(tiny_data, TrainConfig(budget=9, use_model=False, epochs=1), 0)
    empty = make_dataset(tiny_cfg(), 0, 1, 0.1, master_seed=1)
    with pytest.raises(ValueError):
        train(empty, TrainConfig(budget=2, use_model=False, epochs=1), 0)
    with pytest.raises(ValueError):
        train(tiny_data, TrainConfig(budget=2, use_model=False, epochs=1), 0,
              fixed_design_values=[0, 4])


def test_joint_training_moves_both_parameter_sets(tiny_data):
    tcfg = TrainConfig(scenario="discrete", budget=3, epochs=25, batch_size=5,
                       learning_rate=0.01, use_model=True, model_depth=1,
                       model_channels=2)
    result = train(tiny_data, tcfg, master_seed=7)
    assert result.model is not None and result.design is not None
    assert np.linalg.norm(result.design.log_alpha.value) > 0
    moved = [n for n in result.model.param_order
             if np.linalg.norm(result.model.params[n].value) > 0
             and n.endswith(".b")]
    assert moved   # biases start at zero, so any norm means an update
    # the loss must come down substantially while the net learns the task
    ep = result.history["epoch_loss"]
    assert ep[-1] < 0.95 * ep[0]
    assert len(ep) == 25
    assert len(result.history["design_path"]) == 25
    assert sorted(result.history["final_design"]) == \
        result.history["final_design"]
    assert len(result.design_values) == 3
    gap = result.history["soft_hard_gap"]
    assert set(gap) == {"soft", "hard", "gap"}
    assert np.isfinite([gap["soft"], gap["hard"]]).all()


def test_training_is_deterministic(tiny_data):
    tcfg = TrainConfig(scenario="continuous", budget=2, epochs=6,
                       batch_size=5, learning_rate=0.05, use_model=False)
    a = train(tiny_data, tcfg, master_seed=11)
    b = train(tiny_data, tcfg, master_seed=11)
    c = train(tiny_data, tcfg, master_seed=12)
    assert a.history["epoch_loss"] == b.history["epoch_loss"]
    assert np.array_equal(a.design_values, b.design_values)
    assert a.history["epoch_loss"] != c.history["epoch_loss"]


def test_continuous_coordinates_stay_in_bounds(tiny_data):
    tcfg = TrainConfig(scenario="continuous", budget=3, epochs=10,
                       batch_size=10, learning_rate=0.3, use_model=False)
    result = train(tiny_data, tcfg, master_seed=3)
    for snap in result.history["design_path"]:
        assert min(snap) >= 0.0 and max(snap) <= 7.0
    assert np.all(np.diff(result.design_values) >= 0)


def test_fixed_design_trains_model_only(tiny_data):
    tcfg = TrainConfig(scenario="discrete", budget=3, epochs=8, batch_size=5,
                       learning_rate=0.01, use_model=True, model_depth=1,
                       model_channels=2)
    result = train(tiny_data, tcfg, master_seed=5,
                   fixed_design_values=[1, 4, 6])
    assert result.design is None
    assert result.design_values.tolist() == [1, 4, 6]
    ep = result.history["epoch_loss"]
    assert ep[-1] < ep[0]


def test_divergence_is_reported(tiny_data):
    # reference maps near the float ceiling overflow the loss; training must
    # fail loudly and name the first op whose value went non-finite
    from sal.dataset import Dataset, DatasetRecord
    doctored = Dataset(
        tiny_data.cfg,
        [DatasetRecord(r.scene, r.cube, r.reference_map * 1e160)
         for r in tiny_data.train_records],
        tiny_data.test_records)
    tcfg = TrainConfig(scenario="continuous", budget=3, epochs=1,
                       batch_size=5, learning_rate=0.01, use_model=False)
    with np.errstate(all="ignore"):
        with pytest.raises(RuntimeError, match="non-finite"):
            train(doctored, tcfg, master_seed=1)


def test_progress_callback_runs_per_epoch(tiny_data):
    seen = []
    tcfg = TrainConfig(scenario="continuous", budget=2, epochs=4,
                       batch_size=10, learning_rate=0.01, use_model=False)
    train(tiny_data, tcfg, master_seed=2,
          progress=lambda e, l: seen.append((e, l)))
    assert [e for e, _ in seen] == [0, 1, 2, 3]


# ---------------------------------------------------------------------------
# evaluation and baselines

def test_reconstruct_maps_matches_manual_path(tiny_data):
    cfg = tiny_data.cfg
    recs = tiny_data.test_records[:3]
    outs = reconstruct_maps(recs, "discrete", [0, 3, 7], cfg)
    assert outs.shape == (3, 8, 8)
    mat, pos = apply_discrete(recs[1].cube, indices=[0, 3, 7])
    want = beamform(mat, build_steering(cfg, pos)).value
    assert np.max(np.abs(outs[1] - want)) < 1e-12


def test_evaluate_design_reports_per_record_scores(tiny_data):
    report = evaluate_design(tiny_data.test_records, "discrete",
                             [0, 2, 5], tiny_data.cfg)
    assert report.psnr.shape == (5,) and report.ssim.shape == (5,)
    assert np.isfinite(report.psnr).all() and np.isfinite(report.ssim).all()
    assert report.psnr_ci >= 0 and report.ssim_ci >= 0
    assert abs(report.psnr_mean - report.psnr.mean()) < 1e-12


def test_random_and_uniform_design_values():
    rng = np.random.default_rng(8)
    for _ in range(20):
        d = random_design_values("discrete", 20, 5, rng)
        assert len(set(d.tolist())) == 5
        assert d.min() >= 0 and d.max() < 20
        assert np.all(np.diff(d) > 0)
        c = random_design_values("continuous", 20, 5, rng)
        assert c.min() >= 0 and c.max() <= 19 and np.all(np.diff(c) >= 0)
    assert uniform_design_values("continuous", 20, 2).tolist() == [0.0, 19.0]
    assert uniform_design_values("continuous", 20, 5).tolist() == \
        [0.0, 4.75, 9.5, 14.25, 19.0]
    assert uniform_design_values("discrete", 20, 5).tolist() == \
        [0, 5, 10, 14, 19]
    assert uniform_design_values("discrete", 8, 8).tolist() == list(range(8))


def test_validation_split_is_last_tenth(tiny_data):
    val = validation_records(tiny_data)
    assert len(val) == 2
    assert val[0] is tiny_data.train_records[-2]
    assert val[1] is tiny_data.train_records[-1]


def test_baseline_random_best_picks_highest_scoring_candidate(tiny_data):
    cfg = tiny_data.cfg
    tcfg = TrainConfig(scenario="discrete", budget=3, use_model=False)
    values, model = baseline_random_best(tiny_data, tcfg, k=4, master_seed=21)
    assert model is None
    val = validation_records(tiny_data)
    scores = []
    for j in range(4):
        cand = random_design_values("discrete", cfg.n_rx, 3,
                                    _stream(21, BASELINE_STREAM, j))
        scores.append((evaluate_design(val, "discrete", cand, cfg).psnr_mean,
                       cand))
    best = max(scores, key=lambda t: t[0])[1]
    assert np.array_equal(values, best)
    with pytest.raises(ValueError):
        baseline_random_best(tiny_data, tcfg, k=0, master_seed=21)


def test_baseline_select_on_test_can_change_winner(tiny_data):
    tcfg = TrainConfig(scenario="continuous", budget=2, use_model=False)
    a, _ = baseline_random_best(tiny_data, tcfg, k=3, master_seed=33)
    b, _ = baseline_random_best(tiny_data, tcfg, k=3, master_seed=33,
                                select_on_test=True)
    # same candidate pool either way; both winners must come from it
    pool = [random_design_values("continuous", 8, 2,
                                 _stream(33, BASELINE_STREAM, j)).tolist()
            for j in range(3)]
    assert a.tolist() in pool and b.tolist() in pool


# ---------------------------------------------------------------------------
# result files

def test_metrics_csv_exact_bytes(tmp_path):
    r1 = EvalReport(np.array([30.0, 32.0]), np.array([0.5, 0.5]))
    r2 = EvalReport(np.array([28.25]), np.array([0.75]))
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [("discrete", "learned+recon", 10, 7, r1),
                             ("continuous", "uniform", 5, 7, r2)])
    ci = float(1.96 * np.std([30.0, 32.0], ddof=1) / np.sqrt(2))
    want = (CSV_HEADER + "\n"
            f"discrete,learned+recon,10,7,31.0,{ci!r},0.5,0.0\n"
            "continuous,uniform,5,7,28.25,0.0,0.75,0.0\n")
    assert path.read_text() == want


def test_history_file_contents(tiny_data, tmp_path):
    tcfg = TrainConfig(scenario="discrete", budget=2, epochs=3, batch_size=10,
                       learning_rate=0.02, use_model=False)
    result = train(tiny_data, tcfg, master_seed=9)
    path = tmp_path / "history.json"
    write_history(path, result)
    payload = json.loads(path.read_text())
    assert payload["scenario"] == "discrete"
    assert payload["budget"] == 2 and payload["seed"] == 9
    assert len(payload["epoch_loss"]) == 3
    assert payload["final_design"] == result.history["final_design"]
    assert payload["config"]["learning_rate"] == 0.02
    assert payload["config"]["use_model"] is False
