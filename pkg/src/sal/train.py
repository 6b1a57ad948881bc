"""Joint optimization of a sub-sampling design and the reconstruction net.

The training loss is the mean, over a minibatch of records, of the Euclidean
distance between the pipeline's output map and the record's full-array
reference map. The pipeline is: sub-sample the measurement with the current
design (one relaxed selection draw per step, shared across the minibatch, in
the discrete scenario), beamform, and optionally run the reconstruction
network. Everything sits in one graph, so a single backward pass yields
gradients for the design parameters and the network weights together; Adam
updates both, with an optional separate step size for the design.

Seeding: every stochastic ingredient (network init, selection draws, batch
order) draws from its own stream derived from the master seed, so runs are
reproducible and insensitive to refactorings that reorder consumption.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .beamform import beamform, build_steering, steering_phases_node
from .dataset import Dataset
from .simulate import ArrayConfig
from .subsample import (ContinuousDesign, DiscreteDesign, apply_continuous,
                        apply_discrete, infer_discrete_selection,
                        uniform_coords, LOGISTIC_TEMPERATURE)
from .taskmodel import ModelDescriptor, ReconstructionModel

TRAIN_STREAM = 29
BASELINE_STREAM = 31
_INIT_SUB, _DRAW_SUB, _ORDER_SUB = 0, 1, 2

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

SCENARIOS = ("discrete", "continuous")


@dataclass(frozen=True)
class TrainConfig:
    scenario: str = "discrete"
    budget: int = 10
    epochs: int = 200
    batch_size: int = 10
    learning_rate: float = 1e-3
    design_lr: float | None = None     # defaults to learning_rate
    temperature: float = LOGISTIC_TEMPERATURE
    use_model: bool = True
    model_depth: int = 3
    model_channels: int = 8
    model_kernel: int = 3

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"TrainConfig: scenario must be one of "
                             f"{SCENARIOS}, got {self.scenario!r}")
        if self.budget < 1:
            raise ValueError("TrainConfig: budget must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("TrainConfig: epochs and batch_size must be "
                             "positive")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("TrainConfig: learning_rate and temperature "
                             "must be positive")
        if self.design_lr is not None and self.design_lr <= 0:
            raise ValueError("TrainConfig: design_lr must be positive")

    def descriptor(self) -> ModelDescriptor:
        return ModelDescriptor(self.model_depth, self.model_channels,
                               self.model_kernel)


class Adam:
    """Standard Adam with bias correction; one step size per parameter group."""

    def __init__(self, groups):
        self.groups = [(node, float(lr)) for node, lr in groups]
        self.m = {id(n): np.zeros_like(n.value) for n, _ in self.groups}
        self.v = {id(n): np.zeros_like(n.value) for n, _ in self.groups}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for node, lr in self.groups:
            g = grads.get(node)
            if g is None:
                continue
            m = self.m[id(node)] = ADAM_BETA1 * self.m[id(node)] \
                + (1 - ADAM_BETA1) * g
            v = self.v[id(node)] = ADAM_BETA2 * self.v[id(node)] \
                + (1 - ADAM_BETA2) * g * g
            node.value = node.value - lr * (m / c1) / (np.sqrt(v / c2)
                                                       + ADAM_EPS)


def _stream(master_seed: int, tag: int, *sub) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        [int(master_seed), tag, *map(int, sub)]))


# ---------------------------------------------------------------------------
# batched forward passes

def batch_loss(out: ad.Node, refs: np.ndarray) -> ad.Node:
    """Mean over the batch of per-record map distances."""
    diff = ad.sub(out, ad.constant(refs))
    return ad.mean(ad.l2_norm(diff, axis=(1, 2)))


def _soft_discrete_maps(sbars: np.ndarray, psi: ad.Node, n_tx: int,
                        n_rx: int, steering) -> ad.Node:
    """(B, K, P) averaged cubes -> (B, K, Q) maps under soft weights psi."""
    cols = np.arange(sbars.shape[2]) % n_rx
    weighted = ad.mul(ad.constant(sbars), ad.gather(psi, cols))
    mass = ad.mul(ad.tsum(psi), float(n_tx))
    return beamform(weighted, steering, weight_mass=mass)


def _continuous_maps(records, coords: ad.Node, cfg: ArrayConfig) -> ad.Node:
    rows = []
    k = cfg.n_range
    m = cfg.n_tx * coords.value.size
    pos = None
    for rec in records:
        s_low, pos = apply_continuous(rec.cube, coords)
        rows.append(ad.reshape(s_low, (1, k, m)))
    h = steering_phases_node(cfg, pos)
    return beamform(ad.concat(rows, axis=0), h)


def _first_nonfinite(root: ad.Node):
    """Inputs-first walk of the graph; name of the earliest non-finite op."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    for node in order:
        if not np.all(np.isfinite(node.value)) or (
                np.iscomplexobj(node.value)
                and not np.all(np.isfinite(node.value.imag))):
            return node.op
    return None


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    config: TrainConfig
    design_values: np.ndarray          # receiver indices or coordinates
    design: object
    model: ReconstructionModel | None
    history: dict


def train(data: Dataset, tcfg: TrainConfig, master_seed: int,
          fixed_design_values=None, progress=None) -> TrainResult:
    """Fit a design (and net) to a dataset's train split.

    The returned design is the best hard design visited over the epochs,
    scored on the validation tail of the train split (see
    ``_select_design``), not necessarily the last one standing.

    With ``fixed_design_values`` the design is frozen at the given receiver
    indices / coordinates and only the network trains (used for baselines
    with reconstruction); ``use_model`` must be on in that case.
    """
    cfg = data.cfg
    if tcfg.budget > cfg.n_rx:
        raise ValueError(f"train: budget {tcfg.budget} exceeds "
                         f"{cfg.n_rx} receivers")
    if not data.train_records:
        raise ValueError("train: empty train split")
    if fixed_design_values is not None and not tcfg.use_model:
        raise ValueError("train: a fixed design with no model leaves "
                         "nothing to optimize")

    model = None
    if tcfg.use_model:
        model = ReconstructionModel(tcfg.descriptor(),
                                    _stream(master_seed, TRAIN_STREAM,
                                            _INIT_SUB))
    draw_rng = _stream(master_seed, TRAIN_STREAM, _DRAW_SUB)
    order_rng = _stream(master_seed, TRAIN_STREAM, _ORDER_SUB)

    design = None
    groups = []
    if fixed_design_values is None:
        if tcfg.scenario == "discrete":
            design = DiscreteDesign.init(cfg.n_rx, tcfg.budget,
                                         tcfg.temperature)
        else:
            design = ContinuousDesign.init(cfg.n_rx, tcfg.budget)
        dlr = tcfg.learning_rate if tcfg.design_lr is None else tcfg.design_lr
        groups += [(p, dlr) for p in design.params]
    if model is not None:
        groups += [(p, tcfg.learning_rate) for p in model.param_list]
    opt = Adam(groups)

    records = data.train_records
    refs = np.stack([r.reference_map for r in records])
    steering_full = None
    sbars = None
    fixed_mats = None
    if fixed_design_values is not None:
        fixed_mats, fixed_pos = _hard_measurements(records, tcfg.scenario,
                                                   fixed_design_values, cfg)
        steering_fixed = build_steering(cfg, fixed_pos)
    elif tcfg.scenario == "discrete":
        sbars = np.stack([r.cube.temporal_average() for r in records])
        steering_full = build_steering(cfg, np.arange(cfg.n_virtual))

    history = {"epoch_loss": [], "design_path": [], "scenario": tcfg.scenario,
               "budget": int(tcfg.budget), "n_rx": int(cfg.n_rx),
               "seed": int(master_seed)}
    n = len(records)
    for epoch in range(tcfg.epochs):
        perm = order_rng.permutation(n)
        losses = []
        for start in range(0, n, tcfg.batch_size):
            take = perm[start:start + tcfg.batch_size]
            if fixed_design_values is not None:
                z = beamform(fixed_mats[take], steering_fixed)
            elif tcfg.scenario == "discrete":
                psi = design.sample_weights(draw_rng)
                z = _soft_discrete_maps(sbars[take], psi, cfg.n_tx, cfg.n_rx,
                                        steering_full)
            else:
                z = _continuous_maps([records[i] for i in take],
                                     design.coords, cfg)
            out = model(z) if model is not None else z
            loss = batch_loss(out, refs[take])
            if not np.isfinite(loss.value):
                culprit = _first_nonfinite(loss)
                raise RuntimeError(f"training diverged at epoch {epoch}: "
                                   f"first non-finite value in op "
                                   f"'{culprit}'")
            opt.step(ad.backward(loss))
            if design is not None:
                design.project()
            losses.append(float(loss.value))
        history["epoch_loss"].append(float(np.mean(losses)))
        if design is not None:
            snap = (np.exp(design.log_alpha.value)
                    if tcfg.scenario == "discrete" else design.coords.value)
            history["design_path"].append([float(v) for v in snap])
        if progress is not None:
            progress(epoch, history["epoch_loss"][-1])

    if fixed_design_values is not None:
        values = np.asarray(fixed_design_values)
    else:
        values, picked = _select_design(history["design_path"], tcfg, data,
                                        model)
        if values is None:
            values = (infer_discrete_selection(design)
                      if tcfg.scenario == "discrete"
                      else np.sort(design.coords.value.copy()))
        else:
            history["selected_epoch"] = picked
    history["final_design"] = [float(v) for v in values] \
        if tcfg.scenario == "continuous" else [int(v) for v in values]
    if design is not None and tcfg.scenario == "discrete":
        history["soft_hard_gap"] = _soft_hard_gap(
            records, refs, design, model, cfg, steering_full, sbars,
            _stream(master_seed, TRAIN_STREAM, 3))
    return TrainResult(tcfg, values, design, model, history)


def _select_design(path, tcfg: TrainConfig, data: Dataset, model):
    """Read the optimizer out: score the hard design of every epoch on the
    validation records and keep the best scorer (earliest epoch on ties).

    A stochastic relaxation wanders; the design standing at the last epoch
    is rarely the best one visited. Scoring on held-out records mirrors how
    the best-of-k random baseline picks its winner, so the two read-outs
    stay comparable.
    """
    if not path:
        return None, None
    val = validation_records(data)
    candidates = []
    seen = set()
    for epoch, snap in enumerate(path):
        snap = np.asarray(snap)
        if tcfg.scenario == "discrete":
            order = np.argsort(-snap, kind="stable")
            vals = np.sort(order[:tcfg.budget])
        else:
            vals = np.sort(snap)
        key = tuple(vals.tolist())
        if key not in seen:
            seen.add(key)
            candidates.append((epoch, vals))
    best_vals, best_epoch, best_score = None, None, -np.inf
    for epoch, vals in candidates:
        score = evaluate_design(val, tcfg.scenario, vals, data.cfg,
                                model).psnr_mean
        if score > best_score:
            best_vals, best_epoch, best_score = vals, epoch, score
    return best_vals, best_epoch


def _soft_hard_gap(records, refs, design, model, cfg, steering_full, sbars,
                   rng) -> dict:
    """Relaxation quality probe: train-split loss under one soft draw versus
    the hard selection it is standing in for."""
    take = np.arange(min(20, len(records)))
    psi = design.sample_weights(rng)
    soft = _soft_discrete_maps(sbars[take], psi, cfg.n_tx, cfg.n_rx,
                               steering_full)
    idx = infer_discrete_selection(design)
    mats, pos = _hard_measurements([records[i] for i in take], "discrete",
                                   idx, cfg)
    hard = beamform(mats, build_steering(cfg, pos))
    if model is not None:
        soft, hard = model(soft), model(hard)
    s = float(batch_loss(soft, refs[take]).value)
    h = float(batch_loss(hard, refs[take]).value)
    return {"soft": s, "hard": h, "gap": s - h}


# ---------------------------------------------------------------------------
# hard evaluation

def _hard_measurements(records, scenario, values, cfg: ArrayConfig):
    """(B, K, M) stacked sub-sampled measurements plus element positions."""
    mats, pos = [], None
    for rec in records:
        if scenario == "discrete":
            mat, pos = apply_discrete(rec.cube, indices=values)
        else:
            s_low, pos_node = apply_continuous(rec.cube,
                                               np.asarray(values, float))
            mat, pos = s_low.value, pos_node.value
        mats.append(mat)
    return np.stack(mats), pos


def reconstruct_maps(records, scenario, values, cfg: ArrayConfig,
                     model: ReconstructionModel | None = None) -> np.ndarray:
    """Output maps of a frozen design on the given records."""
    mats, pos = _hard_measurements(records, scenario, values, cfg)
    z = beamform(mats, build_steering(cfg, pos))
    out = model(z) if model is not None else z
    return out.value


@dataclass
class EvalReport:
    psnr: np.ndarray
    ssim: np.ndarray

    @staticmethod
    def _ci(vals: np.ndarray) -> float:
        if vals.size < 2:
            return 0.0
        return float(1.96 * np.std(vals, ddof=1) / np.sqrt(vals.size))

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def psnr_ci(self) -> float:
        return self._ci(self.psnr)

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def ssim_ci(self) -> float:
        return self._ci(self.ssim)


def evaluate_design(records, scenario, values, cfg: ArrayConfig,
                    model: ReconstructionModel | None = None) -> EvalReport:
    """Image quality of a frozen design against the reference maps."""
    outs = reconstruct_maps(records, scenario, values, cfg, model)
    ps = np.array([psnr(outs[i], rec.reference_map)
                   for i, rec in enumerate(records)])
    ss = np.array([ssim(outs[i], rec.reference_map)
                   for i, rec in enumerate(records)])
    return EvalReport(ps, ss)


# ---------------------------------------------------------------------------
# image quality metrics

PSNR_CAP = 99.0
SSIM_WINDOW = 7


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio against the reference's own peak, in dB,
    capped at 99."""
    img = np.asarray(img, float)
    ref = np.asarray(ref, float)
    if img.shape != ref.shape:
        raise ValueError(f"psnr: shape mismatch {img.shape} vs {ref.shape}")
    mse = np.mean((img - ref) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(20.0 * np.log10(ref.max() / np.sqrt(mse)), PSNR_CAP))


def ssim(img: np.ndarray, ref: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over all fully valid uniform windows."""
    img = np.asarray(img, float)
    ref = np.asarray(ref, float)
    if img.shape != ref.shape:
        raise ValueError(f"ssim: shape mismatch {img.shape} vs {ref.shape}")
    if min(img.shape) < window:
        raise ValueError(f"ssim: map smaller than the {window}x{window} "
                         f"window")
    l = ref.max()
    c1, c2 = (0.01 * l) ** 2, (0.03 * l) ** 2
    wa = sliding_window_view(img, (window, window))
    wb = sliding_window_view(ref, (window, window))
    mua = wa.mean(axis=(-2, -1))
    mub = wb.mean(axis=(-2, -1))
    va = (wa ** 2).mean(axis=(-2, -1)) - mua ** 2
    vb = (wb ** 2).mean(axis=(-2, -1)) - mub ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mua * mub
    s = ((2 * mua * mub + c1) * (2 * cov + c2)
         / ((mua ** 2 + mub ** 2 + c1) * (va + vb + c2)))
    return float(s.mean())


# ---------------------------------------------------------------------------
# baselines

def random_design_values(scenario: str, n_rx: int, budget: int,
                         rng: np.random.Generator) -> np.ndarray:
    if scenario == "discrete":
        return np.sort(rng.choice(n_rx, size=budget, replace=False))
    return np.sort(rng.uniform(0.0, n_rx - 1.0, budget))


def uniform_design_values(scenario: str, n_rx: int, budget: int) -> np.ndarray:
    """Evenly spread receivers; the continuous variant is also the learned
    design's starting point."""
    coords = uniform_coords(n_rx, budget)
    if scenario == "continuous":
        return coords
    idx = np.round(coords).astype(int)
    for i in range(1, idx.size):          # de-collide after rounding
        if idx[i] <= idx[i - 1]:
            idx[i] = idx[i - 1] + 1
    if idx[-1] >= n_rx:
        raise ValueError(f"uniform_design_values: budget {budget} does not "
                         f"fit {n_rx} receivers")
    return idx


def validation_records(data: Dataset) -> list:
    """Held-out slice for model selection: the last tenth of the train split."""
    n_val = max(1, data.n_train // 10)
    return data.train_records[-n_val:]


def baseline_random_best(data: Dataset, tcfg: TrainConfig, k: int,
                         master_seed: int, select_on_test: bool = False,
                         train_model: bool = False):
    """Best of k random designs, selected by mean PSNR on held-out records.

    With ``train_model`` a fresh network is fitted to each candidate design
    before scoring (the fair comparison when the learned design also had
    one); otherwise candidates are scored on raw beamformed maps.
    """
    if k < 1:
        raise ValueError("baseline_random_best: k must be positive")
    cfg = data.cfg
    select = data.test_records if select_on_test else validation_records(data)
    best = None
    for j in range(k):
        rng = _stream(master_seed, BASELINE_STREAM, j)
        values = random_design_values(tcfg.scenario, cfg.n_rx, tcfg.budget,
                                      rng)
        model = None
        if train_model:
            result = train(data, tcfg, master_seed,
                           fixed_design_values=values)
            model = result.model
        score = evaluate_design(select, tcfg.scenario, values, cfg,
                                model).psnr_mean
        if best is None or score > best[0]:
            best = (score, values, model)
    return best[1], best[2]


# ---------------------------------------------------------------------------
# metrics files

CSV_HEADER = "scenario,variant,n_R,seed,psnr_mean,psnr_ci,ssim_mean,ssim_ci"


def write_metrics_csv(path, rows: list):
    """Rows are (scenario, variant, budget, seed, EvalReport)."""
    lines = [CSV_HEADER]
    for scenario, variant, budget, seed, report in rows:
        lines.append(",".join([scenario, variant, str(int(budget)),
                               str(int(seed)), repr(report.psnr_mean),
                               repr(report.psnr_ci), repr(report.ssim_mean),
                               repr(report.ssim_ci)]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_history(path, result: TrainResult):
    payload = dict(result.history)
    payload["config"] = {
        "scenario": result.config.scenario, "budget": result.config.budget,
        "epochs": result.config.epochs,
        "batch_size": result.config.batch_size,
        "learning_rate": result.config.learning_rate,
        "design_lr": result.config.design_lr,
        "temperature": result.config.temperature,
        "use_model": result.config.use_model,
        "model_depth": result.config.model_depth,
        "model_channels": result.config.model_channels,
        "model_kernel": result.config.model_kernel,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True)
                          + "\n")
