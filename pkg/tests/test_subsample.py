import numpy as np
import pytest
from scipy import stats

from sal import autodiff as ad
from sal.simulate import BasebandCube
from sal.subsample import (ContinuousDesign, DiscreteDesign, apply_continuous,
                           apply_discrete, beta_of_alpha,
                           gaussian_copula_uniforms, infer_discrete_selection,
                           read_design, relaxed_bernoulli, relaxed_logistic,
                           relaxed_topk, uniform_coords, write_design)
from oracles import fd_grad, rel_err


def noise_cube(k, n_tx, n_rx, sigma, seed):
    rng = np.random.default_rng(seed)
    shape = (k, n_tx, n_rx, 2)
    vals = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return BasebandCube(vals * sigma / np.sqrt(2.0), sigma)


# ---------------------------------------------------------------------------
# copula uniforms

def test_copula_marginals_are_uniform():
    rng = np.random.default_rng(0)
    l_raw = np.tril(np.random.default_rng(1).standard_normal((4, 4)))
    np.fill_diagonal(l_raw, np.abs(np.diagonal(l_raw)) + 0.5)
    l = ad.constant(l_raw)
    draws = np.array([gaussian_copula_uniforms(l, rng).value
                      for _ in range(4000)])
    assert draws.min() > 0.0 and draws.max() < 1.0
    for i in range(4):
        assert stats.kstest(draws[:, i], "uniform").pvalue > 1e-3


def test_copula_correlation_follows_factor():
    # L = [[1, 0], [rho, sqrt(1-rho^2)]] gives Gaussian correlation rho and
    # Spearman rank correlation (6/pi) asin(rho/2) after the CDF transform
    rho = 0.8
    l = ad.constant(np.array([[1.0, 0.0], [rho, np.sqrt(1 - rho ** 2)]]))
    rng = np.random.default_rng(7)
    draws = np.array([gaussian_copula_uniforms(l, rng).value
                      for _ in range(20000)])
    want = 6.0 / np.pi * np.arcsin(rho / 2.0)
    got = stats.spearmanr(draws[:, 0], draws[:, 1]).statistic
    assert abs(got - want) < 0.03


def test_copula_identical_rows_give_identical_uniforms():
    l = ad.constant(np.array([[1.0, 0.0, 0.0],
                              [1.0, 0.0, 0.0],
                              [0.3, 0.1, 2.0]]))
    rng = np.random.default_rng(3)
    for _ in range(20):
        u = gaussian_copula_uniforms(l, rng).value
        assert u[0] == u[1]


def test_copula_rejects_zero_row_and_nonsquare():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        gaussian_copula_uniforms(ad.constant(np.diag([1.0, 0.0])), rng)
    with pytest.raises(ad.ShapeError):
        gaussian_copula_uniforms(ad.constant(np.ones((2, 3))), rng)


def test_copula_gradient_wrt_factor():
    l0 = np.tril(np.random.default_rng(5).standard_normal((3, 3)))
    np.fill_diagonal(l0, [1.2, 0.8, 1.5])
    w = np.random.default_rng(6).standard_normal(3)

    def run(lv, learn):
        node = ad.leaf(lv, learnable=learn)
        u = gaussian_copula_uniforms(node, np.random.default_rng(99))
        return ad.tsum(ad.mul(u, ad.constant(w))), node

    root, leaf = run(l0, True)
    got = ad.backward(root)[leaf]
    want = fd_grad(lambda lv: float(run(lv, False)[0].value), l0, h=1e-6)
    assert rel_err(got, want) < 1e-6


# ---------------------------------------------------------------------------
# logistic relaxation

def test_logistic_scores_at_half_are_log_alpha():
    alpha = ad.constant(np.array([0.25, 1.0, 4.0]))
    u = ad.constant(np.full(3, 0.5))
    l = relaxed_logistic(alpha, u).value
    assert np.max(np.abs(l - np.log([0.25, 1.0, 4.0]))) < 1e-12


def test_logistic_boundary_uniforms_stay_finite():
    alpha = ad.constant(np.ones(2))
    l = relaxed_logistic(alpha, ad.constant(np.array([0.0, 1.0]))).value
    assert np.all(np.isfinite(l))
    assert l[0] < -20 and l[1] > 20


def test_relaxed_keep_probability_matches_alpha_over_one_plus_alpha():
    # P(sigmoid(l / lambda) > 1/2) = P(l > 0) = alpha / (1 + alpha)
    rng = np.random.default_rng(11)
    n = 10000
    for a in (0.25, 1.0, 4.0):
        alpha = ad.constant(np.full(n, a))
        u = ad.constant(rng.uniform(0.0, 1.0, n))
        b = relaxed_bernoulli(relaxed_logistic(alpha, u)).value
        assert abs(np.mean(b > 0.5) - a / (1 + a)) < 0.02


# ---------------------------------------------------------------------------
# relaxed top-k

def test_topk_mass_is_conserved():
    # nonneg entries totalling the budget, at any temperature; per-entry <= 1
    # needs score gaps well above the temperature (the saturation test below),
    # since a near-tie legitimately splits claimed units across both scores
    rng = np.random.default_rng(13)
    for _ in range(20):
        l = ad.constant(rng.standard_normal(8))
        for n in (1, 3, 8):
            for lam in (0.7, 1e-3):
                k = relaxed_topk(l, n, temperature=lam).value
                assert abs(k.sum() - n) < 1e-9
                assert np.all(k > -1e-12)


def test_topk_saturates_to_exact_indicator():
    l = ad.constant(np.array([3.0, -1.0, 5.0, 0.5, -2.0]))
    k = relaxed_topk(l, 2, temperature=1e-3).value
    want = np.array([1.0, 0.0, 1.0, 0.0, 0.0])
    assert np.max(np.abs(k - want)) < 1e-6


def test_topk_equal_scores_spread_mass_evenly():
    k = relaxed_topk(ad.constant(np.zeros(6)), 3, temperature=1e-3).value
    assert np.max(np.abs(k - 0.5)) < 1e-9


def test_topk_rejects_bad_budget():
    l = ad.constant(np.zeros(4))
    with pytest.raises(ValueError):
        relaxed_topk(l, 0)
    with pytest.raises(ValueError):
        relaxed_topk(l, 5)


def test_topk_gradient():
    l0 = np.random.default_rng(15).standard_normal(6)
    w = np.random.default_rng(16).standard_normal(6)

    def run(lv, learn):
        node = ad.leaf(lv, learnable=learn)
        k = relaxed_topk(node, 3, temperature=0.5)
        return ad.tsum(ad.mul(k, ad.constant(w))), node

    root, leaf = run(l0, True)
    got = ad.backward(root)[leaf]
    want = fd_grad(lambda lv: float(run(lv, False)[0].value), l0, h=1e-6)
    assert rel_err(got, want) < 1e-6


# ---------------------------------------------------------------------------
# discrete design

def test_discrete_design_init_and_projection():
    d = DiscreteDesign.init(6, 3)
    assert np.array_equal(d.log_alpha.value, np.zeros(6))
    assert np.array_equal(d.l_factor.value, np.eye(6))
    assert d.log_alpha.learnable and d.l_factor.learnable
    d.l_factor.value = d.l_factor.value * 1e-9
    d.l_factor.value[np.diag_indices(6)] = [1e-9, -1e-9, 0.0, 1.0, -1.0, 2.0]
    d.project()
    diag = np.diagonal(d.l_factor.value)
    assert np.array_equal(diag, [1e-6, -1e-6, 1e-6, 1.0, -1.0, 2.0])
    with pytest.raises(ValueError):
        DiscreteDesign.init(6, 0)
    with pytest.raises(ValueError):
        DiscreteDesign.init(6, 7)


def test_masked_factor_ignores_upper_triangle():
    d = DiscreteDesign.init(4, 2)
    d.l_factor.value = np.arange(16.0).reshape(4, 4) + 1.0
    m = d.masked_factor().value
    assert np.array_equal(m, np.tril(d.l_factor.value))


def test_sample_weights_contract():
    d = DiscreteDesign.init(8, 3)
    d.log_alpha.value = np.linspace(-0.5, 0.5, 8)
    a = d.sample_weights(np.random.default_rng(42)).value
    b = d.sample_weights(np.random.default_rng(42)).value
    c = d.sample_weights(np.random.default_rng(43)).value
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()
    assert abs(a.sum() - 3) < 1e-9
    assert a.min() > -1e-9 and a.max() < 1 + 1e-9


def test_inference_picks_top_alpha_with_stable_ties():
    d = DiscreteDesign.init(4, 2)
    d.log_alpha.value = np.log([1.0, 2.0, 2.0, 0.5])
    assert infer_discrete_selection(d).tolist() == [1, 2]
    d.log_alpha.value = np.zeros(4)
    assert infer_discrete_selection(d).tolist() == [0, 1]
    d.log_alpha.value = np.log([0.5, 1.0, 3.0, 2.0])
    assert infer_discrete_selection(d).tolist() == [2, 3]


# ---------------------------------------------------------------------------
# applying a discrete selection

def test_apply_discrete_soft_identity_weights():
    cube = noise_cube(5, 2, 6, 1.0, 0)
    out = apply_discrete(cube, psi=ad.constant(np.ones(6)))
    assert out.value.tobytes() == cube.temporal_average().tobytes()


def test_apply_discrete_one_hot_keeps_one_receiver():
    cube = noise_cube(5, 2, 6, 1.0, 1)
    psi = np.zeros(6)
    psi[4] = 1.0
    out = apply_discrete(cube, psi=ad.constant(psi)).value
    avg = cube.temporal_average()
    for t in range(2):
        for r in range(6):
            col = out[:, t * 6 + r]
            if r == 4:
                assert np.array_equal(col, avg[:, t * 6 + r])
            else:
                assert not col.any()


def test_apply_discrete_hard_column_subset():
    cube = noise_cube(4, 3, 5, 1.0, 2)
    idx = [1, 4]
    mat, pos = apply_discrete(cube, indices=idx)
    avg = cube.temporal_average()
    want_cols = [1, 4, 6, 9, 11, 14]
    assert np.array_equal(mat, avg[:, want_cols])
    assert pos.tolist() == [float(c) for c in want_cols]
    with pytest.raises(ValueError):
        apply_discrete(cube, indices=[5])
    with pytest.raises(ValueError):
        apply_discrete(cube, indices=[])
    with pytest.raises(ValueError):
        apply_discrete(cube)
    with pytest.raises(ValueError):
        apply_discrete(cube, psi=ad.constant(np.ones(5)), indices=[0])


def test_apply_discrete_soft_full_equals_hard_full():
    cube = noise_cube(6, 2, 4, 0.7, 3)
    soft = apply_discrete(cube, psi=ad.constant(np.ones(4))).value
    hard, _ = apply_discrete(cube, indices=[0, 1, 2, 3])
    assert soft.tobytes() == hard.tobytes()


def test_apply_discrete_gradient_wrt_weights():
    cube = noise_cube(4, 1, 5, 1.0, 4)
    p0 = np.random.default_rng(5).uniform(0.2, 0.9, 5)

    def run(pv, learn):
        psi = ad.leaf(pv, learnable=learn)
        out = apply_discrete(cube, psi=psi)
        mag = ad.magnitude(out)
        return ad.tsum(ad.mul(mag, mag)), psi

    root, leaf = run(p0, True)
    got = ad.backward(root)[leaf]
    want = fd_grad(lambda pv: float(run(pv, False)[0].value), p0, h=1e-6)
    assert rel_err(got, want) < 1e-6


# ---------------------------------------------------------------------------
# acquisition blend weight

def test_beta_anchors_and_symmetry():
    assert abs(beta_of_alpha(0.0) - 0.5) < 1e-12
    assert abs(beta_of_alpha(1.0) - 0.5) < 1e-12
    assert abs(beta_of_alpha(0.5) - 1.0) < 1e-12
    a = np.linspace(0.0, 1.0, 101)
    assert np.max(np.abs(beta_of_alpha(a) - beta_of_alpha(1.0 - a))) < 1e-12


def test_beta_flattens_blended_noise_power():
    # ((1-a)^2 + a^2) ((1-b)^2 + b^2) == 1/2 for every fractional offset
    a = np.linspace(0.0, 1.0, 101)
    b = beta_of_alpha(a)
    power = (((1 - a) ** 2 + a ** 2) * ((1 - b) ** 2 + b ** 2))
    assert np.max(np.abs(power - 0.5)) < 1e-12


# ---------------------------------------------------------------------------
# continuous placement

def test_integer_coordinate_reduces_to_temporal_average():
    cube = noise_cube(5, 2, 6, 1.0, 8)
    s_low, pos = apply_continuous(cube, np.array([3.0]))
    avg = cube.temporal_average()
    want = avg[:, [3, 9]]    # receiver 3 under both transmitters
    assert np.max(np.abs(s_low.value - want)) < 1e-12
    assert np.allclose(pos.value, [3.0, 9.0])
    # the span edge is legal and uses the last receiver pair
    s_edge, pos_edge = apply_continuous(cube, np.array([5.0]))
    assert np.max(np.abs(s_edge.value - avg[:, [5, 11]])) < 1e-12
    assert np.allclose(pos_edge.value, [5.0, 11.0])


def test_half_coordinate_averages_second_acquisition():
    cube = noise_cube(5, 1, 6, 1.0, 9)
    s_low, _ = apply_continuous(cube, np.array([3.5]))
    m = cube.as_matrices()
    want = 0.5 * (m[:, 3, 1] + m[:, 4, 1])
    assert np.max(np.abs(s_low.value[:, 0] - want)) < 1e-12


def test_noiseless_emulation_is_linear_interpolation():
    rng = np.random.default_rng(10)
    sig = rng.standard_normal((7, 1, 6)) + 1j * rng.standard_normal((7, 1, 6))
    vals = np.stack([sig, sig], axis=-1)
    cube = BasebandCube(vals, 0.0)
    coords = np.array([0.3, 2.75, 4.0])
    s_low, pos = apply_continuous(cube, coords)
    for j, x in enumerate(coords):
        i, a = int(np.floor(min(x, 4))), x - int(np.floor(min(x, 4)))
        want = (1 - a) * sig[:, 0, i] + a * sig[:, 0, i + 1]
        assert np.max(np.abs(s_low.value[:, j] - want)) < 1e-12
    assert np.allclose(pos.value, coords)


def test_emulated_noise_power_is_flat_across_offsets():
    sigma = 1.0
    cube = noise_cube(5000, 1, 4, sigma, 11)
    coords = np.array([0.0, 0.25, 0.5, 2.6])
    s_low, _ = apply_continuous(cube, coords)
    power = np.mean(np.abs(s_low.value) ** 2, axis=0)
    assert np.max(np.abs(power / (0.5 * sigma ** 2) - 1.0)) < 0.07


def test_continuous_out_of_range_rejected():
    cube = noise_cube(3, 1, 4, 1.0, 12)
    with pytest.raises(ValueError):
        apply_continuous(cube, np.array([-0.1]))
    with pytest.raises(ValueError):
        apply_continuous(cube, np.array([3.01]))


def test_continuous_gradient_wrt_coordinates():
    cube = noise_cube(6, 2, 6, 1.0, 13)
    c0 = np.array([0.3, 2.2, 3.8])

    def run(cv, learn):
        coords = ad.leaf(cv, learnable=learn)
        s_low, _ = apply_continuous(cube, coords)
        mag = ad.magnitude(s_low)
        return ad.tsum(ad.mul(mag, mag)), coords

    root, leaf = run(c0, True)
    got = ad.backward(root)[leaf]
    want = fd_grad(lambda cv: float(run(cv, False)[0].value), c0, h=1e-6)
    assert rel_err(got, want) < 1e-5


def test_continuous_design_init_and_projection():
    d = ContinuousDesign.init(20, 5)
    assert np.allclose(d.coords.value, [0.0, 4.75, 9.5, 14.25, 19.0])
    assert d.budget == 5 and d.n_rx == 20
    d.coords.value = np.array([-3.0, 2.0, 9.5, 25.0, 19.0])
    d.project()
    assert np.array_equal(d.coords.value, [0.0, 2.0, 9.5, 19.0, 19.0])
    assert uniform_coords(20, 1).tolist() == [9.5]
    assert uniform_coords(5, 2).tolist() == [0.0, 4.0]
    with pytest.raises(ValueError):
        ContinuousDesign.init(4, 5)


# ---------------------------------------------------------------------------
# design files

def test_design_file_round_trip(tmp_path):
    p = tmp_path / "d.design"
    write_design(p, "discrete", 3, 20, [7, 2, 19])
    meta, vals = read_design(p)
    assert meta == {"budget": 3, "n_rx": 20, "scenario": "discrete"}
    assert vals.tolist() == [2, 7, 19] and vals.dtype.kind == "i"

    q = tmp_path / "c.design"
    coords = [0.125, 17.30000000000001, 9.0]
    write_design(q, "continuous", 3, 20, coords)
    meta, vals = read_design(q)
    assert meta["scenario"] == "continuous"
    assert vals.tolist() == sorted(coords)   # repr() round-trips exactly

    write_design(p, "discrete", 3, 20, [19, 7, 2])
    first = p.read_bytes()
    write_design(p, "discrete", 3, 20, [2, 19, 7])
    assert p.read_bytes() == first           # order-insensitive, byte-stable


def test_design_file_validation(tmp_path):
    p = tmp_path / "bad.design"
    with pytest.raises(ValueError):
        write_design(p, "mystery", 2, 8, [0, 1])
    p.write_text('{"budget": 2, "n_rx": 8, "scenario": "discrete"}\n3\n')
    with pytest.raises(ValueError):
        read_design(p)
    p.write_text('{"n_rx": 8, "scenario": "discrete"}\n3\n4\n')
    with pytest.raises(ValueError):
        read_design(p)
    p.write_text("")
    with pytest.raises(ValueError):
        read_design(p)
