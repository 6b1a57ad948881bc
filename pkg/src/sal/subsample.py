"""Learnable receive-array sub-sampling: which antennas, or where.

Two designs, both trained end to end through beamforming:

* Discrete selection: keep ``budget`` of the n_rx physical receivers. Each
  receiver has a positive score alpha (stored as log alpha) and the selection
  is relaxed for gradients: correlated uniforms from a Gaussian copula (lower-
  triangular factor L, also learned) are pushed through a logistic perturbation
  l_i = log(alpha_i) + log(U_i) - log(1 - U_i), and a differentiable top-k over
  l (successive masked softmaxes at temperature lambda) yields soft weights
  psi in [0, 1]^n_rx summing to the budget. At inference the top-``budget``
  receivers by alpha are kept outright.

* Continuous placement: ``budget`` emulated receivers at real coordinates in
  [0, n_rx - 1] (inter-antenna-pitch units). An emulated channel at i + a
  blends the recorded channels of receivers i and i+1 across the two
  acquisitions with bilinear weights (a, beta(a)), where

      beta(a) = 1/2 * (1 + sqrt(-1 + 1 / (2 a^2 - 2 a + 1)))

  is chosen so the blended noise power is 0.5 sigma^2 for every fractional
  offset: the same floor the discrete path gets from its plain two-acquisition
  average. Gradients flow through both the offset and beta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOGISTIC_TEMPERATURE = 1e-3   # relaxation temperature lambda
UNIFORM_CLIP = 1e-12          # clamp for U before the logit
MIN_COPULA_DIAG = 1e-6        # |L_ii| kept at least this large


# ---------------------------------------------------------------------------
# discrete selection

def gaussian_copula_uniforms(l_factor: ad.Node, rng: np.random.Generator) -> ad.Node:
    """Correlated uniforms via a Gaussian copula, pathwise-differentiable.

    Draws eps ~ N(0, I), forms g = L @ eps and returns U_i = Phi(g_i / s_i)
    with s_i the row norm of L (so each marginal is exactly uniform while L
    shapes the dependence). Gradients flow into L through both g and s.
    """
    n = l_factor.value.shape[0]
    if l_factor.value.shape != (n, n):
        raise ad.ShapeError(f"gaussian_copula_uniforms: square factor "
                            f"expected, got {l_factor.value.shape}")
    row_power = ad.tsum(ad.mul(l_factor, l_factor), axis=1)
    if np.any(row_power.value <= 0):
        raise ValueError("gaussian_copula_uniforms: zero row in the factor "
                         "(some sigma_i = 0)")
    eps = ad.constant(rng.standard_normal(n))
    g = ad.matmul(l_factor, eps)
    return ad.normal_cdf(ad.div(g, ad.sqrt(row_power)))


def relaxed_logistic(alpha: ad.Node, uniforms: ad.Node) -> ad.Node:
    """Logistic perturbation of log-scores: log(alpha) + logit(U).

    U is clamped to [1e-12, 1 - 1e-12] first, so boundary draws never produce
    infinities.
    """
    u = ad.clamp(uniforms, UNIFORM_CLIP, 1.0 - UNIFORM_CLIP)
    return ad.add(ad.log(alpha), ad.sub(ad.log(u), ad.log(ad.sub(1.0, u))))


def relaxed_bernoulli(l: ad.Node, temperature: float = LOGISTIC_TEMPERATURE) -> ad.Node:
    """Per-antenna relaxed keep-probability, sigmoid(l / lambda)."""
    return ad.sigmoid(ad.div(l, float(temperature)))


def relaxed_topk(l: ad.Node, n: int, temperature: float = LOGISTIC_TEMPERATURE) -> ad.Node:
    """Differentiable top-n as n successive masked softmaxes.

    Each round claims one unit of mass: a softmax of the running scores at
    temperature lambda, after subtracting (in log space) the mass already
    claimed. The result sums to n and saturates to the exact top-n indicator
    as lambda -> 0.
    """
    if not 1 <= n <= l.value.shape[0]:
        raise ValueError(f"relaxed_topk: n={n} out of range for "
                         f"{l.value.shape[0]} scores")
    tiny = float(np.finfo(np.float64).tiny)
    scores = l
    khot = None
    onehot = None
    for _ in range(n):
        if onehot is not None:
            scores = ad.add(scores, ad.log(ad.clamp_min(ad.sub(1.0, onehot),
                                                        tiny)))
        onehot = ad.softmax(ad.div(scores, float(temperature)), axis=0)
        khot = onehot if khot is None else ad.add(khot, onehot)
    return khot


@dataclass
class DiscreteDesign:
    """Learnable receiver-subset design (scores + copula factor)."""

    log_alpha: ad.Node
    l_factor: ad.Node
    budget: int
    temperature: float = LOGISTIC_TEMPERATURE

    @classmethod
    def init(cls, n_rx: int, budget: int,
             temperature: float = LOGISTIC_TEMPERATURE) -> "DiscreteDesign":
        """Indifferent start: alpha = 1 everywhere, identity copula factor."""
        if not 1 <= budget <= n_rx:
            raise ValueError(f"DiscreteDesign: budget {budget} out of range "
                             f"for {n_rx} receivers")
        return cls(log_alpha=ad.param(np.zeros(n_rx), name="design.log_alpha"),
                   l_factor=ad.param(np.eye(n_rx), name="design.l_factor"),
                   budget=budget, temperature=temperature)

    @property
    def n_rx(self) -> int:
        return self.log_alpha.value.shape[0]

    @property
    def params(self) -> list:
        return [self.log_alpha, self.l_factor]

    def masked_factor(self) -> ad.Node:
        """Lower-triangular view of the stored factor (upper entries inert)."""
        mask = np.tril(np.ones((self.n_rx, self.n_rx)))
        return ad.mul(self.l_factor, mask)

    def sample_weights(self, rng: np.random.Generator) -> ad.Node:
        """One soft selection psi in [0,1]^n_rx, sum(psi) = budget."""
        u = gaussian_copula_uniforms(self.masked_factor(), rng)
        l = relaxed_logistic(ad.exp(self.log_alpha), u)
        return relaxed_topk(l, self.budget, self.temperature)

    def project(self):
        """Post-step projection: keep the factor diagonal away from zero."""
        v = self.l_factor.value.copy()
        d = np.diagonal(v).copy()
        small = np.abs(d) < MIN_COPULA_DIAG
        d[small] = np.where(d[small] < 0, -MIN_COPULA_DIAG, MIN_COPULA_DIAG)
        np.fill_diagonal(v, d)
        self.l_factor.value = v


def infer_discrete_selection(design: DiscreteDesign) -> np.ndarray:
    """Hard selection: indices of the ``budget`` largest alpha, ties broken
    toward the lower index; returned in ascending order."""
    alpha = design.log_alpha.value
    order = np.argsort(-alpha, kind="stable")
    return np.sort(order[:design.budget])


def apply_discrete(cube, psi=None, indices=None):
    """Sub-sample a measurement by receiver.

    Soft mode (psi given): returns a Node (n_range, n_tx * n_rx) where the
    temporally averaged cube has every column of receiver r scaled by psi_r.
    Hard mode (indices given): returns the plain (n_range, n_tx * len(idx))
    array of the kept columns plus their virtual positions.
    """
    if (psi is None) == (indices is None):
        raise ValueError("apply_discrete: pass exactly one of psi / indices")
    n_rx = cube.values.shape[2]
    sbar = cube.temporal_average()
    if psi is not None:
        p = np.arange(sbar.shape[1])
        weights = ad.gather(psi, p % n_rx, axis=0)
        return ad.mul(ad.constant(sbar), weights)
    idx = np.asarray(indices, int)
    if idx.size == 0 or np.any(idx < 0) or np.any(idx >= n_rx):
        raise ValueError(f"apply_discrete: indices out of range for "
                         f"{n_rx} receivers")
    n_tx = cube.values.shape[1]
    cols = (np.arange(n_tx)[:, None] * n_rx + idx[None, :]).reshape(-1)
    return np.ascontiguousarray(sbar[:, cols]), cols.astype(float)


# ---------------------------------------------------------------------------
# continuous placement

def beta_of_alpha(a):
    """Acquisition blend weight giving a flat 0.5 sigma^2 noise floor."""
    a = np.asarray(a, float)
    v = 2.0 * a * a - 2.0 * a + 1.0
    return 0.5 * (1.0 + np.sqrt(np.maximum(1.0 / v - 1.0, 0.0)))


def _beta_node(a: ad.Node) -> ad.Node:
    """beta(a) as graph ops (same formula as beta_of_alpha)."""
    v = ad.add(ad.sub(ad.mul(ad.mul(a, a), 2.0), ad.mul(a, 2.0)), 1.0)
    rad = ad.clamp_min(ad.sub(ad.div(1.0, v), 1.0), 0.0)
    return ad.mul(ad.add(ad.sqrt(rad), 1.0), 0.5)


@dataclass
class ContinuousDesign:
    """Learnable emulated-receiver coordinates, in inter-antenna-pitch units."""

    coords: ad.Node
    n_rx: int

    @classmethod
    def init(cls, n_rx: int, budget: int) -> "ContinuousDesign":
        """Evenly spread start over [0, n_rx - 1] inclusive."""
        if not 1 <= budget <= n_rx:
            raise ValueError(f"ContinuousDesign: budget {budget} out of range "
                             f"for {n_rx} receivers")
        start = uniform_coords(n_rx, budget)
        return cls(coords=ad.param(start, name="design.coords"), n_rx=n_rx)

    @property
    def budget(self) -> int:
        return self.coords.value.shape[0]

    @property
    def params(self) -> list:
        return [self.coords]

    def project(self):
        """Post-step projection: clamp coordinates into [0, n_rx - 1]."""
        self.coords.value = np.clip(self.coords.value, 0.0, self.n_rx - 1.0)


def uniform_coords(n_rx: int, budget: int) -> np.ndarray:
    """Evenly spaced coordinates over [0, n_rx - 1], endpoints included."""
    if budget == 1:
        return np.array([(n_rx - 1) / 2.0])
    return np.linspace(0.0, n_rx - 1.0, budget)


def apply_continuous(cube, coords) -> tuple:
    """Emulate receivers at fractional coordinates from a recorded cube.

    For each coordinate x = i + a, blends the two recorded acquisitions of
    receivers i and i+1 with weights (1-beta)(1-a), (1-beta)a, beta(1-a),
    beta*a and beta = beta_of_alpha(a). Returns (s_low, positions), both
    Nodes: s_low of shape (n_range, n_tx * budget) ordered tx-major, and the
    virtual positions tx * n_rx + x for steering. Differentiable w.r.t.
    coords; pass a constant Node for plain evaluation.
    """
    if not isinstance(coords, ad.Node):
        coords = ad.constant(coords)
    n_rx = cube.values.shape[2]
    x = coords.value
    if np.any(x < 0) or np.any(x > n_rx - 1):
        raise ValueError(f"apply_continuous: coordinates outside "
                         f"[0, {n_rx - 1}]")
    base = np.minimum(np.floor(x), n_rx - 2).astype(int)
    a = ad.sub(coords, base.astype(float))
    beta = _beta_node(a)
    one_m_a = ad.sub(1.0, a)
    one_m_b = ad.sub(1.0, beta)

    mats = cube.as_matrices()     # (K, P, 2)
    k, _, _ = mats.shape
    n_tx = cube.values.shape[1]
    grid = np.arange(n_tx)[:, None] * n_rx
    cols_lo = (grid + base[None, :]).reshape(-1)
    cols_hi = (grid + base[None, :] + 1).reshape(-1)
    s0 = ad.constant(np.ascontiguousarray(mats[:, cols_lo, 0]))
    s1 = ad.constant(np.ascontiguousarray(mats[:, cols_hi, 0]))
    t0 = ad.constant(np.ascontiguousarray(mats[:, cols_lo, 1]))
    t1 = ad.constant(np.ascontiguousarray(mats[:, cols_hi, 1]))

    def tile(w):
        # (budget,) weights -> (1, n_tx * budget) matching the column order
        return ad.reshape(ad.gather(w, np.tile(np.arange(x.size), n_tx),
                                    axis=0), (1, n_tx * x.size))

    first = ad.add(ad.mul(s0, tile(one_m_a)), ad.mul(s1, tile(a)))
    second = ad.add(ad.mul(t0, tile(one_m_a)), ad.mul(t1, tile(a)))
    s_low = ad.add(ad.mul(first, tile(one_m_b)), ad.mul(second, tile(beta)))

    tx_offsets = ad.constant(grid.astype(float))          # (n_tx, 1)
    pos = ad.reshape(ad.add(tx_offsets, ad.reshape(coords, (1, x.size))),
                     (n_tx * x.size,))
    return s_low, pos


# ---------------------------------------------------------------------------
# design files

def write_design(path, scenario: str, budget: int, n_rx: int, values):
    """Plain-text design: one JSON metadata line, then one value per line
    (integer receiver indices or real coordinates, ascending)."""
    if scenario not in ("discrete", "continuous"):
        raise ValueError(f"write_design: unknown scenario {scenario!r}")
    meta = json.dumps({"budget": int(budget), "n_rx": int(n_rx),
                       "scenario": scenario}, sort_keys=True,
                      separators=(", ", ": "))
    lines = [meta]
    vals = sorted(values)
    if scenario == "discrete":
        lines += [str(int(v)) for v in vals]
    else:
        lines += [repr(float(v)) for v in vals]
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_design(path):
    """Inverse of write_design: returns (metadata dict, value array)."""
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"read_design: {path} is empty")
    meta = json.loads(lines[0])
    for key in ("budget", "n_rx", "scenario"):
        if key not in meta:
            raise ValueError(f"read_design: metadata missing {key!r}")
    if meta["scenario"] == "discrete":
        values = np.array([int(v) for v in lines[1:]])
    else:
        values = np.array([float(v) for v in lines[1:]])
    if values.size != meta["budget"]:
        raise ValueError(f"read_design: {values.size} values but budget "
                         f"{meta['budget']}")
    return meta, values
