"""Delay-and-sum beamforming onto a range x azimuth grid.

The steering matrix holds, per (tone, virtual element, azimuth cell), the
conjugate of the simulator's aperture phase,

    H[k, m, q] = exp(+j 2 pi (f_k / f_c) (pos_m * pitch / lambda_c) sin(az_q)),

so a reflector at a grid azimuth sums coherently across elements at every
tone. Beamforming multiplies the (n_range, n_elements) measurement by H,
averages over elements, applies an inverse DFT along the tone axis (turning
tones into range bins) and takes the magnitude. All steps are autodiff ops,
so maps stay differentiable w.r.t. measurements, element weights and element
positions.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .simulate import ArrayConfig


class SteeringMatrix:
    """Phase table (n_range, n_elements, n_azimuth) for a fixed element set."""

    def __init__(self, phases: np.ndarray, positions: np.ndarray,
                 azimuth_grid: np.ndarray):
        self.phases = phases
        self.positions = np.asarray(positions, float)
        self.azimuth_grid = np.asarray(azimuth_grid, float)

    @property
    def n_elements(self) -> int:
        return self.phases.shape[1]


def _phase_slope(cfg: ArrayConfig) -> np.ndarray:
    """2 pi (f_k / f_c) (pitch / lambda_c) sin(az_q), shape (K, Q): the phase
    per unit of virtual position."""
    scale = cfg.pitch / cfg.lambda_center
    return (2.0 * np.pi * (cfg.freqs[:, None] / cfg.f_center) * scale
            * cfg.azimuth_sins[None, :])


def build_steering(cfg: ArrayConfig, positions) -> SteeringMatrix:
    """Steering matrix for elements at the given virtual positions.

    Positions are in virtual-pitch units and may be fractional (emulated
    receivers placed between physical ones). Entries are exact unit-modulus
    phasors.
    """
    pos = np.atleast_1d(np.asarray(positions, float))
    if pos.size == 0:
        raise ValueError("build_steering: empty element set")
    w = _phase_slope(cfg)                                   # (K, Q)
    phases = np.exp(1j * w[:, None, :] * pos[None, :, None])  # (K, M, Q)
    return SteeringMatrix(phases, pos, cfg.azimuth_grid)


def steering_phases_node(cfg: ArrayConfig, positions: ad.Node) -> ad.Node:
    """Differentiable steering phases for graph-valued element positions."""
    w = ad.constant(_phase_slope(cfg)[:, None, :])           # (K, 1, Q)
    pos = ad.reshape(positions, (1, positions.value.size, 1))
    return ad.phasor(ad.mul(w, pos))                         # (K, M, Q)


def beamform(s_low, steering, weight_mass=None) -> ad.Node:
    """Range x azimuth magnitude map of a measurement matrix.

    s_low: (n_range, M) or batched (B, n_range, M), array or Node.
    steering: SteeringMatrix, raw phase array, or Node of shape (K, M, Q).
    weight_mass: effective number of summed elements. Defaults to M (plain
    mean); soft element weighting passes its total weight mass here so the
    mean stays calibrated as weights move.
    """
    s = ad.constant(s_low)
    h = steering.phases if isinstance(steering, SteeringMatrix) else steering
    h = ad.constant(h)
    if s.value.shape[-1] != h.value.shape[1]:
        raise ad.ShapeError(f"beamform: element axes differ, measurement "
                            f"{s.value.shape} vs steering {h.value.shape}")
    spec = "bkm,kmq->bkq" if s.value.ndim == 3 else "km,kmq->kq"
    summed = ad.einsum2(spec, s, h)
    mass = float(h.value.shape[1]) if weight_mass is None else weight_mass
    averaged = ad.div(summed, mass)
    profile = ad.idft(averaged, axis=-2)   # tone axis -> range bins
    return ad.magnitude(profile)


def full_array_map(cube, cfg: ArrayConfig,
                   steering: SteeringMatrix | None = None) -> np.ndarray:
    """Reference map: temporally averaged cube, every virtual element."""
    if steering is None:
        steering = build_steering(cfg, np.arange(cfg.n_virtual))
    return beamform(cube.temporal_average(), steering).value


# ---------------------------------------------------------------------------
# map export

def write_map_pgm(path, values: np.ndarray):
    """16-bit binary PGM of a map after per-image max normalization."""
    v = np.asarray(values, float)
    if v.ndim != 2:
        raise ValueError(f"write_map_pgm: expected a 2-D map, got {v.shape}")
    peak = v.max()
    scaled = np.zeros_like(v) if peak <= 0 else v / peak
    pix = np.round(scaled * 65535.0).astype(">u2")  # PGM 16-bit is big-endian
    header = f"P5\n{v.shape[1]} {v.shape[0]}\n65535\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(pix.tobytes())


RAW_MAGIC = b"SALR"


def write_map_raw(path, values: np.ndarray):
    """Bit-exact raw dump: magic, u32 rows, u32 cols, little-endian float64."""
    v = np.ascontiguousarray(values, dtype="<f8")
    if v.ndim != 2:
        raise ValueError(f"write_map_raw: expected a 2-D map, got {v.shape}")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<II", v.shape[0], v.shape[1]))
        f.write(v.tobytes())


def read_map_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RAW_MAGIC:
            raise ValueError(f"read_map_raw: bad magic {magic!r}")
        rows, cols = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(rows * cols * 8), dtype="<f8")
    return data.reshape(rows, cols).copy()
