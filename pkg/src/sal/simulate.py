"""Stepped-frequency MIMO radar scene simulator.

Geometry: a colocated MIMO front end whose n_tx transmitters and n_rx
receivers form a virtual uniform linear array of n_tx * n_rx elements at
half-wavelength pitch, virtual index p = tx * n_rx + rx (receiver fastest).
Each measurement sweeps n_range tones spanning [f_start, f_stop) and is
repeated twice back to back (two acquisitions of a static scene: identical
signal, independent noise).

Signal model for a reflector at range r, azimuth theta, amplitude a:

    S[k, p] = a * exp(-j 2 pi f_k * (2 r + pos_p * pitch * sin(theta)) / c)

i.e. a true time-delay model: two-way range delay plus the per-element
aperture delay, both scaled by the actual tone frequency f_k. Additive noise
is i.i.d. circular complex Gaussian with per-component variance sigma^2 / 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import tensor

C_LIGHT = 299792458.0


@dataclass(frozen=True)
class ArrayConfig:
    """Front-end geometry and sweep plan; every derived quantity hangs off it."""

    n_tx: int = 20
    n_rx: int = 20
    n_range: int = 75
    f_start: float = 62.0e9
    f_stop: float = 69.0e9
    element_pitch: float | None = None  # meters; default half center-wavelength
    n_azimuth: int = 64

    def __post_init__(self):
        if min(self.n_tx, self.n_rx, self.n_range, self.n_azimuth) < 1:
            raise ValueError("ArrayConfig: counts must be positive")
        if not (0 < self.f_start < self.f_stop):
            raise ValueError("ArrayConfig: need 0 < f_start < f_stop")
        if self.element_pitch is not None and self.element_pitch <= 0:
            raise ValueError("ArrayConfig: element_pitch must be positive")

    @property
    def n_virtual(self) -> int:
        return self.n_tx * self.n_rx

    @property
    def f_center(self) -> float:
        return 0.5 * (self.f_start + self.f_stop)

    @property
    def lambda_center(self) -> float:
        return C_LIGHT / self.f_center

    @property
    def pitch(self) -> float:
        return self.element_pitch if self.element_pitch is not None \
            else 0.5 * self.lambda_center

    @property
    def delta_f(self) -> float:
        return (self.f_stop - self.f_start) / self.n_range

    @property
    def bandwidth(self) -> float:
        return self.f_stop - self.f_start

    @property
    def freqs(self) -> np.ndarray:
        return self.f_start + np.arange(self.n_range) * self.delta_f

    @property
    def range_bin_width(self) -> float:
        return C_LIGHT / (2.0 * self.bandwidth)

    @property
    def max_range(self) -> float:
        """Unambiguous range span implied by the frequency step."""
        return C_LIGHT / (2.0 * self.delta_f)

    @property
    def azimuth_sins(self) -> np.ndarray:
        """Cell centers of n_azimuth uniform cells in sin-space over [-1, 1)."""
        q = np.arange(self.n_azimuth)
        return -1.0 + (2.0 * q + 1.0) / self.n_azimuth

    @property
    def azimuth_grid(self) -> np.ndarray:
        """Grid angles in radians, strictly inside (-pi/2, pi/2), increasing."""
        return np.arcsin(self.azimuth_sins)

    @property
    def map_shape(self) -> tuple:
        return (self.n_range, self.n_azimuth)

    def range_to_bin(self, r) -> np.ndarray:
        """Nearest range bin of a reflector at range r (bins are r_b = b*c/2B)."""
        return np.asarray(np.round(2.0 * np.asarray(r) * self.bandwidth
                                   / C_LIGHT)).astype(int) % self.n_range


@dataclass(frozen=True)
class Scene:
    """A sparse set of point reflectors: rows of (range_m, azimuth_rad, amp)."""

    reflectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "reflectors",
                           np.atleast_2d(np.asarray(self.reflectors, float)))
        if self.reflectors.size and self.reflectors.shape[1] != 3:
            raise ValueError("Scene: reflectors must be (n, 3) triples")

    def validate(self, cfg: ArrayConfig):
        if self.reflectors.size == 0:
            return
        r, az, amp = self.reflectors.T
        if np.any(r < 0) or np.any(r >= cfg.max_range):
            raise ValueError(f"Scene: range outside unambiguous span "
                             f"[0, {cfg.max_range:.3f}) m")
        if np.any(np.abs(az) >= np.pi / 2):
            raise ValueError("Scene: azimuth outside (-pi/2, pi/2)")
        if np.any(amp <= 0):
            raise ValueError("Scene: amplitudes must be positive")

    @property
    def n_reflectors(self) -> int:
        return 0 if self.reflectors.size == 0 else self.reflectors.shape[0]


@dataclass(frozen=True)
class SceneSampler:
    """Random desk-scale scenes: a few point reflectors of mixed brightness."""

    min_reflectors: int = 1
    max_reflectors: int = 7
    amp_min: float = 0.2
    amp_max: float = 1.0
    range_margin: float = 0.1    # keep ranges inside the middle of the span
    sin_azimuth_limit: float = 0.95

    def sample(self, cfg: ArrayConfig, rng: np.random.Generator) -> Scene:
        n = int(rng.integers(self.min_reflectors, self.max_reflectors + 1))
        lo, hi = self.range_margin, 1.0 - self.range_margin
        ranges = rng.uniform(lo * cfg.max_range, hi * cfg.max_range, n)
        sins = rng.uniform(-self.sin_azimuth_limit, self.sin_azimuth_limit, n)
        amps = np.exp(rng.uniform(np.log(self.amp_min), np.log(self.amp_max), n))
        return Scene(np.column_stack([ranges, np.arcsin(sins), amps]))


@dataclass
class BasebandCube:
    """Raw measurements: (n_range, n_tx, n_rx, 2) complex, two acquisitions."""

    values: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        self.values = tensor(self.values, np.complex128)
        if self.values.ndim != 4 or self.values.shape[3] != 2:
            raise ValueError(f"BasebandCube: expected (n_range, n_tx, n_rx, 2),"
                             f" got {self.values.shape}")

    @property
    def n_range(self):
        return self.values.shape[0]

    @property
    def n_virtual(self):
        return self.values.shape[1] * self.values.shape[2]

    def as_matrix(self, acq: int) -> np.ndarray:
        """One acquisition flattened to (n_range, n_virtual), rx fastest."""
        k = self.values.shape[0]
        return np.ascontiguousarray(self.values[:, :, :, acq].reshape(k, -1))

    def as_matrices(self) -> np.ndarray:
        """Both acquisitions: (n_range, n_virtual, 2)."""
        k = self.values.shape[0]
        return np.ascontiguousarray(self.values.reshape(k, -1, 2))

    def temporal_average(self) -> np.ndarray:
        """(S_t0 + S_t1) / 2 flattened to (n_range, n_virtual); halves the
        noise power (0.5 sigma^2) while keeping the static signal intact."""
        m = self.as_matrices()
        return 0.5 * (m[:, :, 0] + m[:, :, 1])


def signal_matrix(scene: Scene, cfg: ArrayConfig) -> np.ndarray:
    """Noiseless (n_range, n_virtual) response of a scene."""
    scene.validate(cfg)
    out = np.zeros((cfg.n_range, cfg.n_virtual), np.complex128)
    if scene.n_reflectors == 0:
        return out
    freqs = cfg.freqs[:, None, None]                      # (K, 1, 1)
    pos = np.arange(cfg.n_virtual)[None, :, None]         # (1, P, 1)
    r, az, amp = scene.reflectors.T                       # (T,)
    delay = (2.0 * r[None, None, :]
             + pos * cfg.pitch * np.sin(az)[None, None, :]) / C_LIGHT
    out = np.sum(amp[None, None, :]
                 * np.exp(-1j * 2.0 * np.pi * freqs * delay), axis=2)
    return out


def synth_baseband(scene: Scene, cfg: ArrayConfig, noise_sigma: float,
                   rng: np.random.Generator) -> BasebandCube:
    """Simulate one measurement: two acquisitions, shared signal, fresh noise.

    Noise draw order is fixed (real parts then imaginary parts, full cube at
    once) so a given generator state always yields the same cube.
    """
    if noise_sigma < 0:
        raise ValueError("synth_baseband: noise_sigma must be >= 0")
    sig = signal_matrix(scene, cfg).reshape(cfg.n_range, cfg.n_tx, cfg.n_rx)
    cube = np.empty((cfg.n_range, cfg.n_tx, cfg.n_rx, 2), np.complex128)
    cube[:] = sig[:, :, :, None]
    if noise_sigma > 0:
        shape = cube.shape
        noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        cube += noise * (noise_sigma / np.sqrt(2.0))
    return BasebandCube(cube, float(noise_sigma))
