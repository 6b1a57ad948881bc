"""Dataset container: simulated measurements with full-array reference maps.

One binary file holds a train split and a test split of records. Each record
is a scene, its noisy two-acquisition measurement cube, and the range-azimuth
magnitude map the full virtual array produces from that same cube (the
expensive reference a sub-sampled front end tries to match).

Layout (all little-endian):

    magic   b"SALD"
    u16     format version (currently 1)
    6 x u32 n_train, n_test, n_tx, n_rx, n_range, n_azimuth
    3 x f64 f_start, f_stop, element pitch (meters)
    then n_train + n_test records, train first:
        u32          number of reflectors T
        T x 3 f64    reflector rows (range_m, azimuth_rad, amplitude)
        f64          noise sigma
        complex128   cube, (n_range, n_tx, n_rx, 2) row-major
        f64          reference map, (n_range, n_azimuth) row-major

Generation is reproducible and parallelizable: record i of a split draws from
its own generator seeded by (master seed, stream tag, split, i), so the bytes
do not depend on the number of worker processes.
"""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .beamform import build_steering, full_array_map
from .simulate import ArrayConfig, BasebandCube, Scene, SceneSampler, \
    synth_baseband

MAGIC = b"SALD"
VERSION = 1
_HEADER = "<6I3d"

# stream tag separating dataset draws from any other consumer of a master seed
DATASET_STREAM = 17
TRAIN_SPLIT, TEST_SPLIT = 0, 1


@dataclass
class DatasetRecord:
    scene: Scene
    cube: BasebandCube
    reference_map: np.ndarray


@dataclass
class Dataset:
    cfg: ArrayConfig
    train_records: list
    test_records: list

    @property
    def n_train(self) -> int:
        return len(self.train_records)

    @property
    def n_test(self) -> int:
        return len(self.test_records)


def record_rng(master_seed: int, split: int, index: int) -> np.random.Generator:
    """The generator owned by one record; independent of every other record."""
    return np.random.default_rng(
        np.random.SeedSequence([master_seed, DATASET_STREAM, split, index]))


_steering_cache: dict = {}


def _cached_steering(cfg: ArrayConfig):
    key = (cfg.n_tx, cfg.n_rx, cfg.n_range, cfg.f_start, cfg.f_stop,
           cfg.pitch, cfg.n_azimuth)
    if key not in _steering_cache:
        _steering_cache.clear()   # keep at most one table per process
        _steering_cache[key] = build_steering(cfg, np.arange(cfg.n_virtual))
    return _steering_cache[key]


def _make_record(args) -> DatasetRecord:
    cfg, sampler, noise_sigma, master_seed, split, index = args
    rng = record_rng(master_seed, split, index)
    scene = sampler.sample(cfg, rng)
    cube = synth_baseband(scene, cfg, noise_sigma, rng)
    ref = full_array_map(cube, cfg, _cached_steering(cfg))
    return DatasetRecord(scene, cube, ref)


def make_dataset(cfg: ArrayConfig, n_train: int, n_test: int,
                 noise_sigma: float, master_seed: int, threads: int = 1,
                 sampler: SceneSampler | None = None) -> Dataset:
    """Simulate a dataset; identical bytes for any worker count."""
    if n_train < 0 or n_test < 0:
        raise ValueError("make_dataset: negative record counts")
    sampler = SceneSampler() if sampler is None else sampler
    jobs = ([(cfg, sampler, noise_sigma, master_seed, TRAIN_SPLIT, i)
             for i in range(n_train)]
            + [(cfg, sampler, noise_sigma, master_seed, TEST_SPLIT, i)
               for i in range(n_test)])
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_make_record, jobs, chunksize=4))
    else:
        records = [_make_record(j) for j in jobs]
    return Dataset(cfg, records[:n_train], records[n_train:])


# ---------------------------------------------------------------------------
# file io

def write_dataset(path, dataset: Dataset, force: bool = False):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} already exists (pass force to replace)")
    cfg = dataset.cfg
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack(_HEADER, dataset.n_train, dataset.n_test,
                            cfg.n_tx, cfg.n_rx, cfg.n_range, cfg.n_azimuth,
                            cfg.f_start, cfg.f_stop, cfg.pitch))
        for rec in dataset.train_records + dataset.test_records:
            _write_record(f, rec, cfg)


def _write_record(f, rec: DatasetRecord, cfg: ArrayConfig):
    refl = np.ascontiguousarray(rec.scene.reflectors, dtype="<f8")
    f.write(struct.pack("<I", rec.scene.n_reflectors))
    f.write(refl.tobytes())
    f.write(struct.pack("<d", rec.cube.noise_sigma))
    cube = np.ascontiguousarray(rec.cube.values, dtype="<c16")
    if cube.shape != (cfg.n_range, cfg.n_tx, cfg.n_rx, 2):
        raise ValueError(f"record cube shape {cube.shape} does not match the "
                         f"container header")
    f.write(cube.tobytes())
    ref = np.ascontiguousarray(rec.reference_map, dtype="<f8")
    if ref.shape != cfg.map_shape:
        raise ValueError(f"record map shape {ref.shape} does not match the "
                         f"container header")
    f.write(ref.tobytes())


def read_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"read_dataset: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise ValueError(f"read_dataset: unsupported version {version}")
    fields = struct.unpack_from(_HEADER, blob, 6)
    n_train, n_test, n_tx, n_rx, n_range, n_azimuth = fields[:6]
    f_start, f_stop, pitch = fields[6:]
    cfg = ArrayConfig(n_tx=n_tx, n_rx=n_rx, n_range=n_range, f_start=f_start,
                      f_stop=f_stop, element_pitch=pitch, n_azimuth=n_azimuth)
    off = 6 + struct.calcsize(_HEADER)
    records = []
    for _ in range(n_train + n_test):
        rec, off = _read_record(blob, off, cfg)
        records.append(rec)
    if off != len(blob):
        raise ValueError(f"read_dataset: {len(blob) - off} trailing bytes")
    return Dataset(cfg, records[:n_train], records[n_train:])


def _read_record(blob, off, cfg: ArrayConfig):
    (n_refl,) = struct.unpack_from("<I", blob, off)
    off += 4
    refl = np.frombuffer(blob, "<f8", n_refl * 3, off).reshape(n_refl, 3)
    off += n_refl * 24
    (sigma,) = struct.unpack_from("<d", blob, off)
    off += 8
    n_cube = cfg.n_range * cfg.n_tx * cfg.n_rx * 2
    if off + 16 * n_cube > len(blob):
        raise ValueError("read_dataset: truncated record")
    cube = np.frombuffer(blob, "<c16", n_cube, off) \
        .reshape(cfg.n_range, cfg.n_tx, cfg.n_rx, 2)
    off += 16 * n_cube
    n_map = cfg.n_range * cfg.n_azimuth
    if off + 8 * n_map > len(blob):
        raise ValueError("read_dataset: truncated record")
    ref = np.frombuffer(blob, "<f8", n_map, off).reshape(cfg.map_shape)
    off += 8 * n_map
    rec = DatasetRecord(Scene(refl.copy().reshape(n_refl, 3)),
                        BasebandCube(cube.copy(), sigma), ref.copy())
    return rec, off
