"""Seed-deterministic synthetic cohort standing in for longitudinal MRI data.

Each scan is ``baseline + rho * signal_strength * atrophy + noise`` where
``baseline`` and ``atrophy`` are fixed spatial templates.  Template values
sit on a 2**-10 grid so that, with dyadic ``signal_strength`` and no
noise, differences between stored volumes are exact in float32.

Per-scan noise streams are keyed by ``(seed, participant index, exam
index)`` so the output does not depend on generation order.
"""

from __future__ import annotations

import datetime as dt
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from ._io import PathLike, atomic_write_bytes
from .cohort import Diagnosis, Exam, ParticipantRecord, write_cohort_csv
from .loss import ProgressionLevel

__all__ = [
    "SynthConfig",
    "GeneratedCohort",
    "DESK_QUOTAS",
    "FULL_QUOTAS",
    "baseline_template",
    "atrophy_template",
    "render_volume",
    "generate",
    "read_volume",
    "write_volume",
    "volume_bytes",
    "VolumeStore",
]

VOLUME_MAGIC = b"VOL1"
_HEADER = struct.Struct("<4s4I12x")  # 32 bytes
_GRID = 2.0 ** -10

# Per-level image counts of a full-size progressive-MCI cohort.
FULL_QUOTAS = {0.2: 4, 0.3: 4, 0.4: 6, 0.5: 10, 0.6: 24, 0.7: 56, 0.8: 172, 0.9: 273, 1.0: 467}
# The same shape scaled to 148 negatives; the level-1.0 surplus over 0.9 comes
# from AD-only participants.
DESK_QUOTAS = {0.2: 1, 0.3: 1, 0.4: 2, 0.5: 3, 0.6: 6, 0.7: 15, 0.8: 46, 0.9: 74, 1.0: 126}


def _quota_map(quotas: Mapping) -> dict:
    out = {}
    for k, v in quotas.items():
        level = k if isinstance(k, ProgressionLevel) else ProgressionLevel.from_rho(float(k))
        if int(v) < 0:
            raise ValueError(f"quota for {level} is negative")
        out[level] = int(v)
    return out


@dataclass
class SynthConfig:
    volume_shape: tuple = (1, 16, 16, 16)
    # total participants; the surplus over the level-1.0 quota are stable-MCI distractors
    participants: Optional[int] = None
    level_quotas: dict = field(default_factory=lambda: dict(DESK_QUOTAS))
    signal_strength: float = 0.5
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.volume_shape = tuple(int(v) for v in self.volume_shape)
        self.level_quotas = _quota_map(self.level_quotas)
        self.validate()

    def validate(self) -> None:
        if len(self.volume_shape) != 4 or min(self.volume_shape) < 1:
            raise ValueError(f"volume_shape must be [C, D, H, W], got {self.volume_shape}")
        if not 0.0 < self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        q = [self.level_quotas.get(ProgressionLevel(t), 0) for t in range(1, 11)]
        for t in range(1, 9):
            if q[t] < q[t - 1]:
                raise ValueError(
                    "level quotas must be non-decreasing in rho: every participant seen at a level "
                    f"is also seen at all later levels (violated at {(t + 1) / 10:.1f})")
        if q[9] < q[8]:
            raise ValueError("quota at 1.0 must be at least the quota at 0.9")
        if self.participants is not None and self.participants < q[9]:
            raise ValueError(f"participants={self.participants} is below the level-1.0 quota {q[9]}")

    def quota_list(self) -> list:
        return [self.level_quotas.get(ProgressionLevel(t), 0) for t in range(1, 11)]

    def to_dict(self) -> dict:
        return {
            "volume_shape": list(self.volume_shape),
            "participants": self.participants,
            "level_quotas": {str(k): v for k, v in sorted(self.level_quotas.items())},
            "signal_strength": self.signal_strength,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def _grid(shape):
    c, d, h, w = shape
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in (d, h, w)]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    return c, z, y, x


def _quantise(a: np.ndarray) -> np.ndarray:
    return np.round(a / _GRID) * _GRID


def baseline_template(shape) -> np.ndarray:
    """Smooth head-like blob with a brighter inner shell."""
    c, z, y, x = _grid(shape)
    r2 = (x / 0.85) ** 2 + (y / 0.95) ** 2 + (z / 0.8) ** 2
    brain = np.exp(-2.0 * r2 ** 2)
    shell = 0.5 * np.exp(-((np.sqrt(r2) - 0.6) ** 2) / 0.02)
    vol = np.stack([brain + shell * (1.0 + 0.25 * ch) for ch in range(c)])
    return _quantise(vol)


def atrophy_template(shape) -> np.ndarray:
    """Atrophy pattern: darkened ventricles, thinned shell, shrunken medial lobes."""
    c, z, y, x = _grid(shape)
    r2 = (x / 0.85) ** 2 + (y / 0.95) ** 2 + (z / 0.8) ** 2
    ventricles = -np.exp(-((x / 0.25) ** 2 + (y / 0.45) ** 2 + (z / 0.3) ** 2))
    cortex = -0.6 * np.exp(-((np.sqrt(r2) - 0.6) ** 2) / 0.01)
    lobes = -0.8 * (np.exp(-(((np.abs(x) - 0.5) / 0.18) ** 2 + ((y + 0.2) / 0.3) ** 2 + ((z + 0.3) / 0.2) ** 2)))
    pattern = ventricles + cortex + lobes
    pattern = pattern / np.abs(pattern).max()
    return _quantise(np.stack([pattern] * c))


def render_volume(shape, rho: float, signal_strength: float, noise_sigma: float,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    vol = baseline_template(shape) + rho * signal_strength * atrophy_template(shape)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        vol = vol + rng.normal(0.0, noise_sigma, size=vol.shape)
    return vol


# volume files ------------------------------------------------------------------

def volume_bytes(volume: np.ndarray) -> bytes:
    if volume.ndim != 4:
        raise ValueError(f"volume must be [C, D, H, W], got shape {volume.shape}")
    return _HEADER.pack(VOLUME_MAGIC, *volume.shape) + np.ascontiguousarray(volume, dtype="<f4").tobytes()


def write_volume(path: PathLike, volume: np.ndarray) -> None:
    atomic_write_bytes(path, volume_bytes(volume))


def read_volume(path: PathLike) -> np.ndarray:
    """Load a volume file as float64 [C, D, H, W]."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated volume header")
    magic, c, d, h, w = _HEADER.unpack_from(blob)
    if magic != VOLUME_MAGIC:
        raise ValueError(f"{path}: bad volume magic {magic!r}")
    n = c * d * h * w
    if len(blob) != _HEADER.size + 4 * n:
        raise ValueError(f"{path}: expected {n} voxels, file size disagrees")
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float64).reshape(c, d, h, w)


class VolumeStore:
    """Caches volumes by scan_ref, resolving refs against ``root``."""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self._cache: dict = {}

    def __getitem__(self, scan_ref: str) -> np.ndarray:
        vol = self._cache.get(scan_ref)
        if vol is None:
            vol = read_volume(self.root / scan_ref)
            vol.setflags(write=False)
            self._cache[scan_ref] = vol
        return vol

    def batch(self, scan_refs) -> np.ndarray:
        return np.stack([self[r] for r in scan_refs])


# cohort generation ----------------------------------------------------------------

@dataclass
class GeneratedCohort:
    records: list
    csv_path: Path
    # scan_ref -> rho used to render it (0.0 for pre-MCI and stable-MCI scans)
    rendered_rho: dict


def _trajectories(cfg: SynthConfig) -> list:
    """(kind, diagnoses, rhos) per participant, before shuffling."""
    q = cfg.quota_list()
    out = []
    prev = 0
    for t in range(1, 10):
        starting = q[t - 1] - prev  # participants whose first MCI scan is at level t
        prev = q[t - 1]
        for _ in range(starting):
            levels = list(range(t, 11))
            out.append(("progressive", [Diagnosis.MCI] * (len(levels) - 1) + [Diagnosis.AD],
                        [lv / 10 for lv in levels]))
    for _ in range(q[9] - q[8]):
        out.append(("ad_only", [Diagnosis.AD], [1.0]))
    extra = 0 if cfg.participants is None else cfg.participants - q[9]
    for i in range(extra):
        n = 2 + i % 3
        out.append(("stable", [Diagnosis.MCI] * n, [0.0] * n))
    return out


def generate(cfg: SynthConfig, out_dir: PathLike) -> GeneratedCohort:
    """Write ``cohort.csv`` and ``volumes/*.vol`` under ``out_dir``."""
    cfg.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng([cfg.seed, 0])
    trajectories = _trajectories(cfg)
    order = rng.permutation(len(trajectories))
    base = dt.date(2005, 9, 1)

    records, rendered = [], {}
    baseline = baseline_template(cfg.volume_shape)
    atrophy = atrophy_template(cfg.volume_shape)
    for pidx, tidx in enumerate(order):
        kind, diags, rhos = trajectories[tidx]
        pid = f"P{pidx + 1:04d}"
        prng = np.random.default_rng([cfg.seed, 1, pidx])
        date = base + dt.timedelta(days=int(prng.integers(0, 1500)))
        # every third progressive participant also has a pre-MCI normal exam
        if kind == "progressive" and pidx % 3 == 0:
            diags, rhos = [Diagnosis.NORMAL] + diags, [0.0] + rhos
        exams = []
        for eidx, (diag, rho) in enumerate(zip(diags, rhos)):
            ref = f"volumes/{pid}_{eidx:02d}.vol"
            vol = baseline + rho * cfg.signal_strength * atrophy
            if cfg.noise_sigma > 0:
                srng = np.random.default_rng([cfg.seed, 2, pidx, eidx])
                vol = vol + srng.normal(0.0, cfg.noise_sigma, size=vol.shape)
            write_volume(out_dir / ref, vol)
            rendered[ref] = rho
            exams.append(Exam(date, diag, ref))
            date = date + dt.timedelta(days=int(330 + prng.integers(0, 70)))
        records.append(ParticipantRecord(pid, tuple(exams)))

    csv_path = out_dir / "cohort.csv"
    write_cohort_csv(records, csv_path)
    return GeneratedCohort(records, csv_path, rendered)
