"""Distance-binned progression prediction and MAE / RMSE in bin units.

A negative's distance is its mean Euclidean distance to the anchor pool.
Distances are cut into equal-width bins, one per progression level, with
the nearest bin mapped to the highest level: scans close to the AD
anchors are predicted close to conversion.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ._io import PathLike, atomic_write_json, atomic_write_text
from .cohort import TripletManifest
from .encoder import EncoderParams, forward
from .loss import ProgressionLevel
from .synth import VolumeStore

__all__ = [
    "BinSpec",
    "BinningError",
    "EvalRow",
    "EvalReport",
    "fit_bins",
    "bin_index",
    "predict_level",
    "mae",
    "rmse",
    "embed_scans",
    "negative_distances",
    "evaluate",
    "FIT_FROM_TRAIN",
]

FIT_FROM_TRAIN = "fit_from_train"

LevelLike = Union[ProgressionLevel, float]


class BinningError(ValueError):
    pass


def _level(x: LevelLike) -> ProgressionLevel:
    return x if isinstance(x, ProgressionLevel) else ProgressionLevel.from_rho(x)


@dataclass(frozen=True)
class BinSpec:
    lo: float
    hi: float
    levels: tuple  # ascending ProgressionLevels, one per bin

    def __post_init__(self):
        if not self.lo < self.hi:
            raise BinningError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if len(self.levels) < 2:
            raise BinningError("need at least two levels")

    @property
    def k(self) -> int:
        return len(self.levels)

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.k

    @property
    def edges(self) -> list:
        return [self.lo + i * self.width for i in range(self.k)] + [self.hi]

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "levels": [lv.rho for lv in self.levels],
                "orientation": "DESCENDING"}


def fit_bins(train_distances: Sequence[float], levels: Sequence[LevelLike]) -> BinSpec:
    """Equal-width bins spanning the training distances."""
    d = np.asarray(train_distances, dtype=np.float64)
    if d.size < 2 or d.min() == d.max():
        raise BinningError("need at least two distinct distances to fit bins")
    lv = tuple(sorted({_level(x) for x in levels}))
    return BinSpec(float(d.min()), float(d.max()), lv)


def bin_index(d: float, spec: BinSpec) -> int:
    """0-based bin counted from the low-distance end, clamped into range."""
    d = min(max(float(d), spec.lo), spec.hi)
    return min(int(math.floor((d - spec.lo) / spec.width)), spec.k - 1)


def predict_level(d: float, spec: BinSpec) -> ProgressionLevel:
    # nearest bin -> highest level
    return spec.levels[spec.k - 1 - bin_index(d, spec)]


def _tenths(values) -> np.ndarray:
    return np.array([_level(v).tenths for v in values], dtype=np.int64)


def _paired(pred, truth):
    p, t = _tenths(pred), _tenths(truth)
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise ValueError("empty inputs")
    return p - t


def mae(pred: Sequence[LevelLike], truth: Sequence[LevelLike]) -> float:
    """Mean absolute error in bin units (one bin = 0.1 rho)."""
    diff = _paired(pred, truth)
    return float(np.abs(diff).sum()) / diff.size


def rmse(pred: Sequence[LevelLike], truth: Sequence[LevelLike]) -> float:
    """Root mean squared error in bin units."""
    diff = _paired(pred, truth)
    return math.sqrt(float((diff * diff).sum()) / diff.size)


# end-to-end ------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    scan_ref: str
    true_level: ProgressionLevel
    distance: float
    pred_level: ProgressionLevel


@dataclass
class EvalReport:
    rows: list
    mae: float
    rmse: float
    n: int
    bins: BinSpec

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "n": self.n,
            "bins": self.bins.to_dict(),
            "rows": [{"scan_ref": r.scan_ref, "true_rho": r.true_level.rho, "distance": r.distance,
                      "pred_rho": r.pred_level.rho} for r in self.rows],
        }

    def scatter_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scan_ref", "true_rho", "distance", "pred_rho"])
        for r in self.rows:
            w.writerow([r.scan_ref, str(r.true_level), repr(r.distance), str(r.pred_level)])
        return buf.getvalue()

    def save(self, json_path: PathLike, csv_path: PathLike) -> None:
        atomic_write_json(json_path, self.to_dict())
        atomic_write_text(csv_path, self.scatter_csv())


def embed_scans(params: EncoderParams, scan_refs: Sequence[str], volumes: VolumeStore,
                chunk: int = 32) -> np.ndarray:
    """Embeddings [len(scan_refs), embedding_dim], forward only."""
    out = []
    for start in range(0, len(scan_refs), chunk):
        batch = volumes.batch(scan_refs[start:start + chunk])
        out.append(forward(params.config, params.tensors, batch).data)
    if not out:
        return np.zeros((0, params.config.embedding_dim))
    return np.concatenate(out)


def negative_distances(params: EncoderParams, manifest: TripletManifest, volumes: VolumeStore):
    """(negatives, mean distance of each to the anchor-pool embeddings)."""
    negatives = [t.negative for t in manifest.triplets]
    anchors = manifest.anchor_pool or list({t.anchor.scan_ref: t.anchor for t in manifest.triplets}.values())
    if not negatives:
        raise ValueError("manifest has no triplets")
    e_neg = embed_scans(params, [s.scan_ref for s in negatives], volumes)
    e_anc = embed_scans(params, [s.scan_ref for s in anchors], volumes)
    diff = e_neg[:, None, :] - e_anc[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return negatives, dist.sum(axis=1) / dist.shape[1]


def evaluate(params: EncoderParams, manifest: TripletManifest, volumes: VolumeStore,
             spec: Union[BinSpec, str] = FIT_FROM_TRAIN,
             fit_manifest: Optional[TripletManifest] = None) -> EvalReport:
    """Predict a level for every negative in ``manifest`` and score it.

    With ``FIT_FROM_TRAIN`` the bins are fitted on ``fit_manifest``
    distances (the training split) over that split's negative levels.
    """
    if spec == FIT_FROM_TRAIN:
        if fit_manifest is None:
            raise BinningError("fitting bins needs the training manifest")
        fit_negs, fit_d = negative_distances(params, fit_manifest, volumes)
        spec = fit_bins(fit_d, [s.level for s in fit_negs])
    negatives, dists = negative_distances(params, manifest, volumes)
    rows = [EvalRow(s.scan_ref, s.level, float(d), predict_level(d, spec)) for s, d in zip(negatives, dists)]
    pred = [r.pred_level for r in rows]
    truth = [r.true_level for r in rows]
    return EvalReport(rows, mae(pred, truth), rmse(pred, truth), len(rows), spec)
