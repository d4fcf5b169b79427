"""Siamese triplet training with Adam and an exponentially decaying learning rate."""

from __future__ import annotations

import enum
import io
import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from ._io import PathLike, atomic_write_json, atomic_write_text
from .cohort import TripletManifest
from .encoder import EncoderConfig, EncoderParams, forward, init_params, save_params
from .loss import unweighted_loss, weighted_loss
from .synth import VolumeStore

__all__ = [
    "LossKind",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "learning_rate",
    "EpochRecord",
    "RunLog",
    "TrainingDiverged",
    "triplet_losses",
    "train_run",
    "train_seeds",
]

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class LossKind(str, enum.Enum):
    UNWEIGHTED = "unweighted"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: LossKind = LossKind.WEIGHTED
    epochs: int = 150
    lr_initial: float = 1e-3
    lr_decay_rate: float = 0.96
    margin: float = 1.0
    seeds: tuple = (1, 2, 3, 4, 5)
    batch_size: int = 4

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be positive")
        if not 0.0 < self.lr_decay_rate <= 1.0:
            raise ValueError("lr_decay_rate must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")

    def to_dict(self) -> dict:
        return {
            "loss_kind": self.loss_kind.value,
            "epochs": self.epochs,
            "lr_initial": self.lr_initial,
            "lr_decay_rate": self.lr_decay_rate,
            "margin": self.margin,
            "seeds": list(self.seeds),
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr_initial * cfg.lr_decay_rate ** epoch


# Adam ----------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new ``(params, state)``.

    Inputs are not modified.
    """
    t = state.step + 1
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - BETA1) * g if m is None else BETA1 * m + (1.0 - BETA1) * g
        v = (1.0 - BETA2) * (g * g) if v is None else BETA2 * v + (1.0 - BETA2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + EPS)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# logging -----------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    lr: float


@dataclass
class RunLog:
    seed: int
    loss_kind: LossKind
    epochs: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: Optional[str] = None
    failed_epoch: Optional[int] = None

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_loss", "lr"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.test_loss), repr(e.lr)])
        return buf.getvalue()

    def summary(self) -> dict:
        """Deterministic run summary; wall time is kept out so reruns are byte-identical."""
        return {
            "seed": self.seed,
            "loss_kind": self.loss_kind.value,
            "epochs": len(self.epochs),
            "initial_train_loss": self.epochs[0].train_loss if self.epochs else None,
            "final_train_loss": self.epochs[-1].train_loss if self.epochs else None,
            "final_test_loss": self.epochs[-1].test_loss if self.epochs else None,
            "checkpoint": Path(self.checkpoint_path).name if self.checkpoint_path else None,
            "failed_epoch": self.failed_epoch,
        }

    def save(self, run_dir: PathLike) -> None:
        run_dir = Path(run_dir)
        atomic_write_text(run_dir / "log.csv", self.csv_text())
        atomic_write_json(run_dir / "summary.json", self.summary())
        atomic_write_json(run_dir / "timing.json", {"wall_time_seconds": self.wall_time})


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, log: RunLog):
        super().__init__(f"non-finite values during epoch {epoch}")
        self.epoch = epoch
        self.log = log


# training ------------------------------------------------------------------------

def triplet_losses(kind: LossKind, d_ap, d_an, alpha, margin: float) -> T.Tensor:
    if kind is LossKind.WEIGHTED:
        return weighted_loss(d_ap, d_an, alpha, margin)
    return unweighted_loss(d_ap, d_an, margin)


def _branch_arrays(manifest: TripletManifest, idx, volumes: VolumeStore):
    trips = [manifest.triplets[i] for i in idx]
    return (volumes.batch([t.anchor.scan_ref for t in trips]),
            volumes.batch([t.positive.scan_ref for t in trips]),
            volumes.batch([t.negative.scan_ref for t in trips]),
            np.array([t.alpha for t in trips]))


def mean_loss(params: EncoderParams, manifest: TripletManifest, volumes: VolumeStore,
              kind: LossKind, margin: float, chunk: int = 32) -> float:
    """Forward-only mean triplet loss over a manifest."""
    total = 0.0
    n = len(manifest.triplets)
    for start in range(0, n, chunk):
        a, p, ng, alpha = _branch_arrays(manifest, range(start, min(n, start + chunk)), volumes)
        ea, ep, en = (forward(params.config, params.tensors, x) for x in (a, p, ng))
        losses = triplet_losses(kind, T.euclidean_distance(ea, ep), T.euclidean_distance(ea, en),
                                alpha, margin)
        total += float(losses.data.sum())
    return total / n


def train_run(manifest_train: TripletManifest, manifest_test: TripletManifest,
              encoder_cfg: EncoderConfig, cfg: TrainConfig, seed: int,
              volumes: VolumeStore, checkpoint_path: Optional[PathLike] = None):
    """Train one shared-weight encoder on triplets; returns ``(params, log)``.

    Each step pushes the anchor, positive and negative batches through the
    same parameter set, so gradients from all three branches accumulate on
    one tape.
    """
    if not manifest_train.triplets or not manifest_test.triplets:
        raise ValueError("train and test manifests must be non-empty")
    params = init_params(encoder_cfg, seed)
    state = AdamState()
    order_rng = np.random.default_rng([seed, 7])
    log = RunLog(seed=int(seed), loss_kind=cfg.loss_kind)
    n = len(manifest_train.triplets)
    started = time.perf_counter()

    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = order_rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                a, p, ng, alpha = _branch_arrays(manifest_train, idx, volumes)
                tape = T.Tape()
                weights = params.on_tape(tape)
                ea = forward(encoder_cfg, weights, a)
                ep = forward(encoder_cfg, weights, p)
                en = forward(encoder_cfg, weights, ng)
                losses = triplet_losses(cfg.loss_kind, T.euclidean_distance(ea, ep),
                                        T.euclidean_distance(ea, en), alpha, cfg.margin)
                loss = T.mean(losses)
                grads = T.backward(tape, loss)
                total += float(losses.data.sum())
                new, state = adam_step(params.tensors,
                                       {name: grads[w.grad_id].data for name, w in weights.items()},
                                       state, lr)
                params = params.with_tensors(new)
            test_loss = mean_loss(params, manifest_test, volumes, cfg.loss_kind, cfg.margin)
        except T.NumericError:
            log.failed_epoch = epoch
            log.wall_time = time.perf_counter() - started
            raise TrainingDiverged(epoch, log) from None
        log.epochs.append(EpochRecord(epoch, total / n, test_loss, lr))
        logger.debug("seed %s epoch %d train %.6f test %.6f", seed, epoch, total / n, test_loss)

    log.wall_time = time.perf_counter() - started
    if checkpoint_path is not None:
        save_params(params, checkpoint_path)
        log.checkpoint_path = str(checkpoint_path)
    return params, log


def _run_one(args):
    train_m, test_m, encoder_cfg, cfg, seed, root, run_dir = args
    run_dir = Path(run_dir)
    params, log = train_run(train_m, test_m, encoder_cfg, cfg, seed, VolumeStore(root),
                            checkpoint_path=run_dir / "checkpoint.ckpt")
    log.save(run_dir)
    return log


def train_seeds(manifest_train: TripletManifest, manifest_test: TripletManifest,
                encoder_cfg: EncoderConfig, cfg: TrainConfig, volume_root: PathLike,
                out_dir: PathLike, seeds: Optional[Sequence[int]] = None, jobs: int = 1) -> list:
    """Train one run per seed into ``out_dir/seed<N>/``; runs share no state.

    With ``jobs > 1`` seeds run in separate processes.
    """
    seeds = list(cfg.seeds if seeds is None else seeds)
    tasks = [(manifest_train, manifest_test, encoder_cfg, cfg, s, str(volume_root),
              str(Path(out_dir) / f"seed{s}")) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]
