"""Pipeline configuration: one JSON document for every stage.

Example::

    {
      "workdir": "work",
      "synth": {"noise_sigma": 0.3, "seed": 0},
      "encoder": {"stem_channels": 4, "stem_stride": 2, "stages": [[1, 4, 1], [1, 8, 2]]},
      "split": {"train_fraction": 0.8, "seed": 0},
      "train": {"epochs": 150, "seeds": [1, 2, 3, 4, 5]},
      "tsne": {"train_perplexity": 32, "test_perplexity": 8}
    }

Unknown keys are rejected at every level.  Relative paths resolve against
the directory holding the config file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from .encoder import ConfigError, EncoderConfig
from .synth import SynthConfig
from .train import TrainConfig
from .tsne import TsneConfig

__all__ = ["ConfigError", "PipelineConfig", "Paths", "SplitSettings", "TsneSettings", "load_config"]


def _reject_unknown(section: str, d: Mapping, allowed) -> None:
    if not isinstance(d, Mapping):
        raise ConfigError(f"{section}: expected an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")


@dataclass(frozen=True)
class SplitSettings:
    train_fraction: float = 0.8
    seed: int = 0
    # optional per-level cap on negatives, e.g. {"0.9": 34}
    level_quotas: Optional[dict] = None

    def quotas(self) -> Optional[dict]:
        if not self.level_quotas:
            return None
        return {float(k): int(v) for k, v in self.level_quotas.items()}


@dataclass(frozen=True)
class TsneSettings:
    train_perplexity: float = 32.0
    test_perplexity: float = 8.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    seed: int = 0
    # levels dropped before fitting when level filtering is switched on
    drop_levels_train: tuple = (0.2,)
    drop_levels_test: tuple = (0.2, 0.3, 0.5)
    filter_levels: bool = False

    def for_split(self, split: str, perplexity: Optional[float] = None,
                  seed: Optional[int] = None) -> TsneConfig:
        default = self.train_perplexity if split == "train" else self.test_perplexity
        return TsneConfig(perplexity=default if perplexity is None else perplexity,
                          iterations=self.iterations, learning_rate=self.learning_rate,
                          early_exaggeration=self.early_exaggeration,
                          seed=self.seed if seed is None else seed)


@dataclass(frozen=True)
class Paths:
    workdir: Path
    cohort_dir: Path
    labels_csv: Path
    manifest_train: Path
    manifest_test: Path
    runs_dir: Path
    eval_dir: Path
    embed_dir: Path
    tsne_dir: Path

    @property
    def cohort_csv(self) -> Path:
        return self.cohort_dir / "cohort.csv"

    def manifest(self, split: str) -> Path:
        return self.manifest_train if split == "train" else self.manifest_test

    def run_dir(self, loss: str, seed: int) -> Path:
        return self.runs_dir / loss / f"seed{seed}"


_PATH_KEYS = ("cohort_dir", "labels_csv", "manifest_train", "manifest_test", "runs_dir",
              "eval_dir", "embed_dir", "tsne_dir")
_DEFAULT_NAMES = {
    "cohort_dir": "cohort",
    "labels_csv": "labels.csv",
    "manifest_train": "manifests/train.json",
    "manifest_test": "manifests/test.json",
    "runs_dir": "runs",
    "eval_dir": "eval",
    "embed_dir": "embeddings",
    "tsne_dir": "tsne",
}


@dataclass(frozen=True)
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    split: SplitSettings = field(default_factory=SplitSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    tsne: TsneSettings = field(default_factory=TsneSettings)
    eval_bins: str = "fit_from_train"
    jobs: int = 1
    base_dir: Path = Path(".")
    workdir: str = "work"
    path_overrides: dict = field(default_factory=dict)

    def paths(self, workdir_override: Optional[Path] = None) -> Paths:
        """Resolve artifact paths; overrides in the file are relative to the config directory."""
        workdir = Path(workdir_override) if workdir_override is not None else self.base_dir / self.workdir
        resolved = {}
        for key in _PATH_KEYS:
            if key in self.path_overrides:
                resolved[key] = self.base_dir / self.path_overrides[key]
            else:
                resolved[key] = workdir / _DEFAULT_NAMES[key]
        return Paths(workdir=workdir, **resolved)


_TOP_KEYS = ("workdir", "synth", "encoder", "split", "train", "tsne", "eval", "paths", "jobs")


def config_from_dict(doc: Mapping, base_dir: Path = Path(".")) -> PipelineConfig:
    _reject_unknown("config", doc, _TOP_KEYS)
    try:
        synth = SynthConfig.from_dict(doc.get("synth", {}))
        encoder = EncoderConfig.from_dict(doc.get("encoder", {}))
        split_doc = doc.get("split", {})
        _reject_unknown("split", split_doc, SplitSettings.__dataclass_fields__)
        split = SplitSettings(**split_doc)
        if not 0.0 < split.train_fraction < 1.0:
            raise ConfigError("split.train_fraction must lie in (0, 1)")
        train = TrainConfig.from_dict(doc.get("train", {}))
        tsne_doc = dict(doc.get("tsne", {}))
        _reject_unknown("tsne", tsne_doc, TsneSettings.__dataclass_fields__)
        for key in ("drop_levels_train", "drop_levels_test"):
            if key in tsne_doc:
                tsne_doc[key] = tuple(float(v) for v in tsne_doc[key])
        tsne = TsneSettings(**tsne_doc)
        eval_doc = doc.get("eval", {})
        _reject_unknown("eval", eval_doc, ("bins",))
        bins = eval_doc.get("bins", "fit_from_train")
        if bins != "fit_from_train":
            raise ConfigError("eval.bins supports only 'fit_from_train'")
        paths_doc = doc.get("paths", {})
        _reject_unknown("paths", paths_doc, _PATH_KEYS)
        jobs = int(doc.get("jobs", 1))
        if jobs < 1:
            raise ConfigError("jobs must be >= 1")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return PipelineConfig(synth=synth, encoder=encoder, split=split, train=train, tsne=tsne,
                          eval_bins=bins, jobs=jobs, base_dir=base_dir,
                          workdir=str(doc.get("workdir", "work")), path_overrides=dict(paths_doc))


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc, base_dir=path.resolve().parent)
