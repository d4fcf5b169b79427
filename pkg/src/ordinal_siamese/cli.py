"""Command-line entry point: ``ordinal-siamese <subcommand> --config PATH``.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 data validation
failure, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import cohort as C
from ._io import atomic_write_json, atomic_write_text
from .config import ConfigError, PipelineConfig, load_config
from .encoder import load_params
from .evaluation import EvalReport, evaluate
from .loss import ProgressionLevel
from .synth import SynthConfig, VolumeStore, generate
from .tensor import NumericError
from .train import LossKind, TrainConfig, TrainingDiverged, train_seeds
from .tsne import TsneError, project

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("ordinal_siamese")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _seeds(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _levels(text: str) -> list:
    try:
        return [ProgressionLevel.from_rho(float(s)) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None


def _loss_kinds(choice: str) -> list:
    return [LossKind.UNWEIGHTED, LossKind.WEIGHTED] if choice == "both" else [LossKind(choice)]


def _fmt_table(table: dict) -> str:
    return "\n".join(f"  rho={level}: {count}" for level, count in table.items())


# shared loading -----------------------------------------------------------------

def _scan_index(paths) -> dict:
    if not paths.labels_csv.exists():
        raise CliError(EXIT_IO, f"labels not found: {paths.labels_csv} (run `label` first)")
    return {s.scan_ref: s for s in C.read_labels_csv(paths.labels_csv)}


def _manifests(paths):
    index = _scan_index(paths)
    for p in (paths.manifest_train, paths.manifest_test):
        if not p.exists():
            raise CliError(EXIT_IO, f"manifest not found: {p} (run `split` first)")
    return (C.TripletManifest.load(paths.manifest_train, index),
            C.TripletManifest.load(paths.manifest_test, index))


def _skip(outputs: Sequence[Path], force: bool, what: str) -> bool:
    if not force and outputs and all(p.exists() for p in outputs):
        print(f"{what}: outputs already present, skipping (use --force to redo)")
        return True
    return False


# subcommands --------------------------------------------------------------------

def cmd_gen(cfg: PipelineConfig, paths, args) -> int:
    synth_cfg = cfg.synth
    if args.seed is not None:
        synth_cfg = SynthConfig.from_dict({**synth_cfg.to_dict(), "seed": args.seed})
    if not _skip([paths.cohort_csv], args.force, "gen"):
        generate(synth_cfg, paths.cohort_dir)
    records = C.read_cohort_csv(paths.cohort_csv)
    print(f"cohort: {paths.cohort_csv} ({len(records)} participants)")
    print("quota table:")
    print(_fmt_table(C.distribution_table(C.label_cohort(records))))
    return EXIT_OK


def cmd_label(cfg, paths, args) -> int:
    if not paths.cohort_csv.exists():
        raise CliError(EXIT_IO, f"cohort CSV not found: {paths.cohort_csv}")
    records = C.read_cohort_csv(paths.cohort_csv)
    labeled = C.label_cohort(records)
    if not _skip([paths.labels_csv], args.force, "label"):
        C.write_labels_csv(labeled, paths.labels_csv)
    kinds = {}
    for r in records:
        k = C.classify_participant(r).value
        kinds[k] = kinds.get(k, 0) + 1
    print(f"labels: {paths.labels_csv} ({len(labeled)} scans)")
    print("participants: " + ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    print("distribution:")
    print(_fmt_table(C.distribution_table(labeled)))
    return EXIT_OK


def cmd_split(cfg, paths, args) -> int:
    fraction = cfg.split.train_fraction if args.train_fraction is None else args.train_fraction
    seed = cfg.split.seed if args.seed is None else args.seed
    if not _skip([paths.manifest_train, paths.manifest_test], args.force, "split"):
        labeled = list(_scan_index(paths).values())
        train, test = C.split_participants(labeled, [s for s in labeled if s.level.is_ad],
                                           fraction, seed, cfg.split.quotas())
        train.save(paths.manifest_train)
        test.save(paths.manifest_test)
    train, test = _manifests(paths)
    print(f"train: {len(train.triplets)} triplets, {len(train.participants())} participants")
    print(f"test: {len(test.triplets)} triplets, {len(test.participants())} participants")
    return EXIT_OK


def cmd_verify(cfg, paths, args) -> int:
    train, test = _manifests(paths)
    problems = C.verify_manifests(train, test)
    if problems:
        for p in problems:
            print(f"violation: {p}")
        return EXIT_DATA
    print("manifests ok: splits and anchor/positive pools are participant-disjoint")
    return EXIT_OK


def _train_cfg(cfg: PipelineConfig, args, kind: LossKind) -> TrainConfig:
    d = cfg.train.to_dict()
    d["loss_kind"] = kind.value
    if args.epochs is not None:
        d["epochs"] = args.epochs
    return TrainConfig.from_dict(d)


def _run_seeds(cfg, args) -> list:
    if args.seeds is not None:
        return args.seeds
    if args.seed is not None:
        return [args.seed]
    return list(cfg.train.seeds)


def cmd_train(cfg, paths, args) -> int:
    train, test = _manifests(paths)
    for kind in _loss_kinds(args.loss):
        tcfg = _train_cfg(cfg, args, kind)
        todo = [s for s in _run_seeds(cfg, args)
                if args.force or not (paths.run_dir(kind.value, s) / "checkpoint.ckpt").exists()]
        if not todo:
            print(f"train {kind.value}: all checkpoints present, skipping (use --force to redo)")
            continue
        logs = train_seeds(train, test, cfg.encoder, tcfg, paths.cohort_dir,
                           paths.runs_dir / kind.value, seeds=todo, jobs=args.jobs or cfg.jobs)
        for lg in logs:
            print(f"train {kind.value} seed={lg.seed}: train_loss {lg.epochs[0].train_loss:.6f} -> "
                  f"{lg.epochs[-1].train_loss:.6f}, test_loss {lg.epochs[-1].test_loss:.6f}")
    return EXIT_OK


def _load_run(paths, kind: LossKind, seed: int):
    ckpt = paths.run_dir(kind.value, seed) / "checkpoint.ckpt"
    if not ckpt.exists():
        raise CliError(EXIT_IO, f"checkpoint not found: {ckpt} (run `train` first)")
    return load_params(ckpt)


def cmd_eval(cfg, paths, args) -> int:
    train, test = _manifests(paths)
    volumes = VolumeStore(paths.cohort_dir)
    for kind in _loss_kinds(args.loss):
        reports = []
        for seed in _run_seeds(cfg, args):
            out = paths.eval_dir / kind.value / f"seed{seed}"
            params = _load_run(paths, kind, seed)
            report: EvalReport = evaluate(params, test, volumes, fit_manifest=train)
            report.save(out / "report.json", out / "scatter.csv")
            reports.append(report)
            print(f"{kind.value} seed={seed}: mae={report.mae:.4f}, rmse={report.rmse:.4f} (n={report.n})")
        if len(reports) > 1:
            m = float(np.mean([r.mae for r in reports]))
            r = float(np.mean([r.rmse for r in reports]))
            atomic_write_json(paths.eval_dir / kind.value / "summary.json",
                              {"loss_kind": kind.value, "runs": len(reports), "mean_mae": m, "mean_rmse": r,
                               "seeds": _run_seeds(cfg, args)})
            print(f"{kind.value} mean over {len(reports)} runs: mae={m:.4f}, rmse={r:.4f}")
    return EXIT_OK


def _split_scans(paths, split: str):
    train, test = _manifests(paths)
    return (train if split == "train" else test).scans()


def _run_seed(cfg, args) -> int:
    return args.run_seed if args.run_seed is not None else cfg.train.seeds[0]


def cmd_embed(cfg, paths, args) -> int:
    from .evaluation import embed_scans

    kind = LossKind(args.loss)
    seed = _run_seed(cfg, args)
    params = _load_run(paths, kind, seed)
    scans = _split_scans(paths, args.split)
    emb = embed_scans(params, [s.scan_ref for s in scans], VolumeStore(paths.cohort_dir))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scan_ref", "true_rho"] + [f"e{i}" for i in range(emb.shape[1])])
    for s, row in zip(scans, emb):
        w.writerow([s.scan_ref, str(s.level)] + [repr(float(v)) for v in row])
    out = paths.embed_dir / f"{kind.value}_seed{seed}_{args.split}.csv"
    atomic_write_text(out, buf.getvalue())
    print(f"embeddings: {out} ({len(scans)} scans)")
    return EXIT_OK


def cmd_tsne(cfg, paths, args) -> int:
    from .evaluation import embed_scans

    kind = LossKind(args.loss)
    seed = _run_seed(cfg, args)
    params = _load_run(paths, kind, seed)
    scans = _split_scans(paths, args.split)
    drop = args.drop_levels
    if drop is None and (args.filter_levels or cfg.tsne.filter_levels):
        raw = cfg.tsne.drop_levels_train if args.split == "train" else cfg.tsne.drop_levels_test
        drop = [ProgressionLevel.from_rho(v) for v in raw]
    if drop:
        scans = [s for s in scans if s.level not in set(drop)]
    emb = embed_scans(params, [s.scan_ref for s in scans], VolumeStore(paths.cohort_dir))
    tcfg = cfg.tsne.for_split(args.split, args.perplexity, args.seed)
    result = project(emb, [s.rho for s in scans], tcfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scan_ref", "true_rho", "x", "y"])
    for s, (x, y) in zip(scans, result.points[:, :2]):
        w.writerow([s.scan_ref, str(s.level), repr(float(x)), repr(float(y))])
    stem = f"{kind.value}_seed{seed}_{args.split}"
    out = paths.tsne_dir / f"{stem}.csv"
    atomic_write_text(out, buf.getvalue())
    atomic_write_json(paths.tsne_dir / f"{stem}_trace.json", {
        "perplexity": tcfg.perplexity, "iterations": tcfg.iterations, "seed": tcfg.seed,
        "kl": [{"iteration": it, "kl": kl} for it, kl in result.trace],
        "bisection_failures": len(result.failed_rows),
    })
    print(f"t-SNE: {out} ({len(scans)} points, final KL {result.trace[-1][1]:.4f})")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "label": cmd_label,
    "split": cmd_split,
    "verify": cmd_verify,
    "train": cmd_train,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "tsne": cmd_tsne,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline JSON config")
    common.add_argument("--seed", type=int, default=None, help="override the stage's seed")
    common.add_argument("--workdir", default=None, help="override the config's workdir")
    common.add_argument("--force", action="store_true", help="redo stages whose outputs exist")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ordinal-siamese", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic cohort")
    sub.add_parser("label", parents=[common], help="label progression levels")
    sp = sub.add_parser("split", parents=[common], help="build train/test triplet manifests")
    sp.add_argument("--train-fraction", type=float, default=None)
    sub.add_parser("verify", parents=[common], help="check manifests for participant overlap")

    losses = ["weighted", "unweighted", "both"]
    tp = sub.add_parser("train", parents=[common], help="train one run per seed")
    tp.add_argument("--loss", choices=losses, default="both")
    tp.add_argument("--seeds", type=_seeds, default=None)
    tp.add_argument("--epochs", type=int, default=None)
    tp.add_argument("--jobs", type=int, default=None, help="parallel seed processes")

    ep = sub.add_parser("eval", parents=[common], help="MAE/RMSE of trained runs on the test split")
    ep.add_argument("--loss", choices=losses, default="both")
    ep.add_argument("--seeds", type=_seeds, default=None)

    for name, helptext in (("embed", "export embeddings"), ("tsne", "t-SNE of embeddings")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--split", choices=["train", "test"], default="test")
        p.add_argument("--loss", choices=["weighted", "unweighted"], default="weighted")
        p.add_argument("--run-seed", type=int, default=None, help="which training run to use")
        if name == "tsne":
            p.add_argument("--perplexity", type=float, default=None)
            p.add_argument("--drop-levels", type=_levels, default=None, help="e.g. 0.2,0.3,0.5")
            p.add_argument("--filter-levels", action="store_true",
                           help="drop the configured under-represented levels")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        paths = cfg.paths(Path(args.workdir) if args.workdir else None)
        return COMMANDS[args.command](cfg, paths, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, TsneError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except C.CohortError as exc:
        print(f"data validation error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
