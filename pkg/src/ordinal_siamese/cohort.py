"""Longitudinal cohort records, progression labeling and triplet manifests.

A progressive-MCI participant's scans from the first MCI exam through the
first AD exam are labeled backwards from the conversion scan: the AD scan
gets level 1.0, the scan before it 0.9, and so on, one step per scan.
"""

from __future__ import annotations

import csv
import datetime as dt
import enum
import io
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ._io import PathLike, atomic_write_json, atomic_write_text
from .loss import ProgressionLevel, alpha_of

__all__ = [
    "CohortError",
    "WindowTooLongError",
    "PoolError",
    "OverlapError",
    "Diagnosis",
    "ParticipantClass",
    "Exam",
    "ParticipantRecord",
    "LabeledScan",
    "Triplet",
    "TripletManifest",
    "read_cohort_csv",
    "write_cohort_csv",
    "classify_participant",
    "label_progression",
    "label_cohort",
    "split_participants",
    "verify_manifests",
    "distribution_table",
    "read_labels_csv",
    "write_labels_csv",
]

COHORT_HEADER = ["participant_id", "exam_date", "diagnosis", "scan_ref"]
LABELS_HEADER = ["participant_id", "scan_ref", "exam_date", "rho"]
MAX_WINDOW = 10


class CohortError(ValueError):
    """Cohort data failed validation."""


class WindowTooLongError(CohortError):
    """More MCI->AD scans than there are progression levels."""


class PoolError(CohortError):
    pass


class OverlapError(CohortError):
    """A participant leaked across splits or anchor/positive pools."""


class Diagnosis(enum.Enum):
    NORMAL = "NORMAL"
    MCI = "MCI"
    AD = "AD"


class ParticipantClass(enum.Enum):
    PROGRESSIVE_MCI = "PROGRESSIVE_MCI"
    STABLE_MCI = "STABLE_MCI"
    AD_ONLY = "AD_ONLY"
    OTHER = "OTHER"


@dataclass(frozen=True)
class Exam:
    exam_date: dt.date
    diagnosis: Diagnosis
    scan_ref: str


@dataclass(frozen=True)
class ParticipantRecord:
    participant_id: str
    exams: tuple

    def __post_init__(self):
        exams = tuple(self.exams)
        object.__setattr__(self, "exams", exams)
        for a, b in zip(exams, exams[1:]):
            if not a.exam_date < b.exam_date:
                raise CohortError(
                    f"{self.participant_id}: exams must be strictly ascending by date "
                    f"({a.exam_date} then {b.exam_date})")


@dataclass(frozen=True)
class LabeledScan:
    participant_id: str
    scan_ref: str
    level: ProgressionLevel
    exam_date: dt.date

    @property
    def rho(self) -> float:
        return self.level.rho


@dataclass(frozen=True)
class Triplet:
    anchor: LabeledScan
    positive: LabeledScan
    negative: LabeledScan
    alpha: float


@dataclass
class TripletManifest:
    split: str  # "TRAIN" or "TEST"
    seed: int
    triplets: list
    anchor_pool: list = field(default_factory=list)
    positive_pool: list = field(default_factory=list)

    def participants(self) -> set:
        ids = {s.participant_id for s in self.anchor_pool}
        ids |= {s.participant_id for s in self.positive_pool}
        for t in self.triplets:
            ids |= {t.anchor.participant_id, t.positive.participant_id, t.negative.participant_id}
        return ids

    def scans(self) -> list:
        """Distinct scans referenced by this manifest: negatives first, then AD pools."""
        seen, out = set(), []
        for s in [t.negative for t in self.triplets] + self.anchor_pool + self.positive_pool:
            if s.scan_ref not in seen:
                seen.add(s.scan_ref)
                out.append(s)
        return out

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "seed": self.seed,
            "anchor_pool": [s.scan_ref for s in self.anchor_pool],
            "positive_pool": [s.scan_ref for s in self.positive_pool],
            "triplets": [
                {"anchor": t.anchor.scan_ref, "positive": t.positive.scan_ref,
                 "negative": t.negative.scan_ref, "rho": t.negative.rho, "alpha": t.alpha}
                for t in self.triplets
            ],
        }

    def save(self, path: PathLike) -> None:
        atomic_write_json(path, self.to_dict())

    @classmethod
    def from_dict(cls, doc: Mapping, scans: Mapping[str, LabeledScan]) -> "TripletManifest":
        """Rebuild a manifest, resolving scan refs through ``scans``."""

        def look(ref):
            try:
                return scans[ref]
            except KeyError:
                raise CohortError(f"manifest references unknown scan {ref!r}") from None

        try:
            triplets = []
            for row in doc["triplets"]:
                neg = look(row["negative"])
                if ProgressionLevel.from_rho(row["rho"]) != neg.level:
                    raise CohortError(f"{row['negative']}: manifest rho {row['rho']} != label {neg.rho}")
                triplets.append(Triplet(look(row["anchor"]), look(row["positive"]), neg,
                                        float(row["alpha"])))
            return cls(doc["split"], int(doc["seed"]), triplets,
                       [look(r) for r in doc.get("anchor_pool", [])],
                       [look(r) for r in doc.get("positive_pool", [])])
        except (KeyError, TypeError) as exc:
            raise CohortError(f"malformed manifest: {exc!r}") from None

    @classmethod
    def load(cls, path: PathLike, scans: Mapping[str, LabeledScan]) -> "TripletManifest":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CohortError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, scans)


# CSV I/O -----------------------------------------------------------------------

def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise CohortError(f"{where}: bad ISO-8601 date {text!r}") from None


def read_cohort_csv(path: PathLike) -> list:
    """Parse ``participant_id,exam_date,diagnosis,scan_ref`` rows into records.

    Rows may come in any order; exams are sorted per participant and
    duplicate dates are rejected.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COHORT_HEADER:
            raise CohortError(f"{path}: expected header {','.join(COHORT_HEADER)}, got {reader.fieldnames}")
        grouped = defaultdict(list)
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            try:
                diag = Diagnosis(row["diagnosis"].strip().upper())
            except ValueError:
                raise CohortError(f"{where}: unknown diagnosis {row['diagnosis']!r}") from None
            pid = row["participant_id"].strip()
            if not pid or not row["scan_ref"]:
                raise CohortError(f"{where}: empty participant_id or scan_ref")
            grouped[pid].append(Exam(_parse_date(row["exam_date"], where), diag, row["scan_ref"].strip()))
    records = []
    for pid in sorted(grouped):
        exams = sorted(grouped[pid], key=lambda e: e.exam_date)
        records.append(ParticipantRecord(pid, tuple(exams)))
    refs = Counter(e.scan_ref for r in records for e in r.exams)
    dupes = [r for r, c in refs.items() if c > 1]
    if dupes:
        raise CohortError(f"{path}: scan_ref used more than once: {dupes[:3]}")
    return records


def cohort_csv_text(records: Iterable[ParticipantRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COHORT_HEADER)
    for rec in records:
        for e in rec.exams:
            w.writerow([rec.participant_id, e.exam_date.isoformat(), e.diagnosis.value, e.scan_ref])
    return buf.getvalue()


def write_cohort_csv(records: Iterable[ParticipantRecord], path: PathLike) -> None:
    atomic_write_text(path, cohort_csv_text(records))


def write_labels_csv(scans: Iterable[LabeledScan], path: PathLike) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LABELS_HEADER)
    for s in scans:
        w.writerow([s.participant_id, s.scan_ref, s.exam_date.isoformat(), str(s.level)])
    atomic_write_text(path, buf.getvalue())


def read_labels_csv(path: PathLike) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LABELS_HEADER:
            raise CohortError(f"{path}: expected header {','.join(LABELS_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            try:
                level = ProgressionLevel.from_rho(float(row["rho"]))
            except ValueError:
                raise CohortError(f"{where}: bad rho {row['rho']!r}") from None
            out.append(LabeledScan(row["participant_id"], row["scan_ref"], level,
                                   _parse_date(row["exam_date"], where)))
    return out


# labeling ----------------------------------------------------------------------

def classify_participant(record: ParticipantRecord) -> ParticipantClass:
    if not record.exams:
        raise CohortError(f"{record.participant_id}: no exams")
    diags = [e.diagnosis for e in record.exams]
    if Diagnosis.MCI in diags:
        first_mci = diags.index(Diagnosis.MCI)
        if Diagnosis.AD in diags[first_mci + 1:]:
            return ParticipantClass.PROGRESSIVE_MCI
        if Diagnosis.AD not in diags:
            return ParticipantClass.STABLE_MCI
        return ParticipantClass.OTHER
    if all(d is Diagnosis.AD for d in diags):
        return ParticipantClass.AD_ONLY
    return ParticipantClass.OTHER


def label_progression(record: ParticipantRecord) -> list:
    """Progression levels for the scans between first MCI and first AD exam.

    Raises :class:`CohortError` for non-progressive records or windows that
    revert to NORMAL, and :class:`WindowTooLongError` for windows of more
    than ten scans.
    """
    kind = classify_participant(record)
    if kind is not ParticipantClass.PROGRESSIVE_MCI:
        raise CohortError(f"{record.participant_id}: not progressive MCI ({kind.value})")
    diags = [e.diagnosis for e in record.exams]
    start = diags.index(Diagnosis.MCI)
    end = diags.index(Diagnosis.AD, start)
    window = record.exams[start:end + 1]
    if any(e.diagnosis is not Diagnosis.MCI for e in window[:-1]):
        raise CohortError(f"{record.participant_id}: MCI->AD window contains a non-MCI exam")
    if any(d is Diagnosis.AD for d in diags[:start]):
        raise CohortError(f"{record.participant_id}: AD diagnosis precedes first MCI")
    k = len(window)
    if k > MAX_WINDOW:
        raise WindowTooLongError(
            f"{record.participant_id}: {k} scans from MCI to AD, at most {MAX_WINDOW} levels exist")
    return [
        LabeledScan(record.participant_id, e.scan_ref, ProgressionLevel(10 - (k - 1 - i)), e.exam_date)
        for i, e in enumerate(window)
    ]


def label_cohort(records: Sequence[ParticipantRecord]) -> list:
    """Labeled scans for every usable participant.

    Progressive-MCI windows are labeled per :func:`label_progression`;
    AD-only participants contribute their scans at level 1.0 as extra
    anchor/positive material.  Everyone else is skipped.
    """
    out = []
    for rec in records:
        kind = classify_participant(rec)
        if kind is ParticipantClass.PROGRESSIVE_MCI:
            out.extend(label_progression(rec))
        elif kind is ParticipantClass.AD_ONLY:
            out.extend(LabeledScan(rec.participant_id, e.scan_ref, ProgressionLevel(10), e.exam_date)
                       for e in rec.exams)
    return out


def distribution_table(labeled: Iterable[LabeledScan]) -> dict:
    counts = Counter(s.level for s in labeled)
    return {level: counts[level] for level in sorted(counts)}


# splitting -------------------------------------------------------------------

def _subsample(negatives: list, quotas: Mapping, rng: np.random.Generator) -> list:
    by_level = defaultdict(list)
    for s in negatives:
        by_level[s.level].append(s)
    keep = []
    for level in sorted(by_level):
        group = by_level[level]
        q = quotas.get(level)
        if q is not None and len(group) > q:
            idx = np.sort(rng.choice(len(group), size=int(q), replace=False))
            group = [group[i] for i in idx]
        keep.extend(group)
    return keep


def split_participants(labeled: Sequence[LabeledScan], ad_scans: Sequence[LabeledScan],
                       train_fraction: float, seed: int,
                       level_quotas: Optional[Mapping] = None):
    """Participant-disjoint TRAIN/TEST triplet manifests.

    ``labeled`` supplies negatives (levels below 1.0; AD entries are
    ignored) and ``ad_scans`` the level-1.0 scans that fill the anchor and
    positive pools.  ``level_quotas`` optionally caps the number of
    negatives per level before splitting.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    negatives = sorted((s for s in labeled if not s.level.is_ad),
                       key=lambda s: (s.participant_id, s.exam_date))
    ads = sorted({s.scan_ref: s for s in ad_scans}.values(), key=lambda s: (s.participant_id, s.exam_date))
    if any(not s.level.is_ad for s in ads):
        raise CohortError("ad_scans must all have level 1.0")

    rng = np.random.default_rng(seed)
    if level_quotas:
        quotas = {(k if isinstance(k, ProgressionLevel) else ProgressionLevel.from_rho(k)): v
                  for k, v in level_quotas.items()}
        negatives = _subsample(negatives, quotas, rng)

    participants = sorted({s.participant_id for s in negatives} | {s.participant_id for s in ads})
    n_train = int(np.floor(train_fraction * len(participants)))
    if n_train < 1 or n_train >= len(participants):
        raise PoolError(f"cannot split {len(participants)} participants with fraction {train_fraction}")
    order = rng.permutation(len(participants))
    train_ids = {participants[i] for i in order[:n_train]}

    manifests = []
    for split, in_split in (("TRAIN", lambda p: p in train_ids), ("TEST", lambda p: p not in train_ids)):
        split_negs = [s for s in negatives if in_split(s.participant_id)]
        split_ads = [s for s in ads if in_split(s.participant_id)]
        ad_ids = sorted({s.participant_id for s in split_ads})
        if len(ad_ids) < 2:
            raise PoolError(f"{split}: need AD scans from at least 2 participants, have {len(ad_ids)}")
        if not split_negs:
            raise PoolError(f"{split}: no negatives")
        shuffled = [ad_ids[i] for i in rng.permutation(len(ad_ids))]
        anchor_ids = set(shuffled[: (len(shuffled) + 1) // 2])
        anchor_pool = [s for s in split_ads if s.participant_id in anchor_ids]
        positive_pool = [s for s in split_ads if s.participant_id not in anchor_ids]
        a_idx = rng.integers(0, len(anchor_pool), size=len(split_negs))
        p_idx = rng.integers(0, len(positive_pool), size=len(split_negs))
        triplets = [Triplet(anchor_pool[a], positive_pool[p], neg, alpha_of(neg.level))
                    for neg, a, p in zip(split_negs, a_idx, p_idx)]
        manifests.append(TripletManifest(split, int(seed), triplets, anchor_pool, positive_pool))

    train, test = manifests
    problems = verify_manifests(train, test)
    if problems:
        raise OverlapError("; ".join(problems))
    return train, test


def verify_manifests(train: TripletManifest, test: TripletManifest) -> list:
    """Human-readable list of contract violations; empty when the pair is clean."""
    problems = []
    shared = train.participants() & test.participants()
    if shared:
        problems.append(f"participants in both TRAIN and TEST: {sorted(shared)[:5]}")
    for m in (train, test):
        anchor_ids = {s.participant_id for s in m.anchor_pool}
        positive_ids = {s.participant_id for s in m.positive_pool}
        anchor_refs = {s.scan_ref for s in m.anchor_pool}
        positive_refs = {s.scan_ref for s in m.positive_pool}
        for t in m.triplets:
            anchor_ids.add(t.anchor.participant_id)
            positive_ids.add(t.positive.participant_id)
        both = anchor_ids & positive_ids
        if both:
            problems.append(f"{m.split}: anchor and positive pools share participants {sorted(both)[:5]}")
        for i, t in enumerate(m.triplets):
            if m.anchor_pool and t.anchor.scan_ref not in anchor_refs:
                problems.append(f"{m.split}[{i}]: anchor {t.anchor.scan_ref} not in anchor pool")
            if m.positive_pool and t.positive.scan_ref not in positive_refs:
                problems.append(f"{m.split}[{i}]: positive {t.positive.scan_ref} not in positive pool")
            if not (t.anchor.level.is_ad and t.positive.level.is_ad):
                problems.append(f"{m.split}[{i}]: anchor and positive must be AD scans")
            if t.negative.level.is_ad:
                problems.append(f"{m.split}[{i}]: negative {t.negative.scan_ref} is an AD scan")
            elif t.alpha != alpha_of(t.negative.level):
                problems.append(f"{m.split}[{i}]: alpha {t.alpha} != alpha_of({t.negative.rho})")
    return problems
