import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ordinal_siamese import cohort as C
from ordinal_siamese.loss import ProgressionLevel

from conftest import AD, MCI, NL, timeline_cohort, make_record


def rho_seq(scans):
    return [s.rho for s in scans]


def synthetic_labeled(n_prog=30, n_ad=10, seed=0):
    """Labeled scans for n_prog progressors of random window length plus AD-only participants."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_prog):
        k = int(rng.integers(2, 10))
        records.append(make_record(f"P{i:03d}", [MCI] * (k - 1) + [AD]))
    for i in range(n_ad):
        records.append(make_record(f"A{i:03d}", [AD] * int(rng.integers(1, 3))))
    return C.label_cohort(records)


def split(labeled, fraction=0.8, seed=0, quotas=None):
    return C.split_participants(labeled, [s for s in labeled if s.level.is_ad], fraction, seed, quotas)


class TestLabeling:
    def test_timeline_sequences(self):
        recs = {r.participant_id: r for r in timeline_cohort()}
        assert rho_seq(C.label_progression(recs["S01"])) == [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
        assert rho_seq(C.label_progression(recs["S02"])) == [0.8, 0.9, 1.0]
        s03 = C.label_progression(recs["S03"])
        assert rho_seq(s03) == [0.7, 0.8, 0.9, 1.0]
        assert s03[0].scan_ref == "S03_01.vol"  # normal exam excluded

    def test_classification(self):
        kinds = {r.participant_id: C.classify_participant(r) for r in timeline_cohort()}
        assert kinds == {
            "S01": C.ParticipantClass.PROGRESSIVE_MCI,
            "S02": C.ParticipantClass.PROGRESSIVE_MCI,
            "S03": C.ParticipantClass.PROGRESSIVE_MCI,
            "S04": C.ParticipantClass.STABLE_MCI,
            "S05": C.ParticipantClass.AD_ONLY,
            "S06": C.ParticipantClass.OTHER,
        }

    def test_label_cohort_contents(self):
        labeled = C.label_cohort(timeline_cohort())
        assert {s.participant_id for s in labeled} == {"S01", "S02", "S03", "S05"}
        table = C.distribution_table(labeled)
        assert table[ProgressionLevel(10)] == 5  # three conversions + two AD-only
        assert min(table) == ProgressionLevel(2)

    def test_window_too_long(self):
        with pytest.raises(C.WindowTooLongError):
            C.label_progression(make_record("X", [MCI] * 10 + [AD]))
        assert len(C.label_progression(make_record("Y", [MCI] * 9 + [AD]))) == 10

    def test_reverting_window_rejected(self):
        with pytest.raises(C.CohortError):
            C.label_progression(make_record("X", [MCI, NL, MCI, AD]))

    def test_not_progressive(self):
        with pytest.raises(C.CohortError):
            C.label_progression(make_record("X", [MCI, MCI]))

    def test_exams_must_ascend(self):
        e = C.Exam(dt.date(2010, 1, 1), MCI, "a")
        with pytest.raises(C.CohortError):
            C.ParticipantRecord("X", (e, C.Exam(dt.date(2010, 1, 1), AD, "b")))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 10), st.integers(0, 3))
def test_window_levels_property(k, pre_normal):
    rec = make_record("P", [NL] * pre_normal + [MCI] * (k - 1) + [AD])
    levels = [s.level.tenths for s in C.label_progression(rec)]
    assert levels[-1] == 10
    assert levels == list(range(11 - k, 11))


class TestCsv:
    def test_cohort_roundtrip(self, tmp_path):
        recs = timeline_cohort()
        C.write_cohort_csv(recs, tmp_path / "c.csv")
        back = C.read_cohort_csv(tmp_path / "c.csv")
        assert back == sorted(recs, key=lambda r: r.participant_id)

    def test_duplicate_scan_ref(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("participant_id,exam_date,diagnosis,scan_ref\n"
                     "A,2010-01-01,MCI,x.vol\nB,2010-01-01,AD,x.vol\n")
        with pytest.raises(C.CohortError):
            C.read_cohort_csv(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("id,date\nA,2010-01-01\n")
        with pytest.raises(C.CohortError):
            C.read_cohort_csv(p)

    def test_labels_roundtrip(self, tmp_path):
        labeled = C.label_cohort(timeline_cohort())
        C.write_labels_csv(labeled, tmp_path / "l.csv")
        assert sorted(C.read_labels_csv(tmp_path / "l.csv"), key=lambda s: s.scan_ref) == \
            sorted(labeled, key=lambda s: s.scan_ref)


class TestSplit:
    def test_counts_oracle(self):
        labeled = synthetic_labeled()
        train, test = split(labeled)
        negatives = [s for s in labeled if not s.level.is_ad]
        assert len(train.triplets) + len(test.triplets) == len(negatives)
        participants = {s.participant_id for s in labeled}
        assert len(train.participants()) == int(np.floor(0.8 * len(participants)))
        assert train.participants() | test.participants() == participants

    def test_alpha_matches_level(self):
        train, _ = split(synthetic_labeled())
        for t in train.triplets:
            assert t.alpha == C.alpha_of(t.negative.level)
            assert t.anchor.level.is_ad and t.positive.level.is_ad

    def test_deterministic(self):
        labeled = synthetic_labeled()
        a = [m.to_dict() for m in split(labeled, seed=5)]
        b = [m.to_dict() for m in split(labeled, seed=5)]
        assert a == b
        assert a != [m.to_dict() for m in split(labeled, seed=6)]

    def test_quotas_cap_levels(self):
        labeled = synthetic_labeled(n_prog=40)
        train, test = split(labeled, quotas={0.9: 5, 0.8: 4})
        table = C.distribution_table([t.negative for t in train.triplets + test.triplets])
        assert table[ProgressionLevel(9)] == 5 and table[ProgressionLevel(8)] == 4

    def test_too_few_ad_participants(self):
        labeled = C.label_cohort([make_record("P1", [MCI, AD]), make_record("P2", [MCI, AD])])
        with pytest.raises(C.PoolError):
            split(labeled, 0.5)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            split(synthetic_labeled(), 1.0)

    def test_manifest_json_roundtrip(self, tmp_path):
        labeled = synthetic_labeled()
        train, _ = split(labeled)
        train.save(tmp_path / "m.json")
        index = {s.scan_ref: s for s in labeled}
        back = C.TripletManifest.load(tmp_path / "m.json", index)
        assert back.to_dict() == train.to_dict()
        doc = json.loads((tmp_path / "m.json").read_text())
        assert set(doc) == {"split", "seed", "anchor_pool", "positive_pool", "triplets"}
        assert set(doc["triplets"][0]) == {"anchor", "positive", "negative", "rho", "alpha"}

    def test_manifest_rho_mismatch_detected(self, tmp_path):
        labeled = synthetic_labeled()
        train, _ = split(labeled)
        doc = train.to_dict()
        doc["triplets"][0]["rho"] = 0.1 if doc["triplets"][0]["rho"] != 0.1 else 0.2
        with pytest.raises(C.CohortError):
            C.TripletManifest.from_dict(doc, {s.scan_ref: s for s in labeled})


class TestVerify:
    def test_clean(self):
        assert C.verify_manifests(*split(synthetic_labeled())) == []

    def test_cross_split_overlap(self):
        train, test = split(synthetic_labeled())
        t = train.triplets[0]
        test.triplets.append(t)
        assert any("both TRAIN and TEST" in p for p in C.verify_manifests(train, test))

    def test_anchor_positive_overlap(self):
        train, test = split(synthetic_labeled())
        train.positive_pool.append(train.anchor_pool[0])
        assert any("anchor and positive" in p for p in C.verify_manifests(train, test))
