import datetime as dt

import numpy as np
import pytest

from ordinal_siamese import tensor as T
from ordinal_siamese.cohort import Diagnosis, Exam, ParticipantRecord
from ordinal_siamese.encoder import EncoderConfig

MCI, AD, NL = Diagnosis.MCI, Diagnosis.AD, Diagnosis.NORMAL


def make_record(pid, diagnoses, start=dt.date(2006, 1, 15)):
    exams = []
    for i, d in enumerate(diagnoses):
        exams.append(Exam(start + dt.timedelta(days=365 * i), d, f"{pid}_{i:02d}.vol"))
    return ParticipantRecord(pid, tuple(exams))


def timeline_cohort():
    """One participant per labeling case.

    Includes a 9-scan progressor, a short progressor, one with a normal
    exam before MCI, a stable MCI, an AD-only participant and a
    participant who stays normal.
    """
    return [
        make_record("S01", [MCI] * 8 + [AD]),
        make_record("S02", [MCI, MCI, AD, AD]),
        make_record("S03", [NL, MCI, MCI, MCI, AD]),
        make_record("S04", [MCI, MCI, MCI]),
        make_record("S05", [AD, AD]),
        make_record("S06", [NL, NL]),
    ]


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, abs_tol=1e-7):
    err = np.abs(analytic - numeric)
    bound = np.maximum(abs_tol, rel * np.maximum(np.abs(analytic), np.abs(numeric)))
    bad = err > bound
    assert not bad.any(), f"max err {err.max():.3e}; {bad.sum()} entries out of tolerance"


def taped_grads(fn, *arrays):
    """Run ``fn`` on taped copies of ``arrays``; return (value, [grad per input])."""
    tape = T.Tape()
    ts = [tape.watch(np.array(a, dtype=np.float64)) for a in arrays]
    out = fn(*ts)
    grads = T.backward(tape, out)
    return out.item(), [grads[t.grad_id].data for t in ts]


@pytest.fixture
def tiny_encoder_cfg():
    return EncoderConfig(input_shape=(1, 4, 4, 4), stem_channels=2, stem_stride=1,
                         stages=((1, 2, 1), (1, 3, 2)), head_dims=(4, 3), embedding_dim=3)


# one PASS/FAIL line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
