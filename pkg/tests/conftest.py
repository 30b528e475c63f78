import numpy as np
import pytest
from hypothesis import settings

from cidetect._accel import HAVE_NUMBA, use_backend
from cidetect.ingest import Sample, Token, Utterance

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")

BACKENDS = ["numba", "numpy"] if HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    with use_backend(request.param):
        yield request.param


def make_sample(utterances, sid="s1", language="english", label="Patient", duration=10.0):
    """Build a Sample from lists of ``(form, upos[, head])`` tuples."""
    utts = []
    with_heads = False
    for j, utt in enumerate(utterances):
        toks = []
        for t in utt:
            form, upos = t[0], t[1]
            head = t[2] if len(t) > 2 else None
            with_heads |= head is not None
            toks.append(Token(form=form, lemma=t[3] if len(t) > 3 else form.lower(), upos=upos,
                              deprel=None if head is None else ("root" if head == 0 else "dep"),
                              head=head))
        utts.append(Utterance(tuple(toks), utterance_embedding_id=j))
    return Sample(sid, language, label, tuple(utts), duration, with_heads)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}  [{detail}]")
