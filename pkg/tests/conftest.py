import numpy as np
import pytest

from cvlnet.data_io import SynthSpec, encode_dataset, synth_generate
from cvlnet.model import CvlModel, ModelConfig
from cvlnet.representation import Vocabulary


def small_setup(n=6, seed=0, hidden=16, heads=2, **model_kw):
    """A few synthetic samples, encoded for a narrow model."""
    synth = synth_generate(SynthSpec(n_samples=n, seed=seed, n_rois=4, visual_dim=6, max_len=16, max_words=8))
    vocab = Vocabulary.build(r.text for r in synth.records)
    batch = encode_dataset(synth.records, {f.id: f for f in synth.features}, vocab, 16, 4, 6,
                           {k.sample_id: k for k in synth.keywords})
    cfg = ModelConfig(vocab_size=len(vocab), hidden=hidden, heads=heads, max_len=16, max_rois=4, visual_dim=6,
                      **model_kw)
    return CvlModel(cfg, seed=seed, vocab=vocab), batch, synth


@pytest.fixture
def small():
    return small_setup(seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")
