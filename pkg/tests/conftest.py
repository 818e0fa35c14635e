import logging
from pathlib import Path

import pytest
import torch

import mdlm
from mdlm.model import ModelConfig, init_parameters
from mdlm.trainer import TrainConfig, train
from mdlm.vocab import build_vocab, encode, read_lines

DATA = Path(mdlm.__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def vocab():
    return build_vocab(["merhaba dünya", "the quick brown fox", "çğıöşü ÇĞİÖŞÜ .,?!"], mode="char")


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ffn=32, vocab_size=len(vocab),
                       max_positions=48, seed=3, pad_id=vocab.pad_id)


@pytest.fixture
def tiny_model(tiny_config):
    return init_parameters(tiny_config)


@pytest.fixture(scope="session")
def english_vocab():
    return build_vocab(read_lines(DATA / "english_train.txt"), mode="char", max_size=128)


@pytest.fixture(scope="session")
def trained_toy(english_vocab):
    """A small model trained for a few hundred steps, shared by sampler tests."""
    torch.manual_seed(0)
    docs = [encode(english_vocab, t) for t in read_lines(DATA / "english_train.txt")[:160]]
    docs = [d for d in docs if len(d) <= 96]
    cfg = ModelConfig(n_layers=2, d_model=48, n_heads=4, d_ffn=96, vocab_size=len(english_vocab),
                      max_positions=384, seed=11, pad_id=english_vocab.pad_id)
    logging.getLogger("mdlm").setLevel(logging.ERROR)
    result = train(init_parameters(cfg), docs, TrainConfig(peak_lr=3e-3, micro_batch=16, epochs=20, seed=5),
                   vocab=english_vocab)
    return result.model, english_vocab


# -- acceptance reporting: one PASS/FAIL line per numbered criterion

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _ACCEPTANCE[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        verdict, title, detail = _ACCEPTANCE[number]
        line = f"{verdict} criterion {number}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
