import configparser
import dataclasses

import pytest

from mdlm import config as C
from mdlm.evaluation import EvalConfig
from mdlm.generator import LONG, SHORT, GeneratorConfig
from mdlm.lora import LoraConfig
from mdlm.model import ModelConfig
from mdlm.trainer import TrainConfig


def test_presets_ship_with_the_package():
    for name in C.PRESETS:
        assert C.preset_path(name).is_file()
    with pytest.raises(ValueError):
        C.preset_path("medium")


@pytest.mark.parametrize("name, expected", [("long", LONG), ("short", SHORT)])
def test_preset_generate_section_matches_constants(name, expected):
    raw = C.read_ini(C.preset_path(name))
    assert C.build(GeneratorConfig, C.section(raw, "generate")) == expected


@pytest.mark.parametrize("name", C.PRESETS)
def test_every_preset_section_builds(name):
    raw = C.read_ini(C.preset_path(name))
    C.build(ModelConfig, {"vocab_size": 100}, C.section(raw, "model"))
    C.build(LoraConfig, C.section(raw, "lora"))
    C.build(EvalConfig, C.section(raw, "eval"))
    for overlay in ("pretrain", "cpt", "sft1", "sft2"):
        C.build(TrainConfig, C.section(raw, "train", overlay))


def test_overlay_and_precedence(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\npeak_lr = 1e-3\nmicro_batch = 4  # inline comment\n"
                    "[train.cpt]\npeak_lr = 2e-4\n", encoding="utf-8")
    raw = C.read_ini(path)
    assert C.section(raw, "train") == {"peak_lr": "1e-3", "micro_batch": "4"}
    assert C.section(raw, "train", "cpt")["peak_lr"] == "2e-4"
    assert C.section(raw, "train", "sft1")["peak_lr"] == "1e-3"

    cfg = C.build(TrainConfig, C.section(raw, "train", "cpt"), {"micro_batch": 16, "epochs": None})
    assert cfg.peak_lr == 2e-4
    assert cfg.micro_batch == 16
    # a None flag means "not given" and leaves the lower layer alone
    assert cfg.epochs == TrainConfig().epochs


def test_no_file_is_empty():
    assert C.read_ini(None) == {}
    assert C.section({}, "eval") == {}
    assert C.build(EvalConfig) == EvalConfig()


def test_unknown_key_raises():
    with pytest.raises(KeyError, match="lerning_rate"):
        C.build(TrainConfig, {"lerning_rate": "0.1"})


def test_duplicate_key_is_rejected(tmp_path):
    path = tmp_path / "dup.ini"
    path.write_text("[eval]\nmask_prob = 0.1\nmask_prob = 0.2\n", encoding="utf-8")
    with pytest.raises(configparser.Error):
        C.read_ini(path)


@dataclasses.dataclass
class Sample:
    flag: bool = False
    count: int = 0
    rate: float = 0.0
    names: tuple = ()
    limit: int | None = 5
    label: str = ""


@pytest.mark.parametrize("key, text, value", [
    ("flag", "yes", True), ("flag", "Off", False), ("flag", "1", True),
    ("count", "42", 42), ("count", "1e3", 1000),
    ("rate", "3e-4", 3e-4),
    ("names", "W_q, W_v ,", ("W_q", "W_v")),
    ("limit", "none", None), ("limit", "", None), ("limit", "7", 7),
    ("label", "  sft ", "sft"),
])
def test_coercion(key, text, value):
    assert getattr(C.build(Sample, {key: text}), key) == value


def test_bad_boolean():
    with pytest.raises(ValueError):
        C.build(Sample, {"flag": "maybe"})


def test_typed_values_pass_through():
    assert C.build(Sample, {"names": ("a",), "count": 3}).names == ("a",)
