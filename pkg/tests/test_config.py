import json

import pytest

from msadgn.config import ABLATIONS, Ablation, TrainConfig, load_config, save_config
from msadgn.errors import ConfigurationError


def test_defaults():
    c = TrainConfig()
    assert (c.K, c.n_classes, c.signal_len, c.epochs, c.batch_size) == (3, 3, 512, 50, 32)
    assert (c.lr, c.lr_decay, c.decay_epochs, c.alpha) == (1e-4, 0.5, 10, 0.2)
    assert c.embedding_dim == 64 * 32


def test_m1_disables_everything():
    a = Ablation.from_name("M1")
    assert not any([a.pseudolabel, a.similarity, a.dynamic_threshold, a.global_prototypes, a.invariant, a.specific])


def test_m7_enables_everything():
    a = Ablation.from_name("m7")
    assert all([a.pseudolabel, a.similarity, a.dynamic_threshold, a.global_prototypes, a.invariant, a.specific])


@pytest.mark.parametrize("name,off", [
    ("M2", {"similarity", "dynamic_threshold", "global_prototypes"}),
    ("M3", {"dynamic_threshold"}),
    ("M4", {"global_prototypes"}),
    ("M5", {"invariant"}),
    ("M6", {"specific"}),
])
def test_single_switch_variants(name, off):
    a = Ablation.from_name(name)
    flags = {k for k, v in a.__dict__.items() if not v}
    assert flags == off


def test_unknown_ablation():
    with pytest.raises(ConfigurationError):
        TrainConfig(ablation="M8")


@pytest.mark.parametrize("kw", [
    {"K": 0}, {"epochs": 0}, {"batch_size": -1}, {"lr": 0.0}, {"lr_decay": 1.5}, {"alpha": 1.2},
    {"alpha": -0.1}, {"channels": (8, 16)}, {"fc_hidden": (0, 4)}, {"discriminator": "triple"},
    {"similarity_temperature": 0.0}, {"init_std": -1.0}, {"pads": (1, 1, 1, -1)},
])
def test_invalid(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_conv_stack_too_deep():
    with pytest.raises(ConfigurationError):
        TrainConfig(signal_len=4, kernels=(5, 5, 5, 5), pads=(0, 0, 0, 0)).embedding_dim


def test_lr_schedule():
    c = TrainConfig()
    for e in range(1, 51):
        assert c.lr_at(e) == 1e-4 * 0.5 ** ((e - 1) // 10)
    assert c.lr_at(10) == 1e-4 and c.lr_at(11) == 5e-5 and c.lr_at(50) == 1e-4 / 16


def test_dict_round_trip():
    c = TrainConfig(K=4, channels=(4, 8, 8, 8), seed=9, ablation="M3")
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_unknown_key():
    with pytest.raises(ConfigurationError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_hash_stable_and_sensitive():
    assert TrainConfig().config_hash() == TrainConfig().config_hash()
    assert TrainConfig().config_hash() != TrainConfig(seed=1).config_hash()
    assert len(TrainConfig().config_hash()) == 16


def test_json_and_toml(tmp_path):
    c = TrainConfig(epochs=3, signal_len=64, ablation="M5")
    save_config(c, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == c
    (tmp_path / "c.toml").write_text('epochs = 3\nsignal_len = 64\nablation = "M5"\nchannels = [8, 16, 32, 64]\n')
    assert load_config(tmp_path / "c.toml") == c


def test_load_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "bad.json")


def test_all_names_resolve():
    assert [Ablation.from_name(n) for n in ABLATIONS]
