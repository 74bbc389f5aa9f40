import json

import pytest

from idccrn_vae.config import (
    ExperimentConfig,
    apply_overrides,
    describe,
    desk_profile,
    get_profile,
    paper_profile,
)
from idccrn_vae.errors import ConfigurationError


def test_paper_profile_defaults():
    cfg = paper_profile()
    assert (cfg.stft.frame_length, cfg.stft.hop, cfg.stft.fft_length) == (400, 300, 512)
    assert cfg.network.channels == [32, 64, 128, 128, 256, 256]
    assert cfg.network.latent_dim == 128
    t = cfg.train
    assert (t.lr, t.disc_lr, t.batch_size, t.max_epochs) == (3e-4, 8e-5, 15, 1000)
    assert (t.lr_halving_patience, t.early_stop_patience) == (3, 20)
    assert t.snr_range == (-10.0, 15.0)
    assert (t.weights.beta, t.weights.alpha) == (0.01, 1.0)
    assert cfg.eval.test_snr_db == 0.0


def test_desk_profile_shrinks_network_only_where_documented():
    desk, paper = desk_profile(), paper_profile()
    assert desk.network.channels == [8, 16, 32, 32, 64, 64]
    assert desk.stft == paper.stft
    assert desk.train.weights == paper.train.weights

    def speech_seconds(c):
        return c.synth.n_speakers * c.synth.utterances_per_source * sum(c.synth.duration_range) / 2

    assert speech_seconds(desk) < speech_seconds(paper) / 10
    assert desk.train.max_epochs < paper.train.max_epochs


def test_json_round_trip_and_hash():
    cfg = desk_profile()
    back = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    assert apply_overrides(cfg, ["train.seed=5"]).config_hash() != cfg.config_hash()


def test_save_and_load(tmp_path):
    cfg = apply_overrides(paper_profile(), ["train.weights.beta=0.1"])
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(tmp_path / "bad.json")


def test_overrides_parse_json_values():
    cfg = apply_overrides(
        paper_profile(),
        ['network.channels=[4,4,4,4,4,4]', "train.snr_range=[0,5]", "train.finetune_latent=sample", "stft.hop=100"],
    )
    assert cfg.network.channels == [4, 4, 4, 4, 4, 4]
    assert cfg.train.snr_range == (0, 5)
    assert cfg.train.finetune_latent == "sample"
    assert cfg.stft.hop == 100


@pytest.mark.parametrize(
    "override",
    ["train.nope=1", "nope.x=1", "train.lr", "train.stage=bogus", "network.channels=[1,2]", "train.weights.beta=-1"],
)
def test_bad_overrides_are_configuration_errors(override):
    with pytest.raises(ConfigurationError):
        apply_overrides(paper_profile(), [override])


def test_unknown_keys_in_files_are_rejected():
    raw = paper_profile().to_dict()
    raw["train"]["typo_lr"] = 1
    with pytest.raises(ConfigurationError, match="train.typo_lr"):
        ExperimentConfig.from_dict(raw)


def test_profiles_and_describe():
    with pytest.raises(ConfigurationError):
        get_profile("huge")
    keys = dict(describe(paper_profile()))
    assert keys["train.weights.beta"] == 0.01
    assert keys["stft.hop"] == 300
    assert "synth.split_fractions" in keys
