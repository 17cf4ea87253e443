import pytest

from vipt.config import (
    ConfigError,
    PromptConfig,
    dump_config,
    gradcheck_config,
    paper_config,
    parse_config,
    toy_config,
)


@pytest.mark.parametrize("factory", [paper_config, toy_config, gradcheck_config])
def test_dump_parse_round_trip(factory):
    cfg = factory()
    assert parse_config(dump_config(cfg)) == cfg


def test_preset_plus_overrides():
    cfg = parse_config("preset = paper\n\n[prompt]\nplacement = 1, 4\n[schedule]\nbase_lr = 1e-4\n")
    assert cfg.foundation.dim == 768
    assert cfg.prompt.layers(12) == (1, 4)
    assert cfg.schedule.base_lr == 1e-4
    assert cfg.schedule.decay_epoch == 48


def test_defaults_to_toy():
    assert parse_config("") == toy_config()


@pytest.mark.parametrize(
    "text, needle",
    [
        ("colour = red\n", "colour"),
        ("[prompt]\nwidth = 3\n", "width"),
        ("[optimizer]\nlr = 1\n", "optimizer"),
        ("preset = huge\n", "huge"),
        ("tune_mode = sometimes\n", "sometimes"),
        ("[schedule]\nepochs = many\n", "epochs"),
    ],
)
def test_rejections_name_the_offender(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_placement_outside_layers():
    with pytest.raises(ConfigError):
        PromptConfig(placement=(0, 2)).layers(4)
    with pytest.raises(ConfigError):
        PromptConfig(placement=(5,)).layers(4)


def test_full_scale_preset_values():
    cfg = paper_config()
    f, s = cfg.foundation, cfg.schedule
    assert (f.dim, f.layers, f.heads, f.ffn_dim, f.patch) == (768, 12, 12, 3072, 16)
    assert (f.n_z, f.n_x) == (64, 256)
    assert (s.epochs, s.base_lr, s.weight_decay, s.decay_epoch, s.decay_factor, s.batch_size) == (
        60,
        4e-5,
        1e-4,
        48,
        10.0,
        64,
    )
    assert cfg.prompt.latent == 8
