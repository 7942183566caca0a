"""Flat key=value config parsing and defaults."""

import pytest

from unic.config import (
    ConfigError,
    RunConfig,
    dropout_spec,
    guidance_scales,
    load_config,
    mixture_spec,
    model_config,
    parse_config,
    save_config,
)


def test_defaults_are_final_configuration():
    cfg = RunConfig()
    assert cfg.adapter_pe == "rope"
    assert cfg.inject_keys == "both"
    assert cfg.inject_query == "img"
    assert cfg.cross_q_new is True
    assert cfg.interaction == "mmdit"
    assert cfg.inject_mode == "cross"
    assert (cfg.mix_pixel, cfg.mix_subject, cfg.mix_style) == (0.4, 0.5, 0.1)
    assert (cfg.sc_pixel, cfg.st_pixel) == (1.3, 3.0)
    assert (cfg.sc_subject, cfg.st_subject) == (1.2, 7.5)
    assert (cfg.sc_style, cfg.st_style) == (3.0, 6.0)
    assert cfg.sample_steps == 28
    assert cfg.lr == 1e-4 and cfg.weight_decay == 0.01


def test_parse_values_comments_and_blank_lines():
    cfg = parse_config(
        """
        # a comment
        dim=32   # trailing comment
        steps=10
        adapter_pe=none
        inject_gate=false
        lr=2e-4
        """
    )
    assert cfg.dim == 32
    assert cfg.steps == 10
    assert cfg.adapter_pe == "none"
    assert cfg.inject_gate is False
    assert cfg.lr == 2e-4


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("not_a_key=1")


def test_duplicate_and_malformed_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("dim=8\ndim=16")
    with pytest.raises(ConfigError, match="key=value"):
        parse_config("dim 8")
    with pytest.raises(ConfigError, match="integer"):
        parse_config("dim=eight")
    with pytest.raises(ConfigError, match="boolean"):
        parse_config("inject_gate=maybe")


def test_save_load_roundtrip(tmp_path):
    cfg = RunConfig(dim=16, steps=42, adapter_pe="absolute", inject_gate=False)
    path = tmp_path / "run.cfg"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_model_config_carries_toggles():
    cfg = RunConfig(dim=16, heads=2, depth=2, interaction="dit", inject_keys="con")
    mc = model_config(cfg, vocab_size=64)
    assert mc.dim == 16 and mc.depth == 2
    assert mc.interaction == "dit"
    assert mc.inject_keys == "con"
    assert mc.vocab_size == 64


def test_spec_helpers():
    cfg = RunConfig()
    assert mixture_spec(cfg).weights == (0.4, 0.5, 0.1)
    d = dropout_spec(cfg)
    assert d.p_drop_txt_pixel == 0.15
    assert guidance_scales(cfg, "pixel") == (1.3, 3.0)
    assert guidance_scales(cfg, "subject") == (1.2, 7.5)
    assert guidance_scales(cfg, "style") == (3.0, 6.0)
    with pytest.raises(ConfigError):
        guidance_scales(cfg, "video")
