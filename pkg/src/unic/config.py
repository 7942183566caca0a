"""Flat key=value run configuration.

One record per line, '#' starts a comment, no nesting. Unknown keys are
rejected. Defaults equal the final model configuration: image queries
with both instruction and condition keys, rotary positions in the
adapter, a dedicated injection query map, cross-modal interaction, and
cross-attention injection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .model import UnicModelConfig
from .training import DropoutSpec, MixtureSpec


class ConfigError(Exception):
    """Malformed configuration text or unknown key."""


@dataclass
class RunConfig:
    # model
    depth: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 2
    image_size: int = 32
    max_text_len: int = 32
    # architecture toggles (paper-final defaults)
    adapter_pe: str = "rope"
    backbone_rope: bool = False
    inject_mode: str = "cross"
    inject_keys: str = "both"
    inject_query: str = "img"
    inject_query_source: str = "pre"
    cross_q_new: bool = True
    interaction: str = "mmdit"
    inject_gate: bool = False
    adapter_timestep_cond: bool = True
    head_init_std: float = 0.125
    # training
    steps: int = 3000
    batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0
    log_every: int = 50
    ckpt_every: int = 1000
    seed: int = 0
    # dataset mixture
    mix_pixel: float = 0.4
    mix_subject: float = 0.5
    mix_style: float = 0.1
    # condition dropout
    p_drop_txt_pixel: float = 0.15
    p_drop_txt: float = 0.05
    p_drop_ist_con: float = 0.05
    p_drop_all: float = 0.05
    # guidance defaults
    sample_steps: int = 28
    sc_pixel: float = 1.3
    st_pixel: float = 3.0
    sc_subject: float = 1.2
    st_subject: float = 7.5
    sc_style: float = 3.0
    st_style: float = 6.0
    # paths
    data_dir: str = ""
    out_dir: str = ""

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELDS[key]
    if kind == "bool" or kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if kind == "int" or kind is int:
        try:
            return int(text)
        except ValueError as err:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from err
    if kind == "float" or kind is float:
        try:
            return float(text)
        except ValueError as err:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from err
    return text


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in asdict(cfg).items():
            fh.write(f"{key}={value}\n")


def model_config(cfg: RunConfig, vocab_size: int, dtype: str = "float32") -> UnicModelConfig:
    return UnicModelConfig(
        depth=cfg.depth,
        dim=cfg.dim,
        heads=cfg.heads,
        patch=cfg.patch,
        image_size=cfg.image_size,
        vocab_size=vocab_size,
        max_text_len=cfg.max_text_len,
        adapter_pe=cfg.adapter_pe,
        backbone_rope=cfg.backbone_rope,
        inject_mode=cfg.inject_mode,
        inject_keys=cfg.inject_keys,
        inject_query=cfg.inject_query,
        inject_query_source=cfg.inject_query_source,
        cross_q_new=cfg.cross_q_new,
        interaction=cfg.interaction,
        inject_gate=cfg.inject_gate,
        adapter_timestep_cond=cfg.adapter_timestep_cond,
        head_init_std=cfg.head_init_std,
        dtype=dtype,
    )


def mixture_spec(cfg: RunConfig) -> MixtureSpec:
    return MixtureSpec(pixel=cfg.mix_pixel, subject=cfg.mix_subject, style=cfg.mix_style)


def dropout_spec(cfg: RunConfig) -> DropoutSpec:
    return DropoutSpec(
        p_drop_txt_pixel=cfg.p_drop_txt_pixel,
        p_drop_txt=cfg.p_drop_txt,
        p_drop_ist_con=cfg.p_drop_ist_con,
        p_drop_all=cfg.p_drop_all,
    )


def guidance_scales(cfg: RunConfig, family: str) -> tuple:
    table = {
        "pixel": (cfg.sc_pixel, cfg.st_pixel),
        "subject": (cfg.sc_subject, cfg.st_subject),
        "style": (cfg.sc_style, cfg.st_style),
    }
    if family not in table:
        raise ConfigError(f"unknown task family {family!r}")
    return table[family]
