"""Flat key=value run configuration.

Files hold one ``section.key = value`` pair per line (# comments allowed);
unknown keys are rejected. ``config_text`` renders the canonical sorted form
echoed into every output directory, which reproduces the run when fed back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple:
    return tuple(int(tok) for tok in s.split(",") if tok.strip())


def _parse_opt_int(s: str):
    return None if s.strip() == "" else int(s)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


# key -> (parser, default). The single source of truth for known keys.
KNOWN_KEYS = {
    "model.variant": (str, "parsecaps"),
    "model.image_hw": (int, 28),
    "model.in_channels": (int, 1),
    "model.stem_channels": (_parse_int_list, (16, 32, 32, 32)),
    "model.stem_strides": (_parse_int_list, (2, 2, 1, 1)),
    "model.primary_dim": (int, 8),
    "model.block_cells": (_parse_int_list, (1, 2, 5)),
    "model.block_dims": (_parse_int_list, (16, 36, 64)),
    "model.n_class": (int, 10),
    "model.d_class": (_parse_opt_int, None),
    "model.m": (int, 16),
    "model.d_c": (int, 8),
    "model.d_e": (int, 16),
    "model.alpha": (float, 1.5),
    "model.dropout": (float, 0.25),
    "model.decoder_channels": (_parse_int_list, (32, 32, 16, 8)),
    "loss.mode": (str, "unsupervised"),
    "loss.lambda": (float, 0.5),
    "loss.eta": (float, 0.1),
    "loss.gamma": (float, 0.0005),
    "loss.t_plus": (float, 0.9),
    "loss.t_minus": (float, 0.1),
    "loss.t_triplet": (float, 0.2),
    "loss.use_presentation": (_parse_bool, True),
    "loss.use_triplet": (_parse_bool, True),
    "loss.use_reconstruction": (_parse_bool, True),
    "data.source": (str, "synthetic-digits"),
    "data.dir": (str, "data"),
    "data.train_images": (str, ""),
    "data.train_labels": (str, ""),
    "data.test_images": (str, ""),
    "data.test_labels": (str, ""),
    "data.n_train": (int, 2000),
    "data.n_test": (int, 1000),
    "data.m": (int, 7),
    "data.seed": (int, 1234),
    "train.epochs": (int, 10),
    "train.batch_size": (int, 64),
    "train.lr": (float, 2.5e-3),
    "train.weight_decay": (float, 5e-4),
    "train.warmup_epochs": (int, 5),
    "train.seed": (int, 0),
    "train.prefetch": (_parse_bool, True),
    "bench.conv_channels": (int, 16),
    "bench.d1": (int, 8),
    "bench.d_class": (int, 16),
    "bench.iterations": (int, 3),
    "bench.batch_size": (int, 32),
    "bench.flop_conv_channels": (int, 256),
}

PRESETS = {
    "mnist-small": """
        # ParseCaps-mini on the 28x28 digit corpus, unsupervised concepts.
        model.block_cells = 1,1,1
        model.block_dims = 16,16,16
        loss.mode = unsupervised
    """,
    "mnist-baseline": """
        # Width-constant baseline of mnist-small.
        model.variant = baseline
        model.block_cells = 1,1,1
        model.block_dims = 16,16,16
        loss.mode = unsupervised
    """,
    "mnist-table4": """
        # The narrow schedule (196,2)->(49,4)->(16,8)->(4,16)->(1,16).
        model.stem_strides = 2,1,1,1
        model.stem_channels = 16,16,16,16
        model.primary_dim = 2
        model.block_cells = 1,2,5
        model.block_dims = 4,8,16
        model.d_class = 16
    """,
    "concepts-m7": """
        # Supervised concept training on the synthetic 32x32 concept set.
        model.image_hw = 32
        model.block_cells = 1,1
        model.block_dims = 16,16
        model.n_class = 8
        model.m = 7
        model.d_c = 8
        loss.mode = supervised
        data.source = synthetic-concepts
        data.m = 7
        data.n_test = 500
    """,
}


def parse_config(text: str) -> dict:
    """Parse key=value lines on top of the defaults; unknown keys fail."""
    cfg = {key: default for key, (_, default) in KNOWN_KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser, _ = KNOWN_KEYS[key]
        try:
            cfg[key] = parser(value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path_or_preset: str) -> dict:
    """Read a config file, or fall back to a named preset."""
    import os
    if os.path.exists(path_or_preset):
        with open(path_or_preset) as fh:
            return parse_config(fh.read())
    if path_or_preset in PRESETS:
        return parse_config(PRESETS[path_or_preset])
    raise ConfigError(
        f"{path_or_preset!r} is neither a config file nor a preset "
        f"(presets: {', '.join(sorted(PRESETS))})")


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply repeatable --set key=value pairs."""
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        parser, _ = KNOWN_KEYS[key]
        out[key] = parser(value)
    return out


def config_text(cfg: dict) -> str:
    """Canonical sorted rendering; feeding it back reproduces the run."""
    return "\n".join(f"{k} = {_fmt(cfg[k])}" for k in sorted(cfg)) + "\n"


def loss_weights_from(cfg: dict) -> LossWeights:
    return LossWeights(
        lam=cfg["loss.lambda"],
        eta=cfg["loss.eta"],
        gamma=cfg["loss.gamma"],
        t_plus=cfg["loss.t_plus"],
        t_minus=cfg["loss.t_minus"],
        t_triplet=cfg["loss.t_triplet"],
    )


def model_config_from(cfg: dict, seed: Optional[int] = None) -> ModelConfig:
    return ModelConfig(
        image_hw=cfg["model.image_hw"],
        in_channels=cfg["model.in_channels"],
        stem_channels=cfg["model.stem_channels"],
        stem_strides=cfg["model.stem_strides"],
        primary_dim=cfg["model.primary_dim"],
        block_cells=cfg["model.block_cells"],
        block_dims=cfg["model.block_dims"],
        n_class=cfg["model.n_class"],
        d_class=cfg["model.d_class"],
        m=cfg["model.m"],
        d_c=cfg["model.d_c"],
        d_e=cfg["model.d_e"],
        alpha=cfg["model.alpha"],
        dropout=cfg["model.dropout"],
        decoder_channels=cfg["model.decoder_channels"],
        loss_mode=cfg["loss.mode"],
        weights=loss_weights_from(cfg),
        use_presentation=cfg["loss.use_presentation"],
        use_triplet=cfg["loss.use_triplet"],
        use_reconstruction=cfg["loss.use_reconstruction"],
        seed=cfg["train.seed"] if seed is None else seed,
    )


@dataclass
class RunConfig:
    """One CLI invocation: subcommand, resolved config, output directory."""

    subcommand: str
    cfg: dict
    out_dir: str
    seed: int
