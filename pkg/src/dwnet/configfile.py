"""Flat INI-style run configuration.

Sections and keys (all optional unless noted):

[solver]            used by gen-data
  system            kolmogorov | hasegawa_wakatani   (required)
  grid, frames, warmup_frames, output_dt, seed, dt, domain
  train_count, test_count      how many trajectories to generate (default 4/1)
  ic_amplitude, ic_gamma, ic_tau, velocity_floor
  reynolds, forcing_k, drag                    (forced turbulence)
  alpha, kappa, diff_n, diff_p                 (drift waves)

[train]             used by train / sweep / ablate-waves
  epochs, batch_size, lr_scale, history_length, loss

[model]             used by the single-cell train command
  family            unet_base | unet_mod | cnu_net | unet_deep | sine_net | dw_net
  width, waves, levels, padding (periodic | zero), norm_groups

[sweep]             used by sweep
  system            (required)
  families          comma list; multi-wave entries as name:waves, e.g. dw_net:3
  widths            e.g. 4, 8, 16
  seeds             default 2, 12, 22
  rollout_steps, metric (scaled_l2 | spectrum), levels, padding,
  spectrum_discard

[ablate]            used by ablate-waves
  families          multi-wave family names (sine_net, dw_net)
  waves             e.g. 2, 3, 4, 5
"""

from __future__ import annotations

import configparser
from dataclasses import fields as dataclass_fields
from pathlib import Path

from .models import Family, ModelConfig
from .solvers import (SolverConfig, hasegawa_wakatani_config, kolmogorov_config)
from .sweep import SweepSpec, default_seeds
from .tensor import PaddingMode
from .training import TrainConfig


def load_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = cp.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    return cp


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def parse_families(s: str) -> list[tuple[Family, int]]:
    out = []
    for item in s.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" in item:
            name, waves = item.split(":")
            out.append((Family(name.strip()), int(waves)))
        else:
            fam = Family(item)
            out.append((fam, 2 if fam in (Family.SINE_NET, Family.DW_NET) else 1))
    return out


def _padding(s: str) -> PaddingMode:
    return PaddingMode(s.strip().lower())


def solver_config_from(cp, seed_override=None) -> tuple[SolverConfig, int, int]:
    """Build the generator config plus (train_count, test_count)."""
    if "solver" not in cp:
        raise ValueError("config has no [solver] section")
    sec = cp["solver"]
    system = sec.get("system")
    if system is None:
        raise ValueError("[solver] needs a system")
    maker = {"kolmogorov": kolmogorov_config,
             "hasegawa_wakatani": hasegawa_wakatani_config}.get(system)
    if maker is None:
        raise ValueError(f"unknown system {system!r}")
    kw = {}
    float_keys = {"output_dt", "dt", "domain", "ic_amplitude", "ic_gamma",
                  "ic_tau", "velocity_floor", "reynolds", "drag", "alpha",
                  "kappa", "diff_n", "diff_p"}
    int_keys = {"grid", "frames", "warmup_frames", "seed", "forcing_k"}
    known = {f.name for f in dataclass_fields(SolverConfig)}
    for key in sec:
        if key in ("system", "train_count", "test_count"):
            continue
        if key not in known:
            raise ValueError(f"unknown [solver] key {key!r}")
        kw[key] = float(sec[key]) if key in float_keys else int(sec[key])
    if seed_override is not None:
        kw["seed"] = seed_override
    cfg = maker(**kw)
    return cfg, sec.getint("train_count", 4), sec.getint("test_count", 1)


def train_config_from(cp) -> TrainConfig:
    cfg = TrainConfig()
    if "train" in cp:
        sec = cp["train"]
        cfg = TrainConfig(
            epochs=sec.getint("epochs", cfg.epochs),
            batch_size=sec.getint("batch_size", cfg.batch_size),
            lr_scale=sec.getfloat("lr_scale", cfg.lr_scale),
            seed=sec.getint("seed", cfg.seed),
            history_length=sec.getint("history_length", cfg.history_length),
            loss=sec.get("loss", cfg.loss))
    cfg.validate()
    return cfg


def model_config_from(cp, in_channels: int, out_channels: int) -> ModelConfig:
    if "model" not in cp:
        raise ValueError("config has no [model] section")
    sec = cp["model"]
    fam = Family(sec.get("family", "unet_base"))
    default_waves = 2 if fam in (Family.SINE_NET, Family.DW_NET) else 1
    cfg = ModelConfig(
        family=fam, in_channels=in_channels, out_channels=out_channels,
        width=sec.getint("width", 4), levels=sec.getint("levels", 5),
        waves=sec.getint("waves", default_waves),
        padding=_padding(sec.get("padding", "periodic")),
        norm_groups=sec.getint("norm_groups", 4))
    cfg.validate()
    return cfg


def sweep_spec_from(cp) -> SweepSpec:
    if "sweep" not in cp:
        raise ValueError("config has no [sweep] section")
    sec = cp["sweep"]
    system = sec.get("system")
    if system is None:
        raise ValueError("[sweep] needs a system")
    spec = SweepSpec(
        system=system,
        families=parse_families(sec.get("families", "unet_base")),
        widths=_ints(sec.get("widths", "4, 8, 16")),
        seeds=_ints(sec.get("seeds", "")) or default_seeds(3),
        train=train_config_from(cp),
        rollout_steps=sec.getint("rollout_steps", 16),
        metric=sec.get("metric", "scaled_l2"),
        levels=sec.getint("levels", 5),
        padding=_padding(sec.get("padding", "periodic")),
        spectrum_discard=sec.getint("spectrum_discard", 100))
    spec.validate()
    return spec


def ablate_spec_from(cp) -> SweepSpec:
    spec = sweep_spec_from(cp)
    if "ablate" not in cp:
        raise ValueError("config has no [ablate] section")
    sec = cp["ablate"]
    fams = [Family(x.strip()) for x in sec.get("families", "sine_net, dw_net").split(",")
            if x.strip()]
    waves = _ints(sec.get("waves", "2, 3"))
    bad = [f.value for f in fams if f not in (Family.SINE_NET, Family.DW_NET)]
    if bad:
        raise ValueError(f"wave ablation needs multi-wave families, got {bad}")
    spec.families = [(f, w) for f in fams for w in waves]
    return spec
