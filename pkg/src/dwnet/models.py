"""Builders and forward passes for the six encoder-decoder families.

All families share the standardized skeleton: `levels` resolution levels with
a fixed channel ratio of 2 between them, GELU activations, group
normalization, two 3x3 convs per block (except the ConvNeXt and deep-block
variants), transposed-conv upsampling, and a 1x1 output head.

A model is built once into a flat instruction list (the "graph"), which is
interpreted by forward().  The same build pass emits one LayerRecord per
layer, so topology tests and parameter counting read the exact wiring that
executes.

Families:
  unet_base  classic U-Net: max-pool down, single bottleneck block
  unet_mod   residual blocks, learned 2x2/stride-2 downsampling, 3-block bottleneck
  cnu_net    ConvNeXt blocks (7x7 depthwise + 1x1 expand x4 + 1x1 contract)
  unet_deep  four convs per block with two internal residual skips
  sine_net   K full-resolution waves composed sequentially, avg-pool down,
             no feature exchange between waves beyond the composition itself
  dw_net     K waves with intra-wave skips plus cross-wave skip connections
             at matched resolution levels (concatenation); intermediate waves
             never touch level 0
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import PaddingMode, Tape, Tensor


class Family(enum.Enum):
    UNET_BASE = "unet_base"
    UNET_MOD = "unet_mod"
    CNU_NET = "cnu_net"
    UNET_DEEP = "unet_deep"
    SINE_NET = "sine_net"
    DW_NET = "dw_net"


SINGLE_WAVE = (Family.UNET_BASE, Family.UNET_MOD, Family.CNU_NET, Family.UNET_DEEP)
MULTI_WAVE = (Family.SINE_NET, Family.DW_NET)


@dataclass(frozen=True)
class ModelConfig:
    family: Family
    in_channels: int
    out_channels: int
    width: int = 4          # channels at the highest-resolution level
    levels: int = 5
    waves: int = 1
    padding: PaddingMode = PaddingMode.PERIODIC
    norm_groups: int = 4    # cap; a layer with C channels uses min(cap, C), or 1
                            # if that does not divide C

    def validate(self) -> None:
        if self.width < 4:
            raise ValueError("width must be at least 4")
        if self.levels < 2:
            raise ValueError("levels must be at least 2")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("need at least one input and one output channel")
        if self.family in SINGLE_WAVE and self.waves != 1:
            raise ValueError(f"{self.family.value} is single-wave; waves must be 1")
        if self.family in MULTI_WAVE and self.waves < 2:
            raise ValueError(f"{self.family.value} needs waves >= 2")
        if self.family is Family.DW_NET and self.levels < 3:
            raise ValueError("dw_net needs at least 3 levels")

    def width_at(self, level: int) -> int:
        return self.width * (2 ** level)


@dataclass(frozen=True)
class LayerRecord:
    """One row of describe(): what ran, where, and with which channels."""
    kind: str            # conv3x3 | conv1x1 | conv7x7dw | conv2x2s2 | convT2x2 |
                         # group_norm | gelu | max_pool | avg_pool | concat | add | block
    name: str            # parameter prefix for parameterized layers, block id for blocks
    in_channels: int
    out_channels: int
    level: int
    wave: int            # 1-based; 0 for the shared output head
    role: str            # e.g. block-conv, proj, down, up, intra-skip, cross-wave, head
    kernel: int = 0
    groups: int = 1


class _Builder:
    """Accumulates graph instructions, parameters, and layer records."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.nodes: list[tuple] = [("input",)]
        self.params: dict[str, np.ndarray] = {}
        self.layers: list[LayerRecord] = []
        self.channels: list[int] = [cfg.in_channels]

    def _param(self, name: str, shape, fan_in: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = self.rng.uniform(-bound, bound, shape).astype(np.float32)

    def conv(self, src: int, cin: int, cout: int, k: int, level: int, wave: int,
             role: str, name: str, stride: int = 1, groups: int = 1) -> int:
        fan_in = (cin // groups) * k * k
        self._param(name + ".weight", (cout, cin // groups, k, k), fan_in)
        self._param(name + ".bias", (cout,), fan_in)
        self.nodes.append(("conv", name, stride, groups, src))
        self.channels.append(cout)
        kind = {(1, False): "conv1x1", (3, False): "conv3x3",
                (7, True): "conv7x7dw", (2, False): "conv2x2s2"}[(k, groups == cin and cin > 1)]
        self.layers.append(LayerRecord(kind, name, cin, cout, level, wave, role, k, groups))
        return len(self.nodes) - 1

    def convT(self, src: int, cin: int, cout: int, level: int, wave: int,
              name: str) -> int:
        self._param(name + ".weight", (cin, cout, 2, 2), cin)
        self._param(name + ".bias", (cout,), cin)
        self.nodes.append(("convT", name, src))
        self.channels.append(cout)
        self.layers.append(LayerRecord("convT2x2", name, cin, cout, level, wave, "up", 2))
        return len(self.nodes) - 1

    def gn(self, src: int, c: int, level: int, wave: int, name: str) -> int:
        g = min(self.cfg.norm_groups, c)
        if c % g:
            g = 1
        self.params[name + ".gamma"] = np.ones(c, np.float32)
        self.params[name + ".beta"] = np.zeros(c, np.float32)
        self.nodes.append(("gn", name, g, src))
        self.channels.append(c)
        self.layers.append(LayerRecord("group_norm", name, c, c, level, wave, "norm",
                                       groups=g))
        return len(self.nodes) - 1

    def gelu(self, src: int, level: int, wave: int) -> int:
        c = self.channels[src]
        self.nodes.append(("gelu", src))
        self.channels.append(c)
        self.layers.append(LayerRecord("gelu", "", c, c, level, wave, "act"))
        return len(self.nodes) - 1

    def pool(self, src: int, kind: str, level: int, wave: int) -> int:
        c = self.channels[src]
        self.nodes.append((kind, src))
        self.channels.append(c)
        self.layers.append(LayerRecord(kind, "", c, c, level, wave, "down"))
        return len(self.nodes) - 1

    def concat(self, srcs: list[int], level: int, wave: int, role: str) -> int:
        cs = [self.channels[s] for s in srcs]
        self.nodes.append(("concat", tuple(srcs)))
        self.channels.append(sum(cs))
        self.layers.append(LayerRecord("concat", "", sum(cs), sum(cs), level, wave, role))
        return len(self.nodes) - 1

    def add(self, a: int, b: int, level: int, wave: int, role: str) -> int:
        c = self.channels[a]
        self.nodes.append(("add", a, b))
        self.channels.append(c)
        self.layers.append(LayerRecord("add", "", c, c, level, wave, role))
        return len(self.nodes) - 1

    def block_record(self, name: str, cin: int, cout: int, level: int, wave: int,
                     role: str) -> None:
        self.layers.append(LayerRecord("block", name, cin, cout, level, wave, role))


# ---------------------------------------------------------------------------
# block variants; each returns the output node index


def _double_block(g: _Builder, src: int, cin: int, cout: int, level: int,
                  wave: int, name: str) -> int:
    h = g.conv(src, cin, cout, 3, level, wave, "block-conv", f"{name}.conv1")
    h = g.gn(h, cout, level, wave, f"{name}.norm1")
    h = g.gelu(h, level, wave)
    h = g.conv(h, cout, cout, 3, level, wave, "block-conv", f"{name}.conv2")
    h = g.gn(h, cout, level, wave, f"{name}.norm2")
    h = g.gelu(h, level, wave)
    g.block_record(name, cin, cout, level, wave, "block")
    return h


def _res_block(g: _Builder, src: int, cin: int, cout: int, level: int,
               wave: int, name: str) -> int:
    h = g.conv(src, cin, cout, 3, level, wave, "block-conv", f"{name}.conv1")
    h = g.gn(h, cout, level, wave, f"{name}.norm1")
    h = g.gelu(h, level, wave)
    h = g.conv(h, cout, cout, 3, level, wave, "block-conv", f"{name}.conv2")
    h = g.gn(h, cout, level, wave, f"{name}.norm2")
    skip = src
    if cin != cout:
        skip = g.conv(src, cin, cout, 1, level, wave, "proj", f"{name}.proj")
    h = g.add(h, skip, level, wave, "residual")
    h = g.gelu(h, level, wave)
    g.block_record(name, cin, cout, level, wave, "block")
    return h


def _convnext_block(g: _Builder, src: int, cin: int, cout: int, level: int,
                    wave: int, name: str) -> int:
    x = src
    if cin != cout:
        x = g.conv(src, cin, cout, 1, level, wave, "proj", f"{name}.proj")
    h = g.conv(x, cout, cout, 7, level, wave, "block-conv", f"{name}.dw",
               groups=cout)
    h = g.gn(h, cout, level, wave, f"{name}.norm")
    h = g.conv(h, cout, 4 * cout, 1, level, wave, "expand", f"{name}.expand")
    h = g.gelu(h, level, wave)
    h = g.conv(h, 4 * cout, cout, 1, level, wave, "contract", f"{name}.contract")
    h = g.add(h, x, level, wave, "residual")
    g.block_record(name, cin, cout, level, wave, "block")
    return h


def _deep_block(g: _Builder, src: int, cin: int, cout: int, level: int,
                wave: int, name: str) -> int:
    h = g.conv(src, cin, cout, 3, level, wave, "block-conv", f"{name}.conv1")
    h = g.gn(h, cout, level, wave, f"{name}.norm1")
    h = g.gelu(h, level, wave)
    h = g.conv(h, cout, cout, 3, level, wave, "block-conv", f"{name}.conv2")
    h = g.gn(h, cout, level, wave, f"{name}.norm2")
    skip = src
    if cin != cout:
        skip = g.conv(src, cin, cout, 1, level, wave, "proj", f"{name}.proj")
    r1 = g.gelu(g.add(h, skip, level, wave, "residual"), level, wave)
    h = g.conv(r1, cout, cout, 3, level, wave, "block-conv", f"{name}.conv3")
    h = g.gn(h, cout, level, wave, f"{name}.norm3")
    h = g.gelu(h, level, wave)
    h = g.conv(h, cout, cout, 3, level, wave, "block-conv", f"{name}.conv4")
    h = g.gn(h, cout, level, wave, f"{name}.norm4")
    h = g.gelu(g.add(h, r1, level, wave, "residual"), level, wave)
    g.block_record(name, cin, cout, level, wave, "block")
    return h


_BLOCKS = {
    Family.UNET_BASE: _double_block,
    Family.UNET_MOD: _res_block,
    Family.CNU_NET: _convnext_block,
    Family.UNET_DEEP: _deep_block,
    Family.SINE_NET: _double_block,
    Family.DW_NET: _double_block,
}


# ---------------------------------------------------------------------------
# family wirings


def _single_wave_pass(g: _Builder, src: int, cin: int, wave: int, block,
                      pool: str, bottleneck_blocks: int) -> int:
    """One full encoder-decoder pass ending at level 0 with `width` channels.

    pool is 'max_pool', 'avg_pool', or 'conv' (learned 2x2 stride-2).
    """
    cfg = g.cfg
    bottom = cfg.levels - 1
    enc: dict[int, int] = {}
    cur = src
    for lv in range(bottom):
        c_in = cin if lv == 0 else cfg.width_at(lv - 1)
        cur = block(g, cur, c_in, cfg.width_at(lv), lv, wave, f"w{wave}.enc{lv}")
        enc[lv] = cur
        if pool == "conv":
            c = cfg.width_at(lv)
            cur = g.conv(cur, c, c, 2, lv + 1, wave, "down",
                         f"w{wave}.down{lv + 1}", stride=2)
        else:
            cur = g.pool(cur, pool, lv + 1, wave)
    for i in range(bottleneck_blocks):
        c_in = cfg.width_at(bottom - 1) if i == 0 else cfg.width_at(bottom)
        cur = block(g, cur, c_in, cfg.width_at(bottom), bottom, wave,
                    f"w{wave}.bneck{i}")
    for lv in range(bottom - 1, -1, -1):
        cur = g.convT(cur, cfg.width_at(lv + 1), cfg.width_at(lv), lv, wave,
                      f"w{wave}.up{lv}")
        cur = g.concat([cur, enc[lv]], lv, wave, "intra-skip")
        cur = block(g, cur, 2 * cfg.width_at(lv), cfg.width_at(lv), lv, wave,
                    f"w{wave}.dec{lv}")
    return cur


def _dw_wave(g: _Builder, entry: int, wave: int, first: bool, last: bool,
             cross: dict[int, int], level0_skip: Optional[int]) -> tuple[int, dict[int, int]]:
    """One wave of the multi-wave network.

    The first wave encodes from level 0 and its decoder stops at level 1;
    later waves enter at level 1 (pooling the previous wave's level-1 output)
    and receive the previous wave's decoder features via channel-wise
    concatenation at every level they visit.  Only the last wave decodes back
    to level 0, where it concatenates the first wave's level-0 encoder
    feature.  Returns (output node, per-level skip sources for the next wave).
    """
    cfg = g.cfg
    block = _double_block
    bottom = cfg.levels - 1
    enc: dict[int, int] = {}
    sources: dict[int, int] = {}

    if first:
        cur = block(g, entry, cfg.in_channels, cfg.width_at(0), 0, wave,
                    f"w{wave}.enc0")
        level0_feature = cur
        cur = g.pool(cur, "avg_pool", 1, wave)
        start = 1
    else:
        level0_feature = None
        cur = entry  # previous wave's level-1 output
        start = 2
        cur = g.pool(cur, "avg_pool", 2, wave)

    for lv in range(start, bottom):
        c_path = cfg.width_at(lv - 1)
        c_in = c_path
        if not first:
            cur = g.concat([cur, cross[lv]], lv, wave, "cross-wave")
            c_in = c_path + cfg.width_at(lv)
        cur = block(g, cur, c_in, cfg.width_at(lv), lv, wave, f"w{wave}.enc{lv}")
        enc[lv] = cur
        cur = g.pool(cur, "avg_pool", lv + 1, wave)

    c_in = cfg.width_at(bottom - 1)
    if not first:
        cur = g.concat([cur, cross[bottom]], bottom, wave, "cross-wave")
        c_in += cfg.width_at(bottom)
    cur = block(g, cur, c_in, cfg.width_at(bottom), bottom, wave, f"w{wave}.bneck0")
    sources[bottom] = cur

    for lv in range(bottom - 1, 0, -1):
        cur = g.convT(cur, cfg.width_at(lv + 1), cfg.width_at(lv), lv, wave,
                      f"w{wave}.up{lv}")
        if lv in enc:
            cur = g.concat([cur, enc[lv]], lv, wave, "intra-skip")
        else:
            cur = g.concat([cur, cross[lv]], lv, wave, "cross-wave")
        cur = block(g, cur, 2 * cfg.width_at(lv), cfg.width_at(lv), lv, wave,
                    f"w{wave}.dec{lv}")
        sources[lv] = cur

    if last:
        cur = g.convT(cur, cfg.width_at(1), cfg.width_at(0), 0, wave,
                      f"w{wave}.up0")
        cur = g.concat([cur, level0_skip], 0, wave, "cross-wave")
        cur = block(g, cur, 2 * cfg.width_at(0), cfg.width_at(0), 0, wave,
                    f"w{wave}.dec0")
    if first:
        sources[0] = level0_feature
    return cur, sources


def _build_graph(cfg: ModelConfig, rng: np.random.Generator) -> _Builder:
    g = _Builder(cfg, rng)
    fam = cfg.family
    if fam in SINGLE_WAVE:
        pool = "conv" if fam is Family.UNET_MOD else "max_pool"
        bneck = 3 if fam is Family.UNET_MOD else 1
        cur = _single_wave_pass(g, 0, cfg.in_channels, 1, _BLOCKS[fam], pool, bneck)
    elif fam is Family.SINE_NET:
        cur = 0
        for wave in range(1, cfg.waves + 1):
            cin = cfg.in_channels if wave == 1 else cfg.width
            cur = _single_wave_pass(g, cur, cin, wave, _double_block,
                                    "avg_pool", 1)
    else:  # DW_NET
        cur, sources = _dw_wave(g, 0, 1, first=True, last=False, cross={},
                                level0_skip=None)
        level0 = sources.pop(0)
        for wave in range(2, cfg.waves + 1):
            cur, sources = _dw_wave(g, cur, wave, first=False,
                                    last=(wave == cfg.waves), cross=sources,
                                    level0_skip=level0)
    g.conv(cur, cfg.width, cfg.out_channels, 1, 0, 0, "head", "head")
    return g


# ---------------------------------------------------------------------------
# the model object


class Model:
    """An instantiated network: config, named parameters, and the wiring."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 nodes: list[tuple], layers: list[LayerRecord]):
        self.config = config
        self.params = params
        self._nodes = nodes
        self.layers = layers

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise T.ShapeError(
                f"expected (N, {self.config.in_channels}, H, W), got {x.shape}")
        div = 2 ** (self.config.levels - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise T.ShapeError(
                f"spatial size {x.shape[2]}x{x.shape[3]} not divisible by {div}")

    def _run(self, x: Tensor, bound: dict[str, Tensor]) -> Tensor:
        cfg = self.config
        vals: list[Tensor] = []
        for nd in self._nodes:
            kind = nd[0]
            if kind == "input":
                vals.append(x)
            elif kind == "conv":
                _, name, stride, groups, src = nd
                vals.append(T.conv2d(vals[src], bound[name + ".weight"],
                                     bound[name + ".bias"], stride=stride,
                                     pad=cfg.padding, groups=groups))
            elif kind == "convT":
                _, name, src = nd
                vals.append(T.conv_transpose2d(vals[src], bound[name + ".weight"],
                                               bound[name + ".bias"]))
            elif kind == "gn":
                _, name, groups, src = nd
                vals.append(T.group_norm(vals[src], groups, bound[name + ".gamma"],
                                         bound[name + ".beta"]))
            elif kind == "gelu":
                vals.append(T.gelu(vals[nd[1]]))
            elif kind == "max_pool":
                vals.append(T.max_pool2(vals[nd[1]]))
            elif kind == "avg_pool":
                vals.append(T.avg_pool2(vals[nd[1]]))
            elif kind == "concat":
                vals.append(T.concat_channels([vals[s] for s in nd[1]]))
            elif kind == "add":
                vals.append(T.add(vals[nd[1]], vals[nd[2]]))
            else:  # pragma: no cover
                raise RuntimeError(f"unknown node kind {kind}")
        return vals[-1]

    def forward(self, x) -> Tensor:
        """Inference pass; no tape is recorded."""
        xt = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(xt.data)
        bound = {k: Tensor(v) for k, v in self.params.items()}
        return self._run(xt, bound)

    def forward_training(self, tape: Tape, x) -> tuple[Tensor, dict[str, Tensor]]:
        """Training pass: parameters become tape leaves; returns (out, leaves)."""
        xt = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(xt.data)
        bound = {k: tape.leaf(v, name=k) for k, v in self.params.items()}
        return self._run(xt, bound), bound


def build(config: ModelConfig, seed: int) -> Model:
    """Deterministically instantiate a model from its config and seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    g = _build_graph(config, rng)
    return Model(config, g.params, g.nodes, g.layers)


def param_count(model: Model) -> int:
    return sum(int(p.size) for p in model.params.values())


def describe(model: Model) -> list[LayerRecord]:
    """Ordered layer listing used by topology assertions and tooling."""
    return list(model.layers)


def format_description(model: Model) -> str:
    lines = [f"{model.config.family.value} width={model.config.width} "
             f"levels={model.config.levels} waves={model.config.waves} "
             f"params={param_count(model)}"]
    for r in model.layers:
        lines.append(f"  w{r.wave} L{r.level} {r.kind:<10} {r.in_channels:>4} -> "
                     f"{r.out_channels:<4} {r.role}{' ' + r.name if r.name else ''}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoint io

_MAGIC = b"DWNCKPT1"


def save_checkpoint(path, model: Model, extras: Optional[dict[str, np.ndarray]] = None):
    """Write magic, config record, then named float32 blobs (bit-exact)."""
    cfg = model.config
    cfg_json = json.dumps({
        "family": cfg.family.value, "in_channels": cfg.in_channels,
        "out_channels": cfg.out_channels, "width": cfg.width,
        "levels": cfg.levels, "waves": cfg.waves,
        "padding": cfg.padding.value, "norm_groups": cfg.norm_groups,
    }).encode()
    blobs = dict(model.params)
    for k, v in (extras or {}).items():
        if k in blobs:
            raise ValueError(f"extra blob name collides with a parameter: {k}")
        blobs[k] = v
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs.items():
            arr = np.asarray(arr, dtype="<f4")
            if not arr.flags.c_contiguous:
                arr = arr.copy()
            enc = name.encode()
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[Model, dict[str, np.ndarray]]:
    """Rebuild the model graph from the stored config and restore parameters."""
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (n,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(n).decode())
        cfg = ModelConfig(family=Family(meta["family"],),
                          in_channels=meta["in_channels"],
                          out_channels=meta["out_channels"],
                          width=meta["width"], levels=meta["levels"],
                          waves=meta["waves"],
                          padding=PaddingMode(meta["padding"]),
                          norm_groups=meta["norm_groups"])
        (nblobs,) = struct.unpack("<I", f.read(4))
        blobs: dict[str, np.ndarray] = {}
        for _ in range(nblobs):
            (ln,) = struct.unpack("<I", f.read(4))
            name = f.read(ln).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            blobs[name] = data.copy()
    model = build(cfg, seed=0)
    extras = {}
    for name, arr in blobs.items():
        if name in model.params:
            if model.params[name].shape != arr.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            model.params[name] = arr
        else:
            extras[name] = arr
    return model, extras
