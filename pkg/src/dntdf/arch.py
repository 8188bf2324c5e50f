"""Encoder profiles and the densely nested top-down decoder.

Stage bookkeeping: the encoder yields E_1..E_5 where E_i has depth d_i and
side length h / 2**i. Side compression gives F_i with depth f_i = d_i / r.
Decoder stage j (j = 1..5) works at the resolution of F_s with s = 6 - j and
emits D_j one octave finer. Shortcut paths start at F_i for the ``pcsp_count``
topmost i and feed every stage j >= 7 - i.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .nn import (CompressionUnit, Conv2d, FusionUnit, Module, ModuleDict, ModuleList, PPM, parameter,
                 round_half_up)
from .tensor import Function, MetaTensor, ShapeError, Tensor, TraceRecord, tracing

DEFAULT_PPM_BINS = (1, 2, 3, 6)
STAGES = (1, 2, 3, 4, 5)


class ConfigError(ValueError):
    """Invalid profile / decoder configuration or input size."""


# --------------------------------------------------------------------------
# profiles and configuration


@dataclass(frozen=True)
class BackboneProfile:
    name: str
    depths: tuple[int, int, int, int, int]
    trainable: bool = False
    default_r: int = 4
    encoder: str = "stub"  # "tiny" | "resnet50" | "stub"

    def __post_init__(self):
        if len(self.depths) != 5 or any(d < 1 for d in self.depths):
            raise ConfigError(f"profile {self.name!r} needs five positive stage depths, got {self.depths}")

    def depth(self, i: int) -> int:
        """d_i for i in 1..5, with d_0 := d_1."""
        return self.depths[max(i, 1) - 1]


PROFILES = {
    "resnet50": BackboneProfile("resnet50", (64, 256, 512, 1024, 2048), default_r=4, encoder="resnet50"),
    "efficientnet-b0": BackboneProfile("efficientnet-b0", (16, 24, 40, 112, 320), default_r=2),
    "efficientnet-b3": BackboneProfile("efficientnet-b3", (24, 32, 48, 136, 384), default_r=2),
    "tiny": BackboneProfile("tiny", (8, 16, 32, 64, 128), trainable=True, default_r=2, encoder="tiny"),
}


def tiny_profile(widths: Sequence[int] = (8, 16, 32, 64, 128)) -> BackboneProfile:
    return BackboneProfile("tiny", tuple(int(w) for w in widths), trainable=True, default_r=2, encoder="tiny")


def get_profile(name: str) -> BackboneProfile:
    try:
        return PROFILES[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown backbone {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class DecoderConfig:
    r: int = 4
    d_g: Optional[int] = None            # default: d_5 / r
    ppm_bins: Optional[tuple] = None     # default: (1, 2, 3, 6) restricted to the top map size
    pcsp_count: int = 4
    ppm_enabled: bool = True
    fusion: str = "sum"                  # "sum" | "concat"
    ppm_source: str = "encoder"          # PPM branches pool E_5 ("encoder") or F_5 ("compressed")

    def validate(self, profile: BackboneProfile) -> None:
        if int(self.r) != self.r or self.r < 1:
            raise ConfigError(f"compression ratio must be a positive integer, got {self.r}")
        for i, d in enumerate(profile.depths, 1):
            if Fraction(d, self.r) < 1:
                raise ConfigError(f"r={self.r} compresses d_{i}={d} below one channel")
        if not 0 <= self.pcsp_count <= 4:
            raise ConfigError(f"pcsp_count must be in 0..4, got {self.pcsp_count}")
        if self.fusion not in ("sum", "concat"):
            raise ConfigError(f"fusion must be 'sum' or 'concat', got {self.fusion!r}")
        if self.ppm_source not in ("encoder", "compressed"):
            raise ConfigError(f"ppm_source must be 'encoder' or 'compressed', got {self.ppm_source!r}")

    def side_depth(self, profile: BackboneProfile, i: int) -> int:
        """f_i = d_i / r (round half up); f_0 := f_1."""
        return round_half_up(Fraction(profile.depth(i), self.r))

    def global_depth(self, profile: BackboneProfile) -> int:
        return self.d_g if self.d_g is not None else self.side_depth(profile, 5)

    def sources(self) -> list[int]:
        """Encoder stages that own a shortcut path, topmost first."""
        return list(range(5, 5 - self.pcsp_count, -1))


def check_input_size(input_size) -> tuple[int, int]:
    h, w = (input_size, input_size) if np.isscalar(input_size) else tuple(input_size)
    if h % 32 or w % 32 or h < 32 or w < 32:
        raise ConfigError(f"input size must be a positive multiple of 32, got {h}x{w}")
    return int(h), int(w)


def stage_size(input_size, i: int) -> tuple[int, int]:
    h, w = check_input_size(input_size)
    return h >> i, w >> i


# --------------------------------------------------------------------------
# shortcut plan


@dataclass(frozen=True)
class Hop:
    source: int
    stage: int
    in_depth: int
    out_depth: int
    conv_size: tuple[int, int]   # resolution the 1x1 projection runs at
    out_size: tuple[int, int]    # working resolution of ``stage``


@dataclass
class ShortcutPlan:
    hops: dict[tuple[int, int], Hop] = field(default_factory=dict)

    def stages_for(self, source: int) -> list[int]:
        return sorted(j for (i, j) in self.hops if i == source)

    def sources_for(self, stage: int) -> list[int]:
        return sorted(i for (i, j) in self.hops if j == stage)

    def depth(self, source: int, stage: int) -> int:
        return self.hops[(source, stage)].out_depth

    def ratio(self, source: int, stage: int) -> Fraction:
        """Per-hop compression ratio (input depth over output depth)."""
        hop = self.hops[(source, stage)]
        return Fraction(hop.in_depth, hop.out_depth)


def plan_shortcuts(profile: BackboneProfile, cfg: DecoderConfig, input_size) -> ShortcutPlan:
    """Resolve every shortcut hop.

    Each hop into stage j scales depth by d_{6-j} / d_{7-j}, so the path from
    F_i reaches stage j with depth f_i * d_{6-j} / d_i (rounded once, half up).
    The 1x1 projection runs at the previous resolution and is followed by a
    bilinear x2, so the first hop also brings F_i up to its first stage.
    """
    plan = ShortcutPlan()
    for i in cfg.sources():
        f_i = cfg.side_depth(profile, i)
        prev = f_i
        for j in range(7 - i, 6):
            out = round_half_up(Fraction(f_i * profile.depth(6 - j), profile.depth(i)))
            plan.hops[(i, j)] = Hop(i, j, prev, out, stage_size(input_size, 7 - j), stage_size(input_size, 6 - j))
            prev = out
    return plan


# --------------------------------------------------------------------------
# encoders


class TinyBackbone(Module):
    """Five stride-2 3x3 conv + ReLU blocks; E_i is the output of block i."""

    component = "encoder"

    def __init__(self, widths: Sequence[int], rng=None, in_channels: int = 3) -> None:
        super().__init__()
        chans = [in_channels, *widths]
        self.blocks = ModuleList([Conv2d(chans[k], chans[k + 1], 3, rng, stride=2, padding=1) for k in range(5)])

    def forward(self, x):
        feats = []
        for conv in self.blocks:
            x = ops.relu(conv(x))
            feats.append(x)
        return feats


class FrozenBN(Module):
    def __init__(self, c: int, rng=None) -> None:
        super().__init__()
        if rng is None:
            self.weight = parameter((c,), None, name="weight")
            self.bias = parameter((c,), None, name="bias")
        else:
            self.weight = Tensor(np.ones(c, np.float32), requires_grad=True, name="weight")
            self.bias = Tensor(np.zeros(c, np.float32), requires_grad=True, name="bias")

    def forward(self, x):
        return ops.channel_affine(x, self.weight, self.bias)


class Bottleneck(Module):
    def __init__(self, c_in: int, mid: int, stride: int, rng=None) -> None:
        super().__init__()
        c_out = mid * 4
        self.conv1 = Conv2d(c_in, mid, 1, rng, bias=False)
        self.bn1 = FrozenBN(mid, rng)
        self.conv2 = Conv2d(mid, mid, 3, rng, stride=stride, padding=1, bias=False)
        self.bn2 = FrozenBN(mid, rng)
        self.conv3 = Conv2d(mid, c_out, 1, rng, bias=False)
        self.bn3 = FrozenBN(c_out, rng)
        self.has_down = stride != 1 or c_in != c_out
        if self.has_down:
            self.down = Conv2d(c_in, c_out, 1, rng, stride=stride, padding=0, bias=False)
            self.down_bn = FrozenBN(c_out, rng)

    def forward(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = ops.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        skip = self.down_bn(self.down(x)) if self.has_down else x
        return ops.relu(ops.add(y, skip))


class ResNet50(Module):
    """torchvision-layout ResNet-50 without the classifier (stride on the 3x3 conv)."""

    component = "encoder"

    def __init__(self, rng=None) -> None:
        super().__init__()
        self.conv1 = Conv2d(3, 64, 7, rng, stride=2, padding=3, bias=False)
        self.bn1 = FrozenBN(64, rng)
        c_in = 64
        layers = []
        for mid, blocks, stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)):
            seq = []
            for b in range(blocks):
                seq.append(Bottleneck(c_in, mid, stride if b == 0 else 1, rng))
                c_in = mid * 4
            layers.append(ModuleList(seq))
        self.layers = ModuleList(layers)

    def forward(self, x):
        x = ops.relu(self.bn1(self.conv1(x)))
        feats = [x]
        x = ops.max_pool2d(x, 3, 2, 1)
        for layer in self.layers:
            for block in layer:
                x = block(x)
            feats.append(x)
        return feats


class EncoderStub(Function):
    """Zero-cost placeholder for a backbone modelled only by its stage shapes."""

    tag = "encoder_stub"

    @staticmethod
    def infer_shape(x, depth, level):
        return (x[0], depth, x[2] >> level, x[3] >> level)

    def forward(self, x, depth, level):
        raise NotImplementedError("this backbone is structural only; it has no executable weights")


class StubEncoder(Module):
    component = "encoder"

    def __init__(self, profile: BackboneProfile) -> None:
        super().__init__()
        self.depths = profile.depths

    def forward(self, x):
        return [EncoderStub.apply(x, depth=d, level=i) for i, d in enumerate(self.depths, 1)]


def build_encoder(profile: BackboneProfile, rng=None) -> Module:
    if profile.encoder == "tiny":
        return TinyBackbone(profile.depths, rng)
    if profile.encoder == "resnet50":
        return ResNet50(rng)
    return StubEncoder(profile)


# --------------------------------------------------------------------------
# decoder


class ShortcutPath(Module):
    """Linear shortcut from F_i: per hop a bias-free 1x1 projection then bilinear x2."""

    component = "pcsp"

    def __init__(self, source: int, plan: ShortcutPlan, rng=None) -> None:
        super().__init__()
        self.source = source
        self.stages = plan.stages_for(source)
        self.hops = ModuleDict()
        for j in self.stages:
            hop = plan.hops[(source, j)]
            self.hops[j] = CompressionUnit(hop.in_depth, hop.out_depth, rng, relu=False, bias=False)

    def forward(self, f_i, sizes: dict, upto: Optional[int] = None) -> dict:
        """Return {j: F_{i->j}} for every stage up to ``upto`` (default: all)."""
        out = {}
        x = f_i
        for j in self.stages:
            if upto is not None and j > upto:
                break
            x = ops.bilinear_resize(self.hops[j](x), *sizes[j])
            out[j] = x
        return out


class GlobalBranch(Module):
    """G_j: compress the global feature to the stage depth and resize to the stage resolution."""

    component = "ppm"

    def __init__(self, d_g: int, c_out: int, rng=None) -> None:
        super().__init__()
        self.unit = CompressionUnit(d_g, c_out, rng)

    def forward(self, g, size):
        return ops.bilinear_resize(self.unit(g), *size)


class DecoderStage(Module):
    component = "decoder"

    def __init__(self, c_in: int, c_out: int, rng=None, mode: str = "sum") -> None:
        super().__init__()
        self.fuse = FusionUnit(c_in, c_out, rng, mode=mode)

    def forward(self, inputs, size):
        return ops.bilinear_resize(self.fuse(list(inputs)), *size)


class PredictionHead(Module):
    component = "head"

    def __init__(self, c_in: int, rng=None) -> None:
        super().__init__()
        self.unit = CompressionUnit(c_in, 1, rng)

    def forward(self, d, size):
        return ops.sigmoid(ops.bilinear_resize(self.unit(d), *size))


def _tag(module: Module, component: str) -> Module:
    """Attribute ``module`` and its untagged descendants to a cost component."""
    for _, m in module.named_modules():
        if m.component is None:
            m.component = component
    return module


class DNTDFDecoder(Module):
    component = "decoder"

    def __init__(self, profile: BackboneProfile, cfg: DecoderConfig, input_size, rng=None) -> None:
        super().__init__()
        cfg.validate(profile)
        self.profile, self.cfg = profile, cfg
        self.input_size = check_input_size(input_size)
        self.plan = plan_shortcuts(profile, cfg, self.input_size)
        f = {i: cfg.side_depth(profile, i) for i in range(0, 6)}
        self.f = f
        d_g = cfg.global_depth(profile)
        top = min(stage_size(self.input_size, 5))
        if cfg.ppm_bins is None:
            self.bins = tuple(b for b in DEFAULT_PPM_BINS if b <= top)
        else:
            self.bins = tuple(cfg.ppm_bins)
            if max(self.bins) > top:
                raise ConfigError(f"PPM bin {max(self.bins)} exceeds the top feature size {top}")

        self.side = _tag(ModuleList([CompressionUnit(profile.depth(i), f[i], rng) for i in STAGES]),
                         "side-compression")
        if cfg.ppm_enabled:
            src = profile.depth(5) if cfg.ppm_source == "encoder" else f[5]
            self.ppm = PPM(src, d_g, self.bins, rng, identity_channels=f[5])
            self.global_branch_units = ModuleDict({j: GlobalBranch(d_g, f[6 - j], rng) for j in range(2, 6)})
        self.pcsp = ModuleDict({i: ShortcutPath(i, self.plan, rng) for i in cfg.sources()})

        n_fuse = 4 if cfg.ppm_enabled else 3
        hat, ctx, stages = {}, {}, {1: DecoderStage(f[5], f[4], rng, mode=cfg.fusion)}
        for j in range(2, 6):
            s = 6 - j
            hat[j] = CompressionUnit(f[s], f[s], rng)
            ctx_in = f[s] + sum(self.plan.depth(i, j) for i in self.plan.sources_for(j))
            ctx[j] = CompressionUnit(ctx_in, f[s], rng)
            fuse_in = f[s] * n_fuse if cfg.fusion == "concat" else f[s]
            stages[j] = DecoderStage(fuse_in, f[s - 1], rng, mode=cfg.fusion)
        self.hat = _tag(ModuleDict(hat), "decoder")
        self.context = _tag(ModuleDict(ctx), "decoder")
        self.stages = ModuleDict(stages)
        self.head = PredictionHead(f[0], rng)

    # -- pieces -------------------------------------------------------------

    def stage_sizes(self, side_feats) -> dict:
        """Working resolution of each stage j, read off the side features."""
        return {j: tuple(side_feats[6 - j].shape[2:]) for j in STAGES}

    def pcsp_propagate(self, source: int, f_i, j: int, sizes: dict):
        stages = self.plan.stages_for(source)
        if j not in stages:
            raise ShapeError(f"F_{source} feeds stages {stages}, not stage {j}")
        return self.pcsp[source](f_i, sizes, upto=j)[j]

    def context_fuse(self, hat_f, shortcuts: Sequence, j: int):
        for t in shortcuts:
            if t.shape[2:] != hat_f.shape[2:]:
                raise ShapeError(f"stage {j} shortcut at {tuple(t.shape[2:])} but stage works at {tuple(hat_f.shape[2:])}")
        return self.context[j](ops.concat([hat_f, *shortcuts]))

    def global_branch(self, g, j: int, size):
        return self.global_branch_units[j](g, size)

    def decoder_stage(self, j: int, inputs: Sequence, out_size):
        return self.stages[j](inputs, out_size)

    def predict_head(self, d5, out_size):
        return self.head(d5, out_size)

    # -- composition --------------------------------------------------------

    def forward(self, feats: Sequence, out_size=None):
        out_size = out_size or self.input_size
        side = {i: self.side[i - 1](feats[i - 1]) for i in STAGES}
        sizes = self.stage_sizes(side)
        g = None
        if self.cfg.ppm_enabled:
            pool_src = feats[4] if self.cfg.ppm_source == "encoder" else side[5]
            g = self.ppm(pool_src, identity=side[5])
        shortcuts = {i: self.pcsp[i](side[i], sizes) for i in self.cfg.sources()}

        d = self.decoder_stage(1, [side[5]], sizes[2])
        for j in range(2, 6):
            s = 6 - j
            hat_f = self.hat[j](side[s])
            c_j = self.context_fuse(hat_f, [shortcuts[i][j] for i in self.plan.sources_for(j)], j)
            inputs = [d, side[s], c_j]
            if g is not None:
                inputs.append(self.global_branch(g, j, sizes[j]))
            nxt = sizes[j + 1] if j < 5 else tuple(out_size)
            d = self.decoder_stage(j, inputs, nxt)
        return self.predict_head(d, out_size)


class DNTDF(Module):
    def __init__(self, profile: BackboneProfile, cfg: DecoderConfig, input_size, rng=None) -> None:
        super().__init__()
        self.encoder = build_encoder(profile, rng)
        self.decoder = DNTDFDecoder(profile, cfg, input_size, rng)
        for name, m in self.named_modules():
            object.__setattr__(m, "_path", name)

    def forward(self, image):
        return self.decoder(self.encoder(image), tuple(image.shape[2:]))


# --------------------------------------------------------------------------
# model graph


@dataclass
class ModelGraph:
    """A built model plus its statically traced layer list."""

    model: DNTDF
    profile: BackboneProfile
    config: DecoderConfig
    input_size: tuple[int, int]
    layers: list[TraceRecord]
    materialized: bool

    @property
    def plan(self) -> ShortcutPlan:
        return self.model.decoder.plan

    @property
    def output(self) -> MetaTensor:
        return self.layers[-1].output

    def parameters(self) -> list:
        return self.model.parameters()

    def named_parameters(self):
        return list(self.model.named_parameters())

    def trace(self, input_size=None, batch: int = 1) -> list[TraceRecord]:
        h, w = check_input_size(input_size or self.input_size)
        return trace_model(self.model, (batch, 3, h, w))

    def forward(self, image):
        if not self.materialized:
            raise ConfigError(f"{self.profile.name} graph is structural only; build with materialize=True")
        if tuple(image.shape[1:]) != (3, *self.input_size):
            raise ShapeError(f"image shape {tuple(image.shape)} does not match build size (N, 3, {self.input_size[0]}, {self.input_size[1]})")
        return self.model(image)

    __call__ = forward

    def to_text(self) -> str:
        from .complexity import layer_cost  # local: complexity depends on this module
        lines = [f"# model {self.profile.name} r={self.config.r} input={self.input_size[0]}x{self.input_size[1]}",
                 f"# pcsp_count={self.config.pcsp_count} ppm={'on' if self.config.ppm_enabled else 'off'} "
                 f"fusion={self.config.fusion} bins={list(self.model.decoder.bins)}"]
        local: dict[int, int] = {}  # tensor ids renumbered by first appearance

        def tid(t) -> int:
            return local.setdefault(t.id, len(local))

        for rec in self.layers:
            cost = layer_cost(rec)
            ins = " ".join(f"t{tid(t)}{list(t.shape)}" for t in rec.inputs if not t.is_param)
            ps = " ".join(f"{t.name}{list(t.shape)}" for t in rec.inputs if t.is_param)
            attrs = " ".join(f"{k}={v}" for k, v in rec.attrs.items())
            lines.append(f"L{rec.index:04d} {rec.component or '-':16s} {rec.scope or '-':40s} {rec.op:17s} "
                         f"in=[{ins}] params=[{ps}] out=t{tid(rec.output)}{list(rec.output.shape)} "
                         f"{attrs} | params={cost.params} macs={cost.macs}".rstrip())
        return "\n".join(lines) + "\n"


def trace_model(model: Module, input_shape) -> list[TraceRecord]:
    with tracing() as tracer:
        model(MetaTensor(input_shape, name="image"))
    return tracer.records


def build_model(profile: BackboneProfile | str, cfg: Optional[DecoderConfig] = None, input_size=288,
                seed: Optional[int] = 0, materialize: Optional[bool] = None) -> ModelGraph:
    """Build and statically validate a model.

    Structural profiles (no trainable encoder) default to shape-only
    parameters; pass ``materialize=True`` to allocate He-initialised weights.
    """
    if isinstance(profile, str):
        profile = get_profile(profile)
    cfg = cfg or DecoderConfig(r=profile.default_r)
    size = check_input_size(input_size)
    if materialize is None:
        materialize = profile.trainable
    if materialize and profile.encoder == "stub":
        raise ConfigError(f"{profile.name} has no executable encoder; it can only be built structurally")
    rng = np.random.default_rng(seed) if materialize else None
    model = DNTDF(profile, cfg, size, rng)
    layers = trace_model(model, (1, 3, *size))
    out = layers[-1].output.shape
    if out != (1, 1, *size):
        raise ShapeError(f"model output traced to {out}, expected (1, 1, {size[0]}, {size[1]})")
    return ModelGraph(model, profile, cfg, size, layers, materialize)


def forward(graph: ModelGraph, image):
    return graph.forward(image)
