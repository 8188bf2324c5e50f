"""Layer compositions: convolution modules, compression / fusion units, PPM.

Modules follow the familiar ``Module.__call__ -> forward`` pattern. Passing
``rng=None`` when constructing a module creates shape-only parameters, which
is how the large structural backbones are built for cost accounting without
allocating their weights.
"""
from __future__ import annotations

from fractions import Fraction
from typing import Iterator, Optional, Sequence

import numpy as np

from . import ops
from .tensor import MetaTensor, ShapeError, Tensor, active_tracer


def round_half_up(x) -> int:
    """Round-half-up with a floor of 1, used for every divided channel depth."""
    return max(1, int(Fraction(x) + Fraction(1, 2)))


def he_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean normal weights with std sqrt(2 / fan_in)."""
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=tuple(shape)).astype(np.float32)


def parameter(shape: Sequence[int], rng: Optional[np.random.Generator], fan_in: Optional[int] = None,
              name: Optional[str] = None):
    """He-initialised weight (``fan_in`` given) or zero bias; shape-only when ``rng`` is None."""
    if rng is None:
        return MetaTensor(shape, name=name, is_param=True)
    if fan_in is None:
        data = np.zeros(tuple(shape), dtype=np.float32)
    else:
        data = he_init(shape, fan_in, rng)
    return Tensor(data, requires_grad=True, name=name)


class Module:
    component: Optional[str] = None

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_name", "")

    def __setattr__(self, name, value):
        if isinstance(value, (Tensor, MetaTensor)) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
            object.__setattr__(value, "_name", name)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix + name + ".")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        tracer = active_tracer()
        if tracer is None:
            return self.forward(*args, **kwargs)
        tracer.push(getattr(self, "_path", self._name), self.component)
        try:
            return self.forward(*args, **kwargs)
        finally:
            tracer.pop()

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()) -> None:
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class ModuleDict(Module):
    def __init__(self, modules: Optional[dict] = None) -> None:
        super().__init__()
        self._items: dict = {}
        for k, m in (modules or {}).items():
            self[k] = m

    def __setitem__(self, key, m: Module) -> None:
        setattr(self, str(key), m)
        self._items[key] = m

    def __getitem__(self, key) -> Module:
        return self._items[key]

    def __contains__(self, key) -> bool:
        return key in self._items

    def keys(self):
        return self._items.keys()

    def items(self):
        return self._items.items()


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng=None, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True) -> None:
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.padding = k // 2 if padding is None else padding
        self.weight = parameter((c_out, c_in, k, k), rng, fan_in=c_in * k * k, name="weight")
        self.bias = parameter((c_out,), rng, name="bias") if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class CompressionUnit(Module):
    """ReLU followed by a 1x1 convolution from ``c_in`` to ``c_out`` channels.

    With ``relu=False`` the unit is a purely linear 1x1 projection, which is
    what the shortcut paths use.
    """

    def __init__(self, c_in: int, c_out: int, rng=None, relu: bool = True, bias: bool = True) -> None:
        super().__init__()
        if c_out < 1:
            raise ShapeError(f"compression unit needs at least one output channel, got {c_out}")
        self.use_relu = relu
        self.conv = Conv2d(c_in, c_out, 1, rng, bias=bias)

    @classmethod
    def with_ratio(cls, c_in: int, ratio, rng=None, **kw) -> "CompressionUnit":
        return cls(c_in, round_half_up(Fraction(c_in) / Fraction(ratio)), rng, **kw)

    @property
    def c_in(self) -> int:
        return self.conv.c_in

    @property
    def c_out(self) -> int:
        return self.conv.c_out

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.c_in, self.c_out)

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"compression unit expects {self.c_in} channels, got {x.shape[1]}")
        return self.conv(ops.relu(x) if self.use_relu else x)


class FusionUnit(Module):
    """Merge same-resolution maps, then ReLU and a 3x3 convolution.

    ``mode="sum"`` adds the operands (they must share depth); ``"concat"``
    stacks them along channels before the convolution.
    """

    def __init__(self, c_in: int, c_out: int, rng=None, mode: str = "sum") -> None:
        super().__init__()
        if mode not in ("sum", "concat"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)

    def merge(self, xs):
        xs = list(xs)
        ref = xs[0].shape
        for x in xs[1:]:
            if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise ShapeError(f"fusion inputs disagree in batch/spatial extents: {tuple(ref)} vs {tuple(x.shape)}")
        if self.mode == "concat":
            return ops.concat(xs)
        out = xs[0]
        for x in xs[1:]:
            out = ops.add(out, x)
        return out

    def forward(self, xs):
        return self.conv(ops.relu(self.merge(xs)))


class PPM(Module):
    """Pyramid pooling: pooled 1x1 branches, resized back and fused by a 1x1 conv.

    Branches pool ``x``. The identity operand of the final concatenation is
    ``identity`` when given, otherwise ``x`` itself.
    """

    component = "ppm"

    def __init__(self, c_in: int, out_depth: int, bins: Sequence[int] = (1, 2, 3, 6), rng=None,
                 branch_depth: Optional[int] = None, identity_channels: Optional[int] = None) -> None:
        super().__init__()
        bins = tuple(int(b) for b in bins)
        if list(bins) != sorted(set(bins)) or not bins:
            raise ValueError(f"PPM bins must be strictly increasing, got {bins}")
        self.bins = bins
        self.out_depth = out_depth
        self.branch_depth = branch_depth or round_half_up(Fraction(out_depth, 4))
        self.identity_channels = c_in if identity_channels is None else identity_channels
        self.branches = ModuleList([Conv2d(c_in, self.branch_depth, 1, rng) for _ in bins])
        self.fuse = Conv2d(self.identity_channels + self.branch_depth * len(bins), out_depth, 1, rng)

    def forward(self, x, identity=None):
        h, w = x.shape[2], x.shape[3]
        if self.bins[-1] > min(h, w):
            raise ShapeError(f"PPM bin {self.bins[-1]} exceeds input spatial size {h}x{w}")
        ident = x if identity is None else identity
        parts = [ident]
        for b, conv in zip(self.bins, self.branches):
            parts.append(ops.bilinear_resize(conv(ops.adaptive_avg_pool(x, b)), ident.shape[2], ident.shape[3]))
        return self.fuse(ops.concat(parts))
