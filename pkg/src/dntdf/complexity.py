"""Static parameter and MAC accounting over a traced model graph.

"FLOPs" throughout are multiply-accumulate counts. Conventions:

* conv k x k: H_out * W_out * C_in * C_out * k^2 MACs (bias MACs ignored),
  C_in * C_out * k^2 (+ C_out with bias) parameters
* bilinear resize: 4 MACs per output element, 0 when the size is unchanged
* adaptive average pooling: 1 MAC per input element
* activations, concatenation, addition, max-pooling, frozen affine: 0 MACs
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Optional, Sequence

from .arch import BackboneProfile, DecoderConfig, ModelGraph, build_model, check_input_size, get_profile
from .tensor import TraceRecord

COMPONENTS = ("encoder", "side-compression", "pcsp", "ppm", "decoder", "head")
DECODER_COMPONENTS = COMPONENTS[1:]


@dataclass(frozen=True)
class LayerCost:
    layer: int
    op: str
    scope: str
    component: str
    params: int
    macs: int


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)

    def subtotals(self) -> dict[str, tuple[int, int]]:
        out = {c: [0, 0] for c in COMPONENTS}
        for lc in self.layers:
            acc = out.setdefault(lc.component, [0, 0])
            acc[0] += lc.params
            acc[1] += lc.macs
        return {k: (v[0], v[1]) for k, v in out.items()}

    @property
    def params(self) -> int:
        return sum(lc.params for lc in self.layers)

    @property
    def macs(self) -> int:
        return sum(lc.macs for lc in self.layers)

    def restrict(self, components: Iterable[str]) -> "CostReport":
        keep = set(components)
        return CostReport([lc for lc in self.layers if lc.component in keep])

    @property
    def decoder(self) -> "CostReport":
        return self.restrict(DECODER_COMPONENTS)

    def to_text(self) -> str:
        lines = [f"{'component':18s} {'params':>12s} {'MACs':>16s}"]
        for comp, (p, m) in self.subtotals().items():
            lines.append(f"{comp:18s} {p:12d} {m:16d}")
        dec = self.decoder
        lines.append(f"{'decoder total':18s} {dec.params:12d} {dec.macs:16d}")
        lines.append(f"{'total':18s} {self.params:12d} {self.macs:16d}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["layer,op,component,scope,params,macs"]
        rows += [f"{lc.layer},{lc.op},{lc.component},{lc.scope},{lc.params},{lc.macs}" for lc in self.layers]
        return "\n".join(rows) + "\n"


def _prod(shape: Sequence[int]) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n


def layer_cost(rec: TraceRecord, seen: Optional[set] = None) -> LayerCost:
    """Cost of one traced primitive.

    Parameters are attributed to the first layer that uses them when ``seen``
    is shared across calls, so shared weights are never counted twice.
    """
    params = 0
    for t in rec.inputs:
        if t.is_param and (seen is None or t.id not in seen):
            params += t.size
            if seen is not None:
                seen.add(t.id)
    out = rec.output.shape
    if rec.op == "conv2d":
        w = rec.inputs[1].shape
        macs = out[0] * out[2] * out[3] * w[0] * w[1] * w[2] * w[3]
    elif rec.op == "bilinear_resize":
        macs = 0 if rec.inputs[0].shape[2:] == out[2:] else 4 * _prod(out)
    elif rec.op == "adaptive_avg_pool":
        macs = _prod(rec.inputs[0].shape)
    else:
        macs = 0
    return LayerCost(rec.index, rec.op, rec.scope, rec.component or "decoder", params, macs)


def report_from_records(records: Sequence[TraceRecord]) -> CostReport:
    seen: set = set()
    return CostReport([layer_cost(r, seen) for r in records])


def count_params(graph: ModelGraph) -> CostReport:
    """Per-layer costs at the build-time input size (parameters do not depend on it)."""
    return report_from_records(graph.layers)


def count_flops(graph: ModelGraph, input_size=None) -> CostReport:
    """Re-trace ``graph`` at ``input_size`` (default: build size) and account it."""
    if input_size is None:
        return report_from_records(graph.layers)
    return report_from_records(graph.trace(check_input_size(input_size)))


def cost_report(profile: BackboneProfile | str, cfg: Optional[DecoderConfig] = None, input_size=288) -> CostReport:
    graph = build_model(profile, cfg, input_size, materialize=False)
    return count_params(graph)


def human(n: int, units=("", "K", "M", "G", "T")) -> str:
    """Render a count with a K/M/G suffix, three decimals, round-half-up."""
    value = Decimal(int(n))
    k = 0
    while abs(value) >= 1000 and k < len(units) - 1:
        value /= 1000
        k += 1
    return f"{value.quantize(Decimal('0.001'), rounding=ROUND_HALF_UP)}{units[k]}"


@dataclass(frozen=True)
class CostRow:
    r: int
    decoder_params: int
    decoder_macs: int
    total_params: int
    total_macs: int


def cost_table(profile: BackboneProfile | str, cfg: Optional[DecoderConfig] = None,
               r_values: Sequence[int] = (2, 4, 8, 16, 32), input_size=288) -> list[CostRow]:
    if isinstance(profile, str):
        profile = get_profile(profile)
    base = cfg or DecoderConfig(r=profile.default_r)
    rows = []
    for r in r_values:
        rep = cost_report(profile, replace(base, r=int(r)), input_size)
        dec = rep.decoder
        rows.append(CostRow(int(r), dec.params, dec.macs, rep.params, rep.macs))
    return rows


def format_table(rows: Sequence[CostRow], profile_name: str, input_size, encoder_counted: bool = True) -> str:
    h, w = check_input_size(input_size)
    head = f"# {profile_name} @ {h}x{w}  (MACs)"
    if not encoder_counted:
        head += "  encoder is structural-only: totals cover the decoder"
    cols = f"{'r':>4s} {'dec params':>12s} {'dec MACs':>12s} {'total params':>13s} {'total MACs':>12s} " \
           f"{'dec params (exact)':>19s} {'dec MACs (exact)':>17s}"
    lines = [head, cols]
    for row in rows:
        lines.append(f"{row.r:>4d} {human(row.decoder_params):>12s} {human(row.decoder_macs):>12s} "
                     f"{human(row.total_params):>13s} {human(row.total_macs):>12s} "
                     f"{row.decoder_params:>19d} {row.decoder_macs:>17d}")
    return "\n".join(lines) + "\n"
