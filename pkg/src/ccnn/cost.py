"""Closed-form parameter and multiply-accumulate accounting.

Nothing here executes a network; every number is arithmetic over the layer
dimensions declared by a NetworkSpec. Conventions:

* params per conv = kernel weights + 4 per output channel (gamma, beta,
  running mean, running var); convolutions carry no bias.
* MACs count convolution and linear-layer multiplies plus one multiply per
  weighted-pooling cell. Pooling, batch norm, activations, bias adds and
  softmax cost zero. Plain average pooling has no weights and costs zero.
* A fire module with the default sizing (squeeze N/8, expand N/2 + N/2)
  costs (M + 5N) * N * D^2 / 8, an exact integer identity with the sum of
  its three constituent convolutions whenever 8 divides N.
"""

from dataclasses import dataclass
from fractions import Fraction

from .errors import ParameterError, SpecError
from . import quantize
from .architecture import FINAL_NAME, ConvLayer, FireLayer, PoolLayer


@dataclass
class LayerCost:
    layer_name: str
    param_count: int
    mac_count: int

    def __post_init__(self):
        if self.param_count < 0 or self.mac_count < 0:
            raise ParameterError("layer costs cannot be negative")


@dataclass
class CostReport:
    """Per-layer costs plus standalone totals per exit point.

    exit_totals[name] is the MAC count of running the network only as far
    as that head: shared backbone prefix plus that branch, nothing else.
    total_macs covers every layer once (the full cascaded late path).
    storage_bytes reflects the quantization scheme the report was built
    with, or plain 4 bytes per parameter without one.
    """

    layers: list
    exit_totals: dict
    total_params: int
    total_macs: int
    storage_bytes: int

    def layer(self, name):
        for lc in self.layers:
            if lc.layer_name == name:
                return lc
        raise ParameterError(f"no layer named {name!r} in this report")

    def format_table(self):
        rows = [("layer", "params", "macs")]
        rows += [
            (lc.layer_name, f"{lc.param_count:,}", f"{lc.mac_count:,}")
            for lc in self.layers
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [
            f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}"
            for r in rows
        ]
        lines.append("-" * (sum(widths) + 4))
        lines.append(f"total params: {self.total_params:,}")
        lines.append(f"total macs:   {self.total_macs:,}")
        for name, macs in self.exit_totals.items():
            lines.append(f"exit {name}: {macs:,} macs")
        lines.append(f"storage bytes: {self.storage_bytes:,}")
        return "\n".join(lines)

    def format_csv(self):
        out = ["layer,params,macs"]
        out += [
            f"{lc.layer_name},{lc.param_count},{lc.mac_count}" for lc in self.layers
        ]
        return "\n".join(out)


def standard_conv_cost(M, N, D, k=3):
    """MACs of a k x k convolution from M to N channels on a D x D output."""
    if min(M, N, D, k) < 1:
        raise ParameterError("conv cost arguments must be positive")
    return k * k * M * N * D * D


def fire_cost(M, N, D, s1x1=None, e1x1=None, e3x3=None):
    """MACs of one fire module on a D x D map.

    With default sizing this is the closed form (M + 5N) * N * D^2 / 8. If
    the sizing is overridden, or the closed form would not be integral, it
    falls back to summing the three constituent convolution costs.
    """
    if min(M, N, D) < 1:
        raise ParameterError("fire cost arguments must be positive")
    defaulted = s1x1 is None and e1x1 is None and e3x3 is None
    if defaulted and N % 8 == 0:
        num = (M + 5 * N) * N * D * D
        if num % 8 == 0:
            return num // 8
    s = N // 8 if s1x1 is None else s1x1
    e1 = N // 2 if e1x1 is None else e1x1
    e3 = N - e1 if e3x3 is None else e3x3
    if min(s, e1, e3) < 1 or e1 + e3 != N:
        raise ParameterError("inconsistent fire sizing")
    return (
        standard_conv_cost(M, s, D, 1)
        + standard_conv_cost(s, e1, D, 1)
        + standard_conv_cost(s, e3, D, 3)
    )


def reduction_ratio(M, N):
    """fire_cost / standard_conv_cost as an exact rational: 1/72 + 5N/(72M)."""
    if M < 1 or N < 1:
        raise ParameterError("channel counts must be positive")
    return Fraction(1, 72) + Fraction(5 * N, 72 * M)


def _fire_params(fire):
    s, e1, e3, m = fire.s1x1, fire.e1x1, fire.e3x3, fire.in_channels
    weights = s * m + e1 * s + 9 * e3 * s
    return weights + 4 * (s + e1 + e3)


def _fire_macs(fire, D):
    return fire_cost(
        fire.in_channels,
        fire.out_channels,
        D,
        None if fire.is_default_sized else fire.s1x1,
        None if fire.is_default_sized else fire.e1x1,
        None if fire.is_default_sized else fire.e3x3,
    )


def _head_rows(prefix, head, c, d):
    """(name, params, macs) rows for one classification head."""
    rows = []
    if head.kind == "FC":
        flat = c * d * d
        rows.append(
            (f"{prefix}/hidden", flat * head.hidden_units + head.hidden_units,
             flat * head.hidden_units)
        )
        in_features = head.hidden_units
    elif head.kind == "WAP":
        rows.append((f"{prefix}/gwap", c * d * d, c * d * d))
        in_features = c
    else:  # GAP: no weights, the spatial mean is not a multiply-accumulate
        rows.append((f"{prefix}/gap", 0, 0))
        in_features = c
    rows.append(
        (
            f"{prefix}/classifier",
            in_features * head.num_classes + head.num_classes,
            in_features * head.num_classes,
        )
    )
    return rows


def network_cost(spec, quant=None):
    """Cost every layer of ``spec`` and total up the exit paths."""
    spec.validate()
    layers = []
    prefix_macs = {}
    running = 0
    c = spec.in_channels
    for layer, (name, out_c, d) in zip(spec.backbone, spec.layer_flow()):
        if isinstance(layer, ConvLayer):
            params = layer.out_channels * c * layer.kernel ** 2 + 4 * layer.out_channels
            macs = standard_conv_cost(c, layer.out_channels, d, layer.kernel)
        elif isinstance(layer, PoolLayer):
            params, macs = 0, 0
        elif isinstance(layer, FireLayer):
            params = _fire_params(layer.fire)
            macs = _fire_macs(layer.fire, d)
        else:
            raise SpecError(f"unknown layer type {type(layer).__name__}")
        layers.append(LayerCost(name, params, macs))
        running += macs
        prefix_macs[name] = running
        c = out_c
    backbone_macs = running
    exit_totals = {}
    for ex in spec.exits:
        c_at, d_at = spec.feature_shape_after(ex.attach_after)
        branch_rows = []
        if ex.fire is not None:
            branch_rows.append(
                (f"{ex.name}/fire", _fire_params(ex.fire), _fire_macs(ex.fire, d_at))
            )
            c_at = ex.fire.out_channels
        branch_rows += _head_rows(ex.name, ex.head, c_at, d_at)
        layers += [LayerCost(*row) for row in branch_rows]
        exit_totals[ex.name] = prefix_macs[ex.attach_after] + sum(
            r[2] for r in branch_rows
        )
    last = spec.backbone[-1].name
    c_out, d_out = spec.feature_shape_after(last)
    final_rows = _head_rows(FINAL_NAME, spec.final_head, c_out, d_out)
    layers += [LayerCost(*row) for row in final_rows]
    exit_totals[FINAL_NAME] = backbone_macs + sum(r[2] for r in final_rows)
    total_params = sum(lc.param_count for lc in layers)
    total_macs = sum(lc.mac_count for lc in layers)
    storage = (
        _analytic_storage(spec, quant) if quant is not None else 4 * total_params
    )
    return CostReport(
        layers=layers,
        exit_totals=exit_totals,
        total_params=total_params,
        total_macs=total_macs,
        storage_bytes=storage,
    )


def _enumerate_tensors(spec):
    """Yield (parameter name, element count) straight from the dimensions."""

    def conv_tensors(prefix, in_c, out_c, k):
        yield f"{prefix}/w", out_c * in_c * k * k
        for leaf in ("bn_gamma", "bn_beta", "bn_mean", "bn_var"):
            yield f"{prefix}/{leaf}", out_c

    def fire_tensors(prefix, fire):
        yield from conv_tensors(f"{prefix}/squeeze", fire.in_channels, fire.s1x1, 1)
        yield from conv_tensors(f"{prefix}/expand1", fire.s1x1, fire.e1x1, 1)
        yield from conv_tensors(f"{prefix}/expand3", fire.s1x1, fire.e3x3, 3)

    def head_tensors(prefix, head, c, d):
        if head.kind == "FC":
            flat = c * d * d
            yield f"{prefix}/hidden/w", flat * head.hidden_units
            yield f"{prefix}/hidden/b", head.hidden_units
            in_features = head.hidden_units
        else:
            if head.kind == "WAP":
                yield f"{prefix}/gwap/w", c * d * d
            in_features = c
        yield f"{prefix}/classifier/w", in_features * head.num_classes
        yield f"{prefix}/classifier/b", head.num_classes

    c = spec.in_channels
    for layer, (name, out_c, _d) in zip(spec.backbone, spec.layer_flow()):
        if isinstance(layer, ConvLayer):
            yield from conv_tensors(f"backbone/{name}", c, layer.out_channels, layer.kernel)
        elif isinstance(layer, FireLayer):
            yield from fire_tensors(f"backbone/{name}", layer.fire)
        c = out_c
    for ex in spec.exits:
        c_at, d_at = spec.feature_shape_after(ex.attach_after)
        if ex.fire is not None:
            yield from fire_tensors(f"{ex.name}/fire", ex.fire)
            c_at = ex.fire.out_channels
        yield from head_tensors(ex.name, ex.head, c_at, d_at)
    last = spec.backbone[-1].name
    c_out, d_out = spec.feature_shape_after(last)
    yield from head_tensors(FINAL_NAME, spec.final_head, c_out, d_out)


def _analytic_storage(spec, scheme):
    total = 0
    for name, count in _enumerate_tensors(spec):
        bits = scheme.bits_for(quantize.bucket_for(name))
        total += quantize.tensor_storage_bytes(count, bits)
    return total
