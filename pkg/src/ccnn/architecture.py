"""Network description, construction, and forward execution.

A NetworkSpec is a declarative layer list (conv / maxpool / fire) plus exit
branches and a final head. build_network turns it into a Parameters store
and a Network object that can run any subset of heads, optionally recording
onto a GradientTape.

Parameter names are namespaced by layer, for example::

    backbone/conv1/w          backbone/fire2/squeeze/w
    mid_a/fire/expand3/w      mid_a/gwap/w
    final/classifier/w        final/classifier/b

Each conv weight travels with four batch-norm vectors (bn_gamma, bn_beta,
bn_mean, bn_var) under the same prefix.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DimensionError, SpecError

FINAL_NAME = "final"


# ---------------------------------------------------------------------------
# declarative types


@dataclass
class FireSpec:
    """Squeeze/expand block dimensions.

    Defaults follow the standard sizing rule: squeeze to N/8 channels, then
    expand back with half 1x1 and half 3x3 filters. Explicit values may
    override it as long as e1x1 + e3x3 equals out_channels.
    """

    in_channels: int
    out_channels: int
    s1x1: int | None = None
    e1x1: int | None = None
    e3x3: int | None = None

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpecError("fire channel counts must be positive")
        if self.s1x1 is None:
            if self.out_channels % 8:
                raise SpecError(
                    f"default fire sizing needs out_channels divisible by 8, "
                    f"got {self.out_channels}"
                )
            self.s1x1 = self.out_channels // 8
        if self.e1x1 is None and self.e3x3 is None:
            if self.out_channels % 2:
                raise SpecError("default expand split needs even out_channels")
            self.e1x1 = self.e3x3 = self.out_channels // 2
        if self.e1x1 is None or self.e3x3 is None:
            raise SpecError("give both expand sizes or neither")
        if min(self.s1x1, self.e1x1, self.e3x3) < 1:
            raise SpecError("fire sub-layer sizes must be positive")
        if self.e1x1 + self.e3x3 != self.out_channels:
            raise SpecError(
                f"expand sizes {self.e1x1}+{self.e3x3} do not sum to "
                f"out_channels {self.out_channels}"
            )

    @property
    def is_default_sized(self):
        n = self.out_channels
        return self.s1x1 * 8 == n and self.e1x1 == self.e3x3 == n // 2

    @property
    def param_count(self):
        """Weights plus 4 batch-norm values per produced channel."""
        s, e1, e3, m = self.s1x1, self.e1x1, self.e3x3, self.in_channels
        weights = s * m + e1 * s + 9 * e3 * s
        return weights + 4 * (s + e1 + e3)


@dataclass
class HeadSpec:
    """Classification head: FC (flatten + hidden layer), GAP, or WAP."""

    kind: str
    num_classes: int
    hidden_units: int = 1024
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.kind not in ("FC", "GAP", "WAP"):
            raise SpecError(f"head kind must be FC, GAP or WAP, got {self.kind!r}")
        if self.num_classes < 1:
            raise SpecError("num_classes must be positive")
        if self.hidden_units < 1:
            raise SpecError("hidden_units must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise SpecError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class ConvLayer:
    name: str
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: str = "same"


@dataclass
class PoolLayer:
    name: str


@dataclass
class FireLayer:
    name: str
    fire: FireSpec


@dataclass
class ExitBranch:
    """A mid-network classifier: optional fire module, then a head."""

    name: str
    attach_after: str
    fire: FireSpec | None
    head: HeadSpec


@dataclass
class NetworkSpec:
    input_size: int
    num_classes: int
    backbone: list
    exits: list
    final_head: HeadSpec
    in_channels: int = 1

    def validate(self):
        names = [layer.name for layer in self.backbone]
        if len(set(names)) != len(names):
            raise SpecError("backbone layer names must be unique")
        if self.input_size < 1 or self.in_channels < 1:
            raise SpecError("input_size and in_channels must be positive")
        flow = self.layer_flow()  # raises on inconsistent channels/sizes
        at = {name: (c, d) for name, c, d in flow}
        seen_exits = set()
        for ex in self.exits:
            if ex.name in seen_exits or ex.name == FINAL_NAME or ex.name in at:
                raise SpecError(f"exit name {ex.name!r} collides")
            seen_exits.add(ex.name)
            if ex.attach_after not in at:
                raise SpecError(
                    f"attach point {ex.attach_after!r} names no backbone layer"
                )
            c, _ = at[ex.attach_after]
            if ex.fire is not None and ex.fire.in_channels != c:
                raise SpecError(
                    f"exit {ex.name!r} fire expects {ex.fire.in_channels} channels "
                    f"but {ex.attach_after!r} produces {c}"
                )
            if ex.head.num_classes != self.num_classes:
                raise SpecError(
                    f"exit {ex.name!r} head has {ex.head.num_classes} classes, "
                    f"network declares {self.num_classes}"
                )
        if self.final_head.num_classes != self.num_classes:
            raise SpecError("final head num_classes disagrees with the network")
        return self

    def layer_flow(self):
        """Walk the backbone, yielding (name, out_channels, out_spatial).

        This is pure shape arithmetic; it raises SpecError on any channel or
        spatial inconsistency.
        """
        c, d = self.in_channels, self.input_size
        flow = []
        for layer in self.backbone:
            if isinstance(layer, ConvLayer):
                if layer.padding != "same":
                    raise SpecError(
                        f"{layer.name}: backbone convs must use same padding"
                    )
                if layer.stride < 1 or d % layer.stride:
                    raise SpecError(
                        f"{layer.name}: stride {layer.stride} does not divide {d}"
                    )
                c = layer.out_channels
                d = d // layer.stride
            elif isinstance(layer, PoolLayer):
                if d % 2:
                    raise SpecError(f"{layer.name}: pooling odd spatial size {d}")
                d //= 2
            elif isinstance(layer, FireLayer):
                if layer.fire.in_channels != c:
                    raise SpecError(
                        f"{layer.name}: fire expects {layer.fire.in_channels} "
                        f"channels but receives {c}"
                    )
                c = layer.fire.out_channels
            else:
                raise SpecError(f"unknown backbone layer type {type(layer).__name__}")
            flow.append((layer.name, c, d))
        return flow

    def feature_shape_after(self, layer_name):
        for name, c, d in self.layer_flow():
            if name == layer_name:
                return c, d
        raise SpecError(f"no backbone layer named {layer_name!r}")

    def exit_by_name(self, name):
        for ex in self.exits:
            if ex.name == name:
                return ex
        raise SpecError(f"no exit branch named {name!r}")

    def head_names(self):
        return [ex.name for ex in self.exits] + [FINAL_NAME]

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        def fire_d(f):
            return None if f is None else {
                "in_channels": f.in_channels,
                "out_channels": f.out_channels,
                "s1x1": f.s1x1,
                "e1x1": f.e1x1,
                "e3x3": f.e3x3,
            }

        def head_d(h):
            return {
                "kind": h.kind,
                "num_classes": h.num_classes,
                "hidden_units": h.hidden_units,
                "dropout_rate": h.dropout_rate,
            }

        layers = []
        for layer in self.backbone:
            if isinstance(layer, ConvLayer):
                layers.append(
                    {
                        "type": "conv",
                        "name": layer.name,
                        "out_channels": layer.out_channels,
                        "kernel": layer.kernel,
                        "stride": layer.stride,
                        "padding": layer.padding,
                    }
                )
            elif isinstance(layer, PoolLayer):
                layers.append({"type": "maxpool", "name": layer.name})
            else:
                layers.append({"type": "fire", "name": layer.name, "fire": fire_d(layer.fire)})
        return {
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "backbone": layers,
            "exits": [
                {
                    "name": ex.name,
                    "attach_after": ex.attach_after,
                    "fire": fire_d(ex.fire),
                    "head": head_d(ex.head),
                }
                for ex in self.exits
            ],
            "final_head": head_d(self.final_head),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            backbone = []
            for layer in d["backbone"]:
                kind = layer["type"]
                if kind == "conv":
                    backbone.append(
                        ConvLayer(
                            layer["name"],
                            layer["out_channels"],
                            layer.get("kernel", 3),
                            layer.get("stride", 1),
                            layer.get("padding", "same"),
                        )
                    )
                elif kind == "maxpool":
                    backbone.append(PoolLayer(layer["name"]))
                elif kind == "fire":
                    backbone.append(FireLayer(layer["name"], FireSpec(**layer["fire"])))
                else:
                    raise SpecError(f"unknown layer type {kind!r}")
            exits = [
                ExitBranch(
                    ex["name"],
                    ex["attach_after"],
                    None if ex["fire"] is None else FireSpec(**ex["fire"]),
                    HeadSpec(**ex["head"]),
                )
                for ex in d["exits"]
            ]
            return cls(
                input_size=d["input_size"],
                num_classes=d["num_classes"],
                backbone=backbone,
                exits=exits,
                final_head=HeadSpec(**d["final_head"]),
                in_channels=d.get("in_channels", 1),
            ).validate()
        except (KeyError, TypeError) as e:
            raise SpecError(f"malformed network description: {e}") from e


def default_network_spec(
    num_classes=3755,
    scale=1,
    include_mids=True,
    head_kind="WAP",
    input_size=64,
    dropout_final=0.5,
    dropout_mid=0.2,
):
    """The reference architecture, optionally with channels divided by ``scale``.

    conv1(64) -> pool -> fire2,fire3(128) -> pool -> fire4,fire5(256) -> pool
    -> fire6,fire7(384) -> fire8,fire9(512) -> final head, with mid exits
    attached after fire4 and fire6 that duplicate the dimensions of the
    following fire module.
    """
    plan = {
        "conv1": 64,
        "fire2": 128,
        "fire3": 128,
        "fire4": 256,
        "fire5": 256,
        "fire6": 384,
        "fire7": 384,
        "fire8": 512,
        "fire9": 512,
    }
    for name, n in plan.items():
        if n % scale or (n // scale) % 8:
            raise SpecError(f"scale {scale} breaks the sizing of {name}")
    c = {k: v // scale for k, v in plan.items()}
    backbone = [
        ConvLayer("conv1", c["conv1"]),
        PoolLayer("maxpool1"),
        FireLayer("fire2", FireSpec(c["conv1"], c["fire2"])),
        FireLayer("fire3", FireSpec(c["fire2"], c["fire3"])),
        PoolLayer("maxpool2"),
        FireLayer("fire4", FireSpec(c["fire3"], c["fire4"])),
        FireLayer("fire5", FireSpec(c["fire4"], c["fire5"])),
        PoolLayer("maxpool3"),
        FireLayer("fire6", FireSpec(c["fire5"], c["fire6"])),
        FireLayer("fire7", FireSpec(c["fire6"], c["fire7"])),
        FireLayer("fire8", FireSpec(c["fire7"], c["fire8"])),
        FireLayer("fire9", FireSpec(c["fire8"], c["fire9"])),
    ]
    exits = []
    if include_mids:
        exits = [
            ExitBranch(
                "mid_a",
                "fire4",
                FireSpec(c["fire4"], c["fire5"]),
                HeadSpec("WAP", num_classes, dropout_rate=dropout_mid),
            ),
            ExitBranch(
                "mid_b",
                "fire6",
                FireSpec(c["fire6"], c["fire7"]),
                HeadSpec("WAP", num_classes, dropout_rate=dropout_mid),
            ),
        ]
    spec = NetworkSpec(
        input_size=input_size,
        num_classes=num_classes,
        backbone=backbone,
        exits=exits,
        final_head=HeadSpec(head_kind, num_classes, dropout_rate=dropout_final),
    )
    return spec.validate()


# ---------------------------------------------------------------------------
# parameter store


class Parameters:
    """Ordered name -> ndarray store with replace-only updates."""

    def __init__(self):
        self._store = {}

    def add(self, name, arr):
        if name in self._store:
            raise SpecError(f"duplicate parameter {name!r}")
        self._store[name] = arr

    def __getitem__(self, name):
        return self._store[name]

    def __setitem__(self, name, arr):
        old = self._store.get(name)
        if old is None:
            raise KeyError(name)
        if old.shape != arr.shape:
            raise DimensionError(
                f"cannot replace {name}: shape {old.shape} with {arr.shape}"
            )
        self._store[name] = arr

    def __contains__(self, name):
        return name in self._store

    def __iter__(self):
        return iter(self._store)

    def __len__(self):
        return len(self._store)

    def names(self):
        return list(self._store)

    def items(self):
        return self._store.items()

    def total_count(self):
        return sum(int(a.size) for a in self._store.values())

    def copy(self):
        dup = Parameters()
        for name, arr in self._store.items():
            dup.add(name, arr.copy())
        return dup


def _uniform(rng, fan_in, shape, dtype=np.float32):
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


def _add_conv(params, rng, prefix, in_c, out_c, k):
    params.add(f"{prefix}/w", _uniform(rng, in_c * k * k, (out_c, in_c, k, k)))
    params.add(f"{prefix}/bn_gamma", np.ones(out_c, np.float32))
    params.add(f"{prefix}/bn_beta", np.zeros(out_c, np.float32))
    params.add(f"{prefix}/bn_mean", np.zeros(out_c, np.float32))
    params.add(f"{prefix}/bn_var", np.ones(out_c, np.float32))


def _add_fire(params, rng, prefix, fire):
    _add_conv(params, rng, f"{prefix}/squeeze", fire.in_channels, fire.s1x1, 1)
    _add_conv(params, rng, f"{prefix}/expand1", fire.s1x1, fire.e1x1, 1)
    _add_conv(params, rng, f"{prefix}/expand3", fire.s1x1, fire.e3x3, 3)


def _add_head(params, rng, prefix, head, feat_c, feat_d):
    if head.kind == "FC":
        flat = feat_c * feat_d * feat_d
        params.add(f"{prefix}/hidden/w", _uniform(rng, flat, (flat, head.hidden_units)))
        params.add(f"{prefix}/hidden/b", np.zeros(head.hidden_units, np.float32))
        in_features = head.hidden_units
    else:
        if head.kind == "WAP":
            init = 1.0 / (feat_d * feat_d)
            params.add(
                f"{prefix}/gwap/w",
                np.full((feat_c, feat_d, feat_d), init, np.float32),
            )
        in_features = feat_c
    params.add(
        f"{prefix}/classifier/w", _uniform(rng, in_features, (in_features, head.num_classes))
    )
    params.add(f"{prefix}/classifier/b", np.zeros(head.num_classes, np.float32))


def init_parameters(spec, seed=0):
    """Allocate every parameter the spec declares, deterministically per seed.

    Weights draw from a uniform distribution scaled by fan-in; WAP weights
    start at the constant 1/(H*W) so a fresh WAP head behaves exactly like
    global average pooling; batch-norm starts at the identity transform.
    """
    rng = np.random.default_rng(seed)
    params = Parameters()
    c, _ = spec.in_channels, spec.input_size
    for layer, (name, out_c, _d) in zip(spec.backbone, spec.layer_flow()):
        if isinstance(layer, ConvLayer):
            _add_conv(params, rng, f"backbone/{name}", c, layer.out_channels, layer.kernel)
        elif isinstance(layer, FireLayer):
            _add_fire(params, rng, f"backbone/{name}", layer.fire)
        c = out_c
    for ex in spec.exits:
        feat_c, feat_d = spec.feature_shape_after(ex.attach_after)
        if ex.fire is not None:
            _add_fire(params, rng, f"{ex.name}/fire", ex.fire)
            feat_c = ex.fire.out_channels
        _add_head(params, rng, ex.name, ex.head, feat_c, feat_d)
    last_name = spec.backbone[-1].name
    feat_c, feat_d = spec.feature_shape_after(last_name)
    _add_head(params, rng, FINAL_NAME, spec.final_head, feat_c, feat_d)
    return params


# ---------------------------------------------------------------------------
# forward execution


def _rec(tape, output, inputs, backward):
    if tape is not None:
        tape.record(output, inputs, backward)


def _conv_bn_relu(x, params, prefix, mode, tape, momentum, stride=1, padding="same"):
    """conv -> batchnorm -> relu, recording each step.

    In train mode the refreshed running statistics are written back into
    params, the one sanctioned mutation in the whole forward pass.
    """
    w = params[f"{prefix}/w"]
    y = ops.conv2d(x, w, stride, padding)
    _rec(
        tape,
        y,
        (x, w),
        lambda g, x=x, w=w: ops.conv2d_backward(g, x, w, stride, padding),
    )
    gamma = params[f"{prefix}/bn_gamma"]
    beta = params[f"{prefix}/bn_beta"]
    rm = params[f"{prefix}/bn_mean"]
    rv = params[f"{prefix}/bn_var"]
    z, m_out, v_out = ops.batchnorm(
        y, gamma, beta, mode=mode, momentum=momentum, running_mean=rm, running_var=rv
    )
    if mode == "train":
        params[f"{prefix}/bn_mean"] = m_out
        params[f"{prefix}/bn_var"] = v_out
        _rec(
            tape,
            z,
            (y, gamma, beta),
            lambda g, y=y, gamma=gamma: ops.batchnorm_backward(g, y, gamma, "train"),
        )
    else:
        _rec(
            tape,
            z,
            (y, gamma, beta),
            lambda g, y=y, gamma=gamma, rm=rm, rv=rv: ops.batchnorm_backward(
                g, y, gamma, "infer", running_mean=rm, running_var=rv
            ),
        )
    a = ops.relu(z)
    _rec(tape, a, (z,), lambda g, z=z: (ops.relu_backward(g, z),))
    return a


def fire_forward(x, spec, params, prefix="", mode="infer", tape=None, momentum=0.9):
    """Squeeze to s1x1 channels, expand in parallel, concatenate.

    Channel order of the output is (expand1x1, expand3x3). Parameter names
    resolve under ``prefix`` ('' means squeeze/w etc. at top level).
    """
    cax = 0 if x.ndim == 3 else 1
    if x.shape[cax] != spec.in_channels:
        raise DimensionError(
            f"fire expects {spec.in_channels} input channels, got {x.shape[cax]}"
        )
    p = f"{prefix}/" if prefix else ""
    s = _conv_bn_relu(x, params, f"{p}squeeze", mode, tape, momentum, padding="same")
    e1 = _conv_bn_relu(s, params, f"{p}expand1", mode, tape, momentum, padding="same")
    e3 = _conv_bn_relu(s, params, f"{p}expand3", mode, tape, momentum, padding="same")
    y = np.concatenate((e1, e3), axis=cax)
    n1 = spec.e1x1

    def split(g, cax=cax, n1=n1):
        if cax == 0:
            return g[:n1], g[n1:]
        return g[:, :n1], g[:, n1:]

    _rec(tape, y, (e1, e3), split)
    return y


def gwap_forward(x, w):
    """Per-channel weighted spatial sum: out[i] = sum_jk w[i,j,k] * x[i,j,k].

    x: [C,H,W] or [B,C,H,W]; w: [C,H,W]. Returns [C] or [B,C].
    """
    if w.ndim != 3 or x.shape[-3:] != w.shape:
        raise DimensionError(
            f"weight shape {w.shape} does not match feature shape {x.shape}"
        )
    return (x * w).sum(axis=(-2, -1))


def gwap_backward(grad_out, x, w):
    """Returns (grad_x, grad_w): grad_x = g*w broadcast, grad_w = g*x summed."""
    if x.ndim == 4:
        if grad_out.shape != x.shape[:2]:
            raise DimensionError(
                f"grad shape {grad_out.shape} does not match {x.shape[:2]}"
            )
        g = grad_out[:, :, None, None]
        return g * w[None], (g * x).sum(axis=0)
    if grad_out.shape != x.shape[:1]:
        raise DimensionError(f"grad shape {grad_out.shape} does not match {x.shape[:1]}")
    g = grad_out[:, None, None]
    return g * w, g * x


def _dropout_rec(x, rate, mode, rng, tape):
    y, mask = ops.dropout(x, rate, mode, rng)
    if mask is not None:
        _rec(
            tape,
            y,
            (x,),
            lambda g, mask=mask, rate=rate: (ops.dropout_backward(g, mask, rate),),
        )
    return y


def _linear_rec(x, w, b, tape):
    y = ops.linear(x, w, b)
    _rec(tape, y, (x, w, b), lambda g, x=x, w=w: ops.linear_backward(g, x, w))
    return y


def head_forward(features, head, params, prefix="", mode="infer", tape=None, rng=None, rate=None):
    """Pool (or flatten), dropout, classify. Returns logits [K] or [B,K].

    GAP is computed as a weighted sum with constant uniform weights, which
    makes it bitwise-identical to a freshly initialized WAP head given the
    same classifier parameters.

    ``rate`` overrides the head's configured dropout rate when given.
    """
    p = f"{prefix}/" if prefix else ""
    if rate is None:
        rate = head.dropout_rate
    single = features.ndim == 3
    if head.kind == "FC":
        x4 = features[None] if single else features
        flat = x4.reshape(x4.shape[0], -1)
        _rec(tape, flat, (features,), lambda g: (g.reshape(features.shape),))
        d = _dropout_rec(flat, rate, mode, rng, tape)
        h = _linear_rec(d, params[f"{p}hidden/w"], params[f"{p}hidden/b"], tape)
        a = ops.relu(h)
        _rec(tape, a, (h,), lambda g, h=h: (ops.relu_backward(g, h),))
        logits = _linear_rec(a, params[f"{p}classifier/w"], params[f"{p}classifier/b"], tape)
        if single:
            out = logits[0]
            _rec(tape, out, (logits,), lambda g: (g[None],))
            return out
        return logits
    if head.kind == "WAP":
        w = params[f"{p}gwap/w"]
    else:
        c, hh, ww = features.shape[-3:]
        w = np.full((c, hh, ww), 1.0 / (hh * ww), dtype=features.dtype)
    pooled = gwap_forward(features, w)
    _rec(tape, pooled, (features, w), lambda g: gwap_backward(g, features, w))
    d = _dropout_rec(pooled, rate, mode, rng, tape)
    return _linear_rec(d, params[f"{p}classifier/w"], params[f"{p}classifier/b"], tape)


class Network:
    """A built network: spec + parameters + execution."""

    def __init__(self, spec, params, trained=False):
        self.spec = spec
        self.params = params
        self.trained = trained

    def forward_backbone(
        self,
        x,
        mode="infer",
        tape=None,
        momentum=0.9,
        taps=(),
        stop_after=None,
        start_after=None,
    ):
        """Run backbone layers in order, collecting requested intermediates.

        start_after resumes from a saved feature map (x is then the output
        of that layer); stop_after returns early. Returns (out, taps_dict).
        """
        taps = set(taps)
        collected = {}
        layers = self.spec.backbone
        start = 0
        if start_after is not None:
            names = [layer.name for layer in layers]
            start = names.index(start_after) + 1
        out = x
        for layer in layers[start:]:
            if isinstance(layer, ConvLayer):
                out = _conv_bn_relu(
                    out,
                    self.params,
                    f"backbone/{layer.name}",
                    mode,
                    tape,
                    momentum,
                    stride=layer.stride,
                    padding=layer.padding,
                )
            elif isinstance(layer, PoolLayer):
                prev = out
                out = ops.maxpool2x2(prev)
                _rec(
                    tape,
                    out,
                    (prev,),
                    lambda g, prev=prev: (ops.maxpool2x2_backward(g, prev),),
                )
            else:
                out = fire_forward(
                    out,
                    layer.fire,
                    self.params,
                    prefix=f"backbone/{layer.name}",
                    mode=mode,
                    tape=tape,
                    momentum=momentum,
                )
            if layer.name in taps:
                collected[layer.name] = out
            if layer.name == stop_after:
                break
        return out, collected

    def forward_branch(self, feat, exit_branch, mode="infer", tape=None, rng=None, rate=None, momentum=0.9):
        z = feat
        if exit_branch.fire is not None:
            z = fire_forward(
                feat,
                exit_branch.fire,
                self.params,
                prefix=f"{exit_branch.name}/fire",
                mode=mode,
                tape=tape,
                momentum=momentum,
            )
        return head_forward(
            z,
            exit_branch.head,
            self.params,
            prefix=exit_branch.name,
            mode=mode,
            tape=tape,
            rng=rng,
            rate=rate,
        )

    def forward_final(self, out, mode="infer", tape=None, rng=None, rate=None):
        return head_forward(
            out,
            self.spec.final_head,
            self.params,
            prefix=FINAL_NAME,
            mode=mode,
            tape=tape,
            rng=rng,
            rate=rate,
        )

    def forward(
        self,
        x,
        heads=None,
        mode="infer",
        tape=None,
        rng=None,
        momentum=0.9,
        dropout_rates=None,
        freeze_backbone=False,
    ):
        """Compute logits for the requested heads in one pass.

        heads: names among the exit branches plus 'final'; None means all.
        freeze_backbone runs the backbone in infer mode with no recording,
        so branch training cannot touch backbone parameters or statistics.
        """
        if heads is None:
            heads = self.spec.head_names()
        dropout_rates = dropout_rates or {}
        wanted_exits = [ex for ex in self.spec.exits if ex.name in heads]
        need_final = FINAL_NAME in heads
        taps = [ex.attach_after for ex in wanted_exits]
        stop = None
        if not need_final and wanted_exits:
            order = [layer.name for layer in self.spec.backbone]
            stop = max(taps, key=order.index)
        bb_mode = "infer" if freeze_backbone else mode
        bb_tape = None if freeze_backbone else tape
        out, collected = self.forward_backbone(
            x, mode=bb_mode, tape=bb_tape, momentum=momentum, taps=taps, stop_after=stop
        )
        logits = {}
        for ex in wanted_exits:
            logits[ex.name] = self.forward_branch(
                collected[ex.attach_after],
                ex,
                mode=mode,
                tape=tape,
                rng=rng,
                rate=dropout_rates.get(ex.name),
                momentum=momentum,
            )
        if need_final:
            logits[FINAL_NAME] = self.forward_final(
                out, mode=mode, tape=tape, rng=rng, rate=dropout_rates.get(FINAL_NAME)
            )
        return logits


def build_network(spec, seed=0):
    """Validate the spec and allocate its parameters. Deterministic per seed."""
    spec.validate()
    return Network(spec, init_parameters(spec, seed))
