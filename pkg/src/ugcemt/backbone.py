"""V-Net style 3D encoder/decoder written against a flat parameter dict.

Layout for ``levels = L`` and ``base_channels = b`` (channels ``c_i = b * 2**i``):

    enc{i}   i = 0..L-1   n_i convs (3x3x3) + instance norm + ReLU, n_i = min(i+1, 3)
    down{i}  i = 0..L-2   2x2x2 stride-2 conv c_i -> c_{i+1} + norm + ReLU
    up{i}    i = L-2..0   2x2x2 stride-2 transposed conv c_{i+1} -> c_i + norm + ReLU
    dec{i}   i = L-2..0   concat(up{i}, enc{i}) then n_i convs, first one 2c_i -> c_i
    head                  1x1x1 conv c_0 -> num_classes

Stages contain no internal additive skip; the only skip is the long
encoder-to-decoder concatenation. Every conv carries a bias and every norm an
affine (weight, bias) pair, so for L=3, b=4, C=2 and one input channel the
parameter count is 33290 (see ``tests/test_backbone.py`` for the hand count).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError

ParamSet = dict  # str -> torch.Tensor, insertion order is canonical


def convs_in_stage(i: int) -> int:
    return min(i + 1, 3)


@dataclass(frozen=True)
class NetworkSpec:
    levels: int = 3
    base_channels: int = 4
    num_classes: int = 2
    in_channels: int = 1
    dropout_rate: float = 0.5
    dropout_sites: tuple | None = None
    channel_cap: int = 1024

    def channels(self, i: int) -> int:
        return self.base_channels * 2 ** i

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.levels - 1)

    @property
    def sites(self) -> frozenset:
        if self.dropout_sites is None:
            return frozenset({f"enc{self.levels - 1}", f"dec{self.levels - 2}"})
        return frozenset(self.dropout_sites)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def validate(self) -> "NetworkSpec":
        if self.levels < 2:
            raise ConfigurationError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 2:
            raise ConfigurationError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1], got {self.dropout_rate}")
        if self.levels * self.base_channels > self.channel_cap:
            raise ConfigurationError(
                f"levels*base_channels = {self.levels * self.base_channels} exceeds channel_cap {self.channel_cap}")
        known = {f"enc{i}" for i in range(self.levels)} | {f"dec{i}" for i in range(self.levels - 1)}
        unknown = self.sites - known
        if unknown:
            raise ConfigurationError(f"unknown dropout sites {sorted(unknown)}")
        return self


@dataclass
class Stage:
    name: str
    ops: list = field(default_factory=list)  # tuples: (kind, key, cin, cout) / ("relu",) / ("dropout", site) / ("concat",)


def layout(spec: NetworkSpec) -> list[Stage]:
    """Ordered list of stages with their operations; ``forward`` executes exactly this list."""
    spec.validate()
    stages = []
    cin = spec.in_channels
    for i in range(spec.levels):
        c = spec.channels(i)
        st = Stage(f"enc{i}")
        for j in range(convs_in_stage(i)):
            st.ops += [("conv3", f"enc{i}.conv{j}", cin, c), ("norm", f"enc{i}.norm{j}", c, c), ("relu",)]
            cin = c
        if st.name in spec.sites:
            st.ops.append(("dropout", st.name))
        stages.append(st)
        if i < spec.levels - 1:
            stages.append(Stage(f"down{i}", [("down", f"down{i}", c, spec.channels(i + 1)),
                                             ("norm", f"down{i}.norm", spec.channels(i + 1), spec.channels(i + 1)),
                                             ("relu",)]))
            cin = spec.channels(i + 1)
    for i in range(spec.levels - 2, -1, -1):
        c = spec.channels(i)
        stages.append(Stage(f"up{i}", [("up", f"up{i}", spec.channels(i + 1), c),
                                       ("norm", f"up{i}.norm", c, c), ("relu",)]))
        st = Stage(f"dec{i}", [("concat",)])
        cin = 2 * c
        for j in range(convs_in_stage(i)):
            st.ops += [("conv3", f"dec{i}.conv{j}", cin, c), ("norm", f"dec{i}.norm{j}", c, c), ("relu",)]
            cin = c
        if st.name in spec.sites:
            st.ops.append(("dropout", st.name))
        stages.append(st)
    stages.append(Stage("head", [("conv1", "head", spec.channels(0), spec.num_classes)]))
    return stages


def parameter_shapes(spec: NetworkSpec) -> dict:
    shapes = {}
    for st in layout(spec):
        for op in st.ops:
            kind = op[0]
            if kind in ("conv3", "down", "conv1"):
                _, key, cin, cout = op
                k = {"conv3": 3, "down": 2, "conv1": 1}[kind]
                shapes[f"{key}.weight"] = (cout, cin, k, k, k)
                shapes[f"{key}.bias"] = (cout,)
            elif kind == "up":
                _, key, cin, cout = op
                shapes[f"{key}.weight"] = (cin, cout, 2, 2, 2)
                shapes[f"{key}.bias"] = (cout,)
            elif kind == "norm":
                _, key, c, _ = op
                shapes[f"{key}.weight"] = (c,)
                shapes[f"{key}.bias"] = (c,)
    return shapes


def build_backbone(spec: NetworkSpec, seed: int, dtype=torch.float32) -> ParamSet:
    """He-normal conv weights, zero biases, unit/zero norm affine; deterministic in ``seed``."""
    spec.validate()
    gen = torch.Generator().manual_seed(int(seed))
    params = {}
    for name, shape in parameter_shapes(spec).items():
        if ".norm" in name:
            params[name] = torch.ones(shape, dtype=dtype) if name.endswith("weight") else torch.zeros(shape, dtype=dtype)
        elif name.endswith("bias"):
            params[name] = torch.zeros(shape, dtype=dtype)
        else:
            if name.startswith("up"):
                fan_in = shape[0] * math.prod(shape[2:])
            else:
                fan_in = math.prod(shape[1:])
            std = math.sqrt(2.0 / fan_in)
            params[name] = torch.randn(shape, generator=gen, dtype=torch.float64).mul_(std).to(dtype)
    return params


def count_parameters(params: ParamSet) -> int:
    return sum(int(p.numel()) for p in params.values())


def has_internal_skip(spec: NetworkSpec) -> bool:
    """True if any stage adds a tensor back onto its own input (a short residual)."""
    return any(op[0] == "add" for st in layout(spec) for op in st.ops)


def dropout(x: torch.Tensor, p: float, gen: torch.Generator) -> torch.Tensor:
    if p <= 0.0:
        return x
    if p >= 1.0:
        return torch.zeros_like(x)
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def _run_ops(params, st: Stage, h, spec, dropout_on, gen, skip=None):
    for op in st.ops:
        kind = op[0]
        if kind == "conv3":
            h = F.conv3d(h, params[f"{op[1]}.weight"], params[f"{op[1]}.bias"], padding=1)
        elif kind == "conv1":
            h = F.conv3d(h, params[f"{op[1]}.weight"], params[f"{op[1]}.bias"])
        elif kind == "down":
            h = F.conv3d(h, params[f"{op[1]}.weight"], params[f"{op[1]}.bias"], stride=2)
        elif kind == "up":
            h = F.conv_transpose3d(h, params[f"{op[1]}.weight"], params[f"{op[1]}.bias"], stride=2)
        elif kind == "norm":
            h = F.instance_norm(h, weight=params[f"{op[1]}.weight"], bias=params[f"{op[1]}.bias"], eps=1e-5)
        elif kind == "relu":
            h = F.relu(h)
        elif kind == "concat":
            h = torch.cat([h, skip], dim=1)
        elif kind == "dropout":
            if dropout_on:
                h = dropout(h, spec.dropout_rate, gen)
        else:  # pragma: no cover
            raise ConfigurationError(f"unknown op {kind}")
    return h


def _as_batch(x, spec: NetworkSpec):
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None, None]
    if x.dim() != 5:
        raise ShapeError(f"expected (D,H,W) or (B,C,D,H,W) input, got shape {tuple(x.shape)}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"expected {spec.in_channels} input channels, got {x.shape[1]}")
    bad = [s for s in x.shape[2:] if s % spec.divisor]
    if bad:
        raise ShapeError(f"spatial dims {tuple(x.shape[2:])} not divisible by {spec.divisor}")
    return x, squeeze


def _generator(gen_or_seed):
    if isinstance(gen_or_seed, torch.Generator):
        return gen_or_seed
    return torch.Generator().manual_seed(int(gen_or_seed))


def encode(params: ParamSet, x: torch.Tensor, spec: NetworkSpec, dropout_on: bool = False, gen=0):
    """Run encoder stages. Returns (skips, bottleneck); ``x`` must be batched."""
    x, _ = _as_batch(x, spec)
    gen = _generator(gen)
    skips = []
    h = x.to(next(iter(params.values())).dtype)
    for st in layout(spec):
        if st.name.startswith("enc"):
            h = _run_ops(params, st, h, spec, dropout_on, gen)
            skips.append(h)
        elif st.name.startswith("down"):
            h = _run_ops(params, st, h, spec, dropout_on, gen)
    return skips[:-1], skips[-1]


def decode(params: ParamSet, skips, bottleneck: torch.Tensor, spec: NetworkSpec,
           dropout_on: bool = False, gen=0) -> torch.Tensor:
    gen = _generator(gen)
    h = bottleneck
    for st in layout(spec):
        if st.name.startswith("up") or st.name == "head":
            h = _run_ops(params, st, h, spec, dropout_on, gen)
        elif st.name.startswith("dec"):
            h = _run_ops(params, st, h, spec, dropout_on, gen, skip=skips[int(st.name[3:])])
    return h


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    bottleneck_features: torch.Tensor
    softmax: torch.Tensor


def forward(params: ParamSet, x, spec: NetworkSpec, dropout_on: bool = False, rng_seed: int = 0) -> ForwardOutput:
    """Full forward pass. Unbatched (D,H,W) input gives unbatched (C,D,H,W) output.

    With ``dropout_on=False`` the result does not depend on ``rng_seed``.
    """
    x, squeeze = _as_batch(x, spec)
    gen = _generator(rng_seed)
    skips, bott = encode(params, x, spec, dropout_on, gen)
    logits = decode(params, skips, bott, spec, dropout_on, gen)
    if squeeze:
        logits, bott = logits[0], bott[0]
    return ForwardOutput(logits=logits, bottleneck_features=bott,
                         softmax=torch.softmax(logits, dim=-4))
