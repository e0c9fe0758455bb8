"""Toy-scale denoising U-Nets assembled from superkernels.

Two families are available:

* ``skipinit`` -- SkipInit residual U-Net: each level holds densely connected
  residual (DCR) blocks whose branch is scaled by a zero-initialised scalar.
* ``skdcr``    -- attentional residual U-Net built from SK-DCR blocks; wrapped
  by :class:`MultiNetEnsemble` for the multi-subnetwork model.

In both, the first two convolutions of every DCR block are superkernels
(or plain maximal convolutions when ``variant == "none"``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Literal

import numpy as np

from . import tensor as T
from .archspec import ArchitectureSpec, ArchRecord
from .superkernel import (
    KernelChoice,
    SuperKernel,
    distill as distill_superkernel,
    grid_for_variant,
    make_superkernel,
    materialize,
)
from .tensor import Rng, Tensor

BLOCK_KINDS = ("skipinit", "skdcr")
MODEL_VARIANTS = ("none", "joint", "factorized", "filterwise", "filterwise-attention")


class ModelSpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass
class UNetSpec:
    block: Literal["skipinit", "skdcr"] = "skipinit"
    depth: int = 2
    base_channels: int = 8
    progression: Literal["double", "arithmetic"] = "double"
    blocks_per_level: int = 2
    kernel_candidates: tuple[int, ...] = (3, 5)
    growth_rates: tuple[float, ...] = (0.2, 0.4, 0.6)
    in_channels: int = 3
    # attentional ensemble only; 0 means a single standalone U-Net
    subnetworks: int = 0
    cab_reduction: int = 4

    def __post_init__(self):
        self.kernel_candidates = tuple(int(k) for k in self.kernel_candidates)
        self.growth_rates = tuple(float(r) for r in self.growth_rates)

    def validate(self) -> None:
        if self.block not in BLOCK_KINDS:
            raise ModelSpecError(f"block must be one of {BLOCK_KINDS}, got {self.block!r}")
        if self.progression not in ("double", "arithmetic"):
            raise ModelSpecError(f"progression must be 'double' or 'arithmetic', got {self.progression!r}")
        for name in ("depth", "base_channels", "blocks_per_level", "in_channels", "cab_reduction"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < (0 if name == "depth" else 1):
                raise ModelSpecError(f"{name} must be a positive int, got {v!r}")
        if self.subnetworks < 0:
            raise ModelSpecError("subnetworks must be >= 0")
        ks = self.kernel_candidates
        if not ks or any(k % 2 == 0 or k < 1 for k in ks) or list(ks) != sorted(set(ks)):
            raise ModelSpecError(f"kernel candidates must be ascending odd ints, got {ks}")
        rs = self.growth_rates
        if not rs or any(r <= 0 for r in rs) or list(rs) != sorted(set(rs)):
            raise ModelSpecError(f"growth rates must be ascending positive reals, got {rs}")

    def level_channels(self, d: int) -> int:
        if self.progression == "double":
            return self.base_channels * 2 ** d
        return self.base_channels * (d + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_candidates"] = list(self.kernel_candidates)
        d["growth_rates"] = list(self.growth_rates)
        return d


def growth_filters(width: int, rates) -> tuple[int, ...]:
    """Filter candidates max(1, round-half-up(r * width)), deduplicated ascending."""
    fs = sorted({max(1, int(math.floor(r * width + 0.5))) for r in rates})
    return tuple(fs)


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    """Attribute-walking parameter container, torch-style naming."""

    def named_children(self) -> Iterator[tuple[str, object]]:
        for name, v in vars(self).items():
            if isinstance(v, (Module, SuperKernel)):
                yield name, v
            elif isinstance(v, list):
                for i, item in enumerate(v):
                    if isinstance(item, (Module, SuperKernel)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for name, child in self.named_children():
            if isinstance(child, SuperKernel):
                for pn, p in child.parameters():
                    yield f"{prefix}{name}.{pn}", p
            else:
                yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def superkernels(self, prefix: str = "") -> Iterator[tuple[str, SuperKernel]]:
        for name, child in self.named_children():
            if isinstance(child, SuperKernel):
                yield prefix + name, child
            else:
                yield from child.superkernels(f"{prefix}{name}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in own.items():
            if state[n].shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {p.shape}")
            p.data[...] = state[n]

    def __call__(self, x: Tensor, rng: Rng | None = None) -> Tensor:
        return self.forward(x, rng)

    def forward(self, x: Tensor, rng: Rng | None) -> Tensor:
        raise NotImplementedError


class Conv2d(Module):
    """Plain 'same'-padded convolution with an optional trailing ReLU."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: Rng | None, *, stride: int = 1,
                 relu: bool = False, zero_init: bool = False):
        std = math.sqrt(2.0 / (in_ch * k * k))
        w = np.zeros((out_ch, in_ch, k, k)) if zero_init or rng is None else rng.normal((out_ch, in_ch, k, k), scale=std)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.relu = relu

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    def forward(self, x, rng=None):
        y = T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.kernel_size // 2)
        return T.relu(y) if self.relu else y

    @classmethod
    def from_arrays(cls, weight: np.ndarray, bias: np.ndarray | None, *, stride=1, relu=False) -> "Conv2d":
        c = cls.__new__(cls)
        c.weight = Tensor(np.array(weight, dtype=np.float64), requires_grad=True)
        c.bias = Tensor(np.array(bias if bias is not None else np.zeros(weight.shape[0]), dtype=np.float64),
                        requires_grad=True)
        c.stride, c.relu = stride, relu
        return c

    def slice_inputs(self, keep: list[int]) -> None:
        self.weight = Tensor(np.ascontiguousarray(self.weight.data[:, keep]), requires_grad=True)


class ChannelAttentionBlock(Module):
    """Squeeze-excitation: pool -> reduce -> ReLU -> expand -> sigmoid gate."""

    def __init__(self, channels: int, reduction: int, rng: Rng | None):
        hidden = max(1, channels // reduction)
        self.reduce = Conv2d(channels, hidden, 1, rng, relu=True)
        self.expand = Conv2d(hidden, channels, 1, rng)

    def gate(self, x: Tensor) -> Tensor:
        s = T.global_avg_pool2d(x)
        return T.sigmoid(self.expand(self.reduce(s)))

    def forward(self, x, rng=None):
        return x * self.gate(x)


def _searchable(in_ch: int, filters: tuple[int, ...], spec: UNetSpec, variant: str, rng: Rng, opts: dict):
    if variant == "none":
        return Conv2d(in_ch, max(filters), max(spec.kernel_candidates), rng, relu=True)
    grid = grid_for_variant(variant, spec.kernel_candidates, filters)
    return make_superkernel(in_ch, grid, variant, rng, activation=T.relu, **opts)


def _out_channels(layer) -> int:
    return layer.weight.shape[0]


class DcrStack(Module):
    """conv1 -> concat -> conv2 -> concat -> 1x1 conv3 restoring the block width."""

    def __init__(self, width: int, spec: UNetSpec, variant: str, rng: Rng, opts: dict, final_relu: bool):
        filters = growth_filters(width, spec.growth_rates)
        self.conv1 = _searchable(width, filters, spec, variant, rng, opts)
        g1 = _out_channels(self.conv1)
        self.conv2 = _searchable(width + g1, filters, spec, variant, rng, opts)
        g2 = _out_channels(self.conv2)
        self.conv3 = Conv2d(width + g1 + g2, width, 1, rng, relu=final_relu)

    def forward(self, x, rng=None):
        h1 = self.conv1(x, rng)
        c1 = T.concat([x, h1], axis=1)
        h2 = self.conv2(c1, rng)
        return self.conv3(T.concat([c1, h2], axis=1))

    def distill(self, arch: dict[str, KernelChoice] | None, prefix: str, records: list[ArchRecord]) -> None:
        width = self.conv3.weight.shape[0]
        keep = list(range(width))
        offset = width
        for name in ("conv1", "conv2"):
            layer = getattr(self, name)
            if isinstance(layer, SuperKernel):
                path = prefix + name
                choice = arch[path] if arch is not None else distill_superkernel(layer)
                w, b = materialize(layer, choice, in_channels=keep)
                records.append(ArchRecord.from_choice(path, layer.variant, choice))
                setattr(self, name, Conv2d.from_arrays(w, b, stride=layer.stride, relu=True))
                kept_out = [offset + c for c in choice.channels()]
                o = layer.grid.o_max
            else:
                if keep != list(range(layer.weight.shape[1])):
                    layer.slice_inputs(keep)
                o = layer.weight.shape[0]
                kept_out = list(range(offset, offset + o))
            keep = keep + kept_out
            offset += o
        if keep != list(range(self.conv3.weight.shape[1])):
            self.conv3.slice_inputs(keep)


class SkipInitDcrBlock(Module):
    def __init__(self, width, spec, variant, rng, opts):
        self.inner = DcrStack(width, spec, variant, rng, opts, final_relu=False)
        self.alpha = Tensor(np.zeros(()), requires_grad=True)

    def forward(self, x, rng=None):
        return x + self.alpha * self.inner(x, rng)


class SkDcrBlock(Module):
    def __init__(self, width, spec, variant, rng, opts):
        self.inner = DcrStack(width, spec, variant, rng, opts, final_relu=True)

    def forward(self, x, rng=None):
        return x + self.inner(x, rng)


_BLOCKS = {"skipinit": SkipInitDcrBlock, "skdcr": SkDcrBlock}


class UNetBody(Module):
    """Encoder/decoder with stride-2 down, pixel-shuffle up and CAB after each skip concat.

    Maps ``in_ch`` input channels to ``base_channels`` features at full resolution.
    """

    def __init__(self, in_ch: int, spec: UNetSpec, variant: str, rng: Rng, opts: dict):
        Block = _BLOCKS[spec.block]
        D, n = spec.depth, spec.blocks_per_level
        self.depth = D
        self.enc_convs, self.enc_blocks, self.downs = [], [], []
        prev = in_ch
        for d in range(D):
            c = spec.level_channels(d)
            self.enc_convs.append(Conv2d(prev, c, 3, rng, relu=True))
            self.enc_blocks.append(_Seq([Block(c, spec, variant, rng, opts) for _ in range(n)]))
            self.downs.append(Conv2d(c, spec.level_channels(d + 1), 3, rng, stride=2, relu=True))
            prev = spec.level_channels(d + 1)
        if D == 0:
            self.enc_convs.append(Conv2d(prev, spec.level_channels(0), 3, rng, relu=True))
        cb = spec.level_channels(D)
        self.bottom = _Seq([Block(cb, spec, variant, rng, opts) for _ in range(n)])
        self.ups, self.cabs, self.fuses, self.dec_blocks = [], [], [], []
        for d in reversed(range(D)):
            c, c_below = spec.level_channels(d), spec.level_channels(d + 1)
            self.ups.append(Conv2d(c_below, 4 * c, 3, rng))
            self.cabs.append(ChannelAttentionBlock(2 * c, spec.cab_reduction, rng))
            self.fuses.append(Conv2d(2 * c, c, 1, rng, relu=True))
            self.dec_blocks.append(_Seq([Block(c, spec, variant, rng, opts) for _ in range(n)]))
        self.bottleneck_shape: tuple[int, ...] | None = None

    def forward(self, x, rng=None):
        skips = []
        h = x
        if self.depth == 0:
            h = self.enc_convs[0](h)
        for conv, blocks, down in zip(self.enc_convs, self.enc_blocks, self.downs):
            h = blocks(conv(h), rng)
            skips.append(h)
            h = down(h)
        h = self.bottom(h, rng)
        self.bottleneck_shape = h.shape
        for up, cab, fuse, blocks, skip in zip(self.ups, self.cabs, self.fuses, self.dec_blocks, reversed(skips)):
            u = T.pixel_shuffle(up(h), 2)
            h = blocks(fuse(cab(T.concat([skip, u], axis=1))), rng)
        return h


class _Seq(Module):
    def __init__(self, layers: list):
        self.layers = layers

    def forward(self, x, rng=None):
        for layer in self.layers:
            x = layer(x, rng)
        return x


class DenoisingUNet(Module):
    """Single U-Net with a zero-initialised output conv and a global input residual."""

    def __init__(self, spec: UNetSpec, variant: str, rng: Rng, opts: dict):
        self.body = UNetBody(spec.in_channels, spec, variant, rng, opts)
        self.head = Conv2d(spec.base_channels, spec.in_channels, 3, rng, zero_init=True)

    def forward(self, x, rng=None):
        return self.head(self.body(x, rng)) + x


class MultiNetEnsemble(Module):
    """n U-Net subnetworks fused by channel attention, a k=3 conv and the input residual."""

    def __init__(self, spec: UNetSpec, variant: str, rng: Rng, opts: dict):
        n = spec.subnetworks
        self.subnets = [UNetBody(spec.in_channels, spec, variant, rng, opts) for _ in range(n)]
        self.fusion = ChannelAttentionBlock(n * spec.base_channels, spec.cab_reduction, rng)
        self.head = Conv2d(n * spec.base_channels, spec.in_channels, 3, rng, zero_init=True)

    def forward(self, x, rng=None):
        feats = [net(x, rng) for net in self.subnets]
        h = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
        return self.head(self.fusion(h)) + x


@dataclass
class Model:
    """A built network plus the settings it was built with."""

    net: Module
    spec: UNetSpec
    variant: str
    sk_options: dict = field(default_factory=dict)
    distilled: bool = False

    def __call__(self, x: Tensor, rng: Rng | None = None) -> Tensor:
        return forward_model(self, x, rng)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def named_parameters(self):
        return self.net.named_parameters()

    def num_parameters(self) -> int:
        return self.net.num_parameters()

    def superkernels(self):
        return list(self.net.superkernels())

    def state_dict(self):
        return self.net.state_dict()

    def load_state_dict(self, state):
        self.net.load_state_dict(state)

    def zero_grad(self):
        self.net.zero_grad()

    def config(self) -> dict:
        return {"spec": self.spec.to_dict(), "variant": self.variant,
                "sk_options": dict(self.sk_options), "distilled": self.distilled}


SK_OPTION_KEYS = ("tau", "mode", "hard", "key_dim", "threshold")


def build_model(spec: UNetSpec, variant: str = "joint", rng: Rng | None = None, **sk_options) -> Model:
    """Build a supernetwork (or the plain baseline when ``variant == 'none'``)."""
    spec.validate()
    if variant not in MODEL_VARIANTS:
        raise ModelSpecError(f"variant must be one of {MODEL_VARIANTS}, got {variant!r}")
    unknown = set(sk_options) - set(SK_OPTION_KEYS)
    if unknown:
        raise ModelSpecError(f"unknown superkernel options {sorted(unknown)}")
    rng = rng if rng is not None else Rng(0)
    if spec.subnetworks > 0:
        net = MultiNetEnsemble(spec, variant, rng, sk_options)
    else:
        net = DenoisingUNet(spec, variant, rng, sk_options)
    return Model(net, spec, variant, dict(sk_options))


def forward_model(model: Model, x: Tensor, rng: Rng | None = None) -> Tensor:
    """Run the network; ``rng=None`` selects each superkernel's distilled slice."""
    div = 2 ** model.spec.depth
    if x.ndim != 4 or x.shape[1] != model.spec.in_channels:
        raise ModelSpecError(f"expected NCHW input with {model.spec.in_channels} channels, got {x.shape}")
    if x.shape[2] % div or x.shape[3] % div:
        raise ModelSpecError(f"spatial dims {x.shape[2:]} must be divisible by 2^depth = {div}")
    return model.net(x, rng)


def _dcr_stacks(module: Module, prefix: str = "") -> Iterator[tuple[str, DcrStack]]:
    for name, child in module.named_children():
        if isinstance(child, DcrStack):
            yield f"{prefix}{name}.", child
        elif isinstance(child, Module):
            yield from _dcr_stacks(child, f"{prefix}{name}.")


def distill_model(model: Model, arch: ArchitectureSpec | None = None) -> tuple[Model, ArchitectureSpec]:
    """Replace every superkernel by its materialised plain conv.

    When ``arch`` is given its choices are applied instead of the argmax /
    threshold rule (used to rebuild a distilled model from a checkpoint).
    """
    import copy

    new = copy.deepcopy(model)
    records: list[ArchRecord] = []
    choices = arch.choices() if arch is not None else None
    for prefix, stack in _dcr_stacks(new.net):
        stack.distill(choices, prefix, records)
    new.distilled = True
    return new, ArchitectureSpec(records)
