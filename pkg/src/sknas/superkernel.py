"""Searchable convolutions over a shared maximal kernel.

A superkernel holds one weight tensor of shape ``(O_max, I, K_max, K_max)``.
Each candidate sub-convolution (a *slice*) is the centered ``k x k`` window
together with a subset of output channels: the first ``f`` channels for the
joint and factorized variants, an arbitrary subset for the filterwise ones.
A trainable structural distribution over slices is relaxed with
Gumbel-Softmax / relaxed Bernoulli samples, and the weighted sum of slice
convolutions is evaluated as a single convolution with a mask-weighted
kernel (``full`` mode), or term by term with the activation inside the sum
(``separate`` mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor

Variant = Literal["joint", "factorized", "filterwise", "filterwise-attention"]
VARIANTS: tuple[str, ...] = ("joint", "factorized", "filterwise", "filterwise-attention")
CATEGORICAL_FILTERS = ("joint", "factorized")

# large enough that softmax/sigmoid saturate to exact 0/1 under any Gumbel draw
SATURATED_LOGIT = 1000.0


class SuperKernelError(ValueError):
    pass


class InvalidChoiceError(SuperKernelError):
    pass


class UnsupportedModeError(SuperKernelError):
    pass


# ---------------------------------------------------------------------------
# slice grid and choices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SliceGrid:
    """Candidate kernel sizes plus either filter counts or a filter budget.

    Joint/factorized grids set ``filter_counts``; filterwise grids set
    ``max_filters`` and choose arbitrary channel subsets of that size.
    """

    kernel_sizes: tuple[int, ...]
    filter_counts: tuple[int, ...] | None = None
    max_filters: int | None = None

    def __post_init__(self):
        ks = tuple(int(k) for k in self.kernel_sizes)
        object.__setattr__(self, "kernel_sizes", ks)
        if not ks:
            raise SuperKernelError("kernel_sizes must be non-empty")
        if any(k < 1 or k % 2 == 0 for k in ks):
            raise SuperKernelError(f"kernel sizes must be positive odd ints, got {ks}")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise SuperKernelError(f"kernel sizes must be strictly increasing, got {ks}")
        if (self.filter_counts is None) == (self.max_filters is None):
            raise SuperKernelError("exactly one of filter_counts / max_filters must be given")
        if self.filter_counts is not None:
            fs = tuple(int(f) for f in self.filter_counts)
            object.__setattr__(self, "filter_counts", fs)
            if not fs or fs[0] < 1 or any(b <= a for a, b in zip(fs, fs[1:])):
                raise SuperKernelError(f"filter counts must be positive and strictly increasing, got {fs}")
        elif int(self.max_filters) < 1:
            raise SuperKernelError(f"max_filters must be positive, got {self.max_filters}")

    @property
    def filterwise(self) -> bool:
        return self.max_filters is not None

    @property
    def k_max(self) -> int:
        return self.kernel_sizes[-1]

    @property
    def o_max(self) -> int:
        return int(self.max_filters) if self.filterwise else self.filter_counts[-1]

    @property
    def n_k(self) -> int:
        return len(self.kernel_sizes)

    @property
    def n_f(self) -> int:
        return int(self.max_filters) if self.filterwise else len(self.filter_counts)

    def spatial_masks(self) -> np.ndarray:
        """(n_k, K_max, K_max) binary masks of the centered windows."""
        K = self.k_max
        out = np.zeros((self.n_k, K, K))
        for i, k in enumerate(self.kernel_sizes):
            lo = (K - k) // 2
            out[i, lo:lo + k, lo:lo + k] = 1.0
        return out

    def channel_masks(self) -> np.ndarray:
        """(n_f, O_max) first-f channel masks; only for count grids."""
        if self.filterwise:
            raise SuperKernelError("channel_masks() is defined for filter-count grids only")
        out = np.zeros((self.n_f, self.o_max))
        for j, f in enumerate(self.filter_counts):
            out[j, :f] = 1.0
        return out


@dataclass(frozen=True)
class KernelChoice:
    """One discrete slice: a kernel size and either a count or a channel mask."""

    kernel_size: int
    count: int | None = None
    mask: tuple[bool, ...] | None = None

    def __post_init__(self):
        if (self.count is None) == (self.mask is None):
            raise InvalidChoiceError("exactly one of count / mask must be set")
        if self.mask is not None:
            object.__setattr__(self, "mask", tuple(bool(m) for m in self.mask))

    def channels(self, o_max: int | None = None) -> list[int]:
        if self.count is not None:
            return list(range(self.count))
        return [i for i, m in enumerate(self.mask) if m]

    def validate(self, grid: SliceGrid) -> None:
        if self.kernel_size not in grid.kernel_sizes:
            raise InvalidChoiceError(f"kernel size {self.kernel_size} not in {grid.kernel_sizes}")
        if grid.filterwise:
            if self.mask is None or len(self.mask) != grid.max_filters:
                raise InvalidChoiceError(f"filterwise grid needs a mask of length {grid.max_filters}")
            if not any(self.mask):
                raise InvalidChoiceError("filter mask selects no channels")
        elif self.count not in grid.filter_counts:
            raise InvalidChoiceError(f"filter count {self.count} not in {grid.filter_counts}")


def slice_mask(grid: SliceGrid, choice: KernelChoice) -> np.ndarray:
    """Binary (O_max, 1, K_max, K_max) indicator of one slice."""
    choice.validate(grid)
    K = grid.k_max
    lo = (K - choice.kernel_size) // 2
    m = np.zeros((grid.o_max, 1, K, K))
    ch = choice.channels()
    m[ch, :, lo:lo + choice.kernel_size, lo:lo + choice.kernel_size] = 1.0
    return m


# ---------------------------------------------------------------------------
# structural distributions
# ---------------------------------------------------------------------------

@dataclass
class StructuralWeights:
    """One relaxed sample. Which fields are set depends on the variant.

    ``pair`` is the (n_k, n_f) joint simplex sample; ``kernel`` is an n_k
    simplex sample; ``filter`` is either an n_f simplex sample (factorized)
    or F per-filter relaxed Bernoulli values (filterwise variants).
    """

    pair: Tensor | None = None
    kernel: Tensor | None = None
    filter: Tensor | None = None


def gumbel_softmax(logits: Tensor, tau: float, rng: Rng, hard: bool = False, axis: int = -1,
                   sample_shape: tuple[int, ...] = ()) -> Tensor:
    """softmax((logits + g) / tau) along ``axis``; hard=True is straight-through one-hot."""
    if tau <= 0:
        raise SuperKernelError(f"temperature must be positive, got {tau}")
    g = T.gumbel_noise(rng, tuple(sample_shape) + logits.shape)
    soft = T.softmax((logits + g) / tau, axis=axis)
    if not hard:
        return soft
    idx = np.argmax(soft.data, axis=axis)
    one_hot = np.zeros_like(soft.data)
    np.put_along_axis(one_hot, np.expand_dims(idx, axis), 1.0, axis=axis)
    return T.straight_through(soft, one_hot)


def relaxed_bernoulli(logits: Tensor, tau: float, rng: Rng, hard: bool = False,
                      sample_shape: tuple[int, ...] = ()) -> Tensor:
    """sigmoid((logits + g1 - g0) / tau) per entry; hard=True thresholds at 0.5 straight-through."""
    if tau <= 0:
        raise SuperKernelError(f"temperature must be positive, got {tau}")
    shape = tuple(sample_shape) + logits.shape
    g1 = T.gumbel_noise(rng, shape)
    g0 = T.gumbel_noise(rng, shape)
    soft = T.sigmoid((logits + (g1 - g0)) / tau)
    if not hard:
        return soft
    return T.straight_through(soft, (soft.data > 0.5).astype(np.float64))


def _first_argmax(a: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the smaller candidate on ties
    return int(np.argmax(a))


class StructuralDistribution:
    variant: str = ""

    def parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def sample(self, tau: float, rng: Rng, hard: bool = False) -> StructuralWeights:
        raise NotImplementedError

    def mode_weights(self, grid: SliceGrid, threshold: float = 0.0) -> StructuralWeights:
        """Deterministic one-hot weights of the distilled choice (no gradient)."""
        choice = self.distill(grid, threshold)
        return self.weights_for(grid, choice)

    def weights_for(self, grid: SliceGrid, choice: KernelChoice) -> StructuralWeights:
        raise NotImplementedError

    def distill(self, grid: SliceGrid, threshold: float = 0.0) -> KernelChoice:
        raise NotImplementedError

    def harden(self, grid: SliceGrid, choice: KernelChoice) -> None:
        """Overwrite the logits so the distribution puts all its mass on ``choice``."""
        raise NotImplementedError


def _one_hot(n: int, i: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


def _saturated(n: int, on) -> np.ndarray:
    v = np.full(n, -SATURATED_LOGIT)
    v[on] = SATURATED_LOGIT
    return v


class JointDistribution(StructuralDistribution):
    variant = "joint"

    def __init__(self, grid: SliceGrid):
        self.logits = Tensor(np.zeros((grid.n_k, grid.n_f)), requires_grad=True)

    def parameters(self):
        return [("logits", self.logits)]

    def sample(self, tau, rng, hard=False):
        n_k, n_f = self.logits.shape
        flat = gumbel_softmax(self.logits.reshape(n_k * n_f), tau, rng, hard)
        return StructuralWeights(pair=flat.reshape(n_k, n_f))

    def probabilities(self) -> np.ndarray:
        z = self.logits.data.reshape(-1)
        e = np.exp(z - z.max())
        return (e / e.sum()).reshape(self.logits.shape)

    def distill(self, grid, threshold=0.0):
        a, b = np.unravel_index(_first_argmax(self.logits.data.reshape(-1)), self.logits.shape)
        return KernelChoice(grid.kernel_sizes[a], count=grid.filter_counts[b])

    def weights_for(self, grid, choice):
        a = grid.kernel_sizes.index(choice.kernel_size)
        b = grid.filter_counts.index(choice.count)
        w = np.zeros(self.logits.shape)
        w[a, b] = 1.0
        return StructuralWeights(pair=Tensor(w))

    def harden(self, grid, choice):
        a = grid.kernel_sizes.index(choice.kernel_size)
        b = grid.filter_counts.index(choice.count)
        w = np.full(self.logits.shape, -SATURATED_LOGIT)
        w[a, b] = SATURATED_LOGIT
        self.logits.data[...] = w


class FactorizedDistribution(StructuralDistribution):
    variant = "factorized"

    def __init__(self, grid: SliceGrid):
        self.kernel_logits = Tensor(np.zeros(grid.n_k), requires_grad=True)
        self.filter_logits = Tensor(np.zeros(grid.n_f), requires_grad=True)

    def parameters(self):
        return [("kernel_logits", self.kernel_logits), ("filter_logits", self.filter_logits)]

    def sample(self, tau, rng, hard=False):
        return StructuralWeights(
            kernel=gumbel_softmax(self.kernel_logits, tau, rng, hard),
            filter=gumbel_softmax(self.filter_logits, tau, rng, hard),
        )

    def distill(self, grid, threshold=0.0):
        return KernelChoice(
            grid.kernel_sizes[_first_argmax(self.kernel_logits.data)],
            count=grid.filter_counts[_first_argmax(self.filter_logits.data)],
        )

    def weights_for(self, grid, choice):
        return StructuralWeights(
            kernel=Tensor(_one_hot(grid.n_k, grid.kernel_sizes.index(choice.kernel_size))),
            filter=Tensor(_one_hot(grid.n_f, grid.filter_counts.index(choice.count))),
        )

    def harden(self, grid, choice):
        self.kernel_logits.data[...] = _saturated(grid.n_k, grid.kernel_sizes.index(choice.kernel_size))
        self.filter_logits.data[...] = _saturated(grid.n_f, grid.filter_counts.index(choice.count))


class FilterwiseDistribution(StructuralDistribution):
    variant = "filterwise"

    def __init__(self, grid: SliceGrid, init_filter_logit: float = 1.0):
        self.kernel_logits = Tensor(np.zeros(grid.n_k), requires_grad=True)
        self.filter_logits = Tensor(np.full(grid.n_f, float(init_filter_logit)), requires_grad=True)

    def parameters(self):
        return [("kernel_logits", self.kernel_logits), ("filter_logits", self.filter_logits)]

    def effective_filter_logits(self) -> Tensor:
        return self.filter_logits

    def sample(self, tau, rng, hard=False):
        kernel = gumbel_softmax(self.kernel_logits, tau, rng, hard)
        return StructuralWeights(
            kernel=kernel,
            filter=relaxed_bernoulli(self.effective_filter_logits(), tau, rng, hard),
        )

    def distill(self, grid, threshold=0.0):
        theta = self.effective_filter_logits().data
        mask = theta > threshold
        if not mask.any():
            mask = np.zeros(theta.shape, dtype=bool)
            mask[_first_argmax(theta)] = True
        return KernelChoice(grid.kernel_sizes[_first_argmax(self.kernel_logits.data)], mask=tuple(mask))

    def weights_for(self, grid, choice):
        return StructuralWeights(
            kernel=Tensor(_one_hot(grid.n_k, grid.kernel_sizes.index(choice.kernel_size))),
            filter=Tensor(np.asarray(choice.mask, dtype=np.float64)),
        )

    def harden(self, grid, choice):
        self.kernel_logits.data[...] = _saturated(grid.n_k, grid.kernel_sizes.index(choice.kernel_size))
        self.filter_logits.data[...] = _saturated(grid.n_f, list(choice.channels()))


class FilterwiseAttentionDistribution(FilterwiseDistribution):
    """Bernoulli logits are ``softmax(V V^T) @ base`` with one key row per filter."""

    variant = "filterwise-attention"

    def __init__(self, grid: SliceGrid, rng: Rng, key_dim: int = 8, key_std: float = 0.1,
                 init_base_logit: float = 1.0):
        self.kernel_logits = Tensor(np.zeros(grid.n_k), requires_grad=True)
        self.base_logits = Tensor(np.full(grid.n_f, float(init_base_logit)), requires_grad=True)
        self.keys = Tensor(rng.normal((grid.n_f, key_dim), scale=key_std), requires_grad=True)

    def parameters(self):
        return [("kernel_logits", self.kernel_logits), ("base_logits", self.base_logits),
                ("keys", self.keys)]

    def attention(self) -> Tensor:
        return T.softmax(self.keys @ T.transpose(self.keys), axis=-1)

    def effective_filter_logits(self) -> Tensor:
        return self.attention() @ self.base_logits

    def harden(self, grid, choice):
        F, l = self.keys.shape
        if l < 2 and F > 1:
            raise SuperKernelError("hardening the attention variant needs key_dim >= 2")
        # distinct directions with a large norm make the attention matrix the identity
        ang = 2.0 * np.pi * np.arange(F) / max(F, 1)
        keys = np.zeros((F, l))
        keys[:, 0], keys[:, min(1, l - 1)] = np.cos(ang), np.sin(ang)
        if l == 1:
            keys[:, 0] = 1.0
        self.keys.data[...] = 1000.0 * keys
        self.kernel_logits.data[...] = _saturated(grid.n_k, grid.kernel_sizes.index(choice.kernel_size))
        self.base_logits.data[...] = _saturated(grid.n_f, list(choice.channels()))


def make_distribution(variant: str, grid: SliceGrid, rng: Rng | None = None,
                      key_dim: int = 8) -> StructuralDistribution:
    if variant == "joint":
        return JointDistribution(grid)
    if variant == "factorized":
        return FactorizedDistribution(grid)
    if variant == "filterwise":
        return FilterwiseDistribution(grid)
    if variant == "filterwise-attention":
        if rng is None:
            raise SuperKernelError("filterwise-attention needs an rng to initialise its keys")
        return FilterwiseAttentionDistribution(grid, rng, key_dim=key_dim)
    raise SuperKernelError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def sample_structural_weights(dist: StructuralDistribution, tau: float, rng: Rng,
                              hard: bool = False) -> StructuralWeights:
    if tau <= 0:
        raise SuperKernelError(f"temperature must be positive, got {tau}")
    return dist.sample(tau, rng, hard)


# ---------------------------------------------------------------------------
# superkernel
# ---------------------------------------------------------------------------

def grid_for_variant(variant: str, kernel_sizes, filter_counts) -> SliceGrid:
    """Joint/factorized keep the counts; filterwise variants use the largest as budget."""
    if variant in CATEGORICAL_FILTERS:
        return SliceGrid(tuple(kernel_sizes), filter_counts=tuple(filter_counts))
    return SliceGrid(tuple(kernel_sizes), max_filters=max(filter_counts))


@dataclass
class SuperKernel:
    weight: Tensor
    bias: Tensor | None
    grid: SliceGrid
    dist: StructuralDistribution
    tau: float = 1.0
    mode: Literal["full", "separate"] = "full"
    hard: bool = False
    activation: Callable[[Tensor], Tensor] | None = None
    stride: int = 1
    threshold: float = 0.0

    def __post_init__(self):
        O, _, K, K2 = self.weight.shape
        if K != K2 or K != self.grid.k_max:
            raise SuperKernelError(f"weight kernel {K}x{K2} does not match grid K_max={self.grid.k_max}")
        if O != self.grid.o_max:
            raise SuperKernelError(f"weight has {O} filters, grid expects {self.grid.o_max}")
        if self.mode not in ("full", "separate"):
            raise SuperKernelError(f"unknown mode {self.mode!r}")
        if self.mode == "separate" and self.grid.filterwise:
            raise UnsupportedModeError("separate mode is only supported for joint/factorized superkernels")
        if self.tau <= 0:
            raise SuperKernelError(f"temperature must be positive, got {self.tau}")

    @property
    def variant(self) -> str:
        return self.dist.variant

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[tuple[str, Tensor]]:
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps + [(f"dist.{n}", t) for n, t in self.dist.parameters()]

    def structural_weights(self, rng: Rng | None) -> StructuralWeights:
        """A fresh relaxed sample, or the distilled one-hot when ``rng`` is None."""
        if rng is None:
            return self.dist.mode_weights(self.grid, self.threshold)
        return sample_structural_weights(self.dist, self.tau, rng, self.hard)

    def __call__(self, x: Tensor, rng: Rng | None = None) -> Tensor:
        if self.mode == "separate":
            return forward_separate(self, x, self.activation, rng)
        out = forward_full(self, x, rng)
        return self.activation(out) if self.activation is not None else out


def expected_mask(sk: SuperKernel, weights: StructuralWeights) -> Tensor:
    """Sum of slice indicators weighted by the structural sample, (O_max, 1, K, K)."""
    grid = sk.grid
    K, O = grid.k_max, grid.o_max
    spatial = grid.spatial_masks().reshape(grid.n_k, K * K)
    if weights.pair is not None:
        # sum_{a,b} w[a,b] * chan[b, o] * spat[a, :]
        chan = grid.channel_masks()  # n_f x O
        per_channel = T.matmul(Tensor(chan.T), T.transpose(weights.pair))  # O x n_k
        m = T.matmul(per_channel, Tensor(spatial))  # O x K*K
        return m.reshape(O, 1, K, K)
    spatial_w = T.matmul(weights.kernel, Tensor(spatial))  # K*K
    if grid.filterwise:
        channel_w = weights.filter
    else:
        channel_w = T.matmul(weights.filter, Tensor(grid.channel_masks()))  # O
    m = channel_w.reshape(O, 1) * spatial_w.reshape(1, K * K)
    return m.reshape(O, 1, K, K)


def bias_mask(kernel_mask: Tensor) -> Tensor:
    """Per-output-channel mean of the kernel mask over its spatial extent."""
    O = kernel_mask.shape[0]
    return T.mean(kernel_mask.reshape(O, -1), axis=1)


def forward_full(sk: SuperKernel, x: Tensor, rng: Rng | None = None,
                 weights: StructuralWeights | None = None) -> Tensor:
    """One convolution with the mask-weighted maximal kernel (no activation)."""
    if weights is None:
        weights = sk.structural_weights(rng)
    mask = expected_mask(sk, weights)
    w = sk.weight * mask
    b = sk.bias * bias_mask(mask) if sk.bias is not None else None
    return T.conv2d(x, w, b, stride=sk.stride, padding=sk.grid.k_max // 2)


def slice_terms(sk: SuperKernel, weights: StructuralWeights):
    """Yield (slice mask, scalar weight tensor) for every joint/factorized slice."""
    grid = sk.grid
    if grid.filterwise:
        raise UnsupportedModeError("separate mode is only supported for joint/factorized superkernels")
    for a, k in enumerate(grid.kernel_sizes):
        for b, f in enumerate(grid.filter_counts):
            m = slice_mask(grid, KernelChoice(k, count=f))
            if weights.pair is not None:
                w_ab = weights.pair[a, b]
            else:
                w_ab = weights.kernel[a] * weights.filter[b]
            yield m, w_ab


def forward_separate(sk: SuperKernel, x: Tensor, activation: Callable[[Tensor], Tensor] | None,
                     rng: Rng | None = None, weights: StructuralWeights | None = None) -> Tensor:
    """sum over slices of activation(conv(slice, x)) * w(slice), one shared sample."""
    if sk.grid.filterwise:
        raise UnsupportedModeError("separate mode is only supported for joint/factorized superkernels")
    if weights is None:
        weights = sk.structural_weights(rng)
    total = None
    pad = sk.grid.k_max // 2
    for m, w_ab in slice_terms(sk, weights):
        mt = Tensor(m)
        b = sk.bias * bias_mask(mt) if sk.bias is not None else None
        y = T.conv2d(x, sk.weight * mt, b, stride=sk.stride, padding=pad)
        if activation is not None:
            y = activation(y)
        term = y * w_ab
        total = term if total is None else total + term
    return total


def distill(sk: SuperKernel) -> KernelChoice:
    return sk.dist.distill(sk.grid, sk.threshold)


def materialize(sk: SuperKernel, choice: KernelChoice,
                in_channels: list[int] | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Extract a standalone (weight, bias) for ``choice``.

    The bias is scaled by the chosen slice's bias-mask factor k^2 / K_max^2 so
    the extracted convolution reproduces the hard-sample superkernel output.
    ``in_channels`` optionally slices the input-channel axis.
    """
    choice.validate(sk.grid)
    K, k = sk.grid.k_max, choice.kernel_size
    lo = (K - k) // 2
    ch = choice.channels()
    w = sk.weight.data[ch]
    if in_channels is not None:
        w = w[:, in_channels]
    w = np.ascontiguousarray(w[:, :, lo:lo + k, lo:lo + k])
    b = None
    if sk.bias is not None:
        b = sk.bias.data[ch] * ((k * k) / (K * K))
    return w, b


def make_superkernel(in_channels: int, grid: SliceGrid, variant: str, rng: Rng, *,
                     bias: bool = True, tau: float = 1.0, mode: str = "full", hard: bool = False,
                     activation=None, stride: int = 1, key_dim: int = 8,
                     threshold: float = 0.0) -> SuperKernel:
    """He-normal maximal kernel, zero bias, default-initialised structural logits."""
    O, K = grid.o_max, grid.k_max
    std = math.sqrt(2.0 / (in_channels * K * K))
    weight = Tensor(rng.normal((O, in_channels, K, K), scale=std), requires_grad=True)
    b = Tensor(np.zeros(O), requires_grad=True) if bias else None
    dist = make_distribution(variant, grid, rng, key_dim=key_dim)
    return SuperKernel(weight, b, grid, dist, tau=tau, mode=mode, hard=hard,
                       activation=activation, stride=stride, threshold=threshold)
