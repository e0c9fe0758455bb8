"""Shared fixtures-as-functions: tiny specs, model perturbations, op cases."""

from __future__ import annotations

import zlib

import numpy as np

from sknas import superkernel as S
from sknas import tensor as T
from sknas.blocks import SkipInitDcrBlock, UNetSpec
from sknas.superkernel import KernelChoice
from sknas.tensor import Rng, Tensor

from oracles import gradcheck

SEARCH_VARIANTS = ("joint", "factorized", "filterwise", "filterwise-attention")


def tiny_spec(**kw) -> UNetSpec:
    base = dict(depth=1, base_channels=4, blocks_per_level=1, kernel_candidates=(1, 3),
                growth_rates=(0.25, 0.5), in_channels=1)
    base.update(kw)
    return UNetSpec(**base)


def make_sk(variant, in_ch=2, kernels=(1, 3), filters=(2, 3), seed=0, **kw):
    """A superkernel with random bias and structural parameters (weights from init)."""
    grid = S.grid_for_variant(variant, kernels, filters)
    sk = S.make_superkernel(in_ch, grid, variant, Rng(seed), **kw)
    rng = np.random.default_rng(seed + 1000)
    sk.bias.data[...] = rng.normal(size=sk.bias.shape)
    for _, p in sk.dist.parameters():
        p.data[...] = rng.normal(size=p.shape)
    return sk


def random_choice(grid, rng: np.random.Generator) -> KernelChoice:
    k = int(rng.choice(grid.kernel_sizes))
    if grid.filterwise:
        mask = rng.random(grid.max_filters) < 0.5
        mask[rng.integers(grid.max_filters)] = True
        return KernelChoice(k, mask=tuple(bool(m) for m in mask))
    return KernelChoice(k, count=int(rng.choice(grid.filter_counts)))


def harden_randomly(model, seed: int = 0) -> dict:
    """Saturate every superkernel's logits on a random slice; returns the choices."""
    rng = np.random.default_rng(seed)
    chosen = {}
    for path, sk in model.superkernels():
        choice = random_choice(sk.grid, rng)
        sk.dist.harden(sk.grid, choice)
        chosen[path] = choice
    return chosen


def wake_up(model, seed: int = 0, scale: float = 0.3) -> None:
    """Give zero-initialised residual scalars and output convs nonzero values.

    At initialisation those parameters make most of the network invisible to the
    output, which would make gradient and equivalence checks vacuous.
    """
    rng = np.random.default_rng(seed)

    def visit(module):
        for _, child in module.named_children():
            if isinstance(child, SkipInitDcrBlock):
                child.alpha.data[...] = rng.uniform(0.3, 1.0)
            if hasattr(child, "named_children"):
                visit(child)

    visit(model.net)
    head = model.net.head
    head.weight.data[...] = rng.normal(size=head.weight.shape) * scale
    head.bias.data[...] = rng.normal(size=head.bias.shape) * scale


# every differentiable op: (input shapes, function); "pos:" shapes are kept positive
OP_CASES = {
    "add": ([(2, 3), (3,)], lambda a, b: a + b),
    "sub": ([(2, 1), (1, 3)], lambda a, b: a - b),
    "mul_broadcast_channels": ([(1, 3, 1, 1), (1, 3, 2, 2)], lambda a, b: a * b),
    "div": ([(2, 3), "pos:2,3"], lambda a, b: a / b),
    "neg": ([(4,)], lambda a: -a),
    "exp": ([(2, 3)], T.exp),
    "log": (["pos:2,3"], T.log),
    "abs": ([(2, 3)], T.abs_),
    "square": ([(2, 3)], T.square),
    "relu": ([(3, 4)], T.relu),
    "prelu": ([(1, 3, 2, 2), (3,)], T.prelu),
    "sigmoid": ([(2, 5)], T.sigmoid),
    "softmax_last": ([(2, 4)], lambda a: T.softmax(a, axis=-1)),
    "softmax_first": ([(3, 2)], lambda a: T.softmax(a, axis=0)),
    "matmul_mm": ([(2, 3), (3, 4)], T.matmul),
    "matmul_mv": ([(3, 4), (4,)], T.matmul),
    "matmul_vm": ([(3,), (3, 2)], T.matmul),
    "matmul_vv": ([(5,), (5,)], T.matmul),
    "sum_axis": ([(2, 3, 2)], lambda a: T.sum_(a, axis=1, keepdims=True)),
    "mean_all": ([(2, 3)], T.mean),
    "mean_axes": ([(2, 3, 4)], lambda a: T.mean(a, axis=(0, 2))),
    "reshape": ([(2, 6)], lambda a: T.reshape(a, (3, 4))),
    "transpose": ([(2, 3, 4)], lambda a: T.transpose(a, (2, 0, 1))),
    "concat": ([(1, 2, 2, 2), (1, 1, 2, 2)], lambda a, b: T.concat([a, b], axis=1)),
    "getitem_strided": ([(4, 6)], lambda a: a[1:4:2, ::3]),
    "getitem_fancy": ([(5,)], lambda a: a[np.array([0, 2, 2, 4])]),
    "global_avg_pool": ([(2, 3, 3, 2)], T.global_avg_pool2d),
    "pixel_shuffle": ([(1, 8, 2, 3)], lambda a: T.pixel_shuffle(a, 2)),
    "conv2d": ([(1, 2, 4, 4), (3, 2, 3, 3), (3,)], lambda x, w, b: T.conv2d(x, w, b, padding=1)),
    "conv2d_stride2": ([(1, 2, 5, 4), (2, 2, 3, 3)], lambda x, w: T.conv2d(x, w, stride=2, padding=1)),
    "conv2d_wide_pad": ([(1, 1, 3, 3), (1, 1, 3, 3)], lambda x, w: T.conv2d(x, w, padding=4)),
    "conv2d_5x5": ([(2, 1, 5, 5), (2, 1, 5, 5)], lambda x, w: T.conv2d(x, w, padding=2)),
}

KINKED = ("relu", "abs", "prelu")


def op_gradient_error(name: str) -> float:
    """Worst relative error of autodiff vs central differences for one op case."""
    specs, fn = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs = []
    for s in specs:
        if isinstance(s, str):
            shape = tuple(int(v) for v in s.split(":")[1].split(","))
            inputs.append(Tensor(np.abs(rng.normal(size=shape)) + 0.5, requires_grad=True))
        else:
            inputs.append(Tensor(rng.normal(size=s), requires_grad=True))
    if name in KINKED:
        # central differences are meaningless across the kink at 0
        x = inputs[0].data
        x[np.abs(x) < 1e-2] += 0.1
    readout = Tensor(np.random.default_rng(99).normal(size=fn(*inputs).shape))
    return gradcheck(lambda: T.sum_(fn(*inputs) * readout), inputs, rng, per_tensor=64)
