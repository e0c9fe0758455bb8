"""Empirical frequencies of hard Gumbel-softmax and relaxed-Bernoulli samples.

Prints the total-variation distance to softmax(logits) and the largest gap to
sigmoid(logits) for a few temperatures. Hard samples follow the underlying
categorical/Bernoulli law at every temperature; only the soft relaxation changes.
"""

import argparse

import numpy as np

from sknas.superkernel import gumbel_softmax, relaxed_bernoulli
from sknas.tensor import Rng, Tensor


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--taus", type=float, nargs="+", default=[0.1, 0.5, 1.0, 2.0])
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    logits = np.random.default_rng(args.seed).normal(size=args.classes)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    on = 1.0 / (1.0 + np.exp(-logits))
    print(f"{'tau':>6}  {'GS total variation':>18}  {'Bernoulli max gap':>17}  {'soft mean max':>13}")
    for i, tau in enumerate(args.taus):
        rng = Rng(args.seed).spawn(i)
        soft = gumbel_softmax(Tensor(logits), tau, rng.spawn(0), sample_shape=(args.samples,)).data
        hard = np.eye(args.classes)[soft.argmax(axis=1)]
        tv = 0.5 * np.abs(hard.mean(axis=0) - probs).sum()
        bits = relaxed_bernoulli(Tensor(logits), tau, rng.spawn(1), hard=True,
                                 sample_shape=(args.samples,)).data
        gap = np.abs(bits.mean(axis=0) - on).max()
        print(f"{tau:6.2f}  {tv:18.4f}  {gap:17.4f}  {soft.max(axis=1).mean():13.3f}")
