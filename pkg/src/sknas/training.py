"""Joint weight/structure training with Adam, validation early stopping and self-ensemble."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import ImagePair, PatchSampler
from .metrics import psnr, ssim
from .tensor import Rng, Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-5
    batch_size: int = 4
    patch_size: int = 32
    eval_interval: int = 100
    patience: int = 10
    max_steps: int = 3000
    seed: int = 0
    loss: str = "l1"
    # linear temperature anneal target over max_steps; None keeps tau constant
    tau_final: float | None = None

    def validate(self, depth: int = 0) -> None:
        for name in ("batch_size", "patch_size", "eval_interval", "patience", "max_steps"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive int, got {v!r}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.patch_size % (2 ** depth):
            raise ValueError(f"patch_size {self.patch_size} must be divisible by 2^{depth}")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        if self.tau_final is not None and self.tau_final <= 0:
            raise ValueError("tau_final must be positive")


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class EarlyStopMonitor:
    """Tracks the best validation score; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_step: int | None = None
        self.best_state: dict | None = None
        self.since_improvement = 0

    def update(self, score: float, step: int, snapshot: Callable[[], dict] | None = None) -> bool:
        if score > self.best:
            self.best = score
            self.best_step = step
            self.since_improvement = 0
            if snapshot is not None:
                self.best_state = snapshot()
        else:
            self.since_improvement += 1
        return self.since_improvement >= self.patience


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    count: int


@dataclass
class TrainReport:
    history: list[dict] = field(default_factory=list)
    best_psnr: float = -math.inf
    best_step: int | None = None
    steps_run: int = 0
    stopped_early: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def predict(model, image: np.ndarray) -> np.ndarray:
    """Single deterministic pass on an H x W x C image."""
    x = Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)[None]))
    return model(x, None).data[0].transpose(1, 2, 0)


def _dihedral(img: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = np.rot90(img, k, axes=(0, 1))
    return out[:, ::-1] if flip else out


def _dihedral_inverse(img: np.ndarray, k: int, flip: bool) -> np.ndarray:
    if flip:
        img = img[:, ::-1]
    return np.rot90(img, -k, axes=(0, 1))


def self_ensemble(model, image: np.ndarray) -> np.ndarray:
    """Average of model outputs over the 8 dihedral transforms, each mapped back."""
    transforms = [(k, f) for f in (False, True) for k in range(4)]
    views = [np.ascontiguousarray(_dihedral(image, k, f)) for k, f in transforms]
    if all(v.shape == views[0].shape for v in views):
        batch = Tensor(np.stack([v.transpose(2, 0, 1) for v in views]))
        outs = list(model(batch, None).data.transpose(0, 2, 3, 1))
    else:
        outs = [predict(model, v) for v in views]
    acc = np.zeros_like(image, dtype=np.float64)
    for out, (k, f) in zip(outs, transforms):
        acc += _dihedral_inverse(out, k, f)
    return acc / len(transforms)


def evaluate(model, dataset: list[ImagePair], use_self_ensemble: bool = False) -> MetricReport:
    """Mean PSNR/SSIM of the model restoring each full noisy image."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    ps, ss = [], []
    for pair in dataset:
        out = self_ensemble(model, pair.noisy) if use_self_ensemble else predict(model, pair.noisy)
        ps.append(psnr(out, pair.clean))
        ss.append(ssim(out, pair.clean))
    return MetricReport(float(np.mean(ps)), float(np.mean(ss)), len(dataset))


def noisy_baseline(dataset: list[ImagePair]) -> MetricReport:
    """Metrics of the unprocessed noisy inputs."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    ps = [psnr(p.noisy, p.clean) for p in dataset]
    ss = [ssim(p.noisy, p.clean) for p in dataset]
    return MetricReport(float(np.mean(ps)), float(np.mean(ss)), len(dataset))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _loss(out: Tensor, target: np.ndarray, kind: str) -> Tensor:
    diff = out - Tensor(target)
    return T.mean(T.abs_(diff)) if kind == "l1" else T.mean(T.square(diff))


def train(model, train_set: list[ImagePair], val_set: list[ImagePair], cfg: TrainConfig,
          progress: Callable[[str], None] | None = None) -> TrainReport:
    """Optimise all weights and structural logits with one Adam instance.

    Validation runs every ``cfg.eval_interval`` steps on full images with the
    currently distilled slices; the best-PSNR parameters are restored at the end.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    cfg.validate(model.spec.depth)
    root = Rng(cfg.seed)
    sampler = PatchSampler(train_set, cfg.patch_size, root.spawn(1))
    struct_rng = root.spawn(2)
    params = model.parameters()
    opt = Adam(params, cfg.lr)
    sks = [sk for _, sk in model.superkernels()]
    tau0 = [sk.tau for sk in sks]
    monitor = EarlyStopMonitor(cfg.patience)
    report = TrainReport()
    running: list[float] = []
    step = 0
    for step in range(1, cfg.max_steps + 1):
        if cfg.tau_final is not None:
            frac = (step - 1) / max(cfg.max_steps - 1, 1)
            for sk, t0 in zip(sks, tau0):
                sk.tau = t0 + (cfg.tau_final - t0) * frac
        noisy, clean = sampler.batch(cfg.batch_size)
        out = model(Tensor(noisy), struct_rng)
        loss = _loss(out, clean, cfg.loss)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        running.append(value)
        if step % cfg.eval_interval == 0:
            m = evaluate(model, val_set)
            report.history.append({"step": step, "train_loss": float(np.mean(running)),
                                   "val_psnr": m.psnr, "val_ssim": m.ssim})
            running = []
            stop = monitor.update(m.psnr, step, model.state_dict)
            if progress is not None:
                progress(f"step {step:6d}  loss {report.history[-1]['train_loss']:.5f}  "
                         f"val psnr {m.psnr:.3f}  ssim {m.ssim:.4f}")
            if stop:
                report.stopped_early = True
                break
    report.steps_run = step
    if monitor.best_state is not None:
        model.load_state_dict(monitor.best_state)
        report.best_psnr = monitor.best
        report.best_step = monitor.best_step
    for sk, t0 in zip(sks, tau0):
        sk.tau = t0
    return report
