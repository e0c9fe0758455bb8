"""Synthetic denoising pairs, the SKNI image container, splitting and patching."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng

MAGIC = b"SKNI"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class ImageFormatError(ValueError):
    pass


class BadMagicError(ImageFormatError):
    pass


class UnsupportedVersionError(ImageFormatError):
    pass


class TruncatedFileError(ImageFormatError):
    pass


@dataclass
class ImagePair:
    clean: np.ndarray  # H x W x C in [0, 1]
    noisy: np.ndarray
    sigma: float
    group: str

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise ValueError(f"clean/noisy shapes differ: {self.clean.shape} vs {self.noisy.shape}")


def group_tag(sigma: float) -> str:
    return f"sigma={sigma:.6g}"


# ---------------------------------------------------------------------------
# synthetic images
# ---------------------------------------------------------------------------

def _clean_image(rng: Rng, size: int, channels: int) -> np.ndarray:
    """Gradient background + random rectangles + a sinusoid, clipped to [0, 1]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.empty((size, size, channels))
    base = rng.uniform(0.2, 0.8, (channels,))
    slope = rng.uniform(-0.3, 0.3, (2, channels))
    for c in range(channels):
        img[..., c] = base[c] + slope[0, c] * (yy - 0.5) + slope[1, c] * (xx - 0.5)
    for _ in range(int(rng.integers(2, 6))):
        h, w = rng.integers(size // 8, size // 2 + 1, size=2)
        y0 = int(rng.integers(0, size - h + 1))
        x0 = int(rng.integers(0, size - w + 1))
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0.0, 1.0, (channels,))
    freq = rng.uniform(1.0, 4.0, (2,))
    phase = rng.uniform(0, 2 * np.pi, (1,))[0]
    amp = rng.uniform(0.02, 0.1, (channels,))
    wave = np.sin(2 * np.pi * (freq[0] * yy + freq[1] * xx) + phase)
    img += wave[..., None] * amp
    return np.clip(img, 0.0, 1.0)


def _f32(a: np.ndarray) -> np.ndarray:
    # quantise to float32 so the on-disk format round-trips the in-memory data exactly
    return a.astype(np.float32).astype(np.float64)


def generate_synthetic_set(count: int, size: int, noise_levels, seed: int, channels: int = 3,
                           max_depth: int = 2) -> list[ImagePair]:
    """``count`` procedural clean images with Gaussian noise, sigma cycling over ``noise_levels``."""
    if count <= 0:
        raise ValueError("count must be positive")
    if size <= 0 or size % (2 ** max_depth):
        raise ValueError(f"size {size} must be a positive multiple of 2^{max_depth}")
    levels = [float(s) for s in noise_levels]
    if not levels or any(s < 0 for s in levels):
        raise ValueError("noise_levels must be a non-empty list of non-negative sigmas")
    rng = Rng(seed)
    pairs = []
    for i in range(count):
        sigma = levels[i % len(levels)]
        clean = _f32(_clean_image(rng, size, channels))
        if sigma == 0:
            noisy = clean.copy()
        else:
            noisy = _f32(np.clip(clean + sigma * rng.normal(clean.shape), 0.0, 1.0))
        pairs.append(ImagePair(clean, noisy, sigma, group_tag(sigma)))
    return pairs


def split(pairs: list[ImagePair], train_fraction: float = 0.9, stratify_by_group: bool = True,
          seed: int = 0) -> tuple[list[ImagePair], list[ImagePair]]:
    """Per-group shuffled split; each group keeps round(n * fraction) training items."""
    if not pairs:
        raise ValueError("cannot split an empty dataset")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = Rng(seed)
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(pairs):
        groups.setdefault(p.group if stratify_by_group else "", []).append(i)
    train_idx, val_idx = [], []
    for key in sorted(groups):
        idx = groups[key]
        if not idx:
            raise ValueError(f"group {key!r} is empty")
        order = [idx[j] for j in rng.permutation(len(idx))]
        n_train = int(np.floor(len(idx) * train_fraction + 0.5))
        n_train = min(max(n_train, 1), len(idx) - 1) if len(idx) > 1 else 1
        train_idx += order[:n_train]
        val_idx += order[n_train:]
    return [pairs[i] for i in sorted(train_idx)], [pairs[i] for i in sorted(val_idx)]


class PatchSampler:
    """Co-located random clean/noisy patches, as NCHW batches."""

    def __init__(self, pairs: list[ImagePair], patch_size: int, rng: Rng):
        if not pairs:
            raise ValueError("PatchSampler needs at least one pair")
        for p in pairs:
            if min(p.clean.shape[:2]) < patch_size:
                raise ValueError(f"patch {patch_size} larger than image {p.clean.shape[:2]}")
        self.pairs = pairs
        self.patch_size = patch_size
        self.rng = rng

    def locations(self, n: int) -> list[tuple[int, int, int]]:
        out = []
        P = self.patch_size
        for _ in range(n):
            i = int(self.rng.integers(0, len(self.pairs)))
            H, W = self.pairs[i].clean.shape[:2]
            y = int(self.rng.integers(0, H - P + 1))
            x = int(self.rng.integers(0, W - P + 1))
            out.append((i, y, x))
        return out

    def batch(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Returns (noisy, clean), each N x C x P x P."""
        P = self.patch_size
        noisy, clean = [], []
        for i, y, x in self.locations(n):
            p = self.pairs[i]
            noisy.append(p.noisy[y:y + P, x:x + P])
            clean.append(p.clean[y:y + P, x:x + P])
        to_nchw = lambda xs: np.ascontiguousarray(np.stack(xs).transpose(0, 3, 1, 2))
        return to_nchw(noisy), to_nchw(clean)


# ---------------------------------------------------------------------------
# SKNI container
# ---------------------------------------------------------------------------

def encode_image(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ImageFormatError(f"expected H x W x C image, got shape {img.shape}")
    H, W, C = img.shape
    return _HEADER.pack(MAGIC, VERSION, H, W, C) + img.astype("<f4").tobytes(order="C")


def decode_image(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"file too short for header ({len(buf)} bytes)")
    magic, version, H, W, C = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported SKNI version {version}")
    n = H * W * C * 4
    payload = buf[_HEADER.size:]
    if len(payload) != n:
        raise TruncatedFileError(f"payload has {len(payload)} bytes, expected {n}")
    return np.frombuffer(payload, dtype="<f4").reshape(H, W, C).astype(np.float64)


def write_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_image(image))


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def save_dataset(pairs: list[ImagePair], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, p in enumerate(pairs):
        clean_name, noisy_name = f"{i:05d}_clean.skni", f"{i:05d}_noisy.skni"
        write_image(root / clean_name, p.clean)
        write_image(root / noisy_name, p.noisy)
        entries.append({"clean": clean_name, "noisy": noisy_name, "sigma": p.sigma, "group": p.group})
    path = root / MANIFEST
    path.write_text(json.dumps({"version": 1, "pairs": entries}, indent=1) + "\n")
    return path


def load_dataset(root) -> list[ImagePair]:
    root = Path(root)
    meta = json.loads((root / MANIFEST).read_text())
    return [
        ImagePair(read_image(root / e["clean"]), read_image(root / e["noisy"]), float(e["sigma"]), e["group"])
        for e in meta["pairs"]
    ]
