"""Image helpers, random rectangle erasing and the patch-transformer image encoder.

Images are float ``(H, W, 3)`` arrays with values in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import tensor as T
from .nn import LayerNorm, Linear, Module, Transformer, normal
from .tensor import Parameter, Tensor


def check_image(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    if img.min() < 0 or img.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    return img


def resize_normalize(img, target_h, target_w):
    """Bilinear resize (half-pixel centres) to ``target_h x target_w``."""
    if target_h <= 0 or target_w <= 0:
        raise ValueError("target extents must be positive")
    img = check_image(img)
    if img.shape[:2] == (target_h, target_w):
        return img.copy()
    out = K.bilinear_resize(img, target_h, target_w)
    return np.clip(out, 0.0, 1.0)


@dataclass
class AugmentedView:
    image: np.ndarray
    rect: tuple          # (top, left, h, w); h == w == 0 means nothing erased
    source: object = None


def erase_rect_size(beta, H, W, rng, aspect=(0.5, 2.0)):
    area = round(beta * H * W)
    if area == 0:
        return 0, 0
    r = rng.uniform(*aspect)
    h = min(H, max(1, round(math.sqrt(area * r))))
    w = min(W, max(1, round(area / h)))
    h = min(H, max(1, round(area / w)))
    return h, w


def erase(x, beta, rng, fill=None, aspect=(0.5, 2.0), source=None):
    """Erase one random rectangle covering a ``beta`` fraction of ``x``.

    The rectangle's aspect ratio is drawn from ``aspect`` and it is placed
    uniformly over all positions where it fits. ``fill`` defaults to the
    image's own mean pixel; training passes the dataset mean.
    """
    if not 0 <= beta < 1:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    x = check_image(x)
    H, W = x.shape[:2]
    h, w = erase_rect_size(beta, H, W, rng, aspect)
    out = x.copy()
    if h == 0:
        return AugmentedView(out, (0, 0, 0, 0), source)
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    if fill is None:
        fill = x.reshape(-1, 3).mean(axis=0)
    out[top:top + h, left:left + w] = np.asarray(fill, dtype=out.dtype)
    return AugmentedView(out, (top, left, h, w), source)


def patchify(images, patch):
    """``(n, H, W, 3)`` -> ``(n, H/p * W/p, p*p*3)`` row-major patches."""
    n, H, W, C = images.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible by patch size {patch}")
    x = images.reshape(n, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, (H // patch) * (W // patch), patch * patch * C)


class ImageEncoder(Module):
    """Tiny ViT: patch projection, class token, learned positions, CLS pooling."""

    def __init__(self, height=64, width=32, patch=8, width_dim=32, d_embed=32,
                 layers=2, heads=2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if height % patch or width % patch:
            raise ValueError("image extents must be divisible by the patch size")
        self.height, self.width, self.patch = height, width, patch
        n_patches = (height // patch) * (width // patch)
        self.patch_proj = Linear(patch * patch * 3, width_dim, rng)
        self.cls = Parameter(normal(rng, (width_dim,), 0.02))
        self.positional = Parameter(normal(rng, (n_patches + 1, width_dim), 0.02))
        self.ln_pre = LayerNorm(width_dim)
        self.transformer = Transformer(width_dim, layers, heads, rng)
        self.ln_post = LayerNorm(width_dim)
        self.proj = Parameter(normal(rng, (width_dim, d_embed), width_dim ** -0.5))

    def __call__(self, images):
        """Unit-norm embeddings ``(n, d_e)`` for an ``(n, H, W, 3)`` batch."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:3] != (self.height, self.width):
            if images.shape[1] % self.patch or images.shape[2] % self.patch:
                raise ValueError(f"image {images.shape[1:3]} not divisible by patch {self.patch}")
            raise ValueError(f"encoder expects {self.height}x{self.width}, got {images.shape[1:3]}")
        dt = T.default_dtype()
        x = (patchify(images.astype(dt), self.patch) - dt(0.5)) / dt(0.25)
        n = x.shape[0]
        tok = self.patch_proj(Tensor(x, dtype=dt))
        cls = Tensor(np.ones((n, 1, 1), dtype=dt)) * self.cls.reshape(1, 1, -1)
        x = T.concat([cls, tok], axis=1) + self.positional
        x = self.transformer(self.ln_pre(x))
        pooled = self.ln_post(x[:, 0, :])
        return T.l2_normalize(pooled @ self.proj)


def encode_image(img, encoder):
    return encoder(np.asarray(img)[None] if np.ndim(img) == 3 else img)


def embed_images(encoder, images, batch=128):
    """Gradient-free embedding of many images as a float64 ndarray."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            out.append(encoder(np.stack(images[i:i + batch])).data.astype(np.float64))
    return np.concatenate(out, axis=0) if out else np.zeros((0, encoder.proj.shape[1]))
