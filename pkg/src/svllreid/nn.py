"""Transformer building blocks shared by the text and image encoders."""
from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .tensor import Parameter


class Module:
    def named_parameters(self, prefix=""):
        out = []
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Parameter):
                out.append((full, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(full + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    out.extend(sub.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def freeze(self):
        for p in self.parameters():
            p.freeze()
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.unfreeze()
        return self

    def state_dict(self):
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict and set(state) != set(params):
            missing = set(params) ^ set(state)
            raise KeyError(f"state mismatch: {sorted(missing)[:5]}")
        for n, arr in state.items():
            p = params[n]
            if p.data.shape != np.shape(arr):
                raise ValueError(f"{n}: shape {np.shape(arr)} != {p.data.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def digest(self):
        return params_digest(self.named_parameters())


def params_digest(named):
    """SHA-256 over names, shapes and raw bytes; equal digests mean bitwise equality."""
    h = hashlib.sha256()
    for name, p in sorted(named, key=lambda kv: kv[0]):
        data = p.data if isinstance(p, T.Tensor) else np.asarray(p)
        h.update(name.encode())
        h.update(str(data.shape).encode())
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


def normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape).astype(T.default_dtype())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = Parameter(normal(rng, (d_in, d_out), d_in ** -0.5))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class SelfAttention(Module):
    def __init__(self, d, heads, rng):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x):
        # x: (batch, tokens, width)
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (dh ** -0.5), axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(y)


class Block(Module):
    """Pre-norm residual block: attention then a GELU feed-forward."""

    def __init__(self, d, heads, rng, mlp_ratio=2):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, mlp_ratio * d, rng)
        self.fc2 = Linear(mlp_ratio * d, d, rng)

    def __call__(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))


class Transformer(Module):
    def __init__(self, d, layers, heads, rng, mlp_ratio=2):
        self.blocks = [Block(d, heads, rng, mlp_ratio) for _ in range(layers)]

    def __call__(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x
