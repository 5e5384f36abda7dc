"""Numeric kernel layer for the denoiser.

The primitive menu is fixed: conv2d, linear, group_norm, silu,
softmax_attention, upsample_nearest, add, concat, mse_loss. Forward/backward
run on torch (CPU); the independent check is a central-difference
gradient_check in 64-bit, so the analytic adjoints are verified against
plain arithmetic rather than trusted.

Also provides the Adam step with bias correction, a cosine LR schedule, and
the GPRNT1 checkpoint container.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


class ShapeMismatch(ValueError):
    def __init__(self, expected, got):
        super().__init__(f"shape mismatch: expected {expected}, got {got}")


class NonFiniteGradient(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# primitives (functional, differentiable)

def conv2d(x, weight, bias=None, stride: int = 1):
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeMismatch("4-d tensors", (tuple(x.shape), tuple(weight.shape)))
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"in_channels {weight.shape[1]}", x.shape[1])
    pad = weight.shape[-1] // 2
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"features {weight.shape[1]}", x.shape[-1])
    return F.linear(x, weight, bias)


def group_norm(x, num_groups: int = 8, weight=None, bias=None, eps: float = 1e-5):
    if x.shape[1] % num_groups != 0:
        raise ShapeMismatch(f"channels divisible by {num_groups}", x.shape[1])
    return F.group_norm(x, num_groups, weight, bias, eps)


def silu(x):
    return F.silu(x)


def softmax_attention(q, k, v):
    """Plain scaled dot-product attention over token axis -2."""
    if k.shape[-1] != q.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch("matching head dims / token counts",
                            (tuple(q.shape), tuple(k.shape), tuple(v.shape)))
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


def upsample_nearest(x, factor: int = 2):
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def add(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(tuple(a.shape), tuple(b.shape))
    return a + b


def concat(tensors, dim: int = 1):
    return torch.cat(tensors, dim=dim)


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise ShapeMismatch(tuple(target.shape), tuple(pred.shape))
    return F.mse_loss(pred, target)


# ---------------------------------------------------------------------------
# gradient checking

def gradient_check(fn, inputs, eps: float = 1e-4, n_samples: int = 200,
                   seed: int = 0) -> float:
    """Central-difference check of d(sum fn)/d(input) in 64-bit.

    Samples >= n_samples coordinates across the differentiable inputs and
    returns the max relative error between analytic and numeric gradients.
    """
    inputs = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    out.sum().backward()
    rng = np.random.default_rng(seed)
    max_err = 0.0
    per_input = max(1, n_samples // len(inputs))
    for t in inputs:
        flat = t.detach().reshape(-1)
        g = t.grad.reshape(-1)
        idx = rng.choice(flat.numel(), size=min(per_input, flat.numel()), replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                hi = fn(*inputs).sum().item()
                flat[i] = orig - eps
                lo = fn(*inputs).sum().item()
                flat[i] = orig
            num = (hi - lo) / (2 * eps)
            ana = g[i].item()
            denom = max(abs(num), abs(ana), 1.0)
            max_err = max(max_err, abs(num - ana) / denom)
    return max_err


# ---------------------------------------------------------------------------
# optimization

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update over {name: tensor-with-grad}; bias-corrected."""
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not torch.isfinite(g).all():
                raise NonFiniteGradient(name)
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m = state.m[name]
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            p.add_(mhat / (vhat.sqrt() + eps), alpha=-lr)


def cosine_lr(step: int, total_steps: int, base_lr: float,
              warmup: int = 100, floor: float = 0.0) -> float:
    if step < warmup:
        return base_lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, total_steps - warmup)
    return floor + (base_lr - floor) * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))


# ---------------------------------------------------------------------------
# GPRNT1 checkpoint container

MAGIC = b"GPRNT1"

_DTYPES = {"f4": np.float32, "f8": np.float64, "i8": np.int64}


def save_checkpoint(path, tensors: dict, meta: dict):
    """Binary container: magic, little-endian header table, raw payloads.

    `tensors` maps name -> numpy array (or torch tensor); `meta` carries the
    vocabulary checksum, schedule constants and run config.
    """
    entries = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.str.lstrip("<>|=")
        if dtype not in _DTYPES:
            arr = arr.astype(np.float32)
            dtype = "f4"
        blob = arr.astype("<" + dtype).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        payloads.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(6) != MAGIC:
            raise ValueError(f"{path}: not a GPRNT1 checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        base = fh.tell()
        tensors = {}
        for e in header["tensors"]:
            fh.seek(base + e["offset"])
            arr = np.frombuffer(fh.read(e["nbytes"]), dtype="<" + e["dtype"])
            tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, header["meta"]


def checksum_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
