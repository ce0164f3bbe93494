"""Minimal numpy multilayer perceptron with hand-written backprop."""

from __future__ import annotations

import math
import struct
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .optim import Adam, cosine_lr


class MLP:
    """Dense tanh network; the output layer is linear."""

    def __init__(self, sizes: Sequence[int], seed: int = 0, zero_last: bool = False):
        self.sizes = tuple(int(s) for s in sizes)
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = k == len(self.sizes) - 2
            scale = 0.0 if (last and zero_last) else 1.0 / math.sqrt(a)
            self.weights.append(rng.normal(scale=scale, size=(a, b)) if scale else np.zeros((a, b)))
            self.biases.append(np.zeros(b))

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat) -> None:
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "MLP":
        out = MLP.__new__(MLP)
        out.sizes = self.sizes
        out.weights = [W.copy() for W in self.weights]
        out.biases = [b.copy() for b in self.biases]
        return out

    def forward(self, x, keep: bool = False):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if keep else h

    __call__ = forward

    def backward(self, acts, d_out):
        """Gradients of params() given d loss / d output; also returns d input."""
        n = len(self.weights)
        gW, gb = [None] * n, [None] * n
        g = d_out
        for k in reversed(range(n)):
            if k < n - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            gW[k] = acts[k].T @ g
            gb[k] = g.sum(0)
            g = g @ self.weights[k].T
        return [x for pair in zip(gW, gb) for x in pair], g

    def round_to_float32(self) -> "MLP":
        for p in self.params():
            p[...] = p.astype(np.float32).astype(np.float64)
        return self


def fit(params: list[np.ndarray], n: int, batch_grad: Callable, cfg: TrainConfig,
        log_every: int = 0, tag: str = "") -> list[float]:
    """Generic seeded minibatch Adam loop.

    ``batch_grad(idx)`` returns ``(loss, grads)`` for the rows ``idx``; the
    grads list must line up with ``params``. Returns the loss curve.
    """
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed + 7)
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    curve = []
    order, cursor = rng.permutation(n), 0
    bs = min(cfg.batch_size, n)
    for it in range(cfg.iterations):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        loss, grads = batch_grad(idx)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        lr = cosine_lr(cfg.learning_rate, it, cfg.iterations) if cfg.lr_schedule == "cosine" else None
        opt.step(grads, lr)
        curve.append(loss)
        if log_every and it % log_every == 0:
            print(f"[{tag}] iter {it:5d}  loss {loss:.5f}", flush=True)
    return curve


def pack_mlp(net: MLP) -> bytes:
    """Layer sizes followed by float32 parameters, little-endian."""
    flat = net.flat().astype("<f4")
    return (struct.pack("<I", len(net.sizes)) + struct.pack(f"<{len(net.sizes)}I", *net.sizes)
            + struct.pack("<I", flat.size) + flat.tobytes())


def unpack_mlp(blob: bytes, offset: int = 0) -> tuple[MLP, int]:
    """Inverse of pack_mlp; returns the network and the offset past it."""
    (n,) = struct.unpack_from("<I", blob, offset)
    sizes = struct.unpack_from(f"<{n}I", blob, offset + 4)
    offset += 4 + 4 * n
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    net = MLP(sizes)
    if net.flat().size != count or len(blob) < offset + 4 * count:
        raise ValueError("corrupt network block")
    net.set_flat(np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float64))
    return net, offset + 4 * count
