"""Score-conditioned continuous normalizing flow over the editable latent space.

Each block integrates dw/dt = phi(w, (t, s)) over t in [0, 1]; blocks are
composed z -> w for sampling and w -> z for density evaluation. The context
(t, s) is fed to every ConcatSquash layer of every block.

Gates and context shifts depend on (t, s) only, and s is constant along a
trajectory, so they are computed once per solve for every RK4 stage time.
Training differentiates the discretized solve directly (reverse-mode through
the RK4 stages), so gradients are exact for the loss that is reported.
"""

from __future__ import annotations

import math
import struct
from typing import Sequence

import numpy as np

from . import ode
from .config import SolverConfig, TrainConfig
from .optim import Adam, cosine_lr

EDIT_RANGE = 0.4
CONTEXT_DIM = 2
_LOG_2PI = math.log(2.0 * math.pi)
_CHUNK = 1024


class NumericError(FloatingPointError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ConcatSquashLayer:
    """y = (W x + b) * sigmoid(W_g c + b_g) + W_c c, with c = (t, score)."""

    def __init__(self, W, b, W_g, b_g, W_c):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.W_g = np.asarray(W_g, dtype=np.float64)
        self.b_g = np.asarray(b_g, dtype=np.float64)
        self.W_c = np.asarray(W_c, dtype=np.float64)
        d_out, d_in = self.W.shape
        c = self.W_g.shape[1]
        if (self.b.shape != (d_out,) or self.W_g.shape != (d_out, c)
                or self.b_g.shape != (d_out,) or self.W_c.shape != (d_out, c)):
            raise ValueError("dimension error: inconsistent ConcatSquash parameter shapes")

    @classmethod
    def zeros(cls, d_in: int, d_out: int, context_dim: int = CONTEXT_DIM):
        return cls(np.zeros((d_out, d_in)), np.zeros(d_out), np.zeros((d_out, context_dim)),
                   np.zeros(d_out), np.zeros((d_out, context_dim)))

    @classmethod
    def random(cls, d_in: int, d_out: int, rng: np.random.Generator, scale: float = 1.0,
               context_dim: int = CONTEXT_DIM):
        bound = scale / math.sqrt(d_in)
        cbound = scale / math.sqrt(context_dim)
        u = lambda shape, bnd: rng.uniform(-bnd, bnd, size=shape)
        return cls(u((d_out, d_in), bound), u(d_out, bound), u((d_out, context_dim), cbound),
                   u(d_out, cbound), u((d_out, context_dim), cbound))

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def context_dim(self) -> int:
        return self.W_g.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.W, self.b, self.W_g, self.b_g, self.W_c]

    def gate(self, c):
        return sigmoid(c @ self.W_g.T + self.b_g)

    def shift(self, c, g):
        return self.b * g + c @ self.W_c.T

    def __call__(self, x, c):
        g = self.gate(c)
        return (x @ self.W.T) * g + self.shift(c, g)


def concat_squash_apply(layer: ConcatSquashLayer, x, ctx) -> np.ndarray:
    """Evaluate one layer on ``x`` with context ``ctx = (t, score)``."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(ctx, dtype=np.float64)
    if x.shape[-1] != layer.d_in:
        raise ValueError(f"dimension error: expected input of length {layer.d_in}, got {x.shape[-1]}")
    if c.shape[-1] != layer.context_dim:
        raise ValueError(f"dimension error: expected context of length {layer.context_dim}, got {c.shape[-1]}")
    return layer(x, c)


def _contract(a, b):
    """Sum over the leading (time, batch) axes of a[..., i] * b[..., j]."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _context(times, score) -> np.ndarray:
    """Context grid of shape (T, B, 2) (B = 1 for a scalar score)."""
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    s = np.atleast_1d(np.asarray(score, dtype=np.float64))
    t_grid = np.broadcast_to(times[:, None], (len(times), len(s)))
    s_grid = np.broadcast_to(s[None, :], (len(times), len(s)))
    return np.stack([t_grid, s_grid], axis=-1)


class CnfBlock:
    """ConcatSquash stack with tanh between layers; the output layer is linear."""

    def __init__(self, layers: Sequence[ConcatSquashLayer]):
        self.layers = list(layers)
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.d_out != b.d_in:
                raise ValueError("dimension error: consecutive layer widths disagree")

    @property
    def d(self) -> int:
        return self.layers[0].d_in

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def __call__(self, w, t, score):
        c = _context(t, score)[0]
        h = w
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h, c)
            if i < last:
                h = np.tanh(h)
        return h

    def field_trace(self, w, t, score):
        """Field value and exact Jacobian trace from d forward-mode tangents."""
        c = _context(t, score)[0]
        h, jac = w, None
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            g = layer.gate(c)
            h = (h @ layer.W.T) * g + layer.shift(c, g)
            jac = g[..., :, None] * (layer.W if jac is None else np.matmul(layer.W, jac))
            if i < last:
                h = np.tanh(h)
                jac = (1.0 - h * h)[..., :, None] * jac
        return h, np.trace(jac, axis1=-2, axis2=-1)

    def prepare(self, times, score) -> "PreparedBlock":
        return PreparedBlock(self, times, score)


class PreparedBlock:
    """A block with gates and shifts precomputed on a grid of stage times."""

    def __init__(self, block: CnfBlock, times, score):
        self.block = block
        self.c = _context(times, score)
        self.gates, self.shifts = [], []
        for layer in block.layers:
            g = layer.gate(self.c)
            self.gates.append(g)
            self.shifts.append(layer.shift(self.c, g))
        self.fast = len(block.layers) == 2
        if self.fast:
            l1, l2 = block.layers
            self.K = l2.W * l1.W.T
            self.R = self.gates[1] @ self.K
            self.Q = self.gates[0] * self.R

    def field(self, x, i):
        layers = self.block.layers
        last = len(layers) - 1
        h = x
        for j, layer in enumerate(layers):
            h = (h @ layer.W.T) * self.gates[j][i] + self.shifts[j][i]
            if j < last:
                h = np.tanh(h)
        return h

    def field_trace(self, x, i):
        if not self.fast:
            return self._field_trace_tangent(x, i)
        l1, l2 = self.block.layers
        a = np.tanh((x @ l1.W.T) * self.gates[0][i] + self.shifts[0][i])
        f = (a @ l2.W.T) * self.gates[1][i] + self.shifts[1][i]
        return f, ((1.0 - a * a) * self.Q[i]).sum(-1)

    def _field_trace_tangent(self, x, i):
        layers = self.block.layers
        last = len(layers) - 1
        h, jac = x, None
        for j, layer in enumerate(layers):
            g = self.gates[j][i]
            h = (h @ layer.W.T) * g + self.shifts[j][i]
            jac = g[..., :, None] * (layer.W if jac is None else np.matmul(layer.W, jac))
            if j < last:
                h = np.tanh(h)
                jac = (1.0 - h * h)[..., :, None] * jac
        return h, np.trace(jac, axis1=-2, axis2=-1)

    # reverse-mode pieces used by training (two-layer blocks only)
    def field_trace_tape(self, x, i):
        l1, l2 = self.block.layers
        u = x @ l1.W.T
        a = np.tanh(u * self.gates[0][i] + self.shifts[0][i])
        v = a @ l2.W.T
        f = v * self.gates[1][i] + self.shifts[1][i]
        return f, ((1.0 - a * a) * self.Q[i]).sum(-1), (x, u, a, v)

    def field_trace_backward(self, cache, i, f_bar, tr_bar, acc):
        x, u, a, v = cache
        l1, l2 = self.block.layers
        g1, g2 = self.gates[0][i], self.gates[1][i]
        v_bar = f_bar * g2
        acc["G2"][i] += f_bar * v
        acc["S2"][i] += f_bar
        acc["W2"] += v_bar.T @ a
        one_m = 1.0 - a * a
        tq = tr_bar[:, None]
        a_bar = v_bar @ l2.W - 2.0 * tq * a * self.Q[i]
        acc["Q"][i] += tq * one_m
        p_bar = a_bar * one_m
        acc["G1"][i] += p_bar * u
        acc["S1"][i] += p_bar
        u_bar = p_bar * g1
        acc["W1"] += u_bar.T @ x
        return u_bar @ l1.W

    def new_accumulator(self):
        T, B = self.c.shape[:2]
        l1, l2 = self.block.layers
        h, d = l1.d_out, l2.d_out
        return {"G1": np.zeros((T, B, h)), "S1": np.zeros((T, B, h)), "Q": np.zeros((T, B, h)),
                "G2": np.zeros((T, B, d)), "S2": np.zeros((T, B, d)),
                "W1": np.zeros_like(l1.W), "W2": np.zeros_like(l2.W)}

    def parameter_grads(self, acc) -> list[np.ndarray]:
        """Fold the per-time accumulators back onto the layer parameters."""
        l1, l2 = self.block.layers
        g1, g2 = self.gates
        G1_bar = acc["G1"] + acc["Q"] * self.R
        R_bar = acc["Q"] * g1
        G2_bar = acc["G2"] + R_bar @ self.K.T
        K_bar = _contract(g2, R_bar)
        W1_bar = acc["W1"] + (K_bar * l2.W).T
        W2_bar = acc["W2"] + K_bar * l1.W.T
        grads = []
        for layer, g, G_bar, S_bar, W_bar in ((l1, g1, G1_bar, acc["S1"], W1_bar),
                                              (l2, g2, G2_bar, acc["S2"], W2_bar)):
            G_tot = G_bar + S_bar * layer.b
            b_bar = (S_bar * g).sum(axis=(0, 1))
            Wc_bar = _contract(S_bar, self.c)
            pre_bar = G_tot * g * (1.0 - g)
            Wg_bar = _contract(pre_bar, self.c)
            bg_bar = pre_bar.sum(axis=(0, 1))
            grads += [W_bar, b_bar, Wg_bar, bg_bar, Wc_bar]
        return grads


class CnfModel:
    """Stack of CNF blocks for one attribute plus its solver settings."""

    def __init__(self, blocks: Sequence[CnfBlock], attribute: str = "trustworthiness",
                 solver: SolverConfig = SolverConfig()):
        self.blocks = list(blocks)
        if not self.blocks:
            raise ValueError("a flow needs at least one block")
        self.d = self.blocks[0].d
        for blk in self.blocks:
            if blk.d != self.d or blk.layers[-1].d_out != self.d:
                raise ValueError("dimension error: every block must map d-vectors to d-vectors")
        self.attribute = attribute
        self.solver = solver
        self.loss_curve: list[float] = []

    @classmethod
    def create(cls, d: int = 12, num_blocks: int = 4, hidden: Sequence[int] = (64,),
               attribute: str = "trustworthiness", solver: SolverConfig = SolverConfig(),
               seed: int = 0, out_scale: float = 0.01) -> "CnfModel":
        """Seeded init; each block's output layer starts small so the untrained
        flow is close to the identity map."""
        rng = np.random.default_rng(seed)
        dims = [d, *hidden, d]
        blocks = []
        for _ in range(num_blocks):
            layers = [ConcatSquashLayer.random(a, b, rng, out_scale if k == len(dims) - 2 else 1.0)
                      for k, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
            blocks.append(CnfBlock(layers))
        return cls(blocks, attribute, solver)

    @classmethod
    def zeros(cls, d: int = 12, num_blocks: int = 4, hidden: Sequence[int] = (64,),
              attribute: str = "trustworthiness", solver: SolverConfig = SolverConfig()) -> "CnfModel":
        dims = [d, *hidden, d]
        blocks = [CnfBlock([ConcatSquashLayer.zeros(a, b) for a, b in zip(dims[:-1], dims[1:])])
                  for _ in range(num_blocks)]
        return cls(blocks, attribute, solver)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(layer.d_out for layer in self.blocks[0].layers[:-1])

    def params(self) -> list[np.ndarray]:
        return [p for blk in self.blocks for p in blk.params()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params())

    def layer_shapes(self) -> list[tuple[int, int]]:
        return [layer.W.shape for blk in self.blocks for layer in blk.layers]

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_parameters(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_parameters():
            raise ValueError(f"expected {self.num_parameters()} parameters, got {flat.size}")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "CnfModel":
        out = CnfModel.zeros(self.d, self.num_blocks, self.hidden, self.attribute, self.solver)
        out.set_flat_parameters(self.flat_parameters())
        return out

    def round_to_float32(self) -> "CnfModel":
        """Snap parameters onto float32 values so the binary file is lossless."""
        for p in self.params():
            p[...] = p.astype(np.float32).astype(np.float64)
        return self


def _as_latent(model: CnfModel, w) -> np.ndarray:
    arr = np.asarray(w, dtype=np.float64)
    if arr.shape[-1] != model.d:
        raise ValueError(f"latent length {arr.shape[-1]} does not match model dimension {model.d}")
    if not np.isfinite(arr).all():
        raise ValueError("latent vector has non-finite entries")
    return arr


def _as_score(score) -> np.ndarray:
    s = np.asarray(score, dtype=np.float64)
    if not np.isfinite(s).all() or np.any(s < 0.0) or np.any(s > 1.0):
        raise ValueError("scores must lie in [0, 1]")
    return s


def _batched(fn, model: CnfModel, w, score):
    """Apply ``fn(model, w2d, s1d)`` in chunks and restore the input shape."""
    w = _as_latent(model, w)
    s = _as_score(score)
    single = w.ndim == 1
    w2 = np.atleast_2d(w)
    s1 = np.broadcast_to(s, w2.shape[:1]) if s.ndim else s
    outs = []
    for lo in range(0, len(w2), _CHUNK):
        s_part = s1[lo:lo + _CHUNK] if s1.ndim else s1
        outs.append(fn(model, w2[lo:lo + _CHUNK], s_part))
    out = np.concatenate(outs, axis=0)
    return out[0] if single else out


def _solve(model, w, s, direction):
    steps = model.solver.steps
    times = ode.stage_times(direction, steps)
    h = ode.step_size(direction, steps)
    order = range(model.num_blocks) if direction == ode.FORWARD else reversed(range(model.num_blocks))
    for k in order:
        prep = model.blocks[k].prepare(times, s)
        w = ode.rk4_indexed(prep.field, w, h, steps, where=f"block {k}")
    return w


def _log_density(model, w, s):
    steps = model.solver.steps
    times = ode.stage_times(ode.REVERSE, steps)
    h = ode.step_size(ode.REVERSE, steps)
    total = np.zeros(len(w))
    for k in reversed(range(model.num_blocks)):
        prep = model.blocks[k].prepare(times, s)
        w, acc = ode.rk4_trace_indexed(prep.field_trace, w, h, steps, where=f"block {k}")
        total = total + acc
    return -0.5 * (w * w).sum(-1) - 0.5 * model.d * _LOG_2PI - total


def dynamics_eval(model: CnfModel, block_index: int, w, ctx) -> np.ndarray:
    """phi(w, ctx) for one block, checking every intermediate for finiteness."""
    if not 0 <= block_index < model.num_blocks:
        raise IndexError(f"block_index {block_index} out of range [0, {model.num_blocks})")
    x = _as_latent(model, w)
    c = np.broadcast_to(np.asarray(ctx, dtype=np.float64), x.shape[:-1] + (CONTEXT_DIM,))
    layers = model.blocks[block_index].layers
    for i, layer in enumerate(layers):
        x = layer(x, c)
        if i < len(layers) - 1:
            x = np.tanh(x)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite value in block {block_index}, layer {i}")
    return x


def forward_map(model: CnfModel, z, score) -> np.ndarray:
    """Base code z -> latent w under the given score context."""
    return _batched(lambda m, w, s: _solve(m, w, s, ode.FORWARD), model, z, score)


def reverse_map(model: CnfModel, w, score) -> np.ndarray:
    """Latent w -> base code z under the given score context."""
    return _batched(lambda m, w, s: _solve(m, w, s, ode.REVERSE), model, w, score)


def log_density(model: CnfModel, w, score):
    """log p(w | score) under a standard-normal base distribution."""
    out = _batched(_log_density, model, w, score)
    return float(out) if np.ndim(out) == 0 else out


def log_density_reference(model: CnfModel, w, score):
    """Slow log-density that evaluates every stage from scratch with
    tangent-propagated traces; used to cross-check the fast path."""
    w = np.atleast_2d(_as_latent(model, w))
    s = _as_score(score)
    total = np.zeros(len(w))
    for k in reversed(range(model.num_blocks)):
        w, acc = ode.integrate_with_trace(model.blocks[k].field_trace, w, s, ode.REVERSE, model.solver)
        total = total + acc
    return -0.5 * (w * w).sum(-1) - 0.5 * model.d * _LOG_2PI - total


def nll_and_grad(model: CnfModel, w, s):
    """Mean negative log-density of a batch and its gradient w.r.t. params().

    Reverse-mode through every RK4 stage of every block; requires two-layer
    blocks.
    """
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    s = np.asarray(s, dtype=np.float64)
    s = np.broadcast_to(s, w.shape[:1]).copy() if s.ndim == 0 else s
    n = len(w)
    steps = model.solver.steps
    times = ode.stage_times(ode.REVERSE, steps)
    h = ode.step_size(ode.REVERSE, steps)
    ah = abs(h) / 6.0
    preps, tapes = [], []
    total = np.zeros(n)
    for k in reversed(range(model.num_blocks)):
        prep = model.blocks[k].prepare(times, s)
        if not prep.fast:
            raise NotImplementedError("training supports blocks with one hidden layer")
        tape = []
        for j in range(steps):
            i = 2 * j
            k1, a1, c1 = prep.field_trace_tape(w, i)
            k2, a2, c2 = prep.field_trace_tape(w + 0.5 * h * k1, i + 1)
            k3, a3, c3 = prep.field_trace_tape(w + 0.5 * h * k2, i + 1)
            k4, a4, c4 = prep.field_trace_tape(w + h * k3, i + 2)
            tape.append((c1, c2, c3, c4))
            w = w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            total = total + ah * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if not (np.isfinite(w).all() and np.isfinite(total).all()):
            raise NumericError(f"non-finite state in block {k}")
        preps.append((k, prep))
        tapes.append(tape)
    nll = 0.5 * (w * w).sum(-1) + 0.5 * model.d * _LOG_2PI + total
    loss = float(nll.mean())

    w_bar = w / n
    tr_bar = np.full(n, 1.0 / n)
    grads_by_block = {}
    for (k, prep), tape in zip(reversed(preps), reversed(tapes)):
        acc = prep.new_accumulator()
        for j in reversed(range(steps)):
            i = 2 * j
            c1, c2, c3, c4 = tape[j]
            y4 = prep.field_trace_backward(c4, i + 2, (h / 6.0) * w_bar, ah * tr_bar, acc)
            y3 = prep.field_trace_backward(c3, i + 1, (2.0 * h / 6.0) * w_bar + h * y4,
                                           2.0 * ah * tr_bar, acc)
            y2 = prep.field_trace_backward(c2, i + 1, (2.0 * h / 6.0) * w_bar + 0.5 * h * y3,
                                           2.0 * ah * tr_bar, acc)
            y1 = prep.field_trace_backward(c1, i, (h / 6.0) * w_bar + 0.5 * h * y2, ah * tr_bar, acc)
            w_bar = w_bar + y1 + y2 + y3 + y4
        grads_by_block[k] = prep.parameter_grads(acc)
    grads = [g for k in range(model.num_blocks) for g in grads_by_block[k]]
    return loss, grads


def train_mapper(dataset, cfg: TrainConfig = TrainConfig(), *, model: CnfModel | None = None,
                 num_blocks: int = 4, hidden: Sequence[int] = (64,),
                 attribute: str = "trustworthiness", solver: SolverConfig = SolverConfig(),
                 log_every: int = 0) -> CnfModel:
    """Fit the flow to ``(latent, score)`` pairs by minibatch maximum likelihood.

    ``dataset`` is either ``(latents, scores)`` arrays or a sequence of
    pairs. Adam with the moment decays in ``cfg``; the per-iteration loss is
    recorded on ``model.loss_curve``.
    """
    latents, scores = unpack_pairs(dataset)
    if len(latents) == 0:
        raise ValueError("empty dataset")
    if model is None:
        model = CnfModel.create(latents.shape[1], num_blocks, hidden, attribute, solver, seed=cfg.seed)
    latents = _as_latent(model, latents)
    scores = _as_score(scores)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    n = len(latents)
    order, cursor = rng.permutation(n), 0
    for it in range(cfg.iterations):
        if cursor + cfg.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        try:
            loss, grads = nll_and_grad(model, latents[idx], scores[idx])
        except (NumericError, FloatingPointError) as exc:
            raise NumericError(f"non-finite loss at iteration {it}: {exc}") from None
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at iteration {it}")
        lr = cosine_lr(cfg.learning_rate, it, cfg.iterations) if cfg.lr_schedule == "cosine" else None
        opt.step(grads, lr)
        model.loss_curve.append(loss)
        if log_every and it % log_every == 0:
            print(f"[{model.attribute}] iter {it:5d}  nll {loss:.4f}", flush=True)
    if cfg.iterations:
        model.round_to_float32()
    return model


def unpack_pairs(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2 and np.ndim(dataset[1]) == 1:
        latents, scores = dataset
    else:
        pairs = list(dataset)
        if not pairs:
            return np.zeros((0, 0)), np.zeros(0)
        latents = [p[0] for p in pairs]
        scores = [p[1] for p in pairs]
    return np.asarray(latents, dtype=np.float64), np.asarray(scores, dtype=np.float64)


def target_score(s_orig, delta):
    return np.clip(np.asarray(s_orig, dtype=np.float64) + delta, 0.0, 1.0)


def edit_latent(model: CnfModel, w, s_orig, delta):
    """Move ``w`` from score ``s_orig`` to ``clamp(s_orig + delta, 0, 1)``.

    The latent is pulled back to its base code under the original score and
    pushed forward again under the target score. Returns ``(w_edit, s_target)``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(np.abs(delta) > EDIT_RANGE + 1e-12):
        raise ValueError(f"delta must lie in [-{EDIT_RANGE}, {EDIT_RANGE}]")
    s_orig = _as_score(s_orig)
    s_target = target_score(s_orig, delta)
    z = reverse_map(model, w, s_orig)
    w_edit = forward_map(model, z, s_target)
    return w_edit, (float(s_target) if s_target.ndim == 0 else s_target)


# Binary model file: "IMPFLOW1", little-endian, float32 parameters.
FLOW_MAGIC = b"IMPFLOW1"
FLOW_VERSION = 1


def dump_model(model: CnfModel) -> bytes:
    tag = model.attribute.encode()
    hidden = model.hidden
    shapes = model.layer_shapes()
    parts = [FLOW_MAGIC,
             struct.pack("<IIII", FLOW_VERSION, model.d, model.num_blocks, len(hidden)),
             struct.pack(f"<{len(hidden)}I", *hidden),
             struct.pack("<I", len(shapes))]
    parts += [struct.pack("<II", r, c) for r, c in shapes]
    parts.append(struct.pack("<I", len(tag)) + tag)
    parts.append(struct.pack("<Id", model.solver.steps, model.solver.tolerance))
    params = model.flat_parameters().astype("<f4")
    parts.append(struct.pack("<I", params.size))
    parts.append(params.tobytes())
    return b"".join(parts)


def parse_model(blob: bytes) -> CnfModel:
    if blob[:8] != FLOW_MAGIC:
        raise ValueError("not a flow model file (bad magic)")
    try:
        off = 8
        version, d, num_blocks, n_hidden = struct.unpack_from("<IIII", blob, off)
        off += 16
        if version != FLOW_VERSION:
            raise ValueError(f"unsupported flow model version {version}")
        hidden = struct.unpack_from(f"<{n_hidden}I", blob, off)
        off += 4 * n_hidden
        (n_layers,) = struct.unpack_from("<I", blob, off)
        off += 4
        shapes = [struct.unpack_from("<II", blob, off + 8 * i) for i in range(n_layers)]
        off += 8 * n_layers
        (n_tag,) = struct.unpack_from("<I", blob, off)
        off += 4
        tag = blob[off:off + n_tag].decode()
        off += n_tag
        steps, tol = struct.unpack_from("<Id", blob, off)
        off += 12
        (n_params,) = struct.unpack_from("<I", blob, off)
        off += 4
    except (struct.error, UnicodeDecodeError) as exc:
        raise ValueError(f"corrupt flow model file: {exc}") from None
    if len(blob) != off + 4 * n_params:
        raise ValueError("corrupt flow model file (length mismatch)")
    model = CnfModel.zeros(d, num_blocks, hidden, tag, SolverConfig(steps=steps, tolerance=tol))
    if [tuple(s) for s in shapes] != model.layer_shapes():
        raise ValueError("corrupt flow model file (layer shapes)")
    model.set_flat_parameters(np.frombuffer(blob, dtype="<f4", count=n_params, offset=off))
    return model


def save_model(model: CnfModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_model(model))


def load_model(path) -> CnfModel:
    with open(path, "rb") as fh:
        return parse_model(fh.read())
