"""Image-to-latent encoder and identity-restorative inversion.

E1 is a dense network regressing the latent w = M p from pixels. Inversion
renders the (possibly edited) latent through the toy generator
G(w) = render(M^-1 w), then fuses 8x8 feature maps of that reconstruction
and of the original image (channel concatenation) into an appearance code.
A per-cell network maps the code, together with the cell's pixel difference
x - x', to a 4x4 pixel residual at each of the 8x8 cells, which is added to
the reconstruction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..config import TrainConfig
from ..nn import MLP, fit, pack_mlp, unpack_mlp
from .render import COVARIATES, IDENTITY, N_PARAMS, RenderConfig, render_batch
from .world import MixingMatrix, ToyDataset

PIXEL_MEAN, PIXEL_SCALE = 0.35, 0.30
GRID = 8  # appearance-code spatial size
N_STATS = 4  # pooled statistics per cell fed to the 1x1 mixing
DIFF_GAIN = 10.0  # pixel differences are small; rescale before the corrector


class NotReadyError(RuntimeError):
    pass


def _flat_pixels(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return (x.reshape(len(x), -1) - PIXEL_MEAN) / PIXEL_SCALE


def cell_statistics(images) -> np.ndarray:
    """(N, 8, 8, 4): per-cell mean, mean |dx|, mean |dy| and std."""
    x = np.asarray(images, dtype=np.float64)
    n, hgt, wid = x.shape
    c = hgt // GRID
    dx = np.abs(np.diff(x, axis=2, append=x[:, :, -1:]))
    dy = np.abs(np.diff(x, axis=1, append=x[:, -1:, :]))
    cells = lambda a: a.reshape(n, GRID, c, GRID, c)
    stats = [cells(x).mean(axis=(2, 4)), cells(dx).mean(axis=(2, 4)),
             cells(dy).mean(axis=(2, 4)), cells(x).std(axis=(2, 4))]
    return np.stack(stats, axis=-1)


@dataclass
class EncoderModel:
    e1: MLP
    mixing: MixingMatrix
    e2_mix: np.ndarray  # (channels, N_STATS)
    e2_bias: np.ndarray  # (channels,)
    corrector: MLP  # 2*channels + 16 -> hidden -> 16 (a 4x4 residual patch)
    corrector_trained: bool = False
    render_cfg: RenderConfig = RenderConfig()
    e1_loss_curve: list = field(default_factory=list, repr=False)
    corrector_loss_curve: list = field(default_factory=list, repr=False)

    @classmethod
    def create(cls, mixing: MixingMatrix, seed: int = 0, hidden=(256, 128), channels: int = 8,
               corrector_hidden: int = 32, render_cfg: RenderConfig = RenderConfig()) -> "EncoderModel":
        pixels = render_cfg.size ** 2
        rng = np.random.default_rng([seed, 2])
        patch = (render_cfg.size // GRID) ** 2
        # float32-representable from the start so files round-trip exactly
        return cls(
            e1=MLP([pixels, *hidden, mixing.M.shape[0]], seed=seed).round_to_float32(),
            mixing=mixing,
            e2_mix=rng.normal(scale=1.0, size=(channels, N_STATS)).astype(np.float32).astype(np.float64),
            e2_bias=np.zeros(channels),
            corrector=MLP([2 * channels + patch, corrector_hidden, patch], seed=seed + 1, zero_last=True).round_to_float32(),
            render_cfg=render_cfg,
        )

    @property
    def channels(self) -> int:
        return self.e2_mix.shape[0]

    def e2(self, images) -> np.ndarray:
        """Feature maps of shape (N, C, 8, 8)."""
        stats = _standardize_stats(cell_statistics(images))
        return np.tanh(stats @ self.e2_mix.T + self.e2_bias).transpose(0, 3, 1, 2)

    def appearance_code(self, x_recon, x_orig) -> np.ndarray:
        """(N, 2C, 8, 8): reconstruction features stacked on original features."""
        return np.concatenate([self.e2(x_recon), self.e2(x_orig)], axis=1)

    def generate(self, w) -> np.ndarray:
        """Toy generator G(w) = render(M^-1 w)."""
        return render_batch(self.mixing.to_params(np.atleast_2d(w)), self.render_cfg)[0]


_STAT_SHIFT = np.array([0.35, 0.04, 0.04, 0.05])
_STAT_SCALE = np.array([0.20, 0.04, 0.04, 0.05])


def _standardize_stats(stats):
    return (stats - _STAT_SHIFT) / _STAT_SCALE


def encode(model: EncoderModel, x) -> np.ndarray:
    """Latent estimate for one (32, 32) image or a stack (N, 32, 32)."""
    x = np.asarray(x, dtype=np.float64)
    size = model.render_cfg.size
    single = x.ndim == 2
    xs = x[None] if single else x
    if xs.shape[1:] != (size, size):
        raise ValueError(f"expected images of shape ({size}, {size}), got {xs.shape[1:]}")
    out = model.e1(_flat_pixels(xs))
    return out[0] if single else out


def _to_cells(images):
    """(N, H, W) -> (N, 64, c*c) patches in row-major cell order."""
    n, h, _ = images.shape
    c = h // GRID
    return images.reshape(n, GRID, c, GRID, c).transpose(0, 1, 3, 2, 4).reshape(n, GRID * GRID, c * c)


def _from_cells(cells):
    n = len(cells)
    c = int(round(np.sqrt(cells.shape[-1])))
    return cells.reshape(n, GRID, GRID, c, c).transpose(0, 1, 3, 2, 4).reshape(n, GRID * c, GRID * c)


def _corrector_forward(model: EncoderModel, x_recon, x_orig):
    code = model.appearance_code(x_recon, x_orig)  # (N, 2C, 8, 8)
    n = len(code)
    rows = np.concatenate([code.transpose(0, 2, 3, 1).reshape(n, GRID * GRID, -1),
                           DIFF_GAIN * _to_cells(x_orig - x_recon)], axis=-1)
    patch = model.corrector(rows.reshape(n * GRID * GRID, -1))
    return _from_cells(patch.reshape(n, GRID * GRID, -1))


def invert_with_restoration(model: EncoderModel, w, x_orig) -> np.ndarray:
    """Reconstruct an image for latent ``w`` while restoring the identity
    details of ``x_orig``. Output pixels are clamped to [0, 1]."""
    if not model.corrector_trained:
        raise NotReadyError("residual corrector has not been trained")
    return _restore(model, w, x_orig)


def _restore(model, w, x_orig):
    w = np.asarray(w, dtype=np.float64)
    x_orig = np.asarray(x_orig, dtype=np.float64)
    single = w.ndim == 1
    ws = np.atleast_2d(w)
    xo = x_orig[None] if x_orig.ndim == 2 else x_orig
    x_recon = model.generate(ws)
    out = np.clip(x_recon + _corrector_forward(model, x_recon, xo), 0.0, 1.0)
    return out[0] if single else out


def plain_reconstruction(model: EncoderModel, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    out = model.generate(w)
    return out[0] if w.ndim == 1 else out


def train_encoder(dataset: ToyDataset | np.ndarray, cfg: TrainConfig, mixing: MixingMatrix,
                  corrector_cfg: TrainConfig | None = None, model: EncoderModel | None = None,
                  log_every: int = 0) -> EncoderModel:
    """Fit E1 by mean squared latent error, then the restorative corrector.

    ``dataset`` is a ToyDataset or an (N, 12) array of face parameters that
    gets rendered. The corrector is trained on inversions of the same
    faces, with half of them pushed along random covariate directions so it
    learns to restore identity without undoing covariate edits.
    """
    params = dataset.params if isinstance(dataset, ToyDataset) else np.asarray(dataset, dtype=np.float64)
    if len(params) == 0:
        raise ValueError("empty training set")
    model = model or EncoderModel.create(mixing, seed=cfg.seed)
    images = dataset.images if isinstance(dataset, ToyDataset) else render_batch(params, model.render_cfg)[0]
    X = _flat_pixels(images)
    W = mixing.to_latent(params)

    def e1_grad(idx):
        y, acts = model.e1.forward(X[idx], keep=True)
        r = y - W[idx]
        grads, _ = model.e1.backward(acts, 2.0 * r / r.size)
        return float((r * r).mean()), grads

    model.e1_loss_curve = fit(model.e1.params(), len(X), e1_grad, cfg, log_every, "E1")
    if cfg.iterations:
        model.e1.round_to_float32()
    if corrector_cfg is not None:
        train_corrector(model, params, images, corrector_cfg, log_every)
    return model


def restoration_pairs(model: EncoderModel, params, images, seed: int, edit_scale: float = 0.5):
    """Inputs and identity-restored targets for corrector training."""
    rng = np.random.default_rng([seed, 3])
    w = encode(model, images)
    p_hat = model.mixing.to_params(w)
    n = len(params)
    shift = rng.normal(scale=edit_scale, size=(n, 6)) * (rng.random(n) < 0.5)[:, None]
    p_hat[:, COVARIATES] = np.clip(p_hat[:, COVARIATES] + shift, -1.0, 1.0)
    target_p = p_hat.copy()
    target_p[:, IDENTITY] = params[:, IDENTITY]
    x_recon = render_batch(p_hat, model.render_cfg)[0]
    target = render_batch(target_p, model.render_cfg)[0]
    return x_recon, target


def train_corrector(model: EncoderModel, params, images, cfg: TrainConfig, log_every: int = 0) -> EncoderModel:
    x_recon, target = restoration_pairs(model, params, images, cfg.seed)
    x_orig = np.asarray(images, dtype=np.float64)
    stats_r = _standardize_stats(cell_statistics(x_recon))
    stats_o = _standardize_stats(cell_statistics(x_orig))
    n = len(x_recon)
    recon_cells = _to_cells(x_recon)
    resid_target = _to_cells(target) - recon_cells
    diff_cells = DIFF_GAIN * (_to_cells(x_orig) - recon_cells)
    C = model.channels
    params_list = [model.e2_mix, model.e2_bias] + model.corrector.params()

    def grad(idx):
        b = len(idx)
        pre_r = stats_r[idx] @ model.e2_mix.T + model.e2_bias
        pre_o = stats_o[idx] @ model.e2_mix.T + model.e2_bias
        f_r, f_o = np.tanh(pre_r), np.tanh(pre_o)  # (b, 8, 8, C)
        feats = np.concatenate([f_r, f_o], axis=-1).reshape(b, GRID * GRID, 2 * C)
        rows = np.concatenate([feats, diff_cells[idx]], axis=-1).reshape(b * GRID * GRID, -1)
        out, acts = model.corrector.forward(rows, keep=True)
        out = out.reshape(b, GRID * GRID, -1)
        # loss on the clamped output, as used at inference time
        y = recon_cells[idx] + out
        inside = (y > 0.0) & (y < 1.0)
        err = np.clip(y, 0.0, 1.0) - (recon_cells[idx] + resid_target[idx])
        loss = float((err * err).mean())
        d_out = (2.0 * err / err.size * inside).reshape(b * GRID * GRID, -1)
        grads, d_rows = model.corrector.backward(acts, d_out)
        d_rows = d_rows[:, :2 * C].reshape(b, GRID, GRID, 2 * C)
        d_pre_r = d_rows[..., :C] * (1.0 - f_r ** 2)
        d_pre_o = d_rows[..., C:] * (1.0 - f_o ** 2)
        g_mix = (d_pre_r.reshape(-1, C).T @ stats_r[idx].reshape(-1, N_STATS)
                 + d_pre_o.reshape(-1, C).T @ stats_o[idx].reshape(-1, N_STATS))
        g_bias = d_pre_r.reshape(-1, C).sum(0) + d_pre_o.reshape(-1, C).sum(0)
        return loss, [g_mix, g_bias] + grads

    model.corrector_loss_curve = fit(params_list, n, grad, cfg, log_every, "corrector")
    if cfg.iterations:
        model.corrector.round_to_float32()
        for p in (model.e2_mix, model.e2_bias):
            p[...] = p.astype(np.float32).astype(np.float64)
    model.corrector_trained = True
    return model


# Binary encoder file: "IMPENCD1". Networks are float32; the mixing matrix
# is kept in float64 so M^-1 is reproduced exactly.
ENC_MAGIC = b"IMPENCD1"
ENC_VERSION = 1


def dump_encoder(model: EncoderModel) -> bytes:
    rc = model.render_cfg
    C = model.channels
    return b"".join([
        ENC_MAGIC,
        struct.pack("<IIIdd?", ENC_VERSION, rc.size, rc.supersample, rc.edge, rc.background,
                    model.corrector_trained),
        model.mixing.M.astype("<f8").tobytes(),
        pack_mlp(model.e1),
        struct.pack("<I", C),
        model.e2_mix.astype("<f4").tobytes(),
        model.e2_bias.astype("<f4").tobytes(),
        pack_mlp(model.corrector),
    ])


def parse_encoder(blob: bytes) -> EncoderModel:
    if blob[:8] != ENC_MAGIC:
        raise ValueError("not an encoder file (bad magic)")
    try:
        off = 8
        version, size, ss, edge, background, trained = struct.unpack_from("<IIIdd?", blob, off)
        off += struct.calcsize("<IIIdd?")
        if version != ENC_VERSION:
            raise ValueError(f"unsupported encoder version {version}")
        M = np.frombuffer(blob, dtype="<f8", count=N_PARAMS * N_PARAMS, offset=off).reshape(N_PARAMS, N_PARAMS)
        off += 8 * N_PARAMS * N_PARAMS
        e1, off = unpack_mlp(blob, off)
        (C,) = struct.unpack_from("<I", blob, off)
        off += 4
        e2_mix = np.frombuffer(blob, dtype="<f4", count=C * N_STATS, offset=off).reshape(C, N_STATS)
        off += 4 * C * N_STATS
        e2_bias = np.frombuffer(blob, dtype="<f4", count=C, offset=off)
        off += 4 * C
        corrector, off = unpack_mlp(blob, off)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"corrupt encoder file: {exc}") from None
    if off != len(blob):
        raise ValueError("corrupt encoder file (length mismatch)")
    return EncoderModel(e1, MixingMatrix(M.astype(np.float64)), e2_mix.astype(np.float64),
                        e2_bias.astype(np.float64), corrector, bool(trained),
                        RenderConfig(size, ss, edge, background))


def save_encoder(model: EncoderModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_encoder(model))


def load_encoder(path) -> EncoderModel:
    with open(path, "rb") as fh:
        return parse_encoder(fh.read())
