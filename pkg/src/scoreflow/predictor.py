"""Subjective-attribute score regression from face images.

Fixed multi-scale mean-pooling features feed a two-hidden-layer perceptron
whose output goes through a sigmoid, so predictions always lie in [0, 1].
Fine-tuning is training with a previously fitted model as the start point.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .nn import MLP, fit

POOL_SIZES = (2, 4, 8)
FEATURE_MEAN, FEATURE_SCALE = 0.35, 0.30


def pooled_features(images, pools=POOL_SIZES) -> np.ndarray:
    """Concatenated mean-pooled maps at each pool size, centered and scaled."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    n, h, w = x.shape
    feats = []
    for k in pools:
        if h % k or w % k:
            raise ValueError(f"image size {h}x{w} is not divisible by pool size {k}")
        feats.append(x.reshape(n, h // k, k, w // k, k).mean(axis=(2, 4)).reshape(n, -1))
    return (np.concatenate(feats, axis=1) - FEATURE_MEAN) / FEATURE_SCALE


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class RegressorModel:
    net: MLP
    attribute: str = "trustworthiness"
    image_size: int = 32
    loss_curve: list = field(default_factory=list, repr=False)

    @classmethod
    def create(cls, attribute: str = "trustworthiness", image_size: int = 32, hidden=(64, 32),
               seed: int = 0, zero_last: bool = False) -> "RegressorModel":
        n_feat = sum((image_size // k) ** 2 for k in POOL_SIZES)
        net = MLP([n_feat, *hidden, 1], seed=seed, zero_last=zero_last).round_to_float32()
        return cls(net, attribute, image_size)

    def copy(self) -> "RegressorModel":
        return RegressorModel(self.net.copy(), self.attribute, self.image_size)


def predict_score(model: RegressorModel, image) -> np.ndarray | float:
    """Score in [0, 1] for one image or an (N, H, W) stack."""
    x = np.asarray(image, dtype=np.float64)
    if x.shape[-2:] != (model.image_size, model.image_size):
        raise ValueError(f"expected {model.image_size}x{model.image_size} images, got {x.shape[-2:]}")
    out = _sigmoid(model.net(pooled_features(x))[:, 0])
    return float(out[0]) if x.ndim == 2 else out


def r_squared(predictions, targets) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predictions and targets must have equal, nonzero length")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ZeroDivisionError("targets have zero variance; R^2 is undefined")
    return 1.0 - float(((t - p) ** 2).sum()) / ss_tot


def train_regressor(images, scores, init: RegressorModel | None = None,
                    cfg: TrainConfig = TrainConfig(), attribute: str = "trustworthiness",
                    log_every: int = 0) -> RegressorModel:
    """Minimize mean squared error of the sigmoid output.

    Passing ``init`` continues from that model (fine-tuning); the input
    model is left untouched.
    """
    y = np.asarray(scores, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("empty training set")
    if np.any(y < 0) or np.any(y > 1):
        raise ValueError("scores must lie in [0, 1]")
    images = np.asarray(images, dtype=np.float64)
    model = init.copy() if init is not None else RegressorModel.create(
        attribute, images.shape[-1], seed=cfg.seed)
    X = pooled_features(images)

    def grad(idx):
        z, acts = model.net.forward(X[idx], keep=True)
        p = _sigmoid(z[:, 0])
        r = p - y[idx]
        d_z = (2.0 * r / len(idx) * p * (1.0 - p))[:, None]
        grads, _ = model.net.backward(acts, d_z)
        return float((r * r).mean()), grads

    model.loss_curve = fit(model.net.params(), len(X), grad, cfg, log_every, f"regressor:{attribute}")
    if cfg.iterations:
        model.net.round_to_float32()
    return model


# Binary model file: "IMPREGR1", little-endian, float32 weights.
REGR_MAGIC = b"IMPREGR1"
REGR_VERSION = 1


def dump_regressor(model: RegressorModel) -> bytes:
    tag = model.attribute.encode()
    sizes = model.net.sizes
    flat = model.net.flat().astype("<f4")
    return b"".join([
        REGR_MAGIC,
        struct.pack("<III", REGR_VERSION, model.image_size, len(sizes)),
        struct.pack(f"<{len(sizes)}I", *sizes),
        struct.pack("<I", len(tag)), tag,
        struct.pack("<I", flat.size), flat.tobytes(),
    ])


def parse_regressor(blob: bytes) -> RegressorModel:
    if blob[:8] != REGR_MAGIC:
        raise ValueError("not a regressor model file (bad magic)")
    try:
        off = 8
        version, image_size, n_sizes = struct.unpack_from("<III", blob, off)
        off += 12
        if version != REGR_VERSION:
            raise ValueError(f"unsupported regressor version {version}")
        sizes = struct.unpack_from(f"<{n_sizes}I", blob, off)
        off += 4 * n_sizes
        (n_tag,) = struct.unpack_from("<I", blob, off)
        off += 4
        tag = blob[off:off + n_tag].decode()
        off += n_tag
        (n_params,) = struct.unpack_from("<I", blob, off)
        off += 4
    except (struct.error, UnicodeDecodeError) as exc:
        raise ValueError(f"corrupt regressor file: {exc}") from None
    if len(blob) != off + 4 * n_params:
        raise ValueError("corrupt regressor file (length mismatch)")
    net = MLP(sizes)
    if net.flat().size != n_params:
        raise ValueError("corrupt regressor file (parameter count)")
    net.set_flat(np.frombuffer(blob, dtype="<f4", count=n_params, offset=off).astype(np.float64))
    return RegressorModel(net, tag, image_size)


def save_regressor(model: RegressorModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_regressor(model))


def load_regressor(path) -> RegressorModel:
    with open(path, "rb") as fh:
        return parse_regressor(fh.read())
