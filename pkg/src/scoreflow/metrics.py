"""Edit-quality metrics: identity similarity, perceptual distance, Frechet
distance, ADAS and the adjacent-pair evaluation protocol.

Embedding and feature providers are plain callables, so the same code runs
on toy identity blocks or on any other representation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Reference value from the large-scale setup, kept as metadata only.
REFERENCE_ADAS = {"ffhq_trustworthiness": (0.088, 0.04)}

SYMMETRY_TOL = 1e-6
EIG_FLOOR = -1e-8


def _cosines(o, e) -> np.ndarray:
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    if o.shape != e.shape:
        raise ValueError(f"embedding shapes differ: {o.shape} vs {e.shape}")
    no = np.linalg.norm(o, axis=-1)
    ne = np.linalg.norm(e, axis=-1)
    if np.any(no == 0) or np.any(ne == 0):
        raise ValueError("zero-norm embedding; cosine is undefined")
    return (o * e).sum(-1) / (no * ne)


def identity_similarity(pairs) -> float:
    """Mean cosine similarity over ``(o, e)`` embedding pairs.

    ``pairs`` may also be a tuple of two (N, k) arrays.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 2:
        o, e = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("no pairs given")
        o = [p[0] for p in pairs]
        e = [p[1] for p in pairs]
    return float(np.clip(_cosines(o, e), -1.0, 1.0).mean())


@dataclass
class FeatureStack:
    """Per-layer (H, W, C) feature maps with per-layer channel weights."""
    layers: list
    weights: list | None = None

    def __post_init__(self):
        self.layers = [np.asarray(l, dtype=np.float64) for l in self.layers]
        if self.weights is None:
            self.weights = [np.ones(l.shape[-1]) for l in self.layers]
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        if any(np.any(w < 0) for w in self.weights):
            raise ValueError("layer weights must be nonnegative")

    @property
    def shapes(self):
        return [l.shape for l in self.layers]


def _unit_channels(x, eps=1e-10):
    return x / (np.linalg.norm(x, axis=-1, keepdims=True) + eps)


def perceptual_distance(a: FeatureStack, b: FeatureStack) -> float:
    """Sum over layers of the spatially averaged squared distance between
    weighted, channel-normalized features."""
    if a.shapes != b.shapes or len(a.weights) != len(b.weights):
        raise ValueError("feature stacks have different layer shapes")
    total = 0.0
    for ya, yb, wa, wb in zip(a.layers, b.layers, a.weights, b.weights):
        if not np.array_equal(wa, wb):
            raise ValueError("feature stacks use different layer weights")
        diff = wa * (_unit_channels(ya) - _unit_channels(yb))
        h, w = ya.shape[:2]
        total += float((diff ** 2).sum()) / (h * w)
    return total


class FeaturePyramid:
    """Fixed random-projection pyramid: each level takes 2x2 patches of the
    previous level, projects them with a seeded matrix and applies tanh."""

    def __init__(self, seed: int = 0, channels: Sequence[int] = (8, 16, 32), in_channels: int = 1):
        rng = np.random.default_rng([seed, 0x5044])
        self.projections = []
        c_in = in_channels
        for c in channels:
            fan_in = 4 * c_in
            self.projections.append(rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, c)))
            c_in = c

    def maps(self, images) -> list[np.ndarray]:
        """(N, H, W) images -> list of (N, H_l, W_l, C_l) maps."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        h = (x[..., None] - 0.35) / 0.3
        out = []
        for P in self.projections:
            n, hh, ww, c = h.shape
            if hh % 2 or ww % 2:
                raise ValueError("image too small for the pyramid depth")
            patches = h.reshape(n, hh // 2, 2, ww // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, hh // 2, ww // 2, 4 * c)
            h = np.tanh(patches @ P)
            out.append(h)
        return out

    def stack(self, image) -> FeatureStack:
        return FeatureStack([m[0] for m in self.maps(image)])

    def pooled(self, images) -> np.ndarray:
        """Global-average-pooled features, concatenated over levels."""
        return np.concatenate([m.mean(axis=(1, 2)) for m in self.maps(images)], axis=1)


def perceptual_distance_images(xa, xb, pyramid: FeaturePyramid) -> float:
    """Mean perceptual distance over paired image sets."""
    ma, mb = pyramid.maps(xa), pyramid.maps(xb)
    n = len(ma[0])
    if n != len(mb[0]):
        raise ValueError("image sets differ in size")
    total = 0.0
    for ya, yb in zip(ma, mb):
        h, w = ya.shape[1:3]
        total += float(((_unit_channels(ya) - _unit_channels(yb)) ** 2).sum()) / (h * w)
    return total / n


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int = 0

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        s = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = len(self.mu)
        if s.shape != (d, d):
            raise ValueError(f"covariance shape {s.shape} does not match mean length {d}")
        scale = max(1.0, float(np.abs(s).max()))
        if np.abs(s - s.T).max() > SYMMETRY_TOL * scale:
            raise ValueError("covariance is not symmetric")
        self.sigma = 0.5 * (s + s.T)

    @classmethod
    def from_samples(cls, x) -> "GaussianStats":
        """Mean and unbiased covariance of the rows of ``x``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if len(x) < 2:
            raise ValueError("need at least 2 samples for a covariance")
        return cls(x.mean(0), np.atleast_2d(np.cov(x, rowvar=False, ddof=1)), len(x))


def sqrtm_psd(S) -> np.ndarray:
    """Symmetric square root through eigh; eigenvalues down to -1e-8
    (relative) are treated as zero, anything lower is rejected."""
    S = np.asarray(S, dtype=np.float64)
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    floor = EIG_FLOOR * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if np.any(vals < floor):
        raise ValueError(f"matrix is not positive semidefinite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats, variant: str = "standard") -> float:
    """Squared Frechet distance between two Gaussians.

    ``variant="sqrt"`` returns its square root, for reports that average
    rooted distances over set pairs.
    """
    if s1.mu.shape != s2.mu.shape:
        raise ValueError("dimension mismatch between the two Gaussians")
    r1 = sqrtm_psd(s1.sigma)
    cross = sqrtm_psd(r1 @ s2.sigma @ r1)
    diff = s1.mu - s2.mu
    d = float(diff @ diff + np.trace(s1.sigma) + np.trace(s2.sigma) - 2.0 * np.trace(cross))
    if variant == "standard":
        return d
    if variant == "sqrt":
        return float(np.sqrt(max(d, 0.0)))
    raise ValueError(f"unknown variant {variant!r}")


def adas(edited_scores, target_scores) -> float:
    """Mean absolute difference between achieved and target scores."""
    e = np.asarray(edited_scores, dtype=np.float64).ravel()
    t = np.asarray(target_scores, dtype=np.float64).ravel()
    if e.shape != t.shape:
        raise ValueError("score lists differ in length")
    if e.size == 0:
        raise ValueError("empty score lists")
    return float(np.abs(e - t).mean())


@dataclass
class MetricsReport:
    lambdas: list
    pairs: list  # dicts: lo, hi, is, pd, fid
    is_: float
    pd: float
    fid: float
    adas: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"is": self.is_, "pd": self.pd, "fid": self.fid, "adas": self.adas,
               "lambdas": list(self.lambdas), "pairs": list(self.pairs)}
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def adjacent_pair_eval(spectrum: dict, identity: Callable, features: Callable,
                       scores: Callable | None = None, original_scores=None) -> MetricsReport:
    """Evaluate a batch of spectra.

    ``spectrum`` maps each lambda (must include 0 for the originals) to an
    (N, H, W) image stack. ``identity(images)`` returns (N, k) embeddings and
    ``features`` is a FeaturePyramid used for both PD and FID. With
    ``scores`` and ``original_scores`` the report also carries ADAS, taking
    the target of each edit to be clamp(original score + lambda, 0, 1).
    """
    lambdas = sorted(float(l) for l in spectrum)
    if list(spectrum) != sorted(spectrum):
        raise ValueError("spectrum must be ordered by lambda")
    if 0.0 not in lambdas or len(lambdas) < 2:
        raise ValueError("spectrum needs the original (lambda = 0) and at least one edit")
    imgs = {float(l): np.asarray(v, dtype=np.float64) for l, v in spectrum.items()}
    n = len(imgs[0.0])
    if any(len(v) != n for v in imgs.values()):
        raise ValueError("every spectrum point needs the same number of faces")

    emb = {l: identity(v) for l, v in imgs.items()}
    pooled = {l: features.pooled(v) for l, v in imgs.items()}
    pairs = []
    for lo, hi in zip(lambdas[:-1], lambdas[1:]):
        pairs.append({
            "lo": lo, "hi": hi,
            "is": identity_similarity((emb[lo], emb[hi])),
            "pd": perceptual_distance_images(imgs[lo], imgs[hi], features),
            "fid": frechet_distance(GaussianStats.from_samples(pooled[lo]), GaussianStats.from_samples(pooled[hi])),
        })
    edits = [pooled[l] for l in lambdas if l != 0.0]
    # originals repeated once per edit level so both sets have equal size
    fid = frechet_distance(GaussianStats.from_samples(np.concatenate([pooled[0.0]] * len(edits))),
                           GaussianStats.from_samples(np.concatenate(edits)))
    report = MetricsReport(
        lambdas=lambdas, pairs=pairs,
        is_=float(np.mean([p["is"] for p in pairs])),
        pd=float(np.mean([p["pd"] for p in pairs])),
        fid=fid,
    )
    if scores is not None and original_scores is not None:
        s_o = np.asarray(original_scores, dtype=np.float64)
        got, want = [], []
        for l in lambdas:
            if l == 0.0:
                continue
            got.append(scores(imgs[l]))
            want.append(np.clip(s_o + l, 0.0, 1.0))
        report.adas = adas(np.concatenate(got), np.concatenate(want))
    return report
