"""Toy world: latent mixing, ground-truth attribute oracles, sampling and the
dataset quality gate."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from ..config import config_hash
from .render import (BROW, COVARIATES, EYE_OPEN, FACIAL_HAIR, IDENTITY, N_PARAMS, SMILE, WRINKLE,
                     RenderConfig, render_batch)

# Reference counts from the large-scale setup; metadata only.
REFERENCE_TRAIN_COUNT = 10883
REFERENCE_EVAL_COUNT = 19921


class AttributeKind(str, enum.Enum):
    TRUSTWORTHINESS = "trustworthiness"
    DOMINANCE = "dominance"
    ATTRACTIVENESS = "attractiveness"

    @classmethod
    def parse(cls, tag) -> "AttributeKind":
        if isinstance(tag, cls):
            return tag
        aliases = {"trust": cls.TRUSTWORTHINESS, "dom": cls.DOMINANCE, "attr": cls.ATTRACTIVENESS}
        try:
            return aliases.get(tag) or cls(tag)
        except ValueError:
            raise ValueError(f"unknown attribute {tag!r}") from None

    @property
    def short(self) -> str:
        return {"trustworthiness": "trust", "dominance": "dom", "attractiveness": "attr"}[self.value]


ATTRIBUTES = tuple(AttributeKind)

# Linear forms over the covariates fed through a sigmoid.
ORACLE_COEFFICIENTS = {
    AttributeKind.TRUSTWORTHINESS: {SMILE: 1.5, BROW: -1.2, WRINKLE: -0.8, EYE_OPEN: 0.3},
    AttributeKind.DOMINANCE: {BROW: 1.4, FACIAL_HAIR: 1.0, WRINKLE: 0.8, SMILE: -0.6},
    AttributeKind.ATTRACTIVENESS: {SMILE: 1.0, EYE_OPEN: 0.8, WRINKLE: -1.0},
}


def oracle_vector(attr) -> np.ndarray:
    """Coefficients of the oracle's linear form as a length-12 vector."""
    v = np.zeros(N_PARAMS)
    for k, c in ORACLE_COEFFICIENTS[AttributeKind.parse(attr)].items():
        v[k] = c
    return v


def truth_score(p, attr) -> np.ndarray | float:
    """Ground-truth score sigma(a . p) for one (12,) or many (N, 12) faces."""
    p = np.asarray(p, dtype=np.float64)
    if not np.isfinite(p).all():
        raise ValueError("face parameters must be finite")
    z = p @ oracle_vector(attr)
    out = 1.0 / (1.0 + np.exp(-z))
    return float(out) if np.ndim(out) == 0 else out


class MixingMatrix:
    """Fixed invertible map from face parameters to latents, w = M p."""

    def __init__(self, M):
        self.M = np.asarray(M, dtype=np.float64)
        if self.M.shape != (N_PARAMS, N_PARAMS):
            raise ValueError("mixing matrix must be 12x12")
        if abs(np.linalg.det(self.M)) <= 1e-6:
            raise ValueError("mixing matrix is not invertible")
        self.M_inv = np.linalg.inv(self.M)

    @classmethod
    def from_seed(cls, seed: int, low: float = 1.0, high: float = 3.0) -> "MixingMatrix":
        """Random orthogonal factors around singular values in [low, high]."""
        rng = np.random.default_rng([seed, 0x4D49])
        q1, r1 = np.linalg.qr(rng.normal(size=(N_PARAMS, N_PARAMS)))
        q2, r2 = np.linalg.qr(rng.normal(size=(N_PARAMS, N_PARAMS)))
        q1 *= np.sign(np.diag(r1))
        q2 *= np.sign(np.diag(r2))
        sv = rng.permutation(np.geomspace(low, high, N_PARAMS))
        return cls(q1 @ np.diag(sv) @ q2.T)

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.M))

    def to_latent(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.M.T

    def to_params(self, w) -> np.ndarray:
        return np.asarray(w, dtype=np.float64) @ self.M_inv.T


def identity_embed(x, mixing: MixingMatrix | None = None) -> np.ndarray:
    """Identity block of a face: of ``p`` directly, or of M^-1 w when a
    mixing matrix is given and ``x`` is a latent."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")
    p = mixing.to_params(x) if mixing is not None else x
    return p[..., IDENTITY].copy()


def cosine(a, b) -> np.ndarray | float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n: int = 5000
    adult_only: bool = False
    covariate_scale: float = 1.0
    energy_threshold: float = 0.2
    identity_threshold: float = 0.85

    def world_hash(self) -> str:
        """Hash of what defines the latent space (not of the sample drawn from it)."""
        return config_hash({"seed": self.seed, "render": asdict(RenderConfig()), "d": N_PARAMS})

    def mixing(self) -> MixingMatrix:
        return MixingMatrix.from_seed(self.seed)


@dataclass
class ToyDataset:
    params: np.ndarray  # (n, 12)
    images: np.ndarray  # (n, 32, 32)
    scores: dict  # AttributeKind -> (n,)

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, i):
        return self.params[i], self.images[i], {a: float(s[i]) for a, s in self.scores.items()}

    def subset(self, idx) -> "ToyDataset":
        idx = np.asarray(idx)
        return ToyDataset(self.params[idx], self.images[idx], {a: s[idx] for a, s in self.scores.items()})


def _truncated_normal(rng: np.random.Generator, shape, scale=1.0, low=-1.0, high=1.0):
    out = rng.normal(scale=scale, size=shape)
    bad = (out < low) | (out > high)
    while bad.any():
        out[bad] = rng.normal(scale=scale, size=int(bad.sum()))
        bad = (out < low) | (out > high)
    return out


def sample_params(n: int, seed: int, adult_only: bool = False, covariate_scale: float = 1.0) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([seed, 0x5A4D])
    p = np.empty((n, N_PARAMS))
    p[:, IDENTITY] = _truncated_normal(rng, (n, 6))
    p[:, COVARIATES] = _truncated_normal(rng, (n, 6), scale=covariate_scale)
    if adult_only:
        # wrinkle density stands in for age
        p[:, WRINKLE] = np.abs(p[:, WRINKLE])
    return p


def sample_dataset(n: int, seed: int, adult_only: bool = False, covariate_scale: float = 1.0,
                   render_cfg: RenderConfig = RenderConfig()) -> ToyDataset:
    """Draw ``n`` faces (truncated standard normal per parameter), render them
    and score them with every oracle. Deterministic in ``seed``."""
    p = sample_params(n, seed, adult_only, covariate_scale)
    images, _ = render_batch(p, render_cfg)
    scores = {a: truth_score(p, a) for a in ATTRIBUTES}
    return ToyDataset(p, images, scores)


def foreground_energy(image, background: float = 0.0, tol: float = 0.05) -> np.ndarray | float:
    """Fraction of pixels that differ from the background: a face-detection
    stand-in in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    out = (np.abs(img - background) > tol).mean(axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def quality_filter(records, energy_threshold: float = 0.2, identity_threshold: float = 0.85):
    """Keep records whose inversion passes both the detection surrogate and
    the identity bar.

    ``records`` holds ``(item, metrics)`` pairs where ``metrics`` has keys
    ``energy`` and ``identity_similarity``. Returns ``(kept, report)``.
    """
    kept = []
    failed_energy = failed_identity = 0
    records = list(records)
    for item, metrics in records:
        ok_energy = metrics["energy"] >= energy_threshold
        ok_identity = metrics["identity_similarity"] > identity_threshold
        failed_energy += not ok_energy
        failed_identity += not ok_identity
        if ok_energy and ok_identity:
            kept.append((item, metrics))
    report = {
        "total": len(records),
        "passed": len(kept),
        "failed": len(records) - len(kept),
        "failed_energy": failed_energy,
        "failed_identity": failed_identity,
        "energy_threshold": energy_threshold,
        "identity_threshold": identity_threshold,
        "reference_counts": {"train": REFERENCE_TRAIN_COUNT, "eval": REFERENCE_EVAL_COUNT},
    }
    return kept, report
