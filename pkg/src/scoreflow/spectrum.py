"""Transformation spectra, added/removed feature vectors, score histograms and
the bias-correlation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import CnfModel, edit_latent
from .io import montage, write_pgm
from .predictor import RegressorModel, predict_score
from .toyworld.encoder import EncoderModel, encode, invert_with_restoration
from .toyworld.render import COVARIATES, PARAM_NAMES
from .toyworld.world import AttributeKind, cosine, identity_embed, truth_score

DEFAULT_GRID = tuple(round(-0.4 + 0.1 * k, 1) for k in range(9))
MIN_BIAS_EDITS = 30


def parse_range(text: str) -> tuple[float, ...]:
    """``lo:hi:step`` -> inclusive grid, rounded to suppress float drift."""
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ValueError(f"range must look like lo:hi:step, got {text!r}") from None
    if step <= 0 or hi < lo:
        raise ValueError("range needs lo <= hi and a positive step")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return tuple(round(lo + k * step, 10) for k in range(n))


@dataclass
class SpectrumPoint:
    lam: float
    w: np.ndarray
    image: np.ndarray
    target: float
    predicted: float
    truth: float
    identity: float
    clamped: bool


@dataclass
class SpectrumResult:
    attribute: str
    original_score: float
    points: list

    @property
    def lambdas(self) -> list[float]:
        return [p.lam for p in self.points]

    def sidecar(self) -> dict:
        return {
            "attribute": self.attribute,
            "original_score": self.original_score,
            "points": [{"lambda": p.lam, "target": p.target, "predicted": p.predicted,
                        "truth": p.truth, "identity_similarity": p.identity, "clamped": p.clamped}
                       for p in self.points],
        }


def image_identity(encoder: EncoderModel, images) -> np.ndarray:
    """Identity embedding of rendered faces via the encoder."""
    return identity_embed(encode(encoder, images), encoder.mixing)


def build_spectrum(x_orig, attr, grid, flow: CnfModel, regressor: RegressorModel,
                   encoder: EncoderModel) -> SpectrumResult:
    """Edit one face across ``grid`` and restore every edit against it."""
    grid = [float(l) for l in grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda grid must be nonempty and strictly increasing")
    x_orig = np.asarray(x_orig, dtype=np.float64)
    w = encode(encoder, x_orig)
    s_o = predict_score(regressor, x_orig)
    lam = np.array(grid)
    ws, targets = edit_latent(flow, np.repeat(w[None], len(grid), 0), np.full(len(grid), s_o), lam)
    images = invert_with_restoration(encoder, ws, np.repeat(x_orig[None], len(grid), 0))
    pred = predict_score(regressor, images)
    params = encoder.mixing.to_params(ws)
    truth = truth_score(np.clip(params, -1.0, 1.0), attr)
    ident = cosine(image_identity(encoder, x_orig[None]), image_identity(encoder, images))
    raw = s_o + lam
    clamped = (raw < 0.0) | (raw > 1.0) | np.any(np.abs(params) > 1.0, axis=1)
    points = [SpectrumPoint(float(lam[k]), ws[k], images[k], float(targets[k]), float(pred[k]),
                            float(truth[k]), float(ident[k]), bool(clamped[k])) for k in range(len(grid))]
    return SpectrumResult(AttributeKind.parse(attr).value, float(s_o), points)


def export_spectrum(result: SpectrumResult, prefix) -> tuple[Path, Path]:
    """Side-by-side PGM montage plus a JSON sidecar."""
    prefix = Path(prefix)
    pgm, js = prefix.with_suffix(".pgm"), prefix.with_suffix(".json")
    write_pgm(pgm, montage([p.image for p in result.points]))
    js.write_text(json.dumps(result.sidecar(), indent=2, sort_keys=True) + "\n")
    return pgm, js


@dataclass
class DiffVector:
    hi: float  # lambda of w_i
    lo: float  # lambda of w_j
    af: np.ndarray  # w_i - w_j
    rf: np.ndarray  # w_j - w_i


def diff_vectors(spectrum: SpectrumResult | list) -> list[DiffVector]:
    """Added and removed feature vectors for each adjacent pair."""
    points = spectrum.points if isinstance(spectrum, SpectrumResult) else list(spectrum)
    if len(points) < 2:
        raise ValueError("need at least two spectrum entries")
    out = []
    for lo, hi in zip(points[:-1], points[1:]):
        out.append(DiffVector(hi.lam, lo.lam, hi.w - lo.w, lo.w - hi.w))
    return out


def render_diff(diff: DiffVector, base, x_orig, encoder: EncoderModel):
    """Restored renders of base + AF and base + RF."""
    base = np.asarray(base, dtype=np.float64)
    ws = np.stack([base + diff.af, base + diff.rf])
    out = invert_with_restoration(encoder, ws, np.repeat(np.asarray(x_orig, dtype=np.float64)[None], 2, 0))
    return out[0], out[1]


def score_histogram(scores, bins: int = 10) -> dict:
    """Counts over ``bins`` equal bins of [0, 1] and the mass in [0.4, 0.6]."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("no scores given")
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("scores must lie in [0, 1]")
    counts, edges = np.histogram(s, bins=bins, range=(0.0, 1.0))
    return {
        "counts": counts.tolist(),
        "edges": [float(e) for e in edges],
        "n": int(s.size),
        "mid_mass": float(((s >= 0.4) & (s <= 0.6)).mean()),
    }


def _pearson(x, y):
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    if denom == 0.0:
        return 0.0, True
    return float(np.clip((x * y).sum() / denom, -1.0, 1.0)), False


def bias_correlation_report(edits, mixing=None) -> dict:
    """Pearson correlation between lambda and each covariate delta.

    ``edits`` holds ``(original, edited, lam, attr)`` records; originals and
    edits are face parameters, or latents when ``mixing`` is given (then
    mapped back through M^-1).
    """
    by_attr: dict = {}
    for orig, edited, lam, attr in edits:
        by_attr.setdefault(AttributeKind.parse(attr).value, []).append((orig, edited, lam))
    report = {}
    for attr, rows in sorted(by_attr.items()):
        if len(rows) < MIN_BIAS_EDITS:
            raise ValueError(f"{attr}: need at least {MIN_BIAS_EDITS} edits, got {len(rows)}")
        o = np.array([r[0] for r in rows], dtype=np.float64)
        e = np.array([r[1] for r in rows], dtype=np.float64)
        lam = np.array([r[2] for r in rows], dtype=np.float64)
        if mixing is not None:
            o, e = mixing.to_params(o), mixing.to_params(e)
        delta = (e - o)[:, COVARIATES]
        entry = {}
        for k, name in enumerate(PARAM_NAMES[COVARIATES]):
            r, degenerate = _pearson(lam, delta[:, k])
            entry[name] = {"correlation": r, "sign": int(np.sign(r)), "degenerate": degenerate}
        report[attr] = entry
    return report
