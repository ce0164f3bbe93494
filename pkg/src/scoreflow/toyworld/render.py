"""Deterministic raster renderer for the parametric toy face.

Parameter layout (all nominally in [-1, 1]):

    0 face width      1 eye spacing   2 nose length   3 chin shape
    4 skin tone       5 hair marker   6 smile         7 brow angle
    8 eye openness    9 wrinkles     10 facial hair  11 head tilt

The first six entries are the identity block, the last six the covariates.
Shapes are drawn with soft edges on a supersampled grid and box-filtered
down, so pixel values vary smoothly with every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_PARAMS = 12
IDENTITY = slice(0, 6)
COVARIATES = slice(6, 12)
PARAM_NAMES = (
    "face_width", "eye_spacing", "nose_length", "chin_shape", "skin_tone", "hair_marker",
    "smile", "brow_angle", "eye_openness", "wrinkles", "facial_hair", "head_tilt",
)
SMILE, BROW, EYE_OPEN, WRINKLE, FACIAL_HAIR, TILT = range(6, 12)


@dataclass(frozen=True)
class RenderConfig:
    size: int = 32
    supersample: int = 2
    edge: float = 0.02  # soft-edge width in normalized units
    background: float = 0.0


def _soft_inside(signed, edge):
    """Coverage of a region given a signed distance (positive inside)."""
    return 0.5 * (1.0 + np.tanh(signed / edge))


def _stroke(dist, half_width, edge):
    return _soft_inside(half_width - np.abs(dist), edge)


def _grid(cfg: RenderConfig):
    n = cfg.size * cfg.supersample
    ax = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    return xx, yy


def render_batch(params, cfg: RenderConfig = RenderConfig(), chunk: int = 256):
    """Render an (N, 12) parameter array to (N, size, size) images in [0, 1].

    Returns ``(images, clamped)`` where ``clamped`` flags entries that were
    outside [-1, 1] and got clipped before drawing.
    """
    p = np.atleast_2d(np.asarray(params, dtype=np.float64))
    if p.shape[-1] != N_PARAMS:
        raise ValueError(f"expected {N_PARAMS} face parameters, got {p.shape[-1]}")
    if not np.isfinite(p).all():
        raise ValueError("face parameters must be finite")
    clamped = np.abs(p) > 1.0
    p = np.clip(p, -1.0, 1.0)
    images = np.concatenate([_render(p[i:i + chunk], cfg) for i in range(0, len(p), chunk)])
    return images, clamped


def _render(p, cfg):
    e = cfg.edge
    col = lambda k: p[:, k, None, None]

    gx, gy = _grid(cfg)
    theta = 0.2 * col(11)
    ct, st = np.cos(theta), np.sin(theta)
    x = ct * gx[None] + st * gy[None]
    y = -st * gx[None] + ct * gy[None]

    # head: ellipse with separate upper and lower half-heights
    half_w = 0.60 + 0.12 * col(0)
    half_h = np.where(y > 0.0, 0.80 + 0.12 * col(3), 0.82)
    r = np.sqrt((x / half_w) ** 2 + (y / half_h) ** 2)
    head = _soft_inside((1.0 - r) * 0.7, e)
    skin = 0.58 + 0.16 * col(4)
    img = cfg.background + head * (skin - cfg.background)

    # hair cap over the top of the head
    hair_line = -0.50 + 0.12 * col(5)
    hair = head * _soft_inside(hair_line - y, e)
    img = img + hair * (0.18 - skin)

    # forehead wrinkles: three faint horizontal strokes
    wr = 0.5 * (col(9) + 1.0)
    band = _soft_inside(0.32 - np.abs(x), e) * head
    for y0 in (-0.40, -0.34, -0.28):
        img = img - 0.30 * wr * band * _stroke(y - y0, 0.012, e)

    # facial hair: textured darkening of the lower face
    fh = 0.5 * (col(10) + 1.0)
    texture = 0.75 + 0.25 * np.sin(37.0 * gx[None]) * np.sin(29.0 * gy[None])
    lower = head * _soft_inside(y - 0.30, 2 * e)
    img = img - 0.35 * fh * lower * texture

    # eyes
    ex = 0.28 + 0.10 * col(1)
    eye_h = 0.035 + 0.030 * (col(8) + 1.0)
    for sign in (-1.0, 1.0):
        re = np.sqrt(((x - sign * ex) / 0.10) ** 2 + ((y + 0.14) / eye_h) ** 2)
        eye = _soft_inside((1.0 - re) * 0.08, e)
        img = img + eye * (0.06 - img)

    # brows: inner ends drop as the angle grows
    for sign in (-1.0, 1.0):
        u = sign * x  # 0.10 (inner) .. 0.44 (outer)
        frac = np.clip((u - 0.10) / 0.34, 0.0, 1.0)
        yb = -0.28 + 0.09 * col(7) * (1.0 - 2.0 * frac)
        seg = _soft_inside(np.minimum(u - 0.10, 0.44 - u), e)
        brow = seg * _stroke(y - yb, 0.022, e)
        img = img + brow * (0.12 - img)

    # nose: vertical stroke whose lower end depends on nose length
    nose_end = 0.16 + 0.16 * col(2)
    nose = _stroke(x, 0.026, e) * _soft_inside(np.minimum(y + 0.04, nose_end - y), e)
    img = img + 0.7 * nose * (0.25 - img)

    # mouth: parabola whose corners lift with smile; smiles show teeth,
    # so the stroke brightens monotonically with smile
    xm = np.clip(x / 0.26, -1.0, 1.0)
    ym = 0.46 - 0.09 * col(6) * (xm * xm - 0.5)
    mouth = _soft_inside(0.26 - np.abs(x), e) * _stroke(y - ym, 0.028, e)
    lip = 0.22 + 0.18 * col(6)
    img = img + mouth * (lip - img)

    img = np.clip(img, 0.0, 1.0)
    ss = cfg.supersample
    n = cfg.size
    return img.reshape(len(p), n, ss, n, ss).mean(axis=(2, 4))


def render_face(p, cfg: RenderConfig = RenderConfig(), return_info: bool = False):
    """Render one face; with ``return_info`` also return clamping metadata."""
    p = np.asarray(p, dtype=np.float64)
    imgs, clamped = render_batch(p[None] if p.ndim == 1 else p, cfg)
    out = imgs[0] if p.ndim == 1 else imgs
    if return_info:
        mask = clamped[0] if p.ndim == 1 else clamped
        return out, {"clamped": np.flatnonzero(mask).tolist() if p.ndim == 1 else mask}
    return out


def mouth_band(cfg: RenderConfig = RenderConfig()) -> slice:
    """Image rows spanning every mouth position (untilted head)."""
    lo = int(np.floor((0.35 + 1.0) / 2.0 * cfg.size))
    hi = int(np.ceil((0.57 + 1.0) / 2.0 * cfg.size))
    return slice(lo, hi)
