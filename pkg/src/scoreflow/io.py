"""File formats: binary PGM images, TSV datasets and key=value configs."""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from .toyworld.render import N_PARAMS
from .toyworld.world import ATTRIBUTES, AttributeKind, ToyDataset, WorldConfig

MAXVAL = 255


def quantize(images) -> np.ndarray:
    """Round intensities to the 8-bit grid a PGM round trip produces."""
    x = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    return np.round(x * MAXVAL) / MAXVAL


def write_pgm(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    data = np.round(np.clip(img, 0.0, 1.0) * MAXVAL).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii"))
        fh.write(data.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """Binary (P5) greymap as float intensities in [0, 1]."""
    blob = Path(path).read_bytes()
    m = _PGM_HEADER.match(blob)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    if len(blob) < m.end() + count * np.dtype(dtype).itemsize:
        raise ValueError(f"{path}: truncated PGM data")
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=m.end())
    return raw.reshape(h, w).astype(np.float64) / maxval


def montage(images, gap: int = 1, fill: float = 1.0) -> np.ndarray:
    """Lay equally sized images side by side."""
    imgs = [np.asarray(x, dtype=np.float64) for x in images]
    if not imgs:
        raise ValueError("nothing to lay out")
    h, w = imgs[0].shape
    out = np.full((h, len(imgs) * (w + gap) - gap), fill)
    for k, img in enumerate(imgs):
        out[:, k * (w + gap):k * (w + gap) + w] = img
    return out


# key=value configuration files

def write_kv(path, values: dict) -> None:
    lines = [f"{k}={_kv_text(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _kv_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_kv(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def world_config_from_kv(values: dict) -> WorldConfig:
    boolean = lambda s: {"true": True, "false": False}[s.lower()]
    try:
        return WorldConfig(
            seed=int(values.get("seed", 0)),
            n=int(values.get("n", 5000)),
            adult_only=boolean(values.get("adult_only", "false")),
            covariate_scale=float(values.get("covariate_scale", 1.0)),
            energy_threshold=float(values.get("energy_threshold", 0.2)),
            identity_threshold=float(values.get("identity_threshold", 0.85)),
        )
    except (KeyError, ValueError) as exc:
        raise ValueError(f"bad world config: {exc}") from None


def save_world_config(path, cfg: WorldConfig, **extra) -> None:
    values = {
        "seed": cfg.seed, "n": cfg.n, "adult_only": cfg.adult_only,
        "covariate_scale": cfg.covariate_scale, "energy_threshold": cfg.energy_threshold,
        "identity_threshold": cfg.identity_threshold, "world_hash": cfg.world_hash(),
    }
    values.update(extra)
    write_kv(path, values)


def load_world_config(path) -> tuple[WorldConfig, dict]:
    values = read_kv(path)
    return world_config_from_kv(values), values


# TSV datasets

SCORE_COLUMNS = {a: f"score_{a.short}" for a in ATTRIBUTES}
HEADER = ["id", *[f"p{k}" for k in range(N_PARAMS)], *SCORE_COLUMNS.values(), "img_path"]


def write_dataset(directory, dataset: ToyDataset, image_dir: str = "images") -> Path:
    """Write ``dataset.tsv`` plus one PGM per face; returns the TSV path."""
    root = Path(directory)
    (root / image_dir).mkdir(parents=True, exist_ok=True)
    tsv = root / "dataset.tsv"
    with open(tsv, "w", newline="") as fh:
        out = csv.writer(fh, delimiter="\t", lineterminator="\n")
        out.writerow(HEADER)
        for i in range(len(dataset)):
            rel = f"{image_dir}/{i:06d}.pgm"
            write_pgm(root / rel, dataset.images[i])
            out.writerow([i, *(repr(float(v)) for v in dataset.params[i]),
                          *(repr(float(dataset.scores[a][i])) for a in ATTRIBUTES), rel])
    return tsv


def read_dataset(directory) -> ToyDataset:
    root = Path(directory)
    tsv = root / "dataset.tsv" if root.is_dir() else root
    root = tsv.parent
    with open(tsv, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0] != HEADER:
        raise ValueError(f"{tsv}: unexpected header")
    body = rows[1:]
    if not body:
        raise ValueError(f"{tsv}: no rows")
    try:
        params = np.array([[float(v) for v in r[1:1 + N_PARAMS]] for r in body])
        scores = {a: np.array([float(r[HEADER.index(col)]) for r in body]) for a, col in SCORE_COLUMNS.items()}
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{tsv}: malformed row ({exc})") from None
    images = np.stack([read_pgm(root / r[-1]) for r in body])
    return ToyDataset(params, images, scores)


def score_column(attr) -> str:
    return SCORE_COLUMNS[AttributeKind.parse(attr)]
