"""Reading and writing histograms, images, configs and scatter plots."""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import JITTER, ValidationError, make_histogram
from .learn import TrainConfig

FORMATS = ("csv-rows", "pgm-dir")


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a CLI run needs, serializable as flat ``key = value`` text."""

    train: TrainConfig = TrainConfig()
    data_path: str = ""
    data_format: str = "csv-rows"
    output_dir: str = "out"
    jitter_epsilon: float = JITTER
    plot: bool = False
    deterministic: bool = True

    def __post_init__(self):
        if self.data_format not in FORMATS:
            raise ValidationError(f"data_format must be one of {FORMATS}")
        if self.jitter_epsilon < 0:
            raise ValidationError("jitter_epsilon must be >= 0")


_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_OWN_FIELDS = {f.name: f for f in fields(ExperimentConfig) if f.name != "train"}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(text)


_TYPES = {
    "S": int, "L": int, "gamma": float, "loss": str, "zeta": float, "tau": float,
    "rho": float, "log_domain": "bool", "warm_start": "bool", "restart_every": int,
    "max_outer_iters": int, "lbfgs_memory": int, "seed": int, "init": str,
    "data_path": str, "data_format": str, "output_dir": str, "jitter_epsilon": float,
    "plot": "bool", "deterministic": "bool",
}


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = ["# wdl experiment configuration"]
    for name in _TRAIN_FIELDS:
        lines.append(f"{name} = {_fmt(getattr(cfg.train, name))}")
    for name in _OWN_FIELDS:
        lines.append(f"{name} = {_fmt(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; unknown keys and malformed lines are errors."""
    train_kw, own_kw = {}, {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in _TYPES:
            raise ValidationError(f"config line {no}: cannot parse {raw!r}")
        kind = _TYPES[key]
        try:
            if value.strip().lower() == "none":
                parsed = None
            elif kind == "bool":
                parsed = _parse_bool(value)
            else:
                parsed = kind(value.strip())
        except ValueError:
            raise ValidationError(f"config line {no}: bad value for {key}: {value.strip()!r}") from None
        (train_kw if key in _TRAIN_FIELDS else own_kw)[key] = parsed
    base = base or ExperimentConfig()
    return replace(base, train=replace(base.train, **train_kw), **own_kw)


def update_config(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Apply keyword overrides, routing each to the train or experiment level."""
    train_kw = {k: v for k, v in overrides.items() if k in _TRAIN_FIELDS}
    own_kw = {k: v for k, v in overrides.items() if k in _OWN_FIELDS}
    unknown = set(overrides) - set(train_kw) - set(own_kw)
    if unknown:
        raise ValidationError(f"unknown config keys {sorted(unknown)}")
    return replace(cfg, train=replace(cfg.train, **train_kw), **own_kw)


# ---------------------------------------------------------------------------
# histograms as CSV rows
# ---------------------------------------------------------------------------


def read_csv_rows(path) -> np.ndarray:
    """Numeric rows of a CSV file; a first row that is not numeric is a header."""
    rows = []
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                rows.append([float(c) for c in rec])
            except ValueError:
                if i == 0:
                    continue
                raise ValidationError(f"{path}: row {i + 1} is not numeric") from None
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValidationError(f"{path}: rows have different lengths {sorted(widths)}")
    return np.array(rows)


def write_csv(path, arr, prefix: str = "bin") -> None:
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"refusing to write non-finite values to {path}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{prefix}_{j}" for j in range(arr.shape[1])])
        for row in arr:
            w.writerow([repr(float(v)) for v in row])


def write_table(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------------------
# PGM images
# ---------------------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Grayscale image from a P2 (ASCII) or P5 (binary) PGM file."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ValidationError(f"{path}: malformed PGM header") from None
    if maxval not in (255, 65535):
        raise ValidationError(f"{path}: max value must be 255 or 65535, got {maxval}")
    if magic == b"P2":
        vals = np.array(data[pos:].split(), dtype=np.float64)
        if vals.size != w * h:
            raise ValidationError(f"{path}: expected {w * h} pixels, found {vals.size}")
    elif magic == b"P5":
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * dt.itemsize
        raw = data[pos:pos + need]
        if len(raw) != need:
            raise ValidationError(f"{path}: truncated pixel data")
        vals = np.frombuffer(raw, dtype=dt).astype(np.float64)
    else:
        raise ValidationError(f"{path}: not a P2/P5 PGM file")
    if np.any(vals > maxval):
        raise ValidationError(f"{path}: pixel above max value")
    return vals.reshape(h, w)


def write_pgm(path, img, maxval: int = 255) -> None:
    """Write a P2 image scaled so its largest value maps to ``maxval``."""
    img = np.asarray(img, dtype=np.float64)
    top = img.max()
    q = np.zeros(img.shape, dtype=int) if top <= 0 else np.rint(img / top * maxval).astype(int)
    h, w = q.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n{maxval}\n")
        for row in q:
            fh.write(" ".join(str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# dataset ingestion
# ---------------------------------------------------------------------------


def ingest(path, fmt: str = "csv-rows", jitter: float = JITTER) -> Tuple[np.ndarray, tuple]:
    """Load a dataset as ``M x N`` normalized, jittered histograms plus grid dims.

    ``csv-rows`` reads one histogram per row on a 1-D grid; ``pgm-dir``
    reads every ``*.pgm`` file of a directory in name order and takes the
    grid from the image size.
    """
    if fmt == "csv-rows":
        raw = read_csv_rows(path)
        names = [f"row {i}" for i in range(raw.shape[0])]
        dims = (raw.shape[1],)
    elif fmt == "pgm-dir":
        files = sorted(Path(path).glob("*.pgm"))
        if not files:
            raise ValidationError(f"{path}: no .pgm files")
        imgs = [read_pgm(f) for f in files]
        shapes = {im.shape for im in imgs}
        if len(shapes) != 1:
            raise ValidationError(f"{path}: images have different sizes {sorted(shapes)}")
        dims = imgs[0].shape
        raw = np.stack([im.ravel() for im in imgs])
        names = [f.name for f in files]
    else:
        raise ValidationError(f"unknown data format {fmt!r}; expected one of {FORMATS}")
    out = np.empty_like(raw)
    for i, (row, name) in enumerate(zip(raw, names)):
        out[i] = make_histogram(row, jitter=jitter, what=f"{path}: {name}")
    return out, tuple(dims)


# ---------------------------------------------------------------------------
# barycentric scatter plot
# ---------------------------------------------------------------------------


def polygon_vertices(s: int) -> np.ndarray:
    """Regular ``s``-gon on the unit circle, vertex 0 at the top, going clockwise."""
    ang = math.pi / 2 - 2 * math.pi * np.arange(s) / s
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def scatter_points(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    return w @ polygon_vertices(w.shape[1])


SVG_SIZE = 400.0
SVG_RADIUS = 180.0


def to_svg_units(xy) -> np.ndarray:
    """Map unit-circle coordinates to SVG user units (y axis pointing down)."""
    xy = np.asarray(xy, dtype=np.float64)
    c = SVG_SIZE / 2
    return np.stack([c + SVG_RADIUS * xy[..., 0], c - SVG_RADIUS * xy[..., 1]], axis=-1)


def weights_scatter_svg(weights) -> str:
    """SVG drawing of each weight vector at its barycentric position."""
    w = np.asarray(weights, dtype=np.float64)
    verts = to_svg_units(polygon_vertices(w.shape[1])).tolist()
    pts = to_svg_units(scatter_points(w)).tolist()
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE:g}" height="{SVG_SIZE:g}" '
        f'viewBox="0 0 {SVG_SIZE:g} {SVG_SIZE:g}">',
        '<polygon fill="none" stroke="#888" points="'
        + " ".join(f"{x!r},{y!r}" for x, y in verts) + '"/>',
    ]
    for s, (x, y) in enumerate(verts):
        out.append(f'<text class="vertex" x="{x!r}" y="{y!r}" font-size="12">atom {s}</text>')
    for i, (x, y) in enumerate(pts):
        out.append(f'<circle class="datapoint" id="p{i}" cx="{x!r}" cy="{y!r}" r="3" fill="#1f77b4"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_svg_points(text: str) -> np.ndarray:
    """Datapoint centers from an SVG written by :func:`weights_scatter_svg`."""
    pat = re.compile(r'<circle class="datapoint" id="p\d+" cx="([^"]+)" cy="([^"]+)"')
    return np.array([[float(a), float(b)] for a, b in pat.findall(text)])


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
