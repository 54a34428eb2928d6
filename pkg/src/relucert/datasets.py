"""Labeled datasets: container format, CSV fallback and synthetic generators.

Features live in [0, 1]^d and labels in 1..K.  On disk a dataset is either a
binary container (one JSON header line followed by the raw little-endian
payload: count*d float64 features row-major, then count int64 labels) or a
CSV file whose last column is the label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "gen_blobs",
    "gen_moons",
    "gen_corners",
    "save_dataset",
    "load_dataset",
]

_HEADER_KEYS = ("d", "K", "count", "dtype", "layout")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = ""
    num_classes: int = 0

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
            raise ValueError(
                f"features {X.shape} and labels {y.shape} do not form a dataset")
        if not np.isfinite(X).all():
            raise ValueError("features must be finite")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("feature values must lie in [0, 1]")
        k = int(self.num_classes) if self.num_classes else (int(y.max()) if len(y) else 0)
        if len(y) and (y.min() < 1 or y.max() > k):
            raise ValueError(f"labels must lie in 1..{k}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", k)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def count(self) -> int:
        return len(self.features)

    def head(self, n: int) -> "Dataset":
        n = min(n, self.count)
        return Dataset(self.features[:n], self.labels[:n], self.name, self.num_classes)


def gen_blobs(n: int, seed: int = 0, centers=((0.2, 0.2), (0.8, 0.8)),
              std: float = 0.05) -> Dataset:
    """Two (or more) well separated Gaussian blobs in [0, 1]^2."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    k = len(centers)
    y = rng.integers(0, k, size=n)
    X = centers[y] + std * rng.standard_normal((n, centers.shape[1]))
    return Dataset(np.clip(X, 0.0, 1.0), y + 1, name="blobs", num_classes=k)


def gen_moons(n: int, seed: int = 0, noise: float = 0.06) -> Dataset:
    """Two interleaving half-circles, scaled into the unit square."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    theta = rng.uniform(0.0, np.pi, size=n)
    X = np.empty((n, 2))
    up = y == 0
    X[up, 0] = np.cos(theta[up])
    X[up, 1] = np.sin(theta[up])
    X[~up, 0] = 1.0 - np.cos(theta[~up])
    X[~up, 1] = 0.5 - np.sin(theta[~up])
    X += noise * rng.standard_normal((n, 2))
    # map the [-1.5, 2.5] x [-1.6, 1.6] extent into the unit square
    X[:, 0] = (X[:, 0] + 1.5) / 4.0
    X[:, 1] = (X[:, 1] + 1.6) / 3.2
    return Dataset(np.clip(X, 0.0, 1.0), y + 1, name="moons", num_classes=2)


def gen_corners(n: int, seed: int = 0, dim: int = 16, num_classes: int = 2,
                spread: float = 0.08) -> Dataset:
    """Hypercube-corner prototypes with Gaussian spread, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    protos = rng.choice([0.15, 0.85], size=(num_classes, dim))
    while len(np.unique(protos, axis=0)) < num_classes:
        protos = rng.choice([0.15, 0.85], size=(num_classes, dim))
    y = rng.integers(0, num_classes, size=n)
    X = protos[y] + spread * rng.standard_normal((n, dim))
    return Dataset(np.clip(X, 0.0, 1.0), y + 1, name="corners", num_classes=num_classes)


def save_dataset(ds: Dataset, path, fmt: str = "bin") -> None:
    if fmt == "bin":
        header = {"d": ds.dim, "K": ds.num_classes, "count": ds.count,
                  "dtype": "f64", "layout": "row-major"}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8") as fh:
            for row, lab in zip(ds.features, ds.labels):
                fh.write(",".join(repr(float(v)) for v in row) + f",{int(lab)}\n")
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")


def _load_binary(path, first_line: bytes) -> Dataset:
    header = json.loads(first_line.decode("utf-8"))
    for key in _HEADER_KEYS:
        if key not in header:
            raise ValueError(f"{path}: header missing key {key!r}")
    if header["dtype"] != "f64" or header["layout"] != "row-major":
        raise ValueError(f"{path}: unsupported dtype/layout in header")
    d, k, count = int(header["d"]), int(header["K"]), int(header["count"])
    offset = len(first_line)
    with open(path, "rb") as fh:
        fh.seek(offset)
        payload = fh.read()
    need = count * d * 8 + count * 8
    if len(payload) != need:
        raise ValueError(
            f"{path}: payload has {len(payload)} bytes at offset {offset}, "
            f"expected {need}")
    feats = np.frombuffer(payload[: count * d * 8], dtype="<f8").reshape(count, d)
    labels = np.frombuffer(payload[count * d * 8:], dtype="<i8")
    if len(labels) and (labels.min() < 1 or labels.max() > k):
        raise ValueError(f"{path}: labels outside 1..{k}")
    return Dataset(feats, labels, name="", num_classes=k)


def _load_csv(path) -> Dataset:
    rows, labels = [], []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
                if width < 2:
                    raise ValueError(f"{path}:{lineno}: need features plus a label")
            elif len(parts) != width:
                raise ValueError(
                    f"{path}:{lineno}: {len(parts)} columns, expected {width}")
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            lab = vals[-1]
            if lab != int(lab):
                raise ValueError(f"{path}:{lineno}: label {lab} is not an integer")
            rows.append(vals[:-1])
            labels.append(int(lab))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    feats = np.asarray(rows, dtype=np.float64)
    labs = np.asarray(labels, dtype=np.int64)
    if labs.min() < 1:
        raise ValueError(f"{path}: labels must be >= 1")
    return Dataset(feats, labs, name="", num_classes=int(labs.max()))


def load_dataset(path) -> Dataset:
    """Load a dataset, trying the binary container first and CSV second."""
    with open(path, "rb") as fh:
        first_line = fh.readline()
    stripped = first_line.strip()
    if stripped.startswith(b"{"):
        return _load_binary(path, first_line)
    return _load_csv(path)
