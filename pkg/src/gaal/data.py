"""Paired image-vector / tabular datasets: generation, featurisation, I/O, splits."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class TabularSchema:
    categorical: tuple[tuple[str, int], ...] = ()
    continuous: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "categorical", tuple((str(n), int(c)) for n, c in self.categorical))
        object.__setattr__(self, "continuous", tuple(str(n) for n in self.continuous))
        for name, card in self.categorical:
            if card < 2:
                raise DataError(f"categorical column {name!r} needs cardinality >= 2, got {card}")
        names = self.column_names
        if len(set(names)) != len(names):
            raise DataError(f"duplicate tabular column names in {names}")

    @property
    def column_names(self) -> list[str]:
        return [n for n, _ in self.categorical] + list(self.continuous)

    @property
    def raw_dim(self) -> int:
        return len(self.categorical) + len(self.continuous)

    @property
    def featurized_dim(self) -> int:
        return sum(c for _, c in self.categorical) + len(self.continuous)


@dataclass
class MultimodalDataset:
    image: np.ndarray  # [N x d_img]
    tabular_raw: np.ndarray  # [N x D]; categorical columns hold integer codes
    labels: np.ndarray  # [N]
    schema: TabularSchema
    n_classes: int
    ids: np.ndarray = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.tabular_raw = np.asarray(self.tabular_raw, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        if self.image.ndim != 2 or self.image.shape[0] != n:
            raise DataError(f"image block has shape {self.image.shape}, expected {n} rows")
        if self.tabular_raw.shape != (n, self.schema.raw_dim):
            raise DataError(f"tabular block has shape {self.tabular_raw.shape}, expected ({n}, {self.schema.raw_dim})")
        if self.ids.shape != (n,):
            raise DataError("ids must have one entry per row")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.image)):
            raise DataError("image features must be finite")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def d_img(self) -> int:
        return self.image.shape[1]

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return MultimodalDataset(
            self.image[idx], self.tabular_raw[idx], self.labels[idx], self.schema, self.n_classes, self.ids[idx]
        )

    def equals(self, other: "MultimodalDataset") -> bool:
        return (
            self.schema == other.schema
            and self.n_classes == other.n_classes
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.tabular_raw, other.tabular_raw)
        )


# -- synthetic generation --------------------------------------------------


@dataclass
class SyntheticSpec:
    n: int = 3000
    n_classes: int = 4
    d_img: int = 64
    schema: TabularSchema = field(
        default_factory=lambda: TabularSchema(
            categorical=(("cat_0", 3), ("cat_1", 4), ("cat_2", 5)),
            continuous=("num_0", "num_1", "num_2", "num_3", "num_4"),
        )
    )
    informativeness_image: float = 0.9
    informativeness_tabular: float = 0.6
    noise: float = 5.0
    latent_dim: int = 8
    # when set, the tabular view is a copy of the image view (symmetry checks)
    duplicate_modalities: bool = False

    def validate(self):
        if self.n < 1:
            raise DataError(f"N must be >= 1, got {self.n}")
        if self.n_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.n_classes}")
        if self.n < self.n_classes:
            raise DataError(f"N={self.n} is smaller than the class count {self.n_classes}")
        if self.d_img < 1:
            raise DataError(f"d_img must be positive, got {self.d_img}")
        for name in ("informativeness_image", "informativeness_tabular"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must lie in [0, 1], got {v}")
        if self.noise < 0 or not math.isfinite(self.noise):
            raise DataError(f"noise must be a finite non-negative scalar, got {self.noise}")
        if self.duplicate_modalities and (self.schema.categorical or len(self.schema.continuous) != self.d_img):
            raise DataError("duplicate_modalities needs a continuous-only schema with d_img columns")


# continuous tabular columns get a non-trivial location/scale so z-scoring matters
_CONT_LOC, _CONT_SCALE = 40.0, 10.0


def generate_synthetic(spec: SyntheticSpec, rng: RngStream) -> MultimodalDataset:
    """Class prototypes seen through two noisy, independently projected views.

    Each view is ``informativeness * (prototype projection) + noise * N(0, 1)``.
    Categorical columns draw from a class-conditional distribution that mixes a
    class-preferred level (weight = tabular informativeness) with a uniform one.
    """
    spec.validate()
    n, y_dim, k = spec.n, spec.n_classes, spec.latent_dim
    proto = rng.child(0).normal(size=(y_dim, k))
    proto /= np.linalg.norm(proto, axis=1, keepdims=True)
    labels = np.arange(n) % y_dim
    labels = labels[rng.child(1).permutation(n)]

    def view(dim, stream, strength):
        # projections scaled so each output coordinate has unit signal variance
        proj = rng.child(stream).normal(size=(k, dim)) * math.sqrt(k)
        signal = proto[labels] @ proj / math.sqrt(k)
        return strength * signal + spec.noise * rng.child(stream + 10).normal(size=(n, dim))

    image = view(spec.d_img, 2, spec.informativeness_image)

    if spec.duplicate_modalities:
        tab = image.copy()
    else:
        cols = []
        a_t = spec.informativeness_tabular
        cat_rng = rng.child(4)
        for j, (_, card) in enumerate(spec.schema.categorical):
            preferred = cat_rng.integers(0, card, size=y_dim)
            probs = np.full((y_dim, card), (1.0 - a_t) / card)
            probs[np.arange(y_dim), preferred] += a_t
            u = rng.child(20 + j).uniform(size=n)
            cdf = np.cumsum(probs[labels], axis=1)
            codes = np.minimum((u[:, None] > cdf).sum(axis=1), card - 1)
            cols.append(codes.astype(np.float64))
        n_cont = len(spec.schema.continuous)
        if n_cont:
            cont = view(n_cont, 3, a_t)
            cols.extend(list((_CONT_LOC + _CONT_SCALE * cont).T))
        tab = np.column_stack(cols) if cols else np.zeros((n, 0))
    return MultimodalDataset(image, tab, labels, spec.schema, y_dim)


# -- featurisation ---------------------------------------------------------


@dataclass
class ContinuousStats:
    mean: np.ndarray
    std: np.ndarray
    image_mean: np.ndarray = None
    image_std: np.ndarray = None


def _moments(block: np.ndarray):
    if block.shape[0] == 0:
        return np.zeros(block.shape[1]), np.zeros(block.shape[1])
    return block.mean(axis=0), block.std(axis=0)


def fit_stats(raw: np.ndarray, schema: TabularSchema, image: np.ndarray | None = None) -> ContinuousStats:
    """Column means/stds of the continuous tabular block (and optionally the image block)."""
    c = len(schema.categorical)
    stats = ContinuousStats(*_moments(np.asarray(raw, dtype=np.float64)[:, c:]))
    if image is not None:
        stats.image_mean, stats.image_std = _moments(np.asarray(image, dtype=np.float64))
    return stats


def zscore(block: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """``(x - mean) / std`` per column; columns with std < 1e-12 map to 0."""
    std = np.asarray(std, dtype=np.float64)
    safe = np.where(std < 1e-12, 1.0, std)
    z = (block - mean) / safe
    z[:, std < 1e-12] = 0.0
    return z


def featurize_tabular(raw, schema: TabularSchema, stats: ContinuousStats) -> np.ndarray:
    """One-hot categorical columns followed by z-scored continuous ones."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != schema.raw_dim:
        raise DataError(f"raw tabular block has shape {raw.shape}, schema expects {schema.raw_dim} columns")
    n = raw.shape[0]
    out = np.zeros((n, schema.featurized_dim))
    off = 0
    for j, (name, card) in enumerate(schema.categorical):
        col = raw[:, j]
        bad = (col != np.round(col)) | (col < 0) | (col >= card) | ~np.isfinite(col)
        if bad.any():
            value = col[bad][0]
            raise DataError(f"unknown category {value:g} in column {name!r} (cardinality {card})")
        out[np.arange(n), off + col.astype(np.int64)] = 1.0
        off += card
    c = len(schema.categorical)
    cont = raw[:, c:]
    if not np.all(np.isfinite(cont)):
        raise DataError("continuous tabular values must be finite")
    out[:, off:] = zscore(cont, stats.mean, stats.std)
    return out


@dataclass
class ArrayData:
    """Model-ready arrays: image features, featurised tabular, labels."""

    x_image: np.ndarray
    x_tabular: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self):
        return self.labels.shape[0]

    def take(self, idx) -> "ArrayData":
        return ArrayData(self.x_image[idx], self.x_tabular[idx], self.labels[idx], self.n_classes)

    def modality(self, m: str) -> np.ndarray:
        return self.x_image if m == "I" else self.x_tabular


def to_arrays(ds: MultimodalDataset, stats: ContinuousStats) -> ArrayData:
    """Featurise a split; image columns are z-scored too when ``stats`` carries image moments."""
    image = ds.image
    if stats.image_mean is not None:
        image = zscore(image, stats.image_mean, stats.image_std)
    return ArrayData(image, featurize_tabular(ds.tabular_raw, ds.schema, stats), ds.labels, ds.n_classes)


# -- CSV / schema I/O ------------------------------------------------------


def save_schema(schema: TabularSchema, path, n_classes: int | None = None) -> None:
    lines = [f"categorical.{n}={c}" for n, c in schema.categorical]
    lines += [f"continuous.{n}=1" for n in schema.continuous]
    if n_classes is not None:
        lines.append(f"classes={n_classes}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_schema(path) -> tuple[TabularSchema, int | None]:
    """Parse a schema file; returns the schema and the optional class count."""
    cat, cont, classes = [], [], None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = key.strip(), value.strip()
        try:
            if key.startswith("categorical."):
                cat.append((key[len("categorical.") :], int(value)))
            elif key.startswith("continuous."):
                if int(value) != 1:
                    raise DataError(f"{path}:{lineno}: continuous columns take value 1")
                cont.append(key[len("continuous.") :])
            elif key == "classes":
                classes = int(value)
            else:
                raise DataError(f"{path}:{lineno}: unknown schema key {key!r}")
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{path}:{lineno}: bad integer {value!r}") from exc
    return TabularSchema(tuple(cat), tuple(cont)), classes


def _fmt(x: float) -> str:
    return repr(float(x))


def save_csv(ds: MultimodalDataset, path) -> None:
    header = ["id", "label"] + [f"img_{j}" for j in range(ds.d_img)] + ds.schema.column_names
    c = len(ds.schema.categorical)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [str(int(ds.ids[i])), str(int(ds.labels[i]))]
            row += [_fmt(v) for v in ds.image[i]]
            row += [str(int(v)) for v in ds.tabular_raw[i, :c]]
            row += [_fmt(v) for v in ds.tabular_raw[i, c:]]
            w.writerow(row)


def load_csv(path, schema: TabularSchema, n_classes: int | None = None) -> MultimodalDataset:
    """Read a dataset CSV whose header is ``id,label,img_*,<tabular columns>``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header expected") from None
        if header[:2] != ["id", "label"]:
            raise DataError(f"{path}: header must start with 'id,label'")
        d_img = 0
        while 2 + d_img < len(header) and header[2 + d_img] == f"img_{d_img}":
            d_img += 1
        tab_names = header[2 + d_img :]
        missing = [c for c in schema.column_names if c not in tab_names]
        if missing:
            raise DataError(f"{path}: schema columns missing from header: {missing}")
        if tab_names != schema.column_names:
            raise DataError(f"{path}: tabular columns {tab_names} do not match schema order {schema.column_names}")
        width = len(header)
        ids, labels, rows = [], [], []
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                ids.append(int(row[0]))
                labels.append(int(row[1]))
                rows.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows; N >= 1 required")
    block = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"{path}: labels must lie in [0, {n_classes})")
    return MultimodalDataset(block[:, :d_img], block[:, d_img:], labels, schema, n_classes, np.asarray(ids))


# -- splitting and batching ------------------------------------------------


@dataclass
class Splits:
    train: MultimodalDataset
    val: MultimodalDataset
    test: MultimodalDataset
    stratified: bool = True
    indices: tuple = ()

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def _allocate(n: int, fractions) -> list[int]:
    """Largest-remainder rounding of ``n * fractions`` to integers summing to n."""
    raw = [n * f for f in fractions]
    counts = [math.floor(r + 1e-9) for r in raw]
    short = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda j: (-(raw[j] - counts[j]), j))
    for j in order[:short]:
        counts[j] += 1
    return counts


def split(ds: MultimodalDataset, fractions, rng: RngStream) -> Splits:
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ds)
    n_parts = sum(f > 0 for f in fractions)
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    stratified = bool(np.all(counts[counts > 0] >= n_parts))
    parts: list[list[int]] = [[], [], []]
    if stratified:
        for c in range(ds.n_classes):
            idx = np.flatnonzero(ds.labels == c)
            idx = idx[rng.child(c).permutation(idx.size)]
            start = 0
            for j, k in enumerate(_allocate(idx.size, fractions)):
                parts[j].extend(idx[start : start + k].tolist())
                start += k
    else:
        warnings.warn("class counts too small for a stratified split; falling back to unstratified")
        perm = rng.permutation(n)
        start = 0
        for j, k in enumerate(_allocate(n, fractions)):
            parts[j].extend(perm[start : start + k].tolist())
            start += k
    parts = [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]
    return Splits(*(ds.subset(p) for p in parts), stratified=stratified, indices=tuple(parts))


@dataclass
class BatchPlan:
    n: int
    batch_size: int
    rng: RngStream
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")

    def permutation(self, epoch: int) -> np.ndarray:
        return self.rng.child(epoch).permutation(self.n)

    def batches(self, epoch: int):
        perm = self.permutation(epoch)
        for start in range(0, self.n, self.batch_size):
            idx = perm[start : start + self.batch_size]
            if self.drop_last and idx.size < self.batch_size:
                break
            yield idx
