"""Multi-label feature-grid datasets: synthetic generation and on-disk storage.

On disk a dataset is a directory holding

* ``manifest.csv`` with header ``sample_id,path,labels,split``, labels written
  as semicolon-separated class indices (a 0/1 bitmask of length C is also
  accepted on read);
* one ``ALCV1`` tensor file per sample: the 5 magic bytes ``ALCV1``, three
  little-endian uint32 dims ``H, W, D`` and ``H*W*D`` little-endian float32
  values in row-major, cell-major order;
* ``dataset.json`` with class names and generation parameters (optional on read).
"""

from __future__ import annotations

import csv
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mlal.errors import ConfigError

logger = logging.getLogger(__name__)

MAGIC = b"ALCV1"
_HEADER = struct.Struct("<5sIII")
MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("sample_id", "path", "labels", "split")
SPLITS = ("train", "eval")


class ManifestError(ValueError):
    """A manifest row could not be parsed or validated."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class MissingFeatureFileError(ManifestError):
    pass


class ShapeMismatchError(ManifestError):
    pass


class DuplicateIdError(ManifestError):
    pass


class LabelParseError(ManifestError):
    pass


class TensorFormatError(ValueError):
    pass


def write_tensor(path, grid) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"expected an (H, W, D) grid, got shape {grid.shape}")
    h, w, d = grid.shape
    payload = np.ascontiguousarray(grid, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, h, w, d) + payload)


def read_tensor(path) -> np.ndarray:
    """Read an ALCV1 file into a float64 ``(H, W, D)`` array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFormatError(f"{path}: truncated header")
    magic, h, w, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * h * w * d
    if len(raw) != expected:
        raise TensorFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return values.astype(np.float64).reshape(h, w, d)


@dataclass
class Dataset:
    """Samples sorted by ``sample_ids``; integer row index doubles as the internal id."""

    features: np.ndarray  # (N, H, W, D) float64
    labels: np.ndarray  # (N, C) uint8
    splits: np.ndarray  # (N,) str, "train" or "eval"
    sample_ids: list[str]
    class_names: list[str]
    params: dict = field(default_factory=dict)
    # (N, H, W) planted-blob cells; synthetic data only, never written to disk
    foreground: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.sample_ids)
        if self.features.shape[0] != n or self.labels.shape[0] != n or len(self.splits) != n:
            raise ConfigError("features, labels, splits and sample ids differ in length")
        if self.labels.ndim != 2 or self.labels.shape[1] != len(self.class_names):
            raise ConfigError(
                f"labels of shape {self.labels.shape} do not match {len(self.class_names)} classes"
            )

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(self.features.shape[1:])

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def validate_eval_positives(self) -> list[int]:
        """Classes without a positive in the eval split."""
        ev = self.indices("eval")
        return [j for j in range(self.n_classes) if not self.labels[ev, j].any()]


@dataclass(frozen=True)
class SyntheticParams:
    n_classes: int = 8
    dim: int = 16
    height: int = 8
    width: int = 8
    n_train: int = 600
    n_eval: int = 200
    blob_min: int = 2
    blob_max: int = 3
    margin: float = 3.0
    margin_jitter: float = 0.5
    noise: float = 1.0
    min_labels: int = 1
    max_labels: int = 4
    class_skew: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_classes", "dim", "height", "width", "blob_min", "blob_max", "min_labels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_train < 0 or self.n_eval < 0:
            raise ConfigError("n_train and n_eval must be >= 0")
        if self.blob_min > self.blob_max:
            raise ConfigError(f"blob_min={self.blob_min} exceeds blob_max={self.blob_max}")
        if self.blob_max > min(self.height, self.width):
            raise ConfigError(
                f"blob_max={self.blob_max} does not fit a {self.height}x{self.width} grid"
            )
        if not self.min_labels <= self.max_labels <= self.n_classes:
            raise ConfigError(
                f"need 1 <= min_labels <= max_labels <= n_classes, got "
                f"{self.min_labels}, {self.max_labels}, {self.n_classes}"
            )
        if self.n_eval and self.n_eval < self.n_classes:
            raise ConfigError(
                f"n_eval={self.n_eval} cannot hold a positive for each of {self.n_classes} classes"
            )
        if self.noise < 0 or self.margin_jitter < 0 or self.class_skew < 0:
            raise ConfigError("noise, margin_jitter and class_skew must be non-negative")


def generate_synthetic(params: SyntheticParams | None = None, **overrides) -> Dataset:
    """Feature grids with one planted rectangular blob per present class.

    Background cells are ``N(0, noise^2)``. Every present class adds
    ``amplitude * prototype`` to the cells of a random sub-rectangle, where the
    prototype is a fixed random unit vector per class (mutually
    orthogonal when ``C <= D``) and the amplitude is
    ``margin`` jittered uniformly by ``+-margin_jitter`` per sample. Label sets
    hold ``min_labels..max_labels`` classes drawn with weights
    ``1 / (1 + j) ** class_skew``. Eval sample ``j < C`` always contains class
    ``j`` so each class has an eval positive.
    """
    if params is None:
        params = SyntheticParams(**overrides)
    elif overrides:
        params = SyntheticParams(**{**params.__dict__, **overrides})
    params.validate()
    rng = np.random.default_rng(params.seed)
    c, d, h, w = params.n_classes, params.dim, params.height, params.width
    n = params.n_train + params.n_eval

    prototypes = rng.normal(size=(c, d))
    if c <= d:
        q, r = np.linalg.qr(prototypes.T)
        prototypes = (q * np.sign(np.diag(r))).T
    else:
        prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    weights = 1.0 / (1.0 + np.arange(c)) ** params.class_skew
    weights /= weights.sum()

    features = rng.normal(0.0, params.noise, size=(n, h, w, d))
    labels = np.zeros((n, c), dtype=np.uint8)
    foreground = np.zeros((n, h, w), dtype=bool)
    for i in range(n):
        k = rng.integers(params.min_labels, params.max_labels + 1)
        present = rng.choice(c, size=k, replace=False, p=weights)
        eval_pos = i - params.n_train
        if 0 <= eval_pos < c and eval_pos not in present:
            present[-1] = eval_pos
        for j in np.sort(present):
            labels[i, j] = 1
            bh = rng.integers(params.blob_min, params.blob_max + 1)
            bw = rng.integers(params.blob_min, params.blob_max + 1)
            top = rng.integers(0, h - bh + 1)
            left = rng.integers(0, w - bw + 1)
            amp = params.margin + rng.uniform(-params.margin_jitter, params.margin_jitter)
            features[i, top : top + bh, left : left + bw] += amp * prototypes[j]
            foreground[i, top : top + bh, left : left + bw] = True

    # Storage is float32; keep the in-memory copy exactly representable.
    features = features.astype(np.float32).astype(np.float64)
    splits = np.array(["train"] * params.n_train + ["eval"] * params.n_eval)
    return Dataset(
        features=features,
        labels=labels,
        splits=splits,
        sample_ids=[f"s{i:06d}" for i in range(n)],
        class_names=[f"class_{j}" for j in range(c)],
        params={"synthetic": params.__dict__.copy()},
        foreground=foreground,
    )


def _format_labels(row: np.ndarray) -> str:
    return ";".join(str(j) for j in np.flatnonzero(row))


def _looks_like_mask(text: str) -> bool:
    return len(text) > 1 and set(text) <= {"0", "1"}


def _parse_labels(text: str, n_classes: int | None, row: int) -> list[int] | np.ndarray:
    """Class indices, or a 0/1 mask array when ``text`` is a mask of length ``n_classes``."""
    text = text.strip()
    if n_classes is not None and n_classes > 1 and len(text) == n_classes and _looks_like_mask(text):
        return np.array([int(ch) for ch in text], dtype=np.uint8)
    if text == "":
        return []
    try:
        idx = [int(part) for part in text.split(";")]
    except ValueError:
        raise LabelParseError(f"bad label string {text!r}", row) from None
    if any(i < 0 for i in idx) or len(set(idx)) != len(idx):
        raise LabelParseError(f"bad label string {text!r}", row)
    if n_classes is not None and max(idx) >= n_classes:
        if _looks_like_mask(text):
            raise LabelParseError(f"label mask has length {len(text)}, expected {n_classes}", row)
        raise LabelParseError(f"class index {max(idx)} out of range for {n_classes} classes", row)
    return idx


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write feature files, ``manifest.csv`` and ``dataset.json`` under ``directory``.

    Re-saving into the same directory overwrites it in place and removes
    feature files that no longer belong to the dataset.
    """
    root = Path(directory)
    feature_dir = root / "features"
    try:
        feature_dir.mkdir(parents=True, exist_ok=True)
        keep = set()
        rows = []
        for i, sid in enumerate(dataset.sample_ids):
            rel = f"features/{i:06d}.alcv"
            keep.add(rel)
            write_tensor(root / rel, dataset.features[i])
            rows.append((sid, rel, _format_labels(dataset.labels[i]), str(dataset.splits[i])))
        for stale in feature_dir.glob("*.alcv"):
            if f"features/{stale.name}" not in keep:
                stale.unlink()
        manifest = root / MANIFEST_NAME
        with open(manifest, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_FIELDS)
            writer.writerows(rows)
        meta = {"class_names": list(dataset.class_names), "params": dataset.params}
        (root / "dataset.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise OSError(f"could not write dataset to {root}: {exc}") from exc
    return manifest


def load_manifest(path, n_classes: int | None = None) -> Dataset:
    """Load a dataset from a manifest CSV (or a directory containing ``manifest.csv``).

    The class count comes from ``n_classes``, else from a sibling
    ``dataset.json``, else from the largest class index seen. Samples are
    returned sorted by ``sample_id``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    class_names = None
    params: dict = {}
    meta_path = root / "dataset.json"
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        class_names = list(meta.get("class_names") or []) or None
        params = meta.get("params", {})
    if n_classes is None and class_names is not None:
        n_classes = len(class_names)
    if class_names is not None and n_classes != len(class_names):
        raise ManifestError(f"n_classes={n_classes} but dataset.json lists {len(class_names)}")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}, got {header}")
        raw_rows = [(lineno, r) for lineno, r in enumerate(reader, start=2) if r]

    if not raw_rows:
        warnings.warn(f"manifest {path} lists no samples", stacklevel=2)
        c = n_classes or 0
        return Dataset(
            np.zeros((0, 0, 0, 0)),
            np.zeros((0, c), dtype=np.uint8),
            np.array([], dtype=str),
            [],
            class_names or [f"class_{j}" for j in range(c)],
            params,
        )

    seen: dict[str, int] = {}
    parsed = []
    shape = None
    for row_no, row in raw_rows:
        if len(row) != 4:
            raise ManifestError(f"expected 4 fields, got {len(row)}", row_no)
        sid, rel, label_text, split = (field_.strip() for field_ in row)
        if not sid:
            raise ManifestError("empty sample_id", row_no)
        if sid in seen:
            raise DuplicateIdError(f"sample_id {sid!r} already used on row {seen[sid]}", row_no)
        seen[sid] = row_no
        if split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {split!r}", row_no)
        file_path = root / rel
        if not file_path.is_file():
            raise MissingFeatureFileError(f"feature file {file_path} does not exist", row_no)
        try:
            grid = read_tensor(file_path)
        except TensorFormatError as exc:
            raise ShapeMismatchError(str(exc), row_no) from None
        if shape is None:
            shape = grid.shape
        elif grid.shape != shape:
            raise ShapeMismatchError(f"grid shape {grid.shape} differs from {shape}", row_no)
        parsed.append((sid, grid, _parse_labels(label_text, n_classes, row_no), split, row_no))

    if n_classes is None:
        n_classes = 1 + max((max(p[2]) for p in parsed if len(p[2])), default=0)
    labels = np.zeros((len(parsed), n_classes), dtype=np.uint8)
    for i, (_, _, lab, _, row_no) in enumerate(parsed):
        if isinstance(lab, np.ndarray):
            labels[i] = lab
        else:
            labels[i, lab] = 1

    order = sorted(range(len(parsed)), key=lambda i: parsed[i][0])
    dataset = Dataset(
        features=np.stack([parsed[i][1] for i in order]),
        labels=labels[order],
        splits=np.array([parsed[i][3] for i in order]),
        sample_ids=[parsed[i][0] for i in order],
        class_names=class_names or [f"class_{j}" for j in range(n_classes)],
        params=params,
    )
    missing = dataset.validate_eval_positives()
    if missing and len(dataset.indices("eval")):
        warnings.warn(f"classes {missing} have no positive in the eval split", stacklevel=2)
    return dataset
