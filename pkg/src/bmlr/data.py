"""Seeded synthetic multimodal datasets with per-modality difficulty knobs.

Each modality draws class-conditional isotropic Gaussians (unit noise)
around equidistant class means: the one-hot vertices ``e_k`` scaled by
``separations[u]`` (so any two means sit ``sqrt(2) * s`` noise-stds apart),
rotated into the modality's feature space.

File format (CSV, one header line)::

    BMLR-DATA-1,<n_classes>,<n_modalities>,<dim_0>,...,<dim_{M-1}>
    <train|test>,<class>,<modality 0 features...>,<modality 1 features...>,...

Floats are written with ``repr`` so a save/load round trip is exact.
"""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_MAGIC = "BMLR-DATA-1"
TEST_FRACTION = 0.1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 6
    samples_per_class: int = 110
    dims: tuple = (16, 16)
    separations: tuple = (2.5, 1.0)
    exclusive_fraction: float = 0.2
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "separations", tuple(float(s) for s in self.separations))
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.samples_per_class < 2:
            raise ValueError("need at least 2 samples per class for a train/test split")
        if len(self.dims) < 2 or len(self.dims) != len(self.separations):
            raise ValueError("dims and separations must list the same modalities (at least 2)")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dimensions must be positive: {self.dims}")
        if any(s < 0 for s in self.separations):
            raise ValueError(f"separations must be >= 0: {self.separations}")
        if not 0.0 <= self.exclusive_fraction <= 1.0:
            raise ValueError("exclusive_fraction must be in [0, 1]")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must be in [0, 0.5)")


@dataclass
class Dataset:
    xs: list                 # per modality, (N, d_u)
    labels: np.ndarray       # class indices, (N,)
    is_test: np.ndarray      # bool, (N,)
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = [np.asarray(x, dtype=np.float64) for x in self.xs]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.is_test = np.asarray(self.is_test, dtype=bool)
        n = self.labels.shape[0]
        if any(x.ndim != 2 or x.shape[0] != n for x in self.xs) or self.is_test.shape != (n,):
            raise ValueError("all modalities, labels and split tags must cover the same samples")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return self.labels.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.n_classes == other.n_classes
            and len(self.xs) == len(other.xs)
            and all(np.array_equal(a, b) for a, b in zip(self.xs, other.xs))
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.is_test, other.is_test)
        )

    @property
    def dims(self):
        return tuple(x.shape[1] for x in self.xs)

    @property
    def one_hot(self):
        return np.eye(self.n_classes)[self.labels]

    def subset(self, mask_or_idx):
        return Dataset([x[mask_or_idx] for x in self.xs], self.labels[mask_or_idx],
                       self.is_test[mask_or_idx], self.n_classes, dict(self.meta))

    def train(self):
        return self.subset(~self.is_test)

    def test(self):
        return self.subset(self.is_test)


def class_means(n_classes, dim, separation, rng):
    """Class means ``separation * e_k`` (centred), embedded in ``dim`` dims.

    C equidistant points need C-1 dimensions. With fewer, the regular
    simplex is squashed through a random orthonormal projection and a
    warning is issued: distances are then no longer all equal.
    """
    simplex = np.eye(n_classes) * separation
    simplex -= simplex.mean(axis=0)
    # coordinates inside the (C-1)-dim subspace orthogonal to the ones vector
    _, _, vt = np.linalg.svd(np.eye(n_classes) - 1.0 / n_classes)
    coords = simplex @ vt[: n_classes - 1].T
    k = n_classes - 1
    if dim >= k:
        q, _ = np.linalg.qr(rng.standard_normal((dim, k)))
        return coords @ q.T
    warnings.warn(
        f"{n_classes} equidistant means need {k} dims, got {dim}; "
        "using a random orthonormal projection (means not equidistant)",
        stacklevel=2,
    )
    q, _ = np.linalg.qr(rng.standard_normal((k, dim)))
    return coords @ q


def generate(spec):
    rng = np.random.default_rng(spec.seed)
    C, n = spec.n_classes, spec.samples_per_class
    M = len(spec.dims)
    means = [class_means(C, d, s, rng) for d, s in zip(spec.dims, spec.separations)]

    labels = np.repeat(np.arange(C), n)
    N = labels.shape[0]
    xs = []
    for u in range(M):
        xs.append(means[u][labels] + rng.standard_normal((N, spec.dims[u])))

    # uninformative modality: resample from the class-marginal mixture
    exclusive = rng.random(N) < spec.exclusive_fraction
    dropped = rng.integers(0, M, size=N)
    for u in range(M):
        rows = np.nonzero(exclusive & (dropped == u))[0]
        fake = rng.integers(0, C, size=rows.size)
        xs[u][rows] = means[u][fake] + rng.standard_normal((rows.size, spec.dims[u]))

    if spec.label_noise > 0:
        flip = rng.random(N) < spec.label_noise
        shift = rng.integers(1, C, size=N)
        labels = np.where(flip, (labels + shift) % C, labels)

    # stratified on the generating class, so every class splits ~9:1
    n_test = max(1, int(round(TEST_FRACTION * n)))
    is_test = np.zeros(N, dtype=bool)
    for c in range(C):
        members = np.arange(c * n, (c + 1) * n)
        is_test[rng.permutation(members)[:n_test]] = True

    return Dataset(xs, labels, is_test, C, meta={"spec": spec})


def save(dataset, path):
    path = Path(path)
    dims = dataset.dims
    with path.open("w") as fh:
        fh.write(",".join([DATA_MAGIC, str(dataset.n_classes), str(len(dims))]
                          + [str(d) for d in dims]) + "\n")
        for i in range(len(dataset)):
            fields = ["test" if dataset.is_test[i] else "train", str(int(dataset.labels[i]))]
            for x in dataset.xs:
                fields.extend(repr(float(v)) for v in x[i])
            fh.write(",".join(fields) + "\n")
    return path


def load(path):
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0] != DATA_MAGIC:
        raise DatasetFormatError(f"{path}:1: missing {DATA_MAGIC} header")
    try:
        C, M = int(header[1]), int(header[2])
        dims = [int(d) for d in header[3:]]
    except (IndexError, ValueError) as exc:
        raise DatasetFormatError(f"{path}:1: malformed header ({exc})") from None
    if len(dims) != M:
        raise DatasetFormatError(
            f"{path}:1: header declares {M} modalities but lists {len(dims)} dimensions")
    width = 2 + sum(dims)

    split, labels = [], []
    feats = [[] for _ in range(M)]
    for lineno, line in enumerate(lines[1:], start=2):
        last = f"last valid record is line {lineno - 1}" if lineno > 2 else "no valid records"
        parts = line.split(",")
        if len(parts) != width:
            raise DatasetFormatError(
                f"{path}:{lineno}: expected {width} fields, got {len(parts)} ({last})")
        if parts[0] not in ("train", "test"):
            raise DatasetFormatError(f"{path}:{lineno}: bad split tag {parts[0]!r} ({last})")
        try:
            label = int(parts[1])
            values = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc} ({last})") from None
        if not 0 <= label < C:
            raise DatasetFormatError(f"{path}:{lineno}: class {label} out of range ({last})")
        split.append(parts[0] == "test")
        labels.append(label)
        off = 0
        for u, d in enumerate(dims):
            feats[u].append(values[off:off + d])
            off += d
    xs = [np.asarray(f, dtype=np.float64).reshape(len(labels), d) for f, d in zip(feats, dims)]
    return Dataset(xs, np.asarray(labels), np.asarray(split), C, meta={"path": str(path)})
