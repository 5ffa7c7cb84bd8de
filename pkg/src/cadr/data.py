"""Synthetic datasets with missing-not-at-random label masks.

A Dataset keeps ground-truth labels for every sample; the missing mask only
controls which labels a trainer is allowed to see. Masking therefore never
destroys information needed for evaluation.

Binary container (little-endian): magic "CADRDS01", u32 N, d, C, then N*d
float32 features row-major, N int32 labels, N uint8 mask bytes (1 = missing).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, InsufficientSamplesError

_MAGIC = b"CADRDS01"
_HEADER = struct.Struct("<III")

MASK_MODES = ("exponential", "random_subset", "mcar")


@dataclass
class Dataset:
    """Feature matrix plus labels and a label-missingness mask.

    Attributes
    ----------
    features : (N, d) float32 array
    labels : (N,) int32 array of ground-truth classes in [0, C)
    missing_mask : (N,) bool array, True where the label is hidden
    class_count : number of classes C (>= 2)
    """

    features: np.ndarray
    labels: np.ndarray
    missing_mask: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.features.ndim != 2:
            raise ConfigError("features must be a 2-d array")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.missing_mask.shape != (n,):
            raise ConfigError("labels and missing_mask must match the sample count")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError("labels out of range for class_count")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled_count(self) -> int:
        return int((~self.missing_mask).sum())

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.missing_mask)

    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.missing_mask)


@dataclass
class SyntheticSpec:
    """Recipe for isotropic Gaussian class blobs.

    class_separation is the exact minimum pairwise distance between class
    means; noise_scale is the per-coordinate standard deviation around them.
    """

    class_count: int
    feature_dim: int
    samples_per_class: int
    class_separation: float
    noise_scale: float
    seed: int

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.class_separation <= 0:
            raise ConfigError("class_separation must be positive")
        if self.noise_scale <= 0:
            raise ConfigError("noise_scale must be positive")


@dataclass
class MnarConfig:
    """How labels go missing.

    mode "exponential" keeps an exponentially decaying number of labels per
    class (ratio gamma_l between the most- and least-labeled class); "mcar"
    is the gamma_l = 1 special case; "random_subset" keeps n_random_labels
    uniformly at random with no class structure. gamma_u shapes the unlabeled
    pool the same way when apply_unlabeled_imbalance is used (1 = leave it
    alone; < 1 reverses the class ordering).
    """

    mode: str = "exponential"
    gamma_l: float = 1.0
    gamma_u: float = 1.0
    n_max: int = 1
    n_random_labels: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ConfigError(f"mode must be one of {MASK_MODES}, got {self.mode!r}")
        if self.gamma_l < 1:
            raise ConfigError("gamma_l must be >= 1")
        if self.mode == "mcar" and self.gamma_l != 1:
            raise ConfigError("mcar requires gamma_l = 1")
        if self.gamma_u <= 0:
            raise ConfigError("gamma_u must be positive")
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1")
        if self.mode == "random_subset":
            if self.n_random_labels is None or self.n_random_labels < 1:
                raise ConfigError("random_subset requires n_random_labels >= 1")


def _round_half_up(x: np.ndarray) -> np.ndarray:
    # np.round would round half to even; the contract is half away from zero.
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def class_counts(class_count: int, n_max: int, gamma: float) -> np.ndarray:
    """Per-class labeled counts N_i = n_max * gamma^(-(i-1)/(C-1)), i = 1..C.

    Class index 0 is the most-labeled class. Counts are rounded half-up and
    clamped to at least one label per class.
    """
    if class_count < 2:
        raise ConfigError("class_count must be >= 2")
    if n_max < 1:
        raise ConfigError("n_max must be >= 1")
    if gamma < 1:
        raise ConfigError("gamma must be >= 1")
    i = np.arange(class_count, dtype=np.float64)
    counts = _round_half_up(n_max * gamma ** (-i / (class_count - 1)))
    return np.maximum(counts, 1)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Sample balanced Gaussian blobs with controlled class overlap.

    Class means are drawn from a standard normal and rescaled so the minimum
    pairwise distance equals spec.class_separation exactly, which makes task
    difficulty a function of (class_separation, noise_scale) alone. Rows are
    shuffled; all labels start visible. Deterministic given spec.seed.
    """
    rng = np.random.default_rng(spec.seed)
    c, d = spec.class_count, spec.feature_dim
    means = rng.standard_normal((c, d))
    diffs = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diffs**2).sum(axis=2))
    min_dist = dist[~np.eye(c, dtype=bool)].min()
    if min_dist <= 0:
        raise ConfigError("degenerate class means; use a different seed")
    means *= spec.class_separation / min_dist

    n = c * spec.samples_per_class
    labels = np.repeat(np.arange(c, dtype=np.int32), spec.samples_per_class)
    features = means[labels] + spec.noise_scale * rng.standard_normal((n, d))
    order = rng.permutation(n)
    return Dataset(
        features=features[order].astype(np.float32),
        labels=labels[order],
        missing_mask=np.zeros(n, dtype=bool),
        class_count=c,
    )


def apply_mnar_mask(ds: Dataset, cfg: MnarConfig) -> Dataset:
    """Hide labels according to cfg; features and labels are untouched.

    Selection of which labels stay visible is uniform at random within each
    class (stratified) for exponential/mcar modes, and uniform over the whole
    dataset for random_subset. Deterministic given cfg.seed.
    """
    if ds.missing_mask.any():
        raise ConfigError("dataset already has a mask; masking applies to fully labeled data")
    rng = np.random.default_rng(cfg.seed)
    mask = np.ones(ds.n_samples, dtype=bool)

    if cfg.mode == "random_subset":
        n = cfg.n_random_labels
        if n > ds.n_samples:
            raise InsufficientSamplesError(
                f"requested {n} labels but the dataset has {ds.n_samples} samples"
            )
        keep = rng.choice(ds.n_samples, size=n, replace=False)
        mask[keep] = False
    else:
        gamma = 1.0 if cfg.mode == "mcar" else cfg.gamma_l
        counts = class_counts(ds.class_count, cfg.n_max, gamma)
        for c in range(ds.class_count):
            pool = np.flatnonzero(ds.labels == c)
            if pool.size < counts[c]:
                raise InsufficientSamplesError(
                    f"class {c} has {pool.size} samples but needs {counts[c]} labels"
                )
            keep = rng.choice(pool, size=counts[c], replace=False)
            mask[keep] = False

    return Dataset(
        features=ds.features,
        labels=ds.labels,
        missing_mask=mask,
        class_count=ds.class_count,
    )


def apply_unlabeled_imbalance(ds: Dataset, cfg: MnarConfig) -> Dataset:
    """Subsample the unlabeled pool to an exponential per-class profile.

    The retained count for class i follows the gamma_u ratio law, anchored so
    the largest class keeps its full current pool (samples are removed, never
    duplicated). gamma_u > 1 aligns the unlabeled imbalance with the labeled
    one; gamma_u < 1 reverses it; gamma_u = 1 returns the dataset unchanged.
    """
    if cfg.gamma_u == 1.0:
        return ds
    c = ds.class_count
    exponents = -np.arange(c, dtype=np.float64) / (c - 1)
    weights = cfg.gamma_u**exponents
    avail = np.array(
        [np.count_nonzero((ds.labels == k) & ds.missing_mask) for k in range(c)]
    )
    anchor = int(np.argmax(weights))
    if avail[anchor] < 1:
        raise InsufficientSamplesError(f"class {anchor} has no unlabeled samples to anchor on")
    targets = np.maximum(_round_half_up(avail[anchor] * weights / weights[anchor]), 1)

    rng = np.random.default_rng(cfg.seed)
    keep = np.flatnonzero(~ds.missing_mask).tolist()
    for k in range(c):
        pool = np.flatnonzero((ds.labels == k) & ds.missing_mask)
        if pool.size < targets[k]:
            raise InsufficientSamplesError(
                f"class {k} has {pool.size} unlabeled samples but needs {targets[k]}"
            )
        keep.extend(rng.choice(pool, size=targets[k], replace=False).tolist())
    keep = np.sort(np.array(keep, dtype=np.int64))
    return Dataset(
        features=ds.features[keep],
        labels=ds.labels[keep],
        missing_mask=ds.missing_mask[keep],
        class_count=c,
    )


def split_holdout(ds: Dataset, per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Carve a balanced fully-labeled holdout split off a fully labeled dataset."""
    if ds.missing_mask.any():
        raise ConfigError("holdout split must happen before masking")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    held = []
    for c in range(ds.class_count):
        pool = np.flatnonzero(ds.labels == c)
        if pool.size <= per_class:
            raise InsufficientSamplesError(
                f"class {c} has {pool.size} samples; cannot hold out {per_class} and keep any"
            )
        held.extend(rng.choice(pool, size=per_class, replace=False).tolist())
    held = np.sort(np.array(held, dtype=np.int64))
    rest = np.setdiff1d(np.arange(ds.n_samples), held)

    def take(idx):
        return Dataset(
            features=ds.features[idx],
            labels=ds.labels[idx],
            missing_mask=ds.missing_mask[idx],
            class_count=ds.class_count,
        )

    return take(rest), take(held)


def save_dataset(ds: Dataset, path) -> None:
    """Write the binary container; see the module docstring for the layout."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(ds.n_samples, ds.feature_dim, ds.class_count))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(ds.labels.astype("<i4").tobytes())
        fh.write(ds.missing_mask.astype(np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    """Read the binary container back; malformed files raise DataFormatError."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    if blob[: len(_MAGIC)] != _MAGIC:
        raise DataFormatError(f"{path}: bad magic; not a dataset file")
    n, d, c = _HEADER.unpack_from(blob, len(_MAGIC))
    offset = len(_MAGIC) + _HEADER.size
    expected = offset + 4 * n * d + 4 * n + n
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: size mismatch (found {len(blob)} bytes, header implies {expected})"
        )
    features = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += 4 * n * d
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=offset)
    offset += 4 * n
    mask_bytes = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset)
    if n and mask_bytes.max() > 1:
        raise DataFormatError(f"{path}: mask bytes must be 0 or 1")
    if c < 2:
        raise DataFormatError(f"{path}: class_count must be >= 2")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DataFormatError(f"{path}: labels out of range for class_count {c}")
    return Dataset(
        features=features.copy(),
        labels=labels.copy(),
        missing_mask=mask_bytes.astype(bool),
        class_count=int(c),
    )
