"""Containers and linear transforms for joint blind source separation.

A problem instance is a set of K aligned datasets, each holding p observed
channels over n shared samples.  Data is stored channel-major, shape
``(K, p, n)``, so extracting one unmixing row's output ``w @ X`` touches
contiguous memory.  All operations here are pure: inputs are never mutated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataValidationError, RankDeficiencyError, ShapeError

_MAGIC = b"IVAKIT-DATA\x00\x00\x00\x00\x00"

__all__ = [
    "DatasetCollection",
    "WhiteningTransform",
    "UnmixingSet",
    "SourceEstimates",
    "MixingSet",
    "center",
    "whiten",
    "apply_unmixing",
    "compose_whitening",
    "sample_covariances",
    "save_datasets_binary",
    "load_datasets_binary",
    "save_datasets_csv",
    "load_datasets_csv",
]


def _as_float_array(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class DatasetCollection:
    """K aligned datasets of p channels by n samples, shape ``(K, p, n)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.data, "data")
        if arr.ndim != 3:
            raise DataValidationError(
                f"expected (K, p, n) array, got shape {arr.shape}"
            )
        k, p, n = arr.shape
        if k < 1:
            raise DataValidationError("need at least one dataset")
        if p < 2:
            raise DataValidationError(f"need at least two channels, got p={p}")
        if n <= p:
            raise DataValidationError(f"need more samples than channels (n={n}, p={p})")
        object.__setattr__(self, "data", arr)

    @property
    def k_count(self) -> int:
        return self.data.shape[0]

    @property
    def channel_count(self) -> int:
        return self.data.shape[1]

    @property
    def sample_count(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class WhiteningTransform:
    """Per-dataset affine transform ``z = V (x - mean)`` with symmetric PD V."""

    means: np.ndarray      # (K, p)
    whiteners: np.ndarray  # (K, p, p)

    def __post_init__(self):
        means = _as_float_array(self.means, "means")
        whiteners = _as_float_array(self.whiteners, "whiteners")
        if means.ndim != 2 or whiteners.ndim != 3:
            raise ShapeError("means must be (K, p), whiteners (K, p, p)")
        if whiteners.shape[0] != means.shape[0] or whiteners.shape[1:] != (
            means.shape[1],
            means.shape[1],
        ):
            raise ShapeError(
                f"inconsistent shapes: means {means.shape}, whiteners {whiteners.shape}"
            )
        for k, v in enumerate(whiteners):
            if not np.allclose(v, v.T, atol=1e-10):
                raise DataValidationError(f"whitener {k} is not symmetric")
            if np.linalg.eigvalsh(v)[0] <= 0:
                raise DataValidationError(f"whitener {k} is not positive definite")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "whiteners", whiteners)

    def apply(self, collection: DatasetCollection) -> DatasetCollection:
        """Center with the stored means and whiten each dataset."""
        if collection.data.shape[:2] != self.means.shape:
            raise ShapeError("collection does not match transform dimensions")
        shifted = collection.data - self.means[:, :, None]
        return DatasetCollection(np.einsum("kij,kjn->kin", self.whiteners, shifted))


@dataclass(frozen=True)
class UnmixingSet:
    """K unmixing matrices, shape ``(K, p, p)``, each nonsingular."""

    matrices: np.ndarray
    composed_with_whitening: bool = False
    det_floor: float = field(default=0.0, repr=False)

    def __post_init__(self):
        mats = _as_float_array(self.matrices, "matrices")
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
            raise ShapeError(f"expected (K, p, p) array, got shape {mats.shape}")
        for k, w in enumerate(mats):
            sign, logdet = np.linalg.slogdet(w)
            if sign == 0 or np.exp(logdet) <= self.det_floor:
                raise DataValidationError(
                    f"unmixing matrix {k} is singular (abs det <= {self.det_floor})"
                )
        object.__setattr__(self, "matrices", mats)

    @property
    def k_count(self) -> int:
        return self.matrices.shape[0]

    @property
    def channel_count(self) -> int:
        return self.matrices.shape[1]


@dataclass(frozen=True)
class SourceEstimates:
    """p source component vectors (SCVs), shape ``(p, K, n)``.

    Block j collects the j-th recovered component across all K datasets.
    """

    scvs: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.scvs, "scvs")
        if arr.ndim != 3:
            raise ShapeError(f"expected (p, K, n) array, got shape {arr.shape}")
        object.__setattr__(self, "scvs", arr)

    @property
    def source_count(self) -> int:
        return self.scvs.shape[0]

    @property
    def k_count(self) -> int:
        return self.scvs.shape[1]

    @property
    def sample_count(self) -> int:
        return self.scvs.shape[2]


@dataclass(frozen=True)
class MixingSet:
    """K ground-truth mixing matrices, shape ``(K, p, p)``, each invertible."""

    matrices: np.ndarray

    def __post_init__(self):
        mats = _as_float_array(self.matrices, "matrices")
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
            raise ShapeError(f"expected (K, p, p) array, got shape {mats.shape}")
        for k, m in enumerate(mats):
            if np.linalg.matrix_rank(m) < m.shape[0]:
                raise DataValidationError(f"mixing matrix {k} is rank deficient")
        object.__setattr__(self, "matrices", mats)


def center(collection: DatasetCollection):
    """Subtract each channel's sample mean.

    Returns
    -------
    centered : DatasetCollection
    means : ndarray, shape (K, p)
        The subtracted per-channel sample means.
    """
    means = collection.data.mean(axis=2)
    centered = DatasetCollection(collection.data - means[:, :, None])
    return centered, means


def whiten(collection: DatasetCollection, eigen_floor: float | None = None):
    """Whiten each dataset with the symmetric inverse square root of its
    sample covariance.

    The input must already be centered.  The whitener is the unique symmetric
    positive-definite matrix V with ``V C V = I`` for sample covariance C, so
    the whitened data has identity sample covariance.

    Parameters
    ----------
    collection : DatasetCollection
        Centered data.
    eigen_floor : float, optional
        Smallest acceptable covariance eigenvalue.  Defaults to
        ``1e-10 * largest eigenvalue`` of the same dataset.

    Returns
    -------
    whitened : DatasetCollection
    transform : WhiteningTransform
        Carries zero means (input was centered) and the per-dataset whiteners.

    Raises
    ------
    RankDeficiencyError
        If any dataset's covariance has an eigenvalue below the floor.
    """
    k_count, p, n = collection.data.shape
    max_mean = np.abs(collection.data.mean(axis=2)).max()
    scale = max(1.0, np.abs(collection.data).max())
    if max_mean > 1e-8 * scale:
        raise DataValidationError("whiten() requires centered data; call center() first")

    whiteners = np.empty((k_count, p, p))
    whitened = np.empty_like(collection.data)
    for k in range(k_count):
        x = collection.data[k]
        cov = x @ x.T / n
        eigvals, eigvecs = np.linalg.eigh(cov)
        floor = 1e-10 * eigvals[-1] if eigen_floor is None else eigen_floor
        if eigvals[0] < floor:
            raise RankDeficiencyError(
                f"dataset {k}: covariance eigenvalue {eigvals[0]:.3e} below floor "
                f"{floor:.3e}",
                dataset_index=k,
            )
        v = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
        whiteners[k] = v
        whitened[k] = v @ x
    transform = WhiteningTransform(np.zeros((k_count, p)), whiteners)
    return DatasetCollection(whitened), transform


def apply_unmixing(
    unmixing: UnmixingSet, collection: DatasetCollection
) -> SourceEstimates:
    """Recover source component vectors: SCV block j, row k is
    ``w_j^[k]^T x^[k]`` over all samples.

    Raises
    ------
    ShapeError
        If the unmixing and data dimensions disagree.
    """
    if unmixing.matrices.shape[0] != collection.k_count or unmixing.matrices.shape[
        1
    ] != collection.channel_count:
        raise ShapeError(
            f"unmixing {unmixing.matrices.shape} does not match data "
            f"{collection.data.shape}"
        )
    # (K, p, n) estimates, then regroup to (p, K, n) SCV blocks
    est = np.einsum("kji,kin->kjn", unmixing.matrices, collection.data)
    return SourceEstimates(np.ascontiguousarray(est.transpose(1, 0, 2)))


def compose_whitening(
    unmixing: UnmixingSet, transform: WhiteningTransform
) -> UnmixingSet:
    """Fold a whitening transform into an unmixing set: ``W_total = W V``."""
    if unmixing.matrices.shape != transform.whiteners.shape:
        raise ShapeError("unmixing and whitening dimensions disagree")
    composed = np.einsum("kij,kjl->kil", unmixing.matrices, transform.whiteners)
    return UnmixingSet(composed, composed_with_whitening=True)


def sample_covariances(collection: DatasetCollection) -> np.ndarray:
    """Per-dataset sample covariances ``X X^T / n``, shape (K, p, p).

    Assumes centered data (cross products, no mean removal)."""
    n = collection.sample_count
    return np.einsum("kin,kjn->kij", collection.data, collection.data) / n


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_datasets_binary(collection: DatasetCollection, path) -> None:
    """Write the single-file binary container.

    Layout: 16-byte magic, little-endian u64 (K, p, n), then K*p*n
    little-endian float64 in dataset-major, channel-major order.
    """
    k, p, n = collection.data.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQQ", k, p, n))
        fh.write(np.ascontiguousarray(collection.data, dtype="<f8").tobytes())


def load_datasets_binary(path) -> DatasetCollection:
    """Read a container written by :func:`save_datasets_binary`."""
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise DataValidationError(f"{path}: bad magic header")
    k, p, n = struct.unpack_from("<QQQ", raw, len(_MAGIC))
    body = raw[len(_MAGIC) + 24 :]
    expected = k * p * n * 8
    if len(body) != expected:
        raise DataValidationError(
            f"{path}: payload is {len(body)} bytes, expected {expected}"
        )
    data = np.frombuffer(body, dtype="<f8").reshape(k, p, n)
    return DatasetCollection(data.astype(np.float64))


def save_datasets_csv(collection: DatasetCollection, directory) -> None:
    """Write one headerless CSV per dataset (p rows by n columns)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(collection.k_count):
        np.savetxt(
            directory / f"dataset_{k:03d}.csv",
            collection.data[k],
            delimiter=",",
            fmt="%.17g",
        )


def load_datasets_csv(directory) -> DatasetCollection:
    """Read a directory of ``dataset_*.csv`` files (sorted by name)."""
    files = sorted(Path(directory).glob("dataset_*.csv"))
    if not files:
        raise DataValidationError(f"no dataset_*.csv files in {directory}")
    mats = [np.loadtxt(f, delimiter=",", ndmin=2) for f in files]
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise DataValidationError(f"datasets disagree in shape: {sorted(shapes)}")
    return DatasetCollection(np.stack(mats))
