"""Core value types shared by every module.

All arrays follow a single canonical axis order: plain 3D arrays are
(x, y, z), channelled arrays are (channel, x, y, z).  Values are treated
as immutable after construction; nothing in this package mutates them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import InvalidLabelError, ShapeError


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image with an optional foreground ("brain") mask.

    Voxels are stored as float32; the mask, when present, is boolean and
    has the same shape.
    """

    voxels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise ValueError("volume intensities must all be finite")
        object.__setattr__(self, "voxels", vox)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != vox.shape:
                raise ShapeError(
                    f"mask shape {mask.shape} != voxel shape {vox.shape}"
                )
            object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelMap:
    """Per-voxel integer labels in [0, num_classes - 1]."""

    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ShapeError(f"label map must be 3D, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.all(lab == np.round(lab)):
                raise InvalidLabelError("labels must be integers")
        lab = lab.astype(np.int32)
        if self.num_classes < 2:
            raise InvalidLabelError("num_classes must be >= 2")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise InvalidLabelError(
                f"labels must lie in [0, {self.num_classes - 1}]"
            )
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-voxel class probabilities, shaped (K, px, py, pz).

    Construction only checks dimensionality; use
    :func:`validate_probability_map` for the numeric invariants.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs)
        if p.ndim != 4:
            raise ShapeError(f"probability map must be 4D, got {p.shape}")
        object.__setattr__(self, "probs", p)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.probs.shape[1:]

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.probs.shape[1:]))


@dataclass(frozen=True)
class AnnotatedSample:
    """A volume together with its reference segmentation."""

    volume: Volume
    annotation: LabelMap

    def __post_init__(self):
        if self.annotation.shape != self.volume.shape:
            raise ShapeError("annotation shape must equal volume shape")


@dataclass(frozen=True)
class UnannotatedSample:
    """A volume without reference labels.

    ``pseudo_lesion`` is a model-predicted label map used only to balance
    patch sampling; it is attached by the trainer.
    """

    volume: Volume
    pseudo_lesion: LabelMap | None = None

    def __post_init__(self):
        if self.pseudo_lesion is not None:
            if self.pseudo_lesion.shape != self.volume.shape:
                raise ShapeError("pseudo_lesion shape must equal volume shape")

    def with_pseudo_lesion(self, labels: LabelMap) -> "UnannotatedSample":
        return UnannotatedSample(self.volume, labels)


@dataclass(frozen=True)
class PatchGeometry:
    """Co-centered dual-resolution patch layout.

    ``lo_shape`` is measured in downsampled voxels, so the low-resolution
    patch covers a ``scale``-times larger physical extent per axis.
    ``out_shape`` is the network output window centered on the same voxel.
    """

    hi_shape: tuple[int, int, int]
    lo_shape: tuple[int, int, int]
    scale: int
    out_shape: tuple[int, int, int]


@dataclass(frozen=True)
class PatchPair:
    """Normal-resolution and downsampled patches around one center voxel."""

    hi_res: np.ndarray
    lo_res: np.ndarray
    target_window: LabelMap | None = None
    center: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        hi = np.asarray(self.hi_res, dtype=np.float32)
        lo = np.asarray(self.lo_res, dtype=np.float32)
        if hi.ndim != 3 or lo.ndim != 3:
            raise ShapeError("patches must be 3D")
        object.__setattr__(self, "hi_res", hi)
        object.__setattr__(self, "lo_res", lo)
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))


class ModelWeights:
    """An ordered, named collection of parameter arrays.

    Two collections with equal ``schema_id`` (same names, shapes, dtypes,
    in the same order) are elementwise combinable.
    """

    def __init__(self, entries):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in entries.items() if isinstance(entries, dict) else entries:
            a = np.asarray(arr)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"weight entry {name!r} contains non-finite values")
            self._arrays[str(name)] = a

    @property
    def names(self) -> list[str]:
        return list(self._arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    @property
    def schema_id(self) -> str:
        h = hashlib.sha256()
        for name, arr in self._arrays.items():
            h.update(f"{name}|{arr.shape}|{arr.dtype.str};".encode())
        return h.hexdigest()[:16]

    def copy(self) -> "ModelWeights":
        return ModelWeights({n: a.copy() for n, a in self._arrays.items()})

    def num_parameters(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def allclose(self, other: "ModelWeights", rtol=0.0, atol=0.0) -> bool:
        if self.schema_id != other.schema_id:
            return False
        return all(
            np.allclose(a, other[n], rtol=rtol, atol=atol)
            for n, a in self.items()
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return self.schema_id == other.schema_id and all(
            np.array_equal(a, other[n]) for n, a in self.items()
        )


def validate_probability_map(p: ProbabilityMap, tol: float = 1e-6) -> bool:
    """True iff all entries are finite, lie in [0, 1], and each voxel's
    channel sum is 1 within ``tol``.  Pure predicate, never raises."""
    probs = p.probs
    if not np.all(np.isfinite(probs)):
        return False
    if probs.min() < 0.0 or probs.max() > 1.0:
        return False
    sums = probs.sum(axis=0)
    return bool(np.all(np.abs(sums - 1.0) <= tol))


def one_hot(y: LabelMap) -> ProbabilityMap:
    """Encode a label map as a (K, x, y, z) indicator probability map."""
    lab = y.labels
    if lab.size and (lab.min() < 0 or lab.max() >= y.num_classes):
        raise InvalidLabelError("label outside [0, num_classes - 1]")
    probs = np.zeros((y.num_classes,) + lab.shape, dtype=np.float64)
    for k in range(y.num_classes):
        probs[k][lab == k] = 1.0
    return ProbabilityMap(probs)


def argmax_labels(p: ProbabilityMap) -> LabelMap:
    """Per-voxel argmax with lowest-index tie-breaking (np.argmax order)."""
    return LabelMap(np.argmax(p.probs, axis=0).astype(np.int32), p.num_classes)
