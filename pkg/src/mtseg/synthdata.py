"""Synthetic lesion volumes, intensity normalization, volume I/O, patch
extraction, and dataset manifests.

Volumes are ellipsoidal "brain" regions filled with white noise plus a
smooth confounding texture; lesions are bright ellipsoids marked 1 in the
label map.  Generation is a pure function of (seed, index), so datasets
are reproducible file-for-file.

Volume file format (version 1, little endian):
    magic "MTSV" | version u8 = 1 | nx, ny, nz as u32 | mask flag u8 |
    nx*ny*nz float32 voxels (C order) | optionally nx*ny*nz mask bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .domain import (
    AnnotatedSample,
    LabelMap,
    PatchGeometry,
    PatchPair,
    UnannotatedSample,
    Volume,
)
from .errors import (
    ConfigError,
    DegenerateIntensityError,
    DegenerateMaskError,
    ManifestError,
    VolumeFormatError,
)

MAGIC = b"MTSV"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic volume generator."""

    volume_shape: tuple[int, int, int] = (48, 48, 24)
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[tuple[float, float], ...] = (
        (2.0, 6.0),
        (2.0, 6.0),
        (1.5, 4.0),
    )
    lesion_intensity_boost: float = 2.0
    background_noise_std: float = 1.0
    background_texture_std: float = 0.6
    brain_ellipsoid_margin: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(s) for s in self.volume_shape))
        object.__setattr__(
            self, "lesion_count_range", tuple(int(c) for c in self.lesion_count_range)
        )
        object.__setattr__(
            self,
            "lesion_radius_range",
            tuple(tuple(float(r) for r in rr) for rr in self.lesion_radius_range),
        )
        if any(s < 4 for s in self.volume_shape):
            raise ConfigError("volume_shape axes must be >= 4")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ConfigError("lesion_count_range must be a nonempty interval of counts >= 0")
        if len(self.lesion_radius_range) != 3:
            raise ConfigError("lesion_radius_range must give one interval per axis")
        for ax, (rlo, rhi) in enumerate(self.lesion_radius_range):
            if rlo <= 0 or rhi < rlo:
                raise ConfigError("lesion radius intervals must be nonempty and positive")
            semi = self.volume_shape[ax] / 2.0 - self.brain_ellipsoid_margin
            if rhi >= semi:
                raise ConfigError(
                    f"lesion radius {rhi} does not fit inside the brain ellipsoid on axis {ax}"
                )
        if self.background_noise_std < 0 or self.background_texture_std < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.brain_ellipsoid_margin < 0:
            raise ConfigError("brain_ellipsoid_margin must be >= 0")


@dataclass(frozen=True)
class DatasetManifest:
    """Relative paths of a dataset split plus the generator config echo."""

    annotated: tuple[tuple[str, str], ...]
    unannotated: tuple[str, ...]
    split: str
    generator_config: SynthConfig

    def __post_init__(self):
        object.__setattr__(
            self, "annotated", tuple((str(v), str(l)) for v, l in self.annotated)
        )
        object.__setattr__(self, "unannotated", tuple(str(v) for v in self.unannotated))
        if self.split not in ("train", "test"):
            raise ManifestError(f"split must be train or test, got {self.split!r}")
        ann_vols = {v for v, _ in self.annotated}
        if ann_vols & set(self.unannotated):
            raise ManifestError("a volume path appears as both annotated and unannotated")


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def generate_volume(cfg: SynthConfig, index: int) -> tuple[Volume, LabelMap]:
    """Generate volume ``index`` of the dataset defined by ``cfg``."""
    shape = cfg.volume_shape
    rng = np.random.default_rng([cfg.seed, int(index)])

    center = tuple((s - 1) / 2.0 for s in shape)
    brain_radii = tuple(s / 2.0 - cfg.brain_ellipsoid_margin for s in shape)
    if any(r <= 1.0 for r in brain_radii):
        raise ConfigError("volume too small for the configured ellipsoid margin")
    mask = _ellipsoid_mask(shape, center, brain_radii)

    voxels = cfg.background_noise_std * rng.standard_normal(shape)
    if cfg.background_texture_std > 0:
        texture = gaussian_filter(rng.standard_normal(shape), sigma=3.0, mode="nearest")
        tstd = texture.std()
        if tstd > 0:
            voxels += cfg.background_texture_std / tstd * texture

    labels = np.zeros(shape, dtype=np.int32)
    n_lesions = int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))
    mask_idx = np.argwhere(mask)
    for _ in range(n_lesions):
        lesion_center = mask_idx[rng.integers(len(mask_idx))]
        radii = [rng.uniform(lo, hi) for lo, hi in cfg.lesion_radius_range]
        lesion = _ellipsoid_mask(shape, lesion_center, radii) & mask
        voxels[lesion] += cfg.lesion_intensity_boost
        labels[lesion] = 1

    voxels[~mask] = 0.0
    return Volume(voxels.astype(np.float32), mask), LabelMap(labels, 2)


def normalize_intensity(v: Volume) -> Volume:
    """Zero-mean unit-std intensities over the mask; zeros elsewhere."""
    if v.mask is None or not v.mask.any():
        raise DegenerateMaskError("normalization requires a nonempty mask")
    inside = v.voxels[v.mask].astype(np.float64)
    mean = inside.mean()
    std = inside.std()
    if std == 0.0:
        raise DegenerateIntensityError("constant intensity inside mask")
    out = np.zeros(v.shape, dtype=np.float64)
    out[v.mask] = (inside - mean) / std
    return Volume(out.astype(np.float32), v.mask)


def write_volume(path, v: Volume) -> None:
    path = Path(path)
    nx, ny, nz = v.shape
    flag = 1 if v.mask is not None else 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", FORMAT_VERSION))
        fh.write(struct.pack("<3I", nx, ny, nz))
        fh.write(struct.pack("<B", flag))
        fh.write(np.ascontiguousarray(v.voxels, dtype="<f4").tobytes())
        if flag:
            fh.write(np.ascontiguousarray(v.mask, dtype=np.uint8).tobytes())


def read_volume(path) -> Volume:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 18 or data[:4] != MAGIC:
        raise VolumeFormatError(f"{path}: not a volume file (bad magic)")
    version = data[4]
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported format version {version}")
    nx, ny, nz = struct.unpack("<3I", data[5:17])
    flag = data[17]
    if flag not in (0, 1):
        raise VolumeFormatError(f"{path}: invalid mask flag {flag}")
    n = nx * ny * nz
    expected = 18 + 4 * n + (n if flag else 0)
    if len(data) != expected:
        raise VolumeFormatError(
            f"{path}: payload size {len(data)} does not match header (expected {expected})"
        )
    voxels = np.frombuffer(data, dtype="<f4", count=n, offset=18).reshape(nx, ny, nz)
    mask = None
    if flag:
        mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=18 + 4 * n)
        mask = mask.reshape(nx, ny, nz).astype(bool)
    if not np.all(np.isfinite(voxels)):
        raise VolumeFormatError(f"{path}: non-finite voxel values")
    return Volume(voxels.copy(), mask)


def write_label_map(path, y: LabelMap) -> None:
    """Labels ride the same container as float32 values, without a mask."""
    write_volume(path, Volume(y.labels.astype(np.float32)))


def read_label_map(path, num_classes: int = 2) -> LabelMap:
    v = read_volume(path)
    return LabelMap(np.rint(v.voxels).astype(np.int32), num_classes)


def _downsample(voxels: np.ndarray, scale: int, mode: str) -> np.ndarray:
    """Full-volume downsampling on a grid anchored at index 0.

    Mean pooling pads the volume with zeros up to a multiple of ``scale``
    (consistent with the zero padding used for out-of-volume voxels);
    decimation takes every ``scale``-th voxel.
    """
    if scale == 1:
        return voxels
    if mode == "decimate":
        return voxels[::scale, ::scale, ::scale]
    padded_shape = tuple(-(-s // scale) * scale for s in voxels.shape)
    padded = np.zeros(padded_shape, dtype=voxels.dtype)
    padded[: voxels.shape[0], : voxels.shape[1], : voxels.shape[2]] = voxels
    nx, ny, nz = (s // scale for s in padded_shape)
    blocked = padded.reshape(nx, scale, ny, scale, nz, scale)
    return blocked.mean(axis=(1, 3, 5))


def _crop_padded(arr: np.ndarray, center, shape, fill=0) -> np.ndarray:
    """Crop ``shape`` around ``center``; out-of-array voxels take ``fill``."""
    out = np.full(tuple(shape), fill, dtype=arr.dtype)
    src_slices, dst_slices = [], []
    for ax in range(3):
        start = int(center[ax]) - shape[ax] // 2
        stop = start + shape[ax]
        src_lo = max(start, 0)
        src_hi = min(stop, arr.shape[ax])
        if src_lo >= src_hi:
            return out
        src_slices.append(slice(src_lo, src_hi))
        dst_slices.append(slice(src_lo - start, src_hi - start))
    out[tuple(dst_slices)] = arr[tuple(src_slices)]
    return out


def extract_patch_pair(
    v: Volume,
    center,
    geometry: PatchGeometry,
    target_labels: LabelMap | None = None,
    lo_mode: str = "mean",
) -> PatchPair:
    """Co-centered hi/lo patches around ``center``, zero padded at borders.

    The low-resolution patch is cropped from the volume downsampled by
    ``geometry.scale`` (mean pooling by default, strided decimation with
    ``lo_mode='decimate'``) around the same physical center.  When
    ``target_labels`` is given, the label window matching the network
    output shape is attached.
    """
    if lo_mode not in ("mean", "decimate"):
        raise ConfigError("lo_mode must be 'mean' or 'decimate'")
    center = tuple(int(c) for c in center)
    hi = _crop_padded(v.voxels, center, geometry.hi_shape)
    lo_source = _downsample(v.voxels, geometry.scale, lo_mode)
    lo_center = tuple(c // geometry.scale for c in center)
    lo = _crop_padded(lo_source, lo_center, geometry.lo_shape)
    target = None
    if target_labels is not None:
        window = _crop_padded(target_labels.labels, center, geometry.out_shape)
        target = LabelMap(window, target_labels.num_classes)
    return PatchPair(hi, lo, target, center)


def sample_training_centers(sample, n: int, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Balanced patch centers: fair coin between lesion and healthy voxels.

    Works on annotated samples (true labels) and unannotated samples
    (pseudo-lesion approximation).  When the lesion set is empty every
    draw falls back to the masked set.
    """
    if isinstance(sample, AnnotatedSample):
        volume, labels = sample.volume, sample.annotation
    elif isinstance(sample, UnannotatedSample):
        if sample.pseudo_lesion is None:
            raise ValueError("unannotated sample has no pseudo_lesion map")
        volume, labels = sample.volume, sample.pseudo_lesion
    else:
        volume, labels = sample

    mask = volume.mask if volume.mask is not None else np.ones(volume.shape, bool)
    if not mask.any():
        raise DegenerateMaskError("cannot sample centers from an empty mask")
    lesion_idx = np.argwhere((labels.labels > 0) & mask)
    healthy_idx = np.argwhere((labels.labels == 0) & mask)
    if len(healthy_idx) == 0:
        healthy_idx = np.argwhere(mask)

    centers = []
    for _ in range(int(n)):
        pool = lesion_idx if (len(lesion_idx) and rng.random() < 0.5) else healthy_idx
        pick = pool[rng.integers(len(pool))]
        centers.append(tuple(int(c) for c in pick))
    return centers


def _synth_config_to_dict(cfg: SynthConfig) -> dict:
    return {
        "volume_shape": list(cfg.volume_shape),
        "lesion_count_range": list(cfg.lesion_count_range),
        "lesion_radius_range": [list(r) for r in cfg.lesion_radius_range],
        "lesion_intensity_boost": cfg.lesion_intensity_boost,
        "background_noise_std": cfg.background_noise_std,
        "background_texture_std": cfg.background_texture_std,
        "brain_ellipsoid_margin": cfg.brain_ellipsoid_margin,
        "seed": cfg.seed,
    }


def write_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "format": "mtseg-manifest",
        "version": 1,
        "split": manifest.split,
        "annotated": [list(pair) for pair in manifest.annotated],
        "unannotated": list(manifest.unannotated),
        "generator_config": _synth_config_to_dict(manifest.generator_config),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: cannot parse manifest: {exc}") from exc
    if doc.get("format") != "mtseg-manifest" or doc.get("version") != 1:
        raise ManifestError(f"{path}: not a version-1 manifest")
    try:
        cfg = SynthConfig(**doc["generator_config"])
        return DatasetManifest(
            annotated=tuple(tuple(pair) for pair in doc["annotated"]),
            unannotated=tuple(doc["unannotated"]),
            split=doc["split"],
            generator_config=cfg,
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed manifest: {exc}") from exc


def load_annotated(manifest: DatasetManifest, base_dir, normalize: bool = True):
    """Annotated samples listed by a manifest, optionally normalized."""
    base = Path(base_dir)
    samples = []
    for vol_rel, lab_rel in manifest.annotated:
        vol = read_volume(base / vol_rel)
        if normalize:
            vol = normalize_intensity(vol)
        samples.append(AnnotatedSample(vol, read_label_map(base / lab_rel)))
    return samples


def load_unannotated(manifest: DatasetManifest, base_dir, normalize: bool = True):
    base = Path(base_dir)
    samples = []
    for vol_rel in manifest.unannotated:
        vol = read_volume(base / vol_rel)
        if normalize:
            vol = normalize_intensity(vol)
        samples.append(UnannotatedSample(vol))
    return samples
