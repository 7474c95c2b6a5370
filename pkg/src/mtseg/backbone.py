"""Dual-pathway multi-scale 3D patch segmentation network.

Two parallel stacks of eight valid (unpadded) convolutions process a
normal-resolution patch and a downsampled patch around the same center.
The low-resolution features are upsampled by nearest-neighbor repetition,
center-cropped to the high-resolution output window, concatenated along
channels, passed through two 1x1x1 layers and a final 1x1x1 classifier,
and normalized per voxel with a softmax.

Forward and backward passes are explicit over named weight arrays, so the
whole computation is a pure deterministic function of (weights, input).
Because a 3-wide valid convolution shrinks an axis by 2, thin axes cannot
absorb eight 3x3x3 stages; per-layer per-axis kernels (entries in {1, 3})
let a configuration trade depth against extent on such axes, and
``check_geometry`` accounts for that when closing the shape arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .domain import ModelWeights, PatchGeometry, PatchPair, ProbabilityMap
from .errors import ConfigError, GeometryError, ShapeError

NUM_CONV_LAYERS = 8

DEFAULT_CONV_FILTERS = (30, 30, 40, 40, 40, 40, 50, 50)
DEFAULT_FC_FILTERS = (250, 250)


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture and geometry parameters shared by student and teacher."""

    conv_filters: tuple[int, ...] = DEFAULT_CONV_FILTERS
    fc_filters: tuple[int, int] = DEFAULT_FC_FILTERS
    kernels: tuple[tuple[int, int, int], ...] = ((3, 3, 3),) * NUM_CONV_LAYERS
    downsample_factor: int = 3
    num_classes: int = 2
    hi_patch_shape: tuple[int, int, int] = (37, 37, 21)
    lo_patch_shape: tuple[int, int, int] = (23, 23, 18)
    activation: str = "leaky_relu"
    leaky_slope: float = 0.01
    init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        object.__setattr__(self, "fc_filters", tuple(int(f) for f in self.fc_filters))
        object.__setattr__(
            self, "kernels", tuple(tuple(int(k) for k in ks) for ks in self.kernels)
        )
        object.__setattr__(self, "hi_patch_shape", tuple(int(s) for s in self.hi_patch_shape))
        object.__setattr__(self, "lo_patch_shape", tuple(int(s) for s in self.lo_patch_shape))
        if len(self.conv_filters) != NUM_CONV_LAYERS:
            raise ConfigError(f"conv_filters must list {NUM_CONV_LAYERS} channel counts")
        if len(self.fc_filters) != 2:
            raise ConfigError("fc_filters must list exactly two channel counts")
        if len(self.kernels) != NUM_CONV_LAYERS:
            raise ConfigError(f"kernels must list {NUM_CONV_LAYERS} per-layer shapes")
        for ks in self.kernels:
            if len(ks) != 3 or any(k not in (1, 3) for k in ks):
                raise ConfigError("per-layer kernels must be 3 axes with entries in {1, 3}")
        if any(f < 1 for f in self.conv_filters + self.fc_filters):
            raise ConfigError("filter counts must be positive")
        if self.downsample_factor < 1:
            raise ConfigError("downsample_factor must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.activation not in ("leaky_relu", "relu"):
            raise ConfigError("activation must be 'leaky_relu' or 'relu'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be 'float32' or 'float64'")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def _shrink(shape, kernels):
    out = list(shape)
    for ks in kernels:
        for ax in range(3):
            out[ax] -= ks[ax] - 1
    return tuple(out)


def check_geometry(cfg: BackboneConfig) -> tuple[int, int, int]:
    """Close the per-axis shape arithmetic of both pathways.

    Returns the common output window shape, or raises GeometryError listing
    the per-axis deficit when the paths cannot be aligned.
    """
    hi_out = _shrink(cfg.hi_patch_shape, cfg.kernels)
    lo_out = _shrink(cfg.lo_patch_shape, cfg.kernels)
    axes = "xyz"
    for ax in range(3):
        if hi_out[ax] < 1:
            raise GeometryError(
                f"hi patch axis {axes[ax]}: extent {cfg.hi_patch_shape[ax]} shrinks to "
                f"{hi_out[ax]} after {NUM_CONV_LAYERS} valid convolutions"
            )
        if lo_out[ax] < 1:
            raise GeometryError(
                f"lo patch axis {axes[ax]}: extent {cfg.lo_patch_shape[ax]} shrinks to "
                f"{lo_out[ax]} after {NUM_CONV_LAYERS} valid convolutions"
            )
    up = tuple(cfg.downsample_factor * s for s in lo_out)
    deficits = [hi_out[ax] - up[ax] for ax in range(3)]
    if any(d > 0 for d in deficits):
        detail = ", ".join(
            f"{axes[ax]}: upsampled {up[ax]} < required {hi_out[ax]} (deficit {d})"
            for ax, d in enumerate(deficits)
            if d > 0
        )
        raise GeometryError(f"low-resolution path cannot cover the output window: {detail}")
    return tuple(hi_out)


def patch_geometry(cfg: BackboneConfig) -> PatchGeometry:
    """Patch layout (hi/lo shapes, scale, output window) for extraction."""
    return PatchGeometry(
        hi_shape=cfg.hi_patch_shape,
        lo_shape=cfg.lo_patch_shape,
        scale=cfg.downsample_factor,
        out_shape=check_geometry(cfg),
    )


def _layer_specs(cfg: BackboneConfig):
    """Ordered (name, weight shape) pairs defining the parameter schema."""
    specs = []
    for path in ("hi", "lo"):
        in_ch = 1
        for i in range(NUM_CONV_LAYERS):
            out_ch = cfg.conv_filters[i]
            kx, ky, kz = cfg.kernels[i]
            specs.append((f"{path}.conv{i}.w", (out_ch, in_ch, kx, ky, kz)))
            specs.append((f"{path}.conv{i}.b", (out_ch,)))
            in_ch = out_ch
    cat_ch = 2 * cfg.conv_filters[-1]
    f0, f1 = cfg.fc_filters
    specs.append(("fc0.w", (f0, cat_ch, 1, 1, 1)))
    specs.append(("fc0.b", (f0,)))
    specs.append(("fc1.w", (f1, f0, 1, 1, 1)))
    specs.append(("fc1.b", (f1,)))
    specs.append(("cls.w", (cfg.num_classes, f1, 1, 1, 1)))
    specs.append(("cls.b", (cfg.num_classes,)))
    return specs


def init_weights(cfg: BackboneConfig) -> ModelWeights:
    """Fan-in-scaled Gaussian kernels, zero biases, deterministic in seed."""
    check_geometry(cfg)
    rng = np.random.default_rng(cfg.init_seed)
    dtype = cfg.np_dtype
    entries = {}
    for name, shape in _layer_specs(cfg):
        if name.endswith(".b"):
            entries[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            entries[name] = (std * rng.standard_normal(shape)).astype(dtype)
    return ModelWeights(entries)


def _activate(x: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    if cfg.activation == "relu":
        return np.maximum(x, 0)
    slope = np.asarray(cfg.leaky_slope, dtype=x.dtype)
    return np.where(x > 0, x, slope * x)


def _activate_grad(pre: np.ndarray, g: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    if cfg.activation == "relu":
        return np.where(pre > 0, g, 0)
    slope = np.asarray(cfg.leaky_slope, dtype=g.dtype)
    return np.where(pre > 0, g, slope * g)


def _upsample_crop(x: np.ndarray, scale: int, target: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbor repeat by ``scale``, then floor-biased center crop."""
    up = x
    for ax in (1, 2, 3):
        up = np.repeat(up, scale, axis=ax)
    starts = [(up.shape[1 + ax] - target[ax]) // 2 for ax in range(3)]
    return up[
        :,
        starts[0] : starts[0] + target[0],
        starts[1] : starts[1] + target[1],
        starts[2] : starts[2] + target[2],
    ]


def _upsample_crop_grad(
    g: np.ndarray, scale: int, lo_shape: tuple[int, int, int]
) -> np.ndarray:
    """Adjoint of _upsample_crop: embed the crop, then sum each repeat block."""
    ch = g.shape[0]
    up_shape = tuple(s * scale for s in lo_shape)
    full = np.zeros((ch,) + up_shape, dtype=g.dtype)
    starts = [(up_shape[ax] - g.shape[1 + ax]) // 2 for ax in range(3)]
    full[
        :,
        starts[0] : starts[0] + g.shape[1],
        starts[1] : starts[1] + g.shape[2],
        starts[2] : starts[2] + g.shape[3],
    ] = g
    blocked = full.reshape(ch, lo_shape[0], scale, lo_shape[1], scale, lo_shape[2], scale)
    return blocked.sum(axis=(2, 4, 6))


def _softmax_channels(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def _check_patch(cfg: BackboneConfig, p: PatchPair):
    if p.hi_res.shape != cfg.hi_patch_shape or p.lo_res.shape != cfg.lo_patch_shape:
        raise GeometryError(
            f"patch shapes {p.hi_res.shape}/{p.lo_res.shape} do not match configured "
            f"{cfg.hi_patch_shape}/{cfg.lo_patch_shape}"
        )


def _path_forward(weights, path, x, cfg, cache):
    for i in range(NUM_CONV_LAYERS):
        w = weights[f"{path}.conv{i}.w"]
        b = weights[f"{path}.conv{i}.b"]
        pre = _kernels.conv3d_forward(x, w, b)
        if cache is not None:
            cache.append((x, pre))
        x = _activate(pre, cfg)
    return x


def _forward_impl(weights: ModelWeights, p: PatchPair, cfg: BackboneConfig, want_cache: bool):
    _check_patch(cfg, p)
    out_shape = check_geometry(cfg)
    dtype = cfg.np_dtype
    scale = cfg.downsample_factor

    hi_cache = [] if want_cache else None
    lo_cache = [] if want_cache else None
    hi = _path_forward(weights, "hi", p.hi_res.astype(dtype)[None], cfg, hi_cache)
    lo = _path_forward(weights, "lo", p.lo_res.astype(dtype)[None], cfg, lo_cache)
    lo_up = _upsample_crop(lo, scale, out_shape)
    cat = np.concatenate([hi, lo_up], axis=0)

    fc_cache = [] if want_cache else None
    x = cat
    for name in ("fc0", "fc1"):
        pre = _kernels.conv3d_forward(x, weights[f"{name}.w"], weights[f"{name}.b"])
        if want_cache:
            fc_cache.append((x, pre))
        x = _activate(pre, cfg)
    logits = _kernels.conv3d_forward(x, weights["cls.w"], weights["cls.b"])
    probs = _softmax_channels(logits)
    cache = None
    if want_cache:
        cache = {
            "hi": hi_cache,
            "lo": lo_cache,
            "lo_out_shape": lo.shape[1:],
            "fc": fc_cache,
            "cls_in": x,
            "probs": probs,
        }
    return probs, cache


def forward(weights: ModelWeights, p: PatchPair, cfg: BackboneConfig) -> ProbabilityMap:
    """Run both pathways and return the per-voxel class probabilities."""
    probs, _ = _forward_impl(weights, p, cfg, want_cache=False)
    return ProbabilityMap(probs)


def forward_cached(weights: ModelWeights, p: PatchPair, cfg: BackboneConfig):
    """Forward pass that also returns the activation cache consumed by
    :func:`backward_from_cache` (avoids recomputing the forward pass when
    the upstream gradient depends on the forward output)."""
    probs, cache = _forward_impl(weights, p, cfg, want_cache=True)
    return ProbabilityMap(probs), cache


def forward_with_gradients(
    weights: ModelWeights,
    p: PatchPair,
    upstream: np.ndarray,
    cfg: BackboneConfig,
) -> ModelWeights:
    """Gradient of a scalar loss with respect to every weight entry.

    ``upstream`` is d loss / d probability, shaped like the output map; the
    softmax Jacobian and the full network are applied behind it.
    """
    _, cache = _forward_impl(weights, p, cfg, want_cache=True)
    return backward_from_cache(weights, cache, upstream, cfg)


def backward_from_cache(
    weights: ModelWeights,
    cache: dict,
    upstream: np.ndarray,
    cfg: BackboneConfig,
) -> ModelWeights:
    probs = cache["probs"]
    if upstream.shape != probs.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output {probs.shape}")
    dtype = cfg.np_dtype
    u = upstream.astype(dtype, copy=False)

    grads: dict[str, np.ndarray] = {}
    # Softmax backward: dL/dz_i = p_i (u_i - sum_j u_j p_j)
    inner = (u * probs).sum(axis=0, keepdims=True)
    gz = probs * (u - inner)

    gx, gw, gb = _kernels.conv3d_backward(cache["cls_in"], weights["cls.w"], gz)
    grads["cls.w"], grads["cls.b"] = gw, gb
    for idx, name in ((1, "fc1"), (0, "fc0")):
        x_in, pre = cache["fc"][idx]
        g = _activate_grad(pre, gx, cfg)
        gx, gw, gb = _kernels.conv3d_backward(x_in, weights[f"{name}.w"], g)
        grads[f"{name}.w"], grads[f"{name}.b"] = gw, gb

    hi_ch = weights["hi.conv7.w"].shape[0]
    g_hi = gx[:hi_ch]
    g_lo = _upsample_crop_grad(gx[hi_ch:], cfg.downsample_factor, cache["lo_out_shape"])

    for path, g in (("hi", g_hi), ("lo", g_lo)):
        for i in reversed(range(NUM_CONV_LAYERS)):
            x_in, pre = cache[path][i]
            g = _activate_grad(pre, g, cfg)
            g, gw, gb = _kernels.conv3d_backward(x_in, weights[f"{path}.conv{i}.w"], g)
            grads[f"{path}.conv{i}.w"], grads[f"{path}.conv{i}.b"] = gw, gb

    ordered = {name: grads[name] for name, _ in _layer_specs(cfg)}
    return ModelWeights(ordered)
