"""Test-time inference, Dice metrics, paired significance testing, and
experiment reporting.

Whole volumes are segmented by tiling forward passes: output windows are
stitched onto a probability canvas in a fixed x-major order (overlaps
resolved by last write), then argmaxed.  Evaluation Dice is hard Dice on
the argmax labels, distinct from the soft Dice used in training.

The Student-t CDF is computed from scratch via the regularized incomplete
beta function (Lentz continued fraction); tests validate it against an
independent reference implementation.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, forward, patch_geometry
from .domain import AnnotatedSample, LabelMap, ModelWeights, Volume
from .errors import (
    EvaluationError,
    PairingError,
    SampleSizeError,
    ShapeError,
)
from .synthdata import extract_patch_pair

SIGNIFICANCE_LEVEL = 0.05


def _eval_threads() -> int:
    cap = os.environ.get("MTSEG_THREADS")
    ncpu = os.cpu_count() or 1
    if cap is None:
        return min(4, ncpu)
    try:
        return max(1, min(int(cap), ncpu))
    except ValueError:
        return min(4, ncpu)


def _tile_starts(extent: int, window: int) -> list[int]:
    """Window start offsets covering [0, extent) with a clamped final tile."""
    starts = []
    pos = 0
    while pos + window < extent:
        starts.append(pos)
        pos += window
    starts.append(max(0, extent - window))
    return starts


def tiled_probabilities(
    weights: ModelWeights,
    volume: Volume,
    cfg: BackboneConfig,
    lo_mode: str = "mean",
) -> np.ndarray:
    """Stitched per-voxel class probabilities for a whole volume."""
    geom = patch_geometry(cfg)
    out = geom.out_shape
    canvas = np.zeros((cfg.num_classes,) + volume.shape, dtype=cfg.np_dtype)
    axis_starts = [_tile_starts(volume.shape[ax], out[ax]) for ax in range(3)]
    for sx, sy, sz in product(*axis_starts):
        center = (sx + out[0] // 2, sy + out[1] // 2, sz + out[2] // 2)
        patch = extract_patch_pair(volume, center, geom, lo_mode=lo_mode)
        probs = forward(weights, patch, cfg).probs
        # clip the window to the canvas (windows can only overhang when the
        # volume is smaller than the output window)
        dst, src = [], []
        for ax, start in enumerate((sx, sy, sz)):
            hi = min(start + out[ax], volume.shape[ax])
            dst.append(slice(start, hi))
            src.append(slice(0, hi - start))
        canvas[(slice(None),) + tuple(dst)] = probs[(slice(None),) + tuple(src)]
    return canvas


def segment_volume(
    weights: ModelWeights,
    volume: Volume,
    cfg: BackboneConfig,
    lo_mode: str = "mean",
) -> LabelMap:
    """Tiled inference + per-voxel argmax; out-of-mask voxels forced to 0."""
    probs = tiled_probabilities(weights, volume, cfg, lo_mode)
    labels = np.argmax(probs, axis=0).astype(np.int32)
    if volume.mask is not None:
        labels[~volume.mask] = 0
    return LabelMap(labels, cfg.num_classes)


def dice_coefficient(pred: LabelMap, ref: LabelMap, label: int = 1) -> float:
    """Hard Dice overlap 2|P∩R| / (|P|+|R|) for one label value.

    When the label is absent from both maps the result is 1.0 (perfect
    agreement on absence); see flagged_empty in evaluate_model.
    """
    if pred.shape != ref.shape:
        raise ShapeError(f"label maps disagree in shape: {pred.shape} vs {ref.shape}")
    p = pred.labels == label
    r = ref.labels == label
    denom = int(p.sum()) + int(r.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & r).sum()) / denom


# --- Student-t machinery -------------------------------------------------

_BETACF_MAX_ITER = 300
_BETACF_EPS = 1e-15
_BETACF_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETACF_FPMIN:
        d = _BETACF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise EvaluationError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), accurate to ~1e-12 for moderate a, b."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: int) -> float:
    """Two-sided tail probability of the t distribution."""
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test on the differences a - b.

    Conventions for degenerate inputs: all-zero differences give
    (t, p) = (0, 1); constant nonzero differences give (±inf, 0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise PairingError("paired samples must be 1D sequences of equal length")
    n = len(a)
    if n < 2:
        raise SampleSizeError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return t, student_t_two_sided_p(t, n - 1)


# --- Per-run evaluation ---------------------------------------------------


@dataclass(frozen=True)
class ScanResult:
    scan_id: str
    dice: float
    flagged_empty: bool
    predicted: LabelMap | None = None
    reference: LabelMap | None = None


@dataclass(frozen=True)
class EvalSummary:
    """Per-scan Dice results of one method on one test set."""

    method: str
    results: tuple[ScanResult, ...]

    @property
    def scan_ids(self) -> list[str]:
        return [r.scan_id for r in self.results]

    @property
    def dices(self) -> np.ndarray:
        return np.array([r.dice for r in self.results], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.dices.mean())

    @property
    def std(self) -> float:
        # sample std over scans (n-1 denominator); 0 for a single scan
        if len(self.results) < 2:
            return 0.0
        return float(self.dices.std(ddof=1))

    @property
    def degenerate_std(self) -> bool:
        return len(self.results) < 2


def evaluate_model(
    weights: ModelWeights,
    test_samples: list[AnnotatedSample],
    cfg: BackboneConfig,
    method: str = "model",
    lo_mode: str = "mean",
    lesion_label: int = 1,
    scan_ids: list[str] | None = None,
    keep_maps: bool = False,
) -> EvalSummary:
    """Per-scan lesion Dice over a test set (parallel across scans)."""
    if not test_samples:
        raise EvaluationError("test set is empty")
    if scan_ids is None:
        scan_ids = [f"scan_{i:03d}" for i in range(len(test_samples))]
    if len(scan_ids) != len(test_samples):
        raise EvaluationError("scan_ids length must match the test set")

    def _one(item) -> ScanResult:
        sid, sample = item
        pred = segment_volume(weights, sample.volume, cfg, lo_mode)
        ref = sample.annotation
        empty = not (pred.labels == lesion_label).any() and not (
            ref.labels == lesion_label
        ).any()
        return ScanResult(
            sid,
            dice_coefficient(pred, ref, lesion_label),
            empty,
            pred if keep_maps else None,
            ref if keep_maps else None,
        )

    items = list(zip(scan_ids, test_samples))
    workers = _eval_threads()
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, items))
    else:
        results = [_one(it) for it in items]
    return EvalSummary(method, tuple(results))


def write_per_scan_csv(summary: EvalSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "scan_id", "dice", "flagged_empty"])
        for r in summary.results:
            writer.writerow([summary.method, r.scan_id, f"{r.dice:.10f}", int(r.flagged_empty)])


def read_per_scan_csv(path) -> EvalSummary:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EvaluationError(f"{path}: no per-scan rows")
    methods = {row["method"] for row in rows}
    if len(methods) != 1:
        raise EvaluationError(f"{path}: expected one method per file, got {methods}")
    results = tuple(
        ScanResult(row["scan_id"], float(row["dice"]), bool(int(row["flagged_empty"])))
        for row in rows
    )
    return EvalSummary(methods.pop(), results)


def write_summary_csv(summaries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "n", "mean", "std"])
        for s in summaries:
            writer.writerow([s.method, len(s.results), f"{s.mean:.10f}", f"{s.std:.10f}"])


@dataclass(frozen=True)
class PairwiseComparison:
    method_a: str
    method_b: str
    t: float
    p: float
    significant: bool


@dataclass(frozen=True)
class ComparisonReport:
    summaries: tuple[EvalSummary, ...]
    pairs: tuple[PairwiseComparison, ...]

    def as_text(self) -> str:
        lines = ["method            n   dice (mean ± std)"]
        for s in self.summaries:
            star = ""
            if any(
                p.significant and s.method in (p.method_a, p.method_b) for p in self.pairs
            ):
                star = " *"
            lines.append(
                f"{s.method:<16} {len(s.results):>3}  {s.mean:.4f} ± {s.std:.4f}{star}"
            )
        lines.append("")
        lines.append("pairwise paired t-tests (two-sided):")
        for pair in self.pairs:
            marker = " *" if pair.significant else ""
            lines.append(
                f"  {pair.method_a} vs {pair.method_b}: t={pair.t:.4f}  p={pair.p:.4f}{marker}"
            )
        return "\n".join(lines)


def compare_runs(summaries: list[EvalSummary]) -> ComparisonReport:
    """Pairwise paired t-tests between methods on identical scan sets."""
    if len(summaries) < 2:
        raise PairingError("need at least two summaries to compare")
    base_ids = summaries[0].scan_ids
    base_set = set(base_ids)
    aligned = []
    for s in summaries:
        if set(s.scan_ids) != base_set:
            raise PairingError(
                f"scan sets differ between {summaries[0].method} and {s.method}"
            )
        by_id = {r.scan_id: r.dice for r in s.results}
        aligned.append(np.array([by_id[i] for i in base_ids]))
    pairs = []
    for i in range(len(summaries)):
        for j in range(i + 1, len(summaries)):
            t, p = paired_t_test(aligned[i], aligned[j])
            pairs.append(
                PairwiseComparison(
                    summaries[i].method,
                    summaries[j].method,
                    t,
                    p,
                    p < SIGNIFICANCE_LEVEL,
                )
            )
    return ComparisonReport(tuple(summaries), tuple(pairs))


def write_comparison_csv(report: ComparisonReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method_a", "method_b", "t", "p", "significant"])
        for pair in report.pairs:
            writer.writerow(
                [pair.method_a, pair.method_b, f"{pair.t:.10g}", f"{pair.p:.10g}", int(pair.significant)]
            )


def plot_training_curves(metrics_csv, out_path, ramp_length: int | None = None, max_points: int = 2000):
    """Two-series plot (student vs teacher train Dice over steps) plus the
    plotted series as CSV; marks the ramp-up boundary when given."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(metrics_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EvaluationError(f"{metrics_csv}: empty metrics stream")
    steps = [int(r["step"]) for r in rows]
    student = [float(r["student_train_dice"]) for r in rows]
    teacher = [float(r["teacher_train_dice"]) for r in rows]
    stride = max(1, len(steps) // max_points)
    steps, student, teacher = steps[::stride], student[::stride], teacher[::stride]

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, student, label="student", color="tab:blue")
    ax.plot(steps, teacher, label="teacher", color="tab:orange")
    if ramp_length is not None:
        ax.axvline(ramp_length, color="gray", linestyle="--", label=f"ramp-up end (L={ramp_length})")
    ax.set_xlabel("training step")
    ax.set_ylabel("train Dice")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)

    series_path = out_path.with_suffix(".csv")
    with open(series_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "student_train_dice", "teacher_train_dice"])
        for s, sd, td in zip(steps, student, teacher):
            writer.writerow([s, f"{sd:.6f}", f"{td:.6f}"])
    return out_path, series_path
