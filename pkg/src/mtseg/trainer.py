"""Mean-teacher training loop.

The run has two phases.  A supervised pretraining phase fits the network
on annotated patches only (no noise).  The mean-teacher phase then
initializes the teacher as a copy of the pretrained student, attaches
pseudo-lesion maps to the unannotated pool (predictions of the pretrained
model, used only to balance patch sampling), and alternates: one RMSProp
update of the student on the weighted sum of the supervised and
consistency losses, then one EMA update of the teacher.  The teacher
receives no gradients anywhere; its outputs enter the consistency loss as
constant targets.

Determinism: batch composition draws from one mutable generator carried in
TrainState (serialized into checkpoints), while per-step noise comes from
streams derived from (master_seed, phase, step, role) with distinct role
labels for student and teacher.  Resuming from a checkpoint therefore
reproduces the uninterrupted run bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation
from .backbone import BackboneConfig, backward_from_cache, forward_cached, init_weights, patch_geometry
from .domain import (
    AnnotatedSample,
    LabelMap,
    ModelWeights,
    PatchPair,
    UnannotatedSample,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    MissingPseudoLabelsError,
    SchemaMismatchError,
)
from .losses import (
    EmaSchedule,
    RampSchedule,
    alpha,
    beta,
    consistency_loss,
    consistency_loss_grad,
    segmentation_loss,
    segmentation_loss_grad,
)
from .synthdata import extract_patch_pair, sample_training_centers

CHECKPOINT_VERSION = 1

PHASE_PRETRAIN = "pretrain"
PHASE_MT = "mt"

# role labels for derived noise streams
_ROLE_STUDENT = 1
_ROLE_TEACHER = 2
_PHASE_CODE = {PHASE_PRETRAIN: 0, PHASE_MT: 1}


@dataclass(frozen=True)
class NoiseConfig:
    """Per-voxel input noise: I' = (I + eta_s) * eta_m."""

    additive_std: float = 0.05
    multiplicative_std: float = 0.01

    def __post_init__(self):
        if self.additive_std < 0 or self.multiplicative_std < 0:
            raise ConfigError("noise standard deviations must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "rmsprop"
    learning_rate: float = 1e-4
    decay_rate: float = 0.9
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind != "rmsprop":
            raise ConfigError(f"unsupported optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0.0 < self.decay_rate < 1.0):
            raise ConfigError("decay_rate must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")


@dataclass(frozen=True)
class TrainerConfig:
    pretrain_steps: int = 250
    mt_steps: int = 500
    batch_annotated: int = 8
    batch_unannotated: int = 8
    optimizer: OptimizerConfig = OptimizerConfig()
    noise: NoiseConfig = NoiseConfig()
    ramp_length: int = 400
    alpha_rampup: float = 0.99
    alpha_after: float = 0.999
    consistency_scale: float = 1.0
    include_background: bool = True
    pseudo_refresh_every: int = 0
    monitor_every: int = 25
    monitor_volumes: int = 2
    checkpoint_every: int = 0
    seed: int = 0
    weight_limit: float = 1e6
    lo_patch_mode: str = "mean"

    def __post_init__(self):
        if self.pretrain_steps < 0 or self.mt_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.batch_annotated < 1:
            raise ConfigError("batch_annotated must be >= 1")
        if self.batch_unannotated < 0:
            raise ConfigError("batch_unannotated must be >= 0")
        if self.monitor_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("cadence values must be >= 0")
        if self.consistency_scale < 0:
            raise ConfigError("consistency_scale must be >= 0")
        if self.lo_patch_mode not in ("mean", "decimate"):
            raise ConfigError("lo_patch_mode must be 'mean' or 'decimate'")

    def ramp(self) -> RampSchedule:
        return RampSchedule(self.ramp_length)

    def ema(self) -> EmaSchedule:
        return EmaSchedule(self.ramp_length, self.alpha_rampup, self.alpha_after)


@dataclass
class Batch:
    annotated: list[PatchPair]
    unannotated: list[PatchPair]

    def __len__(self) -> int:
        return len(self.annotated) + len(self.unannotated)


@dataclass
class TrainState:
    """Everything mutated by the training loop.

    The backbone config rides along so checkpoints are self-describing:
    evaluation can rebuild the network geometry from the file alone.
    """

    phase: str
    step: int  # completed mean-teacher student updates
    pretrain_step: int  # completed supervised pretraining updates
    student: ModelWeights
    teacher: ModelWeights
    opt_state: dict
    rng: np.random.Generator
    ramp: RampSchedule
    ema: EmaSchedule
    master_seed: int
    backbone: BackboneConfig
    history: list = field(default_factory=list)
    pseudo_labels: dict | None = None  # unannotated index -> uint8 labels

    def __post_init__(self):
        if self.student.schema_id != self.teacher.schema_id:
            raise SchemaMismatchError("student and teacher schemas differ")
        if self.step < 0 or self.pretrain_step < 0:
            raise ValueError("step counters must be >= 0")


@dataclass
class TrainResult:
    final: ModelWeights
    teacher: ModelWeights
    student: ModelWeights
    state: TrainState
    history: list
    monitor_rows: list


METRICS_COLUMNS = (
    "step",
    "L_s",
    "L_c",
    "beta",
    "alpha",
    "student_train_dice",
    "teacher_train_dice",
)


def _noise_rng(master_seed: int, phase: str, step: int, role: int) -> np.random.Generator:
    seq = np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=(_PHASE_CODE[phase], int(step), int(role))
    )
    return np.random.default_rng(seq)


def init_train_state(bk_cfg: BackboneConfig, tr_cfg: TrainerConfig) -> TrainState:
    weights = init_weights(bk_cfg)
    opt_state = {name: np.zeros_like(arr) for name, arr in weights.items()}
    return TrainState(
        phase=PHASE_PRETRAIN,
        step=0,
        pretrain_step=0,
        student=weights,
        teacher=weights.copy(),
        opt_state=opt_state,
        rng=np.random.default_rng(tr_cfg.seed),
        ramp=tr_cfg.ramp(),
        ema=tr_cfg.ema(),
        master_seed=tr_cfg.seed,
        backbone=bk_cfg,
    )


def inject_noise(patch: PatchPair, nc: NoiseConfig, rng: np.random.Generator) -> PatchPair:
    """Apply I' = (I + eta_s) * eta_m voxelwise with independent draws for
    the hi-res and lo-res patches.  Zero stds return the patch unchanged."""
    if nc.additive_std == 0.0 and nc.multiplicative_std == 0.0:
        return patch
    # draw order is fixed (hi additive, hi multiplicative, lo additive,
    # lo multiplicative) so runs are reproducible
    out = []
    for arr in (patch.hi_res, patch.lo_res):
        eta_s = rng.normal(0.0, nc.additive_std, size=arr.shape)
        eta_m = rng.normal(1.0, nc.multiplicative_std, size=arr.shape)
        out.append(((arr.astype(np.float64) + eta_s) * eta_m).astype(np.float32))
    return PatchPair(out[0], out[1], patch.target_window, patch.center)


def _draw_annotated_patch(annotated, state, geom, tr_cfg) -> PatchPair:
    sample = annotated[int(state.rng.integers(len(annotated)))]
    center = sample_training_centers(sample, 1, state.rng)[0]
    return extract_patch_pair(
        sample.volume, center, geom, target_labels=sample.annotation, lo_mode=tr_cfg.lo_patch_mode
    )


def _draw_unannotated_patch(unannotated, state, geom, tr_cfg) -> PatchPair:
    sample = unannotated[int(state.rng.integers(len(unannotated)))]
    if sample.pseudo_lesion is None:
        raise MissingPseudoLabelsError(
            "unannotated sample has no pseudo-lesion map; run refresh_pseudo_labels first"
        )
    center = sample_training_centers(sample, 1, state.rng)[0]
    return extract_patch_pair(sample.volume, center, geom, lo_mode=tr_cfg.lo_patch_mode)


def assemble_batch(
    annotated: list[AnnotatedSample],
    unannotated: list[UnannotatedSample],
    state: TrainState,
    bk_cfg: BackboneConfig,
    tr_cfg: TrainerConfig,
) -> Batch:
    """Mixed half-batches with balanced lesion/healthy centers.

    Annotated patches carry their target label windows; unannotated
    patches carry none (their centers come from the pseudo-lesion maps).
    """
    if not annotated:
        raise ConfigError("annotated pool is empty")
    if tr_cfg.batch_unannotated > 0 and not unannotated:
        raise ConfigError("unannotated pool is empty but batch_unannotated > 0")
    geom = patch_geometry(bk_cfg)
    ann = [
        _draw_annotated_patch(annotated, state, geom, tr_cfg)
        for _ in range(tr_cfg.batch_annotated)
    ]
    unann = [
        _draw_unannotated_patch(unannotated, state, geom, tr_cfg)
        for _ in range(tr_cfg.batch_unannotated)
    ]
    return Batch(ann, unann)


def _assemble_supervised_batch(annotated, state, bk_cfg, tr_cfg) -> Batch:
    """Pretraining batch: the full batch budget, all annotated, no noise."""
    if not annotated:
        raise ConfigError("annotated pool is empty")
    geom = patch_geometry(bk_cfg)
    n = tr_cfg.batch_annotated + tr_cfg.batch_unannotated
    return Batch([_draw_annotated_patch(annotated, state, geom, tr_cfg) for _ in range(n)], [])


def refresh_pseudo_labels(
    unannotated: list[UnannotatedSample],
    weights: ModelWeights,
    bk_cfg: BackboneConfig,
    lo_mode: str = "mean",
) -> list[UnannotatedSample]:
    """Attach argmaxed tiled predictions as pseudo-lesion maps."""
    out = []
    for sample in unannotated:
        labels = evaluation.segment_volume(weights, sample.volume, bk_cfg, lo_mode)
        out.append(sample.with_pseudo_lesion(labels))
    return out


def _accumulate(total: dict, grads: ModelWeights):
    for name, g in grads.items():
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g


def _rmsprop_apply(state: TrainState, grads: dict, opt: OptimizerConfig, limit: float):
    new_entries = {}
    for name, w in state.student.items():
        g = grads[name].astype(w.dtype, copy=False)
        ms = state.opt_state[name]
        ms *= opt.decay_rate
        ms += (1.0 - opt.decay_rate) * g * g
        new_w = w - opt.learning_rate * g / (np.sqrt(ms) + opt.epsilon)
        if not np.all(np.isfinite(new_w)):
            raise DivergenceError(f"non-finite weights in {name!r} after update")
        if np.abs(new_w).max() > limit:
            raise DivergenceError(f"weight magnitude exceeded {limit:g} in {name!r}")
        new_entries[name] = new_w
    state.student = ModelWeights(new_entries)


def _supervised_step(state: TrainState, batch: Batch, bk_cfg: BackboneConfig, tr_cfg: TrainerConfig):
    """One pretraining update: cross-entropy on annotated patches only."""
    n = len(batch.annotated)
    grads: dict = {}
    ls_acc = 0.0
    for patch in batch.annotated:
        probs, cache = forward_cached(state.student, patch, bk_cfg)
        ls_acc += segmentation_loss(probs, patch.target_window)
        upstream = segmentation_loss_grad(probs, patch.target_window) / n
        _accumulate(grads, backward_from_cache(state.student, cache, upstream, bk_cfg))
    ls = ls_acc / n
    if not np.isfinite(ls):
        raise DivergenceError(f"non-finite supervised loss {ls}")
    _rmsprop_apply(state, grads, tr_cfg.optimizer, tr_cfg.weight_limit)
    state.pretrain_step += 1
    state.history.append(
        {
            "phase": PHASE_PRETRAIN,
            "step": state.pretrain_step,
            "loss_s": ls,
            "loss_c": 0.0,
            "beta": 0.0,
        }
    )


def student_step(
    state: TrainState,
    batch: Batch,
    bk_cfg: BackboneConfig,
    tr_cfg: TrainerConfig,
) -> None:
    """One mean-teacher student update.

    Supervised half: clean annotated patches through the student.
    Consistency half: the same unannotated patch fed to student and teacher
    under independent noise draws; the teacher output is a constant target,
    so no gradient reaches the teacher weights.
    """
    b = beta(state.step, state.ramp) * tr_cfg.consistency_scale
    n_a = len(batch.annotated)
    n_u = len(batch.unannotated)
    grads: dict = {}

    ls = 0.0
    if n_a:
        acc = 0.0
        for patch in batch.annotated:
            if patch.target_window is None:
                raise ConfigError("annotated patch lacks a target window")
            probs, cache = forward_cached(state.student, patch, bk_cfg)
            acc += segmentation_loss(probs, patch.target_window)
            upstream = segmentation_loss_grad(probs, patch.target_window) / n_a
            _accumulate(grads, backward_from_cache(state.student, cache, upstream, bk_cfg))
        ls = acc / n_a

    lc = 0.0
    if n_u:
        rng_student = _noise_rng(state.master_seed, PHASE_MT, state.step, _ROLE_STUDENT)
        rng_teacher = _noise_rng(state.master_seed, PHASE_MT, state.step, _ROLE_TEACHER)
        acc = 0.0
        for patch in batch.unannotated:
            noisy_s = inject_noise(patch, tr_cfg.noise, rng_student)
            noisy_t = inject_noise(patch, tr_cfg.noise, rng_teacher)
            p_student, cache = forward_cached(state.student, noisy_s, bk_cfg)
            p_teacher, _ = forward_cached(state.teacher, noisy_t, bk_cfg)
            acc += consistency_loss(p_student, p_teacher, tr_cfg.include_background)
            if b != 0.0:
                upstream = (
                    b
                    * consistency_loss_grad(p_student, p_teacher, tr_cfg.include_background)
                    / n_u
                )
                _accumulate(grads, backward_from_cache(state.student, cache, upstream, bk_cfg))
        lc = acc / n_u

    total = ls + b * lc
    if not np.isfinite(total):
        raise DivergenceError(f"non-finite total loss {total} at step {state.step}")
    _rmsprop_apply(state, grads, tr_cfg.optimizer, tr_cfg.weight_limit)
    state.step += 1
    state.history.append(
        {
            "phase": PHASE_MT,
            "step": state.step,
            "loss_s": ls,
            "loss_c": lc,
            "beta": b,
        }
    )


def teacher_step(state: TrainState) -> None:
    """EMA update of every teacher parameter from the current student."""
    if state.student.schema_id != state.teacher.schema_id:
        raise SchemaMismatchError("student and teacher schemas differ")
    a = alpha(state.step, state.ema)
    new_entries = {
        name: a * t + (1.0 - a) * state.student[name] for name, t in state.teacher.items()
    }
    state.teacher = ModelWeights(new_entries)


def pretrain(
    annotated: list[AnnotatedSample],
    bk_cfg: BackboneConfig,
    tr_cfg: TrainerConfig,
    steps: int | None = None,
) -> ModelWeights:
    """Supervised-only training from scratch; the mean-teacher run starts
    from these weights."""
    if not annotated:
        raise ConfigError("pretraining requires at least one annotated sample")
    state = init_train_state(bk_cfg, tr_cfg)
    total = tr_cfg.pretrain_steps if steps is None else int(steps)
    for _ in range(total):
        batch = _assemble_supervised_batch(annotated, state, bk_cfg, tr_cfg)
        _supervised_step(state, batch, bk_cfg, tr_cfg)
    return state.student


def _monitor_dice(weights, samples, bk_cfg, lo_mode) -> float:
    dices = [
        evaluation.dice_coefficient(
            evaluation.segment_volume(weights, s.volume, bk_cfg, lo_mode), s.annotation
        )
        for s in samples
    ]
    return float(np.mean(dices))


class _MetricsWriter:
    """Append-only CSV stream of monitoring rows."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.write_text(",".join(METRICS_COLUMNS) + "\n")

    def write(self, row: dict):
        if not self.path:
            return
        with open(self.path, "a") as fh:
            fh.write(
                "{step},{L_s:.8f},{L_c:.8f},{beta:.8f},{alpha:.6f},"
                "{student_train_dice:.6f},{teacher_train_dice:.6f}\n".format(**row)
            )


def _apply_pseudo_labels(unannotated, state, num_classes) -> list[UnannotatedSample]:
    if state.pseudo_labels is None:
        raise CheckpointError("mean-teacher state carries no pseudo-label maps")
    if len(state.pseudo_labels) != len(unannotated):
        raise CheckpointError(
            "checkpoint pseudo-label count does not match the unannotated pool"
        )
    return [
        s.with_pseudo_lesion(LabelMap(state.pseudo_labels[i].astype(np.int32), num_classes))
        for i, s in enumerate(unannotated)
    ]


def _store_pseudo_labels(state: TrainState, samples: list[UnannotatedSample]):
    state.pseudo_labels = {
        i: s.pseudo_lesion.labels.astype(np.uint8) for i, s in enumerate(samples)
    }


def train(
    annotated: list[AnnotatedSample],
    unannotated: list[UnannotatedSample],
    bk_cfg: BackboneConfig,
    tr_cfg: TrainerConfig,
    mode: str = "mean-teacher",
    metrics_path=None,
    checkpoint_path=None,
    resume_state: TrainState | None = None,
    step_hook=None,
) -> TrainResult:
    """Full training driver for both run modes.

    ``mean-teacher``: pretrain, then alternate student/teacher updates for
    ``mt_steps``; the returned ``final`` weights are the teacher's.
    ``supervised-only``: the same supervised loop continued for
    ``pretrain_steps + mt_steps`` updates (the no-unannotated-data
    baseline; identical to the mean-teacher run up to the branch point).

    ``step_hook(state)`` runs after every completed update pair (used for
    snapshotting); checkpoints go to ``checkpoint_path`` every
    ``checkpoint_every`` steps and at the end.
    """
    if mode not in ("mean-teacher", "supervised-only"):
        raise ConfigError(f"unknown training mode {mode!r}")
    if not annotated:
        raise ConfigError("training requires at least one annotated sample")
    if mode == "mean-teacher" and tr_cfg.batch_unannotated > 0 and not unannotated:
        raise ConfigError("mean-teacher mode needs unannotated samples (or batch_unannotated=0)")

    state = resume_state if resume_state is not None else init_train_state(bk_cfg, tr_cfg)
    if resume_state is not None and state.backbone != bk_cfg:
        raise CheckpointError("checkpoint backbone config does not match the configured backbone")

    writer = _MetricsWriter(metrics_path)
    monitor_samples = annotated[: max(1, min(tr_cfg.monitor_volumes, len(annotated)))]
    supervised_total = tr_cfg.pretrain_steps + (tr_cfg.mt_steps if mode == "supervised-only" else 0)

    def _save(path):
        if path:
            save_checkpoint(state, path)

    # --- supervised phase -------------------------------------------------
    while state.phase == PHASE_PRETRAIN and state.pretrain_step < supervised_total:
        batch = _assemble_supervised_batch(annotated, state, bk_cfg, tr_cfg)
        _supervised_step(state, batch, bk_cfg, tr_cfg)
        if (
            mode == "supervised-only"
            and tr_cfg.monitor_every
            and state.pretrain_step % tr_cfg.monitor_every == 0
        ):
            dice = _monitor_dice(state.student, monitor_samples, bk_cfg, tr_cfg.lo_patch_mode)
            last = state.history[-1]
            writer.write(
                {
                    "step": state.pretrain_step,
                    "L_s": last["loss_s"],
                    "L_c": 0.0,
                    "beta": 0.0,
                    "alpha": 0.0,
                    "student_train_dice": dice,
                    "teacher_train_dice": dice,
                }
            )
        if tr_cfg.checkpoint_every and state.pretrain_step % tr_cfg.checkpoint_every == 0:
            state.teacher = state.student.copy()
            _save(checkpoint_path)

    if mode == "supervised-only":
        state.teacher = state.student.copy()
        _save(checkpoint_path)
        return TrainResult(
            final=state.student,
            teacher=state.teacher,
            student=state.student,
            state=state,
            history=state.history,
            monitor_rows=[],
        )

    # --- branch into the mean-teacher phase -------------------------------
    if state.phase == PHASE_PRETRAIN:
        state.teacher = state.student.copy()
        state.phase = PHASE_MT
        if unannotated:
            refreshed = refresh_pseudo_labels(
                unannotated, state.student, bk_cfg, tr_cfg.lo_patch_mode
            )
            _store_pseudo_labels(state, refreshed)
            unannotated = refreshed
    elif unannotated:
        unannotated = _apply_pseudo_labels(unannotated, state, bk_cfg.num_classes)

    monitor_rows = []
    while state.step < tr_cfg.mt_steps:
        if (
            tr_cfg.pseudo_refresh_every
            and unannotated
            and state.step > 0
            and state.step % tr_cfg.pseudo_refresh_every == 0
        ):
            unannotated = refresh_pseudo_labels(
                unannotated, state.teacher, bk_cfg, tr_cfg.lo_patch_mode
            )
            _store_pseudo_labels(state, unannotated)
        batch = assemble_batch(annotated, unannotated, state, bk_cfg, tr_cfg)
        student_step(state, batch, bk_cfg, tr_cfg)
        teacher_step(state)
        if step_hook is not None:
            step_hook(state)
        if tr_cfg.monitor_every and state.step % tr_cfg.monitor_every == 0:
            last = state.history[-1]
            row = {
                "step": state.step,
                "L_s": last["loss_s"],
                "L_c": last["loss_c"],
                "beta": last["beta"],
                "alpha": alpha(state.step, state.ema),
                "student_train_dice": _monitor_dice(
                    state.student, monitor_samples, bk_cfg, tr_cfg.lo_patch_mode
                ),
                "teacher_train_dice": _monitor_dice(
                    state.teacher, monitor_samples, bk_cfg, tr_cfg.lo_patch_mode
                ),
            }
            monitor_rows.append(row)
            writer.write(row)
        if tr_cfg.checkpoint_every and state.step % tr_cfg.checkpoint_every == 0:
            _save(checkpoint_path)

    _save(checkpoint_path)
    return TrainResult(
        final=state.teacher,
        teacher=state.teacher,
        student=state.student,
        state=state,
        history=state.history,
        monitor_rows=monitor_rows,
    )


# --- checkpoint container --------------------------------------------------


def _array_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _array_from_bytes(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data), allow_pickle=False)


def save_checkpoint(state: TrainState, path) -> None:
    """Versioned container with weights, optimizer state, counters, RNG
    state, schedules, history, and pseudo-label maps.  The write is atomic
    (temp file + rename)."""
    path = Path(path)
    meta = {
        "format": "mtseg-checkpoint",
        "version": CHECKPOINT_VERSION,
        "phase": state.phase,
        "step": state.step,
        "pretrain_step": state.pretrain_step,
        "master_seed": state.master_seed,
        "schema_id": state.student.schema_id,
        "weight_names": state.student.names,
        "rng_state": state.rng.bit_generator.state,
        "ramp": {"ramp_length": state.ramp.ramp_length},
        "ema": {
            "ramp_length": state.ema.ramp_length,
            "alpha_rampup": state.ema.alpha_rampup,
            "alpha_after": state.ema.alpha_after,
        },
        "backbone": dataclasses.asdict(state.backbone),
        "history": state.history,
        "pseudo_count": len(state.pseudo_labels) if state.pseudo_labels is not None else None,
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta))
        for name, arr in state.student.items():
            zf.writestr(f"student/{name}.npy", _array_to_bytes(arr))
        for name, arr in state.teacher.items():
            zf.writestr(f"teacher/{name}.npy", _array_to_bytes(arr))
        for name, arr in state.opt_state.items():
            zf.writestr(f"opt/{name}.npy", _array_to_bytes(arr))
        if state.pseudo_labels is not None:
            for idx, arr in state.pseudo_labels.items():
                zf.writestr(f"pseudo/{idx}.npy", _array_to_bytes(arr))
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    """Parse a checkpoint fully before constructing state (a corrupted
    container raises without partial effects)."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != "mtseg-checkpoint":
                raise CheckpointError(f"{path}: not a checkpoint container")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported checkpoint version {meta.get('version')}"
                )
            names = meta["weight_names"]
            student = {n: _array_from_bytes(zf.read(f"student/{n}.npy")) for n in names}
            teacher = {n: _array_from_bytes(zf.read(f"teacher/{n}.npy")) for n in names}
            opt = {n: _array_from_bytes(zf.read(f"opt/{n}.npy")) for n in names}
            pseudo = None
            if meta["pseudo_count"] is not None:
                pseudo = {
                    i: _array_from_bytes(zf.read(f"pseudo/{i}.npy"))
                    for i in range(meta["pseudo_count"])
                }
    except CheckpointError:
        raise
    except (KeyError, OSError, ValueError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted or incomplete checkpoint: {exc}") from exc

    student_w = ModelWeights(student)
    teacher_w = ModelWeights(teacher)
    if student_w.schema_id != meta["schema_id"]:
        raise CheckpointError(f"{path}: schema_id mismatch against stored arrays")
    rng = np.random.default_rng(0)
    try:
        rng.bit_generator.state = meta["rng_state"]
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: invalid RNG state: {exc}") from exc
    return TrainState(
        phase=meta["phase"],
        step=meta["step"],
        pretrain_step=meta["pretrain_step"],
        student=student_w,
        teacher=teacher_w,
        opt_state=opt,
        rng=rng,
        ramp=RampSchedule(**meta["ramp"]),
        ema=EmaSchedule(**meta["ema"]),
        master_seed=meta["master_seed"],
        backbone=BackboneConfig(**meta["backbone"]),
        history=meta["history"],
        pseudo_labels=pseudo,
    )
