"""Two-stage training orchestration.

Stage 1 trains the student purely on teacher pseudo-labels (optionally with a
plain distillation term against stored teacher logits).  Stage 2 continues
training on ground-truth labels with selective distillation from the teacher
as an anti-forgetting regularizer.  Also houses dataset splits, learning-rate
schedules, early stopping, and the label-noise injector used by the ablation.

Reproducibility contract: every random choice derives from the config seed,
so identical (config, seed, data) yields bit-identical histories and
parameters.  Validation metrics are computed on a float32-quantized copy of
the parameters -- exactly what a reloaded checkpoint contains -- so recorded
accuracies survive a checkpoint round trip unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .chords import (
    ChordKind,
    ChordLabel,
    FrameLabels,
    IntervalSequence,
    Segment,
    intervals_to_frames,
)
from .distill import KdConfig, ce_loss_batch, total_loss
from .features import NormStats, Spectrogram, normalize
from .model import DualEncoderModel, ModelConfig, Teacher, teacher_infer
from .optim import AdamW

__all__ = [
    "TrainConfig",
    "PseudoLabelEntry",
    "PseudoLabelSet",
    "SplitSpec",
    "TrackData",
    "EpochRecord",
    "TrainingDiverged",
    "TrainResult",
    "generate_pseudo_labels",
    "split_dataset",
    "lr_schedule",
    "early_stop",
    "NoiseConfig",
    "PerturbationReport",
    "inject_label_noise",
    "train_stage1",
    "train_stage2",
]


@dataclass(frozen=True)
class TrainConfig:
    """All stage-1 / stage-2 training hyperparameters."""

    stage: int = 1
    kd: KdConfig = field(default_factory=KdConfig)
    base_lr: float = 1e-4
    peak_lr: float = 3e-4
    warmup_epochs: int = 10
    schedule: str = "warmup-cosine"
    plateau_decay: float = 0.95
    batch_size: int = 256
    seq_len_frames: int = 108
    patience_epochs: int = 10
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.schedule not in ("warmup-cosine", "plateau-decay"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.seq_len_frames < 1 or self.max_epochs < 1:
            raise ValueError("batch size, sequence length, and epochs must be positive")

    @classmethod
    def stage1_defaults(cls, **overrides) -> "TrainConfig":
        return cls(stage=1, **overrides)

    @classmethod
    def stage2_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(
            stage=2,
            base_lr=1e-5,
            schedule="plateau-decay",
            kd=KdConfig(alpha=0.3, tau=3.0),
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint 7:1:2 train/validation/test track-id lists."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


def split_dataset(track_ids: Sequence[str], seed: int) -> SplitSpec:
    """Seeded shuffle followed by a 7:1:2 partition (rounding toward train)."""
    ids = sorted(track_ids)
    if len(ids) < 10:
        raise ValueError("need at least 10 tracks to split 7:1:2")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_val = n // 10
    n_test = (2 * n) // 10
    n_train = n - n_val - n_test
    return SplitSpec(
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train : n_train + n_val]),
        test=tuple(shuffled[n_train + n_val :]),
    )


# ---------------------------------------------------------------------------
# Pseudo-labels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PseudoLabelEntry:
    track_id: str
    labels: FrameLabels
    teacher_logits: np.ndarray | None = None


@dataclass(frozen=True)
class PseudoLabelSet:
    entries: tuple[PseudoLabelEntry, ...]
    failures: tuple[tuple[str, str], ...] = ()

    def by_id(self) -> dict[str, PseudoLabelEntry]:
        return {e.track_id: e for e in self.entries}


def generate_pseudo_labels(
    teacher: Teacher,
    tracks: Iterable[tuple[str, Spectrogram]],
    store_logits: bool = False,
) -> PseudoLabelSet:
    """Frame-wise argmax of teacher logits over every track.

    All frames receive a label (no confidence filtering).  Per-track teacher
    failures are recorded and the run continues.
    """
    entries: list[PseudoLabelEntry] = []
    failures: list[tuple[str, str]] = []
    for track_id, spec in tracks:
        try:
            logits = teacher_infer(teacher, spec)
        except Exception as exc:  # noqa: BLE001 - per-track fault isolation
            failures.append((track_id, f"{track_id}: {exc}"))
            continue
        labels = FrameLabels(logits.argmax(axis=1), spec.frame_period_seconds)
        entries.append(
            PseudoLabelEntry(
                track_id=track_id,
                labels=labels,
                teacher_logits=logits if store_logits else None,
            )
        )
    return PseudoLabelSet(entries=tuple(entries), failures=tuple(failures))


# ---------------------------------------------------------------------------
# Schedules and early stopping
# ---------------------------------------------------------------------------


def lr_schedule(epoch: int, cfg: TrainConfig, val_history: Sequence[float] = ()) -> float:
    """Learning rate for an epoch.

    warmup-cosine: linear base->peak over the warmup epochs, then cosine from
    peak to zero at max_epochs.  plateau-decay: multiply by the decay factor
    after every completed epoch whose validation metric failed to set a new
    best.
    """
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if cfg.schedule == "warmup-cosine":
        if epoch < cfg.warmup_epochs:
            frac = epoch / cfg.warmup_epochs
            return cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * frac
        span = max(cfg.max_epochs - cfg.warmup_epochs, 1)
        progress = min((epoch - cfg.warmup_epochs) / span, 1.0)
        return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    decays = 0
    best = -math.inf
    for value in val_history:
        if value > best:
            best = value
        else:
            decays += 1
    return cfg.base_lr * cfg.plateau_decay**decays


def early_stop(val_history: Sequence[float], patience: int) -> tuple[bool, int]:
    """Stop once the best validation value is `patience` epochs old.

    Returns (stop, best_epoch); ties resolve to the earliest best epoch.
    """
    if len(val_history) == 0:
        raise ValueError("empty validation history")
    values = np.asarray(val_history, dtype=np.float64)
    best_epoch = int(values.argmax())
    return (len(values) - 1 - best_epoch) >= patience, best_epoch


# ---------------------------------------------------------------------------
# Label-noise injection (ablation support)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseConfig:
    seed: int = 0
    delta_seconds: float = 0.5
    delta_n_seconds: float = 1.0
    min_segment_seconds: float = 0.1


@dataclass(frozen=True)
class PerturbationReport:
    n_boundaries: int
    mean_abs_shift: float
    dropped_segments: int


def inject_label_noise(
    seq: IntervalSequence, cfg: NoiseConfig
) -> tuple[IntervalSequence, PerturbationReport]:
    """Seeded boundary perturbation mimicking misaligned annotations.

    Every junction between adjacent segments shifts by a uniform offset in
    +-delta; junctions bordering a leading/trailing NoChord segment get an
    extra +-delta_n (alignment errors concentrate on "N" boundaries).
    Segments squeezed below the minimum length are dropped and reported.
    """
    rng = np.random.default_rng(cfg.seed)
    segments = list(seq.segments)
    if not segments:
        raise ValueError("cannot perturb an empty sequence")

    # Junction i sits between segments i-1 and i; endpoints stay fixed.
    n_junctions = len(segments) - 1
    offsets = rng.uniform(-cfg.delta_seconds, cfg.delta_seconds, size=n_junctions) \
        if cfg.delta_seconds > 0 else np.zeros(n_junctions)
    if cfg.delta_n_seconds > 0 and n_junctions > 0:
        lead, trail = rng.uniform(-cfg.delta_n_seconds, cfg.delta_n_seconds, size=2)
        if segments[0].label.kind is ChordKind.NO_CHORD:
            offsets[0] += lead
        if segments[-1].label.kind is ChordKind.NO_CHORD:
            offsets[-1] += trail

    # New boundary positions; non-shared boundaries (gaps) move together.
    starts = [seg.start for seg in segments]
    ends = [seg.end for seg in segments]
    for i, offset in enumerate(offsets):
        ends[i] += offset
        starts[i + 1] += offset

    out: list[Segment] = []
    dropped = 0
    cursor = segments[0].start
    for seg, start, end in zip(segments, starts, ends):
        start = max(start, cursor)
        if end - start < cfg.min_segment_seconds:
            dropped += 1
            continue
        out.append(Segment(start, end, seg.label))
        cursor = end
    if not out:
        raise ValueError("perturbation dropped every segment")
    report = PerturbationReport(
        n_boundaries=n_junctions,
        mean_abs_shift=float(np.mean(np.abs(offsets))) if n_junctions else 0.0,
        dropped_segments=dropped,
    )
    return IntervalSequence(tuple(out)), report


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrackData:
    """One track's training view: normalized features, frame targets, optional
    teacher logits aligned frame-for-frame."""

    track_id: str
    features: np.ndarray
    targets: np.ndarray
    teacher_logits: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError(f"{self.track_id}: feature/target frame counts differ")
        if self.teacher_logits is not None and self.teacher_logits.shape[0] != self.targets.shape[0]:
            raise ValueError(f"{self.track_id}: teacher logits misaligned")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float

    def as_line(self) -> str:
        return (
            f"epoch={self.epoch} train_loss={self.train_loss:.6f} "
            f"val_loss={self.val_loss:.6f} val_acc={self.val_acc:.6f} lr={self.lr:.8g}"
        )


@dataclass
class TrainResult:
    model: DualEncoderModel
    history: list[EpochRecord]
    best_epoch: int


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, lr: float) -> None:
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:.3g}")
        self.epoch = epoch
        self.batch = batch
        self.lr = lr


def _train_windows(track: TrackData, seq_len: int) -> list[tuple[int, int]]:
    return [(s, s + seq_len) for s in range(0, track.features.shape[0] - seq_len + 1, seq_len)]


def _eval_windows(n_frames: int, seq_len: int) -> list[tuple[int, int, int]]:
    """(start, end, valid) windows covering every frame; the tail is padded."""
    windows = []
    start = 0
    while start < n_frames:
        end = min(start + seq_len, n_frames)
        windows.append((start, end, end - start))
        start += seq_len
    return windows


def _pad_window(features: np.ndarray, start: int, end: int, seq_len: int) -> np.ndarray:
    window = features[start:end]
    if window.shape[0] < seq_len:
        pad = np.repeat(window[-1:], seq_len - window.shape[0], axis=0)
        window = np.concatenate([window, pad], axis=0)
    return window


def _evaluate(model: DualEncoderModel, tracks: Sequence[TrackData],
              seq_len: int) -> tuple[float, float]:
    """Mean cross-entropy and frame accuracy over all real (unpadded) frames."""
    total_loss_sum = 0.0
    total_correct = 0
    total_frames = 0
    for track in tracks:
        n = track.features.shape[0]
        for start, end, valid in _eval_windows(n, seq_len):
            window = _pad_window(track.features, start, end, seq_len)
            logits = model.forward_window(window)[:valid]
            targets = track.targets[start : start + valid]
            losses, _ = ce_loss_batch(logits, targets)
            total_loss_sum += float(losses.sum())
            total_correct += int((logits.argmax(axis=1) == targets).sum())
            total_frames += valid
    if total_frames == 0:
        raise ValueError("no frames to evaluate")
    return total_loss_sum / total_frames, total_correct / total_frames


def _run_training(
    model: DualEncoderModel,
    train_tracks: Sequence[TrackData],
    val_tracks: Sequence[TrackData],
    cfg: TrainConfig,
) -> TrainResult:
    if not train_tracks or not val_tracks:
        raise ValueError("training needs non-empty train and validation sets")
    if cfg.kd.alpha > 0:
        missing = [t.track_id for t in train_tracks if t.teacher_logits is None]
        if missing:
            raise ValueError(
                f"alpha > 0 requires teacher logits; missing for {missing[:3]}"
            )

    windows = [
        (ti, start, end)
        for ti, track in enumerate(train_tracks)
        for start, end in _train_windows(track, cfg.seq_len_frames)
    ]
    if not windows:
        raise ValueError("no full training windows; lower seq_len_frames")

    optimizer = AdamW(model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    # Validation always runs at checkpoint (float32) precision on this twin.
    eval_model = DualEncoderModel(model.config, model.seed)
    history: list[EpochRecord] = []
    val_accs: list[float] = []
    best_values: dict[str, np.ndarray] | None = None
    best_epoch = 0

    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, cfg, val_accs)
        epoch_rng = np.random.default_rng([cfg.seed, epoch])
        order = epoch_rng.permutation(len(windows))
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1])

        loss_sum = 0.0
        n_batches = 0
        for batch_idx, batch_lo in enumerate(range(0, len(order), cfg.batch_size)):
            chosen = order[batch_lo : batch_lo + cfg.batch_size]
            x = np.stack([train_tracks[windows[i][0]].features[windows[i][1]:windows[i][2]]
                          for i in chosen])
            y = np.stack([train_tracks[windows[i][0]].targets[windows[i][1]:windows[i][2]]
                          for i in chosen])
            z_t = None
            if cfg.kd.alpha > 0:
                z_t = np.stack(
                    [train_tracks[windows[i][0]].teacher_logits[windows[i][1]:windows[i][2]]
                     for i in chosen]
                )
            b, t, _ = x.shape
            logits, cache = model.forward(x, drop_rng if model.config.dropout > 0 else None)
            flat_logits = logits.reshape(b * t, -1)
            flat_targets = y.reshape(b * t)
            flat_teacher = z_t.reshape(b * t, -1) if z_t is not None else None
            loss, grad = total_loss(cfg.stage, flat_logits, flat_targets, cfg.kd, flat_teacher)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, batch_idx, lr)
            model.params.zero_grads()
            model.backward(grad.reshape(b, t, -1), cache)
            optimizer.step(lr)
            loss_sum += loss
            n_batches += 1

        # Validation runs at checkpoint (float32) precision, so the recorded
        # metrics survive a save/load round trip bit-exactly.
        for name, value in model.params.values.items():
            eval_model.params.values[name][...] = value.astype(np.float32)
        val_loss, val_acc = _evaluate(eval_model, val_tracks, cfg.seq_len_frames)
        val_accs.append(val_acc)
        history.append(EpochRecord(epoch, loss_sum / max(n_batches, 1), val_loss, val_acc, lr))

        stop, best_epoch = early_stop(val_accs, cfg.patience_epochs)
        if best_epoch == epoch or best_values is None:
            best_values = {name: v.copy() for name, v in model.params.values.items()}
        if stop:
            break

    for name, value in best_values.items():
        model.params.values[name][...] = value
    return TrainResult(model=model, history=history, best_epoch=best_epoch)


def train_stage1(
    model: DualEncoderModel,
    train_tracks: Sequence[TrackData],
    val_tracks: Sequence[TrackData],
    cfg: TrainConfig,
) -> TrainResult:
    """Stage 1: train on pseudo-labels (targets in `train_tracks` come from the
    teacher); optional plain distillation against stored teacher logits."""
    if cfg.stage != 1:
        raise ValueError("train_stage1 requires a stage-1 config")
    return _run_training(model, train_tracks, val_tracks, cfg)


def train_stage2(
    init: DualEncoderModel,
    train_tracks: Sequence[TrackData],
    val_tracks: Sequence[TrackData],
    cfg: TrainConfig,
) -> TrainResult:
    """Stage 2: continual training on ground-truth labels with selective
    distillation, initialized from (a copy of) the stage-1 checkpoint."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 requires a stage-2 config")
    model = DualEncoderModel(init.config, init.seed)
    for name, value in init.params.values.items():
        model.params.values[name][...] = value
    return _run_training(model, train_tracks, val_tracks, cfg)


def build_track_data(
    track_id: str,
    spec: Spectrogram,
    targets: FrameLabels | IntervalSequence,
    stats: NormStats,
    teacher: Teacher | None = None,
    teacher_logits: np.ndarray | None = None,
) -> TrackData:
    """Assemble one track: normalize features, frame targets, attach teacher logits.

    The teacher (when given) sees the raw spectrogram; only the student input
    is normalized.
    """
    if isinstance(targets, IntervalSequence):
        frame_targets = intervals_to_frames(
            targets, spec.frame_period_seconds, spec.n_frames
        ).labels
    else:
        frame_targets = targets.labels
    if teacher is not None and teacher_logits is None:
        teacher_logits = teacher_infer(teacher, spec)
    return TrackData(
        track_id=track_id,
        features=normalize(spec, stats).frames,
        targets=frame_targets,
        teacher_logits=teacher_logits,
    )
