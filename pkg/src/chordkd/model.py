"""The dual-encoder student model, teacher interface, and inference pipeline.

The student is purely attention + feed-forward: a frequency encoder over
grouped CQT bins (per frame), a temporal encoder over frames, and a
cross-attention fusion block in which each temporal token queries its frame's
frequency tokens.  Inference smooths per-class logit channels with a
normalized Gaussian kernel and accumulates votes over overlapping windows.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from scipy.ndimage import convolve1d

from .chords import FrameLabels, NO_CHORD_INDEX, VOCAB_SIZE
from .features import Spectrogram, chroma_fold_matrix, template_bank
from .nn import (
    CrossAttentionBlock,
    EncoderLayer,
    Linear,
    LayerNorm,
    Parameters,
    sinusoidal_encoding,
)

__all__ = [
    "ModelConfig",
    "SmoothingConfig",
    "DualEncoderModel",
    "Teacher",
    "TemplateTeacher",
    "teacher_infer",
    "smooth_logits",
    "gaussian_kernel",
    "windowed_infer",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults land near 2.2M parameters."""

    d_model: int = 160
    n_heads: int = 4
    n_layers_freq: int = 3
    n_layers_time: int = 3
    n_freq_groups: int = 12
    dropout: float = 0.1
    vocab_size: int = VOCAB_SIZE
    seq_len: int = 108
    n_bins: int = 144
    ffn_mult: int = 4

    def __post_init__(self) -> None:
        if min(self.d_model, self.n_heads, self.n_layers_freq, self.n_layers_time,
               self.n_freq_groups, self.vocab_size, self.seq_len, self.n_bins,
               self.ffn_mult) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.n_bins % self.n_freq_groups != 0:
            raise ValueError("n_bins must be divisible by n_freq_groups")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class DualEncoderModel:
    """Frequency encoder + temporal encoder + cross-attention fusion + linear head."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.seed = seed
        self.params = Parameters()
        rng = np.random.default_rng(seed)
        cfg = config
        d_hidden = cfg.d_model * cfg.ffn_mult
        self.group_width = cfg.n_bins // cfg.n_freq_groups

        self.group_embed = Linear(self.params, "freq.embed", self.group_width, cfg.d_model, rng)
        self.params.register(
            "freq.group_pos", rng.normal(0.0, 0.02, size=(cfg.n_freq_groups, cfg.d_model))
        )
        self.freq_layers = [
            EncoderLayer(self.params, f"freq.layer{i}", cfg.d_model, cfg.n_heads,
                         d_hidden, rng, cfg.dropout)
            for i in range(cfg.n_layers_freq)
        ]
        self.frame_embed = Linear(self.params, "time.embed", cfg.n_bins, cfg.d_model, rng)
        self.time_layers = [
            EncoderLayer(self.params, f"time.layer{i}", cfg.d_model, cfg.n_heads,
                         d_hidden, rng, cfg.dropout)
            for i in range(cfg.n_layers_time)
        ]
        self.fusion = CrossAttentionBlock(self.params, "fusion", cfg.d_model, cfg.n_heads,
                                          d_hidden, rng, cfg.dropout)
        self.final_ln = LayerNorm(self.params, "head.ln", cfg.d_model)
        self.head = Linear(self.params, "head.out", cfg.d_model, cfg.vocab_size, rng)

    @property
    def n_params(self) -> int:
        return self.params.n_params

    def forward(self, x: np.ndarray,
                drop_rng: np.random.Generator | None = None) -> tuple[np.ndarray, Any]:
        """Batched forward over windows: (B, T, F) -> (B, T, C) logits plus cache."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ValueError("expected a batched (B, T, F) input")
        b, t, f = x.shape
        cfg = self.config
        if f != cfg.n_bins:
            raise ValueError(f"expected {cfg.n_bins} frequency bins, got {f}")
        g = cfg.n_freq_groups

        # Frequency stream: per frame, attention over the G group tokens.
        groups = x.reshape(b * t, g, self.group_width)
        ftok, c_ge = self.group_embed.forward(groups)
        ftok = ftok + self.params["freq.group_pos"]
        c_freq = []
        for layer in self.freq_layers:
            ftok, c = layer.forward(ftok, drop_rng)
            c_freq.append(c)

        # Temporal stream: attention over the T frames.
        ttok, c_fe = self.frame_embed.forward(x)
        ttok = ttok + sinusoidal_encoding(t, cfg.d_model)
        c_time = []
        for layer in self.time_layers:
            ttok, c = layer.forward(ttok, drop_rng)
            c_time.append(c)

        # Fusion: each temporal token queries its own frame's frequency tokens.
        queries = ttok.reshape(b * t, 1, cfg.d_model)
        fused, c_fuse = self.fusion.forward(queries, ftok, drop_rng)
        fused = fused.reshape(b, t, cfg.d_model)
        normed, c_ln = self.final_ln.forward(fused)
        logits, c_head = self.head.forward(normed)
        cache = (b, t, c_ge, c_freq, c_fe, c_time, c_fuse, c_ln, c_head)
        return logits, cache

    def backward(self, dlogits: np.ndarray, cache: Any) -> None:
        """Accumulate parameter gradients for a (B, T, C) upstream gradient."""
        b, t, c_ge, c_freq, c_fe, c_time, c_fuse, c_ln, c_head = cache
        cfg = self.config
        dnormed = self.head.backward(dlogits, c_head)
        dfused = self.final_ln.backward(dnormed, c_ln)
        dq, dftok = self.fusion.backward(dfused.reshape(b * t, 1, cfg.d_model), c_fuse)

        dttok = dq.reshape(b, t, cfg.d_model)
        for layer, c in zip(reversed(self.time_layers), reversed(c_time)):
            dttok = layer.backward(dttok, c)
        self.frame_embed.backward(dttok, c_fe)

        for layer, c in zip(reversed(self.freq_layers), reversed(c_freq)):
            dftok = layer.backward(dftok, c)
        self.params.add_grad("freq.group_pos", dftok.sum(axis=0))
        self.group_embed.backward(dftok, c_ge)

    def forward_window(self, frames: np.ndarray) -> np.ndarray:
        """Evaluation-mode logits for a single (T, F) window."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError("expected a (T, F) window")
        logits, _ = self.forward(frames[None], drop_rng=None)
        return logits[0]


class Teacher(Protocol):
    """Anything mapping a spectrogram to per-frame logits can act as teacher."""

    def infer_logits(self, spec: Spectrogram) -> np.ndarray: ...


def teacher_infer(teacher: Teacher, spec: Spectrogram) -> np.ndarray:
    """Run a teacher and validate the (T, C) logits contract."""
    logits = np.asarray(teacher.infer_logits(spec), dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != spec.n_frames:
        raise ValueError(
            f"teacher produced shape {logits.shape} for {spec.n_frames} frames"
        )
    if not np.all(np.isfinite(logits)):
        raise ValueError("teacher produced non-finite logits")
    return logits


class TemplateTeacher:
    """Deterministic template-matching oracle teacher.

    Folds each CQT frame onto a 12-bin chroma and scores every vocabulary
    chord by the cosine of the mean-centered chroma against the chroma of
    its harmonic template (centering cancels the broadband noise floor, so
    clean frames still score exactly 1 on their own chord).  The no-chord
    class is scored by a soft threshold on the centered-chroma energy and
    the unknown class is pinned below everything.
    """

    def __init__(self, n_bins: int = 144, bins_per_octave: int = 24,
                 sharpness: float = 12.0, no_chord_energy: float | None = None,
                 no_chord_gain: float = 2.0) -> None:
        self.sharpness = sharpness
        self.no_chord_gain = no_chord_gain
        self.fold = chroma_fold_matrix(n_bins, bins_per_octave)
        bank = template_bank(n_bins, bins_per_octave)
        chroma = bank @ self.fold  # (170, 12); N and X rows are zero
        centered = chroma - chroma.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(centered, axis=1)
        self.chord_rows = np.flatnonzero(norms > 1e-12)
        self.chord_chroma = centered[self.chord_rows] / norms[self.chord_rows, None]
        self.no_chord_energy = (
            float(0.25 * np.median(norms[self.chord_rows])) if no_chord_energy is None
            else no_chord_energy
        )
        self.n_classes = bank.shape[0]

    def infer_logits(self, spec: Spectrogram) -> np.ndarray:
        chroma = spec.frames @ self.fold  # (T, 12)
        centered = chroma - chroma.mean(axis=1, keepdims=True)
        energy = np.linalg.norm(centered, axis=1)
        safe = np.where(energy > 0, energy, 1.0)
        sims = (centered / safe[:, None]) @ self.chord_chroma.T
        sims[energy == 0] = 0.0

        # X stays at the floor; N follows the energy rule.
        logits = np.full((spec.n_frames, self.n_classes), -self.sharpness)
        logits[:, self.chord_rows] = self.sharpness * sims
        logits[:, NO_CHORD_INDEX] = self.sharpness * self.no_chord_gain * (
            self.no_chord_energy / (energy + self.no_chord_energy)
        )
        return logits


@dataclass(frozen=True)
class SmoothingConfig:
    """Gaussian smoothing plus sliding-window voting parameters."""

    kernel_width: int = 9
    window_length: int = 108
    overlap_ratio: float = 0.5

    def __post_init__(self) -> None:
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ValueError("kernel width must be odd and >= 1")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ValueError("overlap ratio must lie in [0, 1)")
        if self.window_length < 1:
            raise ValueError("window length must be >= 1")
        if self.stride < 1:
            raise ValueError("stride floor(T * (1 - r)) must be >= 1")

    @property
    def sigma(self) -> float:
        return self.kernel_width / 6.0

    @property
    def stride(self) -> int:
        return int(math.floor(self.window_length * (1.0 - self.overlap_ratio)))


def gaussian_kernel(width: int) -> np.ndarray:
    """Normalized Gaussian kernel with sigma = width / 6 (three-sigma rule)."""
    if width < 1 or width % 2 == 0:
        raise ValueError("kernel width must be odd and >= 1")
    if width == 1:
        return np.ones(1)
    offsets = np.arange(width) - (width - 1) / 2.0
    sigma = width / 6.0
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def smooth_logits(logits: np.ndarray, cfg: SmoothingConfig) -> np.ndarray:
    """Convolve each class channel along time with the normalized Gaussian.

    Replicate padding at the segment boundaries; shape is preserved.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("expected (T, C) logits")
    if cfg.kernel_width > 2 * logits.shape[0] - 1:
        raise ValueError("kernel wider than 2T - 1")
    if cfg.kernel_width == 1:
        return logits.copy()
    return convolve1d(logits, gaussian_kernel(cfg.kernel_width), axis=0, mode="nearest")


def windowed_infer(model: DualEncoderModel, spec: Spectrogram,
                   cfg: SmoothingConfig) -> FrameLabels:
    """Overlapping sliding-window inference with per-class vote accumulation.

    Each window's smoothed logits are summed into per-frame votes; the final
    label is the frame-wise argmax.  Every frame is covered by at least one
    window for any overlap ratio in [0, 1).
    """
    frames = spec.frames
    n_frames = frames.shape[0]
    t = cfg.window_length
    if n_frames < t:
        # Short track: replicate the last frame, run one window, crop back.
        frames = np.concatenate([frames, np.repeat(frames[-1:], t - n_frames, axis=0)])
    total = frames.shape[0]
    starts = list(range(0, total - t + 1, cfg.stride))
    if starts[-1] != total - t:
        starts.append(total - t)

    votes = np.zeros((total, model.config.vocab_size))
    coverage = np.zeros(total, dtype=np.int64)
    for start in starts:
        window = frames[start : start + t]
        smoothed = smooth_logits(model.forward_window(window), cfg)
        votes[start : start + t] += smoothed
        coverage[start : start + t] += 1
    if coverage.min() < 1:
        raise AssertionError("window voting left frames uncovered")
    labels = votes[:n_frames].argmax(axis=1)
    return FrameLabels(labels, spec.frame_period_seconds)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CKD-CHECKPOINT v1\n"


def save_checkpoint(path: str | Path, model: DualEncoderModel,
                    meta: dict | None = None) -> None:
    """Versioned header + JSON index + named little-endian float32 tensors."""
    names = model.params.names()
    index = {
        "format_version": 1,
        "config": asdict(model.config),
        "seed": model.seed,
        "meta": meta or {},
        "tensors": [[name, list(model.params[name].shape)] for name in names],
    }
    blob = bytearray(_CKPT_MAGIC)
    blob += (json.dumps(index, sort_keys=True) + "\n").encode("utf-8")
    for name in names:
        blob += np.ascontiguousarray(model.params[name], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> tuple[DualEncoderModel, dict]:
    """Rebuild a model from a checkpoint, validating tensor names and shapes."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    body = raw[len(_CKPT_MAGIC):]
    newline = body.index(b"\n")
    index = json.loads(body[:newline].decode("utf-8"))
    if index.get("format_version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version")
    config = ModelConfig(**index["config"])
    model = DualEncoderModel(config, seed=index["seed"])

    expected = [(name, tuple(model.params[name].shape)) for name in model.params.names()]
    stored = [(name, tuple(shape)) for name, shape in index["tensors"]]
    if expected != stored:
        raise ValueError(f"{path}: checkpoint tensors do not match the model layout")

    offset = newline + 1
    for name, shape in stored:
        count = int(np.prod(shape))
        tensor = np.frombuffer(body, dtype="<f4", count=count, offset=offset)
        model.params.values[name][...] = tensor.reshape(shape).astype(np.float64)
        offset += count * 4
    if offset != len(body):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return model, index["meta"]
