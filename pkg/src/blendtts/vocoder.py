"""Autoregressive neural vocoder over 10-bit mu-law classes at 24 kHz.

A conditioning network (two bidirectional LSTM layers) summarises the mel
frames; its outputs are linearly interpolated from frame rate to sample
rate (300 samples per frame).  A single forward GRU then runs per sample:
input is the previous emitted class (as its companded value) plus the
conditioning vector, output goes through a pair of affine layers and a
softmax over 1024 classes.  Decoding a sampled class sequence through the
mu-law expansion yields the waveform.

Reference hidden sizes (GRU 896, conditioning 128) are kept in the config;
a ``scale`` divisor shrinks every hidden size for test-speed runs while
leaving the class count, sample rate and hop untouched, since those are
data-format constants rather than capacity knobs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import load_checkpoint, save_checkpoint
from .melspec import (
    HOP_LENGTH,
    N_MELS,
    SAMPLE_RATE,
    AudioClip,
    MelSpectrogram,
    MuLawCodec,
    mu_law_decode,
    mu_law_encode,
)

MODEL_TYPE = "vocoder"


class VocoderError(ValueError):
    pass


@dataclass(frozen=True)
class VocoderConfig:
    gru_hidden: int = 896
    affine_dim: int = 896
    softmax_classes: int = 1024
    cond_layers: int = 2
    cond_hidden: int = 128
    n_mels: int = N_MELS
    sample_rate: int = SAMPLE_RATE
    samples_per_frame: int = HOP_LENGTH
    scale: int = 1

    def __post_init__(self):
        if self.softmax_classes != 1024:
            raise VocoderError("softmax_classes is fixed at 1024 (10-bit mu-law)")
        if self.scale < 1:
            raise VocoderError("scale must be a positive divisor")
        for name in ("gru_hidden", "affine_dim", "cond_hidden"):
            value = getattr(self, name)
            if value < 1:
                raise VocoderError(f"{name} must be positive")
            if value % self.scale != 0:
                raise VocoderError(f"{name}={value} is not divisible by scale={self.scale}")
        if self.cond_layers < 1:
            raise VocoderError("cond_layers must be positive")

    # Effective sizes after the test-scale divisor.
    @property
    def gru_dim(self) -> int:
        return self.gru_hidden // self.scale

    @property
    def affine_out(self) -> int:
        return self.affine_dim // self.scale

    @property
    def cond_dim(self) -> int:
        return 2 * (self.cond_hidden // self.scale)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VocoderConfig":
        return cls(**d)


@dataclass(frozen=True)
class VocoderState:
    """Recurrent hidden vector plus the previously emitted class index."""

    hidden: Tensor
    prev_class: int

    def __post_init__(self):
        if not torch.isfinite(self.hidden).all():
            raise VocoderError("vocoder state hidden vector is not finite")
        if not 0 <= self.prev_class < 1024:
            raise VocoderError(f"class index {self.prev_class} outside [0, 1024)")


class VocoderModel(nn.Module):
    def __init__(self, config: VocoderConfig):
        super().__init__()
        self.config = config
        self.codec = MuLawCodec()
        c = config
        self.cond_rnn = nn.LSTM(
            c.n_mels, c.cond_hidden // c.scale, num_layers=c.cond_layers,
            bidirectional=True, batch_first=True,
        )
        self.sample_rnn = nn.GRU(1 + c.cond_dim, c.gru_dim, batch_first=True)
        self.affine_hidden = nn.Linear(c.gru_dim, c.affine_out)
        self.affine_out_layer = nn.Linear(c.affine_out, c.softmax_classes)

    # -- conditioning --------------------------------------------------------

    def frame_features(self, mel: MelSpectrogram) -> Tensor:
        if mel.frames.shape[1] != self.config.n_mels:
            raise VocoderError(
                f"mel has {mel.frames.shape[1]} bands, vocoder expects {self.config.n_mels}"
            )
        dtype = self.affine_hidden.weight.dtype
        x = torch.as_tensor(mel.frames, dtype=dtype).unsqueeze(0)
        out, _ = self.cond_rnn(x)
        return out.squeeze(0)  # (T, cond_dim)

    def upsample_features(self, features: Tensor) -> Tensor:
        """Frame-rate (T, D) -> sample-rate (T*300, D) by linear interpolation.

        Sample s sits at frame position s/300; the last frame extends to the
        clip end, so the output length is exactly T*300.
        """
        t_frames = features.shape[0]
        hop = self.config.samples_per_frame
        pos = torch.arange(t_frames * hop, dtype=features.dtype) / hop
        lo = pos.floor().long()
        hi = torch.clamp(lo + 1, max=t_frames - 1)
        frac = (pos - lo.to(features.dtype)).unsqueeze(1)
        return features[lo] * (1.0 - frac) + features[hi] * frac

    def condition(self, mel: MelSpectrogram) -> Tensor:
        return self.upsample_features(self.frame_features(mel))

    # -- sampling network ----------------------------------------------------

    def initial_state(self) -> VocoderState:
        hidden = torch.zeros(self.config.gru_dim, dtype=self.affine_hidden.weight.dtype)
        return VocoderState(hidden=hidden, prev_class=512)

    def _class_input(self, class_index: int, dtype) -> Tensor:
        # Companded bin centre in [-1, 1]; cheap and monotone in the index.
        return torch.tensor([(class_index + 0.5) / 512.0 - 1.0], dtype=dtype)

    def _step_logits(self, state: VocoderState, cond: Tensor) -> tuple[Tensor, Tensor]:
        x = torch.cat([self._class_input(state.prev_class, cond.dtype), cond])
        out, new_hidden = self.sample_rnn(x.view(1, 1, -1), state.hidden.view(1, 1, -1))
        logits = self.affine_out_layer(torch.relu(self.affine_hidden(out.view(-1))))
        return logits, new_hidden.view(-1)

    def sample_step(self, state: VocoderState, cond: Tensor) -> tuple[Tensor, VocoderState]:
        """One autoregressive step: class distribution and the advanced state.

        The returned state keeps ``prev_class`` unchanged; after drawing a
        class from the distribution the caller records it with ``advance``.
        """
        logits, new_hidden = self._step_logits(state, cond)
        if not torch.isfinite(logits).all():
            raise VocoderError(
                "non-finite logits during sampling; "
                f"prev_class={state.prev_class}, hidden_norm={float(state.hidden.norm()):.4g}"
            )
        probs = torch.softmax(logits, dim=0)
        return probs, VocoderState(hidden=new_hidden, prev_class=state.prev_class)

    @staticmethod
    def advance(state: VocoderState, class_index: int) -> VocoderState:
        return dataclasses.replace(state, prev_class=int(class_index))


def choose_class(logits: Tensor, mode: str, rng: torch.Generator | None,
                 temperature: float = 1.0) -> int:
    """Pick a class from logits: greedy argmax or temperature sampling.

    Temperature scaling happens in max-shifted log space, so tau -> 0
    degrades gracefully into argmax instead of overflowing.
    """
    if mode == "argmax":
        return int(torch.argmax(logits))
    if mode != "sample":
        raise VocoderError(f"unknown sampling mode {mode!r}")
    if temperature <= 0.0:
        raise VocoderError("temperature must be positive; use mode='argmax' for greedy")
    shifted = (logits - logits.max()) / temperature
    probs = torch.softmax(shifted, dim=0)
    return int(torch.multinomial(probs, 1, generator=rng))


def generate(model: VocoderModel, mel: MelSpectrogram, *, seed: int = 0,
             mode: str = "sample", temperature: float = 1.0) -> AudioClip:
    """Autoregressively emit exactly 300 samples per mel frame.

    Fully determined by (params, mel, seed, mode, temperature).
    """
    model.eval()
    rng = torch.Generator()
    rng.manual_seed(seed)
    with torch.no_grad():
        cond = model.condition(mel)
        state = model.initial_state()
        classes = np.empty(cond.shape[0], dtype=np.int64)
        for i in range(cond.shape[0]):
            logits, hidden = model._step_logits(state, cond[i])
            if not torch.isfinite(logits).all():
                raise VocoderError(
                    f"non-finite logits at sample {i}; prev_class={state.prev_class}"
                )
            cls = choose_class(logits, mode, rng, temperature)
            classes[i] = cls
            state = VocoderState(hidden=hidden, prev_class=cls)
    samples = mu_law_decode(classes, model.codec).astype(np.float32)
    return AudioClip(samples=samples, sample_rate=model.config.sample_rate)


# -- training ------------------------------------------------------------------


def align_clip(clip: AudioClip, mel: MelSpectrogram, samples_per_frame: int = HOP_LENGTH) -> np.ndarray:
    """Zero-pad the clip tail up to 300*T; reject clips longer than that."""
    target = mel.frames.shape[0] * samples_per_frame
    n = clip.samples.shape[0]
    if n > target:
        raise VocoderError(
            f"clip has {n} samples but the mel covers only {target}; trim the clip first"
        )
    if n == target:
        return clip.samples
    return np.concatenate([clip.samples, np.zeros(target - n, dtype=clip.samples.dtype)])


def _teacher_logits(model: VocoderModel, clip: AudioClip, mel: MelSpectrogram) -> tuple[Tensor, Tensor]:
    """Teacher-forced logits over the whole clip plus the target classes."""
    samples = align_clip(clip, mel, model.config.samples_per_frame)
    targets = torch.as_tensor(mu_law_encode(samples, model.codec), dtype=torch.long)
    dtype = model.affine_hidden.weight.dtype
    cond = model.condition(mel)
    prev = torch.empty(targets.shape[0], dtype=dtype)
    prev[0] = (512 + 0.5) / 512.0 - 1.0
    prev[1:] = (targets[:-1].to(dtype) + 0.5) / 512.0 - 1.0
    x = torch.cat([prev.unsqueeze(1), cond], dim=1).unsqueeze(0)
    out, _ = model.sample_rnn(x)
    logits = model.affine_out_layer(torch.relu(model.affine_hidden(out.squeeze(0))))
    return logits, targets


def train_step(model: VocoderModel, optimizer: torch.optim.Optimizer,
               clip: AudioClip, mel: MelSpectrogram,
               grad_clip: float | None = 1.0) -> float:
    """One optimiser step of teacher-forced next-class cross-entropy."""
    model.train()
    logits, targets = _teacher_logits(model, clip, mel)
    loss = nn.functional.cross_entropy(logits, targets)
    if not torch.isfinite(loss):
        raise VocoderError("non-finite vocoder training loss")
    optimizer.zero_grad()
    loss.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return float(loss.detach())


def teacher_forced_accuracy(model: VocoderModel, clip: AudioClip, mel: MelSpectrogram) -> float:
    """Top-1 accuracy of the teacher-forced class predictions."""
    model.eval()
    with torch.no_grad():
        logits, targets = _teacher_logits(model, clip, mel)
        return float((logits.argmax(dim=1) == targets).double().mean())


# -- persistence ----------------------------------------------------------------


def save_vocoder(path, model: VocoderModel, extra: dict | None = None) -> None:
    save_checkpoint(path, MODEL_TYPE, model.config.to_dict(), model.state_dict(), extra)


def load_vocoder(path) -> VocoderModel:
    payload = load_checkpoint(path, expect_type=MODEL_TYPE)
    model = VocoderModel(VocoderConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model
