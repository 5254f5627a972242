"""Synthesis records: the mel/attention/stop bundle a synthesis run emits.

Stored as .npz containers so the stability auditor can consume them without
loading any model code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .melspec import MelSpectrogram

ATTENTION_ROW_TOL = 1e-6


class RecordError(ValueError):
    pass


@dataclass
class SynthesisRecord:
    utterance_id: str
    speaker_id: str
    mel: MelSpectrogram
    attention: np.ndarray          # (decoder blocks, encoder positions)
    stop_trajectory: np.ndarray    # per-block stop value in [0, 1]
    terminated: bool
    rng_seed: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.attention = np.asarray(self.attention, dtype=np.float64)
        self.stop_trajectory = np.asarray(self.stop_trajectory, dtype=np.float64)
        if self.attention.ndim != 2:
            raise RecordError(f"attention must be 2-D, got shape {self.attention.shape}")
        if len(self.stop_trajectory) != self.attention.shape[0]:
            raise RecordError(
                f"stop trajectory length {len(self.stop_trajectory)} != "
                f"{self.attention.shape[0]} attention rows"
            )
        row_sums = self.attention.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > ATTENTION_ROW_TOL) or np.any(self.attention < 0):
            raise RecordError(f"attention rows of {self.utterance_id} are not distributions")
        if np.any(self.stop_trajectory < 0) or np.any(self.stop_trajectory > 1):
            raise RecordError(f"stop values of {self.utterance_id} outside [0, 1]")


def save_record(path, record: SynthesisRecord) -> None:
    meta = {
        "utterance_id": record.utterance_id,
        "speaker_id": record.speaker_id,
        "terminated": record.terminated,
        "rng_seed": record.rng_seed,
        "frame_length_ms": record.mel.frame_length_ms,
        "frame_shift_ms": record.mel.frame_shift_ms,
        "fmin_hz": record.mel.fmin_hz,
        "fmax_hz": record.mel.fmax_hz,
        "extra": record.extra,
    }
    # np.savez requires a seekable path ending in .npz; callers pass the full name
    with open(path, "wb") as f:
        np.savez(
            f,
            mel=record.mel.frames,
            attention=record.attention,
            stop=record.stop_trajectory,
            meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
        )


def load_record(path) -> SynthesisRecord:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        mel = MelSpectrogram(
            data["mel"],
            meta["frame_length_ms"],
            meta["frame_shift_ms"],
            meta["fmin_hz"],
            meta["fmax_hz"],
        )
        return SynthesisRecord(
            utterance_id=meta["utterance_id"],
            speaker_id=meta["speaker_id"],
            mel=mel,
            attention=data["attention"],
            stop_trajectory=data["stop"],
            terminated=meta["terminated"],
            rng_seed=meta["rng_seed"],
            extra=meta.get("extra", {}),
        )
