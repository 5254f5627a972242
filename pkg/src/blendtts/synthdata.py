"""Synthetic fixtures: tiny corpora, tone audio, and planted alignment paths.

Everything here is deterministic given its seed.  The generators serve
three jobs: demo corpora for exercising the command-line pipeline end to
end, block-pattern utterances small enough to overfit in CI, and
alignment paths with planted defects for calibrating the stability
detectors against known ground truth.
"""

from __future__ import annotations

import random

import numpy as np

from .blends import CorpusManifest, CorpusRecord, write_corpus_manifest
from .melspec import N_MELS, SAMPLE_RATE, AudioClip, write_wav
from .textfront import Lexicon

# -- audio ----------------------------------------------------------------------


def tone_clip(freq_hz: float, seconds: float = 0.5, sample_rate: int = SAMPLE_RATE,
              amplitude: float = 0.5) -> AudioClip:
    """A decaying two-harmonic tone; bounded away from clipping."""
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    envelope = np.exp(-1.5 * t)
    wave = amplitude * envelope * (
        0.8 * np.sin(2 * np.pi * freq_hz * t) + 0.2 * np.sin(4 * np.pi * freq_hz * t)
    )
    return AudioClip(samples=wave.astype(np.float32), sample_rate=sample_rate)


def speaker_tone_hz(speaker_index: int) -> float:
    return 150.0 + 40.0 * speaker_index


# -- corpora ---------------------------------------------------------------------


def synthetic_speaker_counts(counts: dict[str, tuple[str, int]]) -> CorpusManifest:
    """In-memory manifest from {speaker: (gender, n_utterances)}; no files."""
    records = []
    for speaker in sorted(counts):
        gender, n = counts[speaker]
        for i in range(n):
            records.append(
                CorpusRecord(
                    utterance_id=f"{speaker}_{i:05d}",
                    speaker_id=speaker,
                    gender=gender,
                    audio_path=f"audio/{speaker}/{i:05d}.wav",
                    text=f"synthetic utterance {i} for {speaker}",
                )
            )
    return CorpusManifest(tuple(records))


def paper_scale_counts() -> dict[str, tuple[str, int]]:
    """Seven speakers with enough material for every blend preset."""
    counts = {}
    for i in range(7):
        counts[f"spk{i}"] = ("F" if i % 2 == 0 else "M", 25500 if i == 0 else 10000)
    return counts


def make_demo_corpus(root, n_speakers: int = 2, utts_per_speaker: int = 3,
                     seconds: float = 0.4, seed: int = 0):
    """Write a playable corpus under ``root``: WAV files plus manifest.tsv.

    Texts are drawn from the bundled lexicon so the full text pipeline
    works without out-of-vocabulary fallbacks.  Returns the manifest path.
    """
    import os

    rng = random.Random(seed)
    words = sorted(Lexicon.bundled().entries)
    records = []
    for s in range(n_speakers):
        speaker = f"spk{s}"
        os.makedirs(os.path.join(root, "audio", speaker), exist_ok=True)
        for i in range(utts_per_speaker):
            clip = tone_clip(speaker_tone_hz(s) * (1.0 + 0.05 * i), seconds)
            path = os.path.join(root, "audio", speaker, f"{i:04d}.wav")
            write_wav(path, clip)
            text = " ".join(rng.choice(words) for _ in range(rng.randint(5, 8))) + "."
            records.append(
                CorpusRecord(
                    utterance_id=f"{speaker}_{i:04d}",
                    speaker_id=speaker,
                    gender="F" if s % 2 == 0 else "M",
                    audio_path=path,
                    text=text,
                )
            )
    CorpusManifest(records)  # reject duplicate ids before writing
    manifest_path = os.path.join(root, "manifest.tsv")
    write_corpus_manifest(manifest_path, records)
    return manifest_path


# -- overfit task for the acoustic model ------------------------------------------


def symbol_block(symbol_id: int, n_mels: int = N_MELS, block_size: int = 5) -> np.ndarray:
    """Deterministic (block_size, n_mels) target pattern for one symbol.

    A Gaussian bump over the mel axis whose centre and width follow the
    symbol id, drifting slightly across the block so frames within a block
    differ.  Values stay in roughly [-4, 4], same scale as log-mel data.
    """
    mel_axis = np.arange(n_mels, dtype=np.float64)
    centre = (symbol_id * 17.0) % n_mels
    width = 4.0 + (symbol_id % 5)
    frames = []
    for k in range(block_size):
        bump = np.exp(-0.5 * ((mel_axis - (centre + k)) / width) ** 2)
        frames.append(8.0 * bump - 4.0)
    return np.stack(frames)


def overfit_utterances(n_utts: int = 5, n_symbols: int = 12, length_range=(4, 7),
                       speakers=("spk0", "spk1"), seed: int = 0):
    """Tiny aligned corpus: one target block per input symbol.

    Returns a list of (symbol_ids, mel_frames, speaker_id) triples whose
    ideal alignment is exactly diagonal, so a model that learns it must
    produce monotone attention.
    """
    rng = random.Random(seed)
    utts = []
    for i in range(n_utts):
        length = rng.randint(*length_range)
        ids = [rng.randrange(n_symbols) for _ in range(length)]
        frames = np.concatenate([symbol_block(s) for s in ids], axis=0)
        utts.append((ids, frames.astype(np.float32), speakers[i % len(speakers)]))
    return utts


# -- planted alignment paths -------------------------------------------------------


def clean_path(n_blocks: int, rng: random.Random,
               max_step: int = 2, max_dwell: int = 6) -> np.ndarray:
    """Monotone non-decreasing path with bounded steps and dwells.

    Positions grow without an encoder ceiling; callers derive the encoder
    length from the finished path, so no clamping plateau can masquerade
    as a planted defect.
    """
    pos, dwell = 0, 0
    out = []
    for _ in range(n_blocks):
        out.append(pos)
        if dwell >= max_dwell or rng.random() < 0.7:
            pos += rng.randint(1, max_step)
            dwell = 0
        else:
            dwell += 1
    return np.asarray(out, dtype=np.int64)


def plant_skip(path: np.ndarray, rng: random.Random, jump: int = 6) -> np.ndarray:
    """Add one forward jump larger than the skip threshold."""
    path = path.copy()
    at = rng.randrange(1, len(path))
    path[at:] += jump
    return path


def plant_repeat(path: np.ndarray, rng: random.Random, drop: int = 3) -> np.ndarray:
    """Fall back by ``drop`` positions mid-path, then re-traverse past the peak."""
    if len(path) < drop + 3:
        raise ValueError("path too short to plant a repeat")
    path = path.copy()
    at = rng.randrange(1, len(path) - drop - 1)
    peak = max(int(path[at]), drop)
    path[at] = peak
    tail = peak - drop + np.arange(len(path) - at - 1, dtype=np.int64)
    path[at + 1:] = tail
    return path


def plant_stuck(path: np.ndarray, rng: random.Random, dwell: int = 25) -> np.ndarray:
    """Hold one position past the dwell threshold, then resume the old steps."""
    at = rng.randrange(0, max(1, len(path) - dwell - 2))
    held = np.full(dwell, path[at], dtype=np.int64)
    out = np.concatenate([path[: at + 1], held, path[at + 1:]])
    return out[: len(path)]


def attention_from_path(path: np.ndarray, n_enc: int | None = None,
                        confidence: float = 0.9) -> np.ndarray:
    """Rows with ``confidence`` mass at the path position, rest uniform."""
    if n_enc is None:
        n_enc = int(path.max()) + 2
    n = len(path)
    rest = (1.0 - confidence) / (n_enc - 1) if n_enc > 1 else 0.0
    matrix = np.full((n, n_enc), rest, dtype=np.float64)
    matrix[np.arange(n), path] = confidence + (rest if n_enc == 1 else 0.0)
    return matrix


def planted_suite(n_per_kind: int = 30, n_blocks: int = 60,
                  seed: int = 0) -> list[tuple[str, np.ndarray]]:
    """Labelled paths: clean controls plus one planted defect per path."""
    rng = random.Random(seed)
    suite = []
    for _ in range(n_per_kind):
        suite.append(("clean", clean_path(n_blocks, rng)))
        suite.append(("skip", plant_skip(clean_path(n_blocks, rng), rng)))
        suite.append(("repeat", plant_repeat(clean_path(n_blocks, rng), rng)))
        suite.append(("stuck", plant_stuck(clean_path(n_blocks, rng), rng)))
    return suite
