"""Sequence-to-sequence acoustic model predicting mel frames in blocks of five.

The encoder embeds a symbol sequence and runs it through a convolutional
stack and a bidirectional GRU.  The decoder is autoregressive over blocks:
each step attends over the encoder outputs with an additive,
location-sensitive attention and emits ``block_size`` mel frames plus a
stop logit.  A learned speaker embedding conditions both the attention
query and the decoder input, so one set of weights serves every speaker
in the table.

Two behaviours matter for reproducibility and are therefore explicit
rather than ambient state:

* Scheduled sampling.  During training each block's input frame is the
  ground truth with probability ``teacher_forcing_p`` and the model's own
  (detached) prediction otherwise.  The draw comes from the generator
  passed to ``train_step`` and the decision counts are reported back.
* Dropout.  Prediction keeps dropout active (it is part of the model's
  output distribution, not just a regulariser), so every sampling site
  draws from an explicit ``torch.Generator``.  Seeding that generator
  makes synthesis bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import load_checkpoint, save_checkpoint
from .melspec import N_MELS, MelSpectrogram
from .records import SynthesisRecord

logger = logging.getLogger(__name__)

BLOCK_SIZE = 5

MODEL_TYPE = "acoustic"


class AcousticError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message: str, utterance_ids: tuple[str, ...] = ()):
        super().__init__(message)
        self.utterance_ids = utterance_ids


@dataclass(frozen=True)
class AcousticConfig:
    """Hyperparameters; defaults are sized for CPU-scale experiments."""

    inventory_size: int
    speaker_count: int
    encoder_dim: int = 128
    attention_dim: int = 128
    decoder_dim: int = 256
    speaker_embedding_dim: int = 16
    location_filters: int = 8
    location_kernel: int = 15
    n_mels: int = N_MELS
    block_size: int = BLOCK_SIZE
    dropout_p: float = 0.1
    teacher_forcing_p: float = 0.9
    stop_threshold: float = 0.5
    stop_pos_weight: float = 5.0
    max_decoder_blocks: int = 200
    inference_dropout: bool = True

    def __post_init__(self):
        if self.inventory_size < 1:
            raise AcousticError("inventory_size must be positive")
        if self.speaker_count < 1:
            raise AcousticError("speaker_count must be positive")
        if self.block_size != BLOCK_SIZE:
            raise AcousticError(f"block_size is fixed at {BLOCK_SIZE}")
        if self.n_mels != N_MELS:
            raise AcousticError(f"n_mels is fixed at {N_MELS}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise AcousticError("dropout_p must lie in [0, 1)")
        if not 0.0 <= self.teacher_forcing_p <= 1.0:
            raise AcousticError("teacher_forcing_p must lie in [0, 1]")
        if self.location_kernel % 2 == 0:
            raise AcousticError("location_kernel must be odd")
        if self.max_decoder_blocks < 1:
            raise AcousticError("max_decoder_blocks must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AcousticConfig":
        return cls(**d)


@dataclass(frozen=True)
class SpeakerTable:
    """Ordered speaker ids; position in the tuple is the embedding row."""

    ids: tuple[str, ...]

    def __post_init__(self):
        if not self.ids:
            raise AcousticError("speaker table must not be empty")
        if len(set(self.ids)) != len(self.ids):
            raise AcousticError("speaker table contains duplicate ids")

    def index_of(self, speaker_id: str) -> int:
        try:
            return self.ids.index(speaker_id)
        except ValueError:
            raise AcousticError(f"unknown speaker {speaker_id!r}") from None


@dataclass(frozen=True)
class TrainStats:
    """Losses and scheduled-sampling bookkeeping for one optimiser step."""

    loss: float
    mel_loss: float
    stop_loss: float
    teacher_forced_blocks: int
    total_blocks: int


def _seeded_dropout(x: Tensor, p: float, rng: torch.Generator | None) -> Tensor:
    """Inverted dropout driven by an explicit generator; identity when off."""
    if rng is None or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=rng, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class AcousticModel(nn.Module):
    def __init__(self, config: AcousticConfig, speakers: SpeakerTable):
        super().__init__()
        if len(speakers.ids) != config.speaker_count:
            raise AcousticError(
                f"speaker table has {len(speakers.ids)} ids, config expects {config.speaker_count}"
            )
        self.config = config
        self.speakers = speakers

        c = config
        self.symbol_embedding = nn.Embedding(c.inventory_size, c.encoder_dim)
        self.encoder_convs = nn.ModuleList(
            [nn.Conv1d(c.encoder_dim, c.encoder_dim, kernel_size=5, padding=2) for _ in range(2)]
        )
        # Bidirectional halves concatenate back to encoder_dim.
        if c.encoder_dim % 2 != 0:
            raise AcousticError("encoder_dim must be even")
        self.encoder_rnn = nn.GRU(
            c.encoder_dim, c.encoder_dim // 2, batch_first=True, bidirectional=True
        )

        self.speaker_embedding = nn.Embedding(c.speaker_count, c.speaker_embedding_dim)

        self.query_proj = nn.Linear(c.decoder_dim, c.attention_dim, bias=False)
        self.key_proj = nn.Linear(c.encoder_dim, c.attention_dim, bias=False)
        self.location_conv = nn.Conv1d(
            1, c.location_filters, kernel_size=c.location_kernel,
            padding=c.location_kernel // 2, bias=False,
        )
        self.location_proj = nn.Linear(c.location_filters, c.attention_dim, bias=False)
        self.energy_bias = nn.Parameter(torch.zeros(c.attention_dim))
        # Weight-normalised energy projection: direction and gain learned apart.
        self.energy_dir = nn.Parameter(torch.randn(c.attention_dim) / c.attention_dim**0.5)
        self.energy_gain = nn.Parameter(torch.tensor(1.0))

        self.attention_cell = nn.GRUCell(c.n_mels + c.speaker_embedding_dim, c.decoder_dim)
        self.decoder_cell = nn.GRUCell(
            c.encoder_dim + c.n_mels + c.speaker_embedding_dim, c.decoder_dim
        )
        self.frame_proj = nn.Linear(c.decoder_dim + c.encoder_dim, c.n_mels * c.block_size)
        self.stop_proj = nn.Linear(c.decoder_dim + c.encoder_dim, 1)

    # -- components ---------------------------------------------------------

    def speaker_embed(self, speaker_id: str) -> Tensor:
        idx = self.speakers.index_of(speaker_id)
        return self.speaker_embedding(torch.tensor(idx))

    def encode_sequence(self, symbol_ids) -> Tensor:
        """Symbol ids -> (T_enc, encoder_dim) memory."""
        ids = torch.as_tensor(symbol_ids, dtype=torch.long)
        if ids.ndim != 1 or ids.numel() == 0:
            raise AcousticError("symbol_ids must be a non-empty 1-D sequence")
        if bool((ids < 0).any()) or bool((ids >= self.config.inventory_size).any()):
            raise AcousticError("symbol id outside inventory range")
        x = self.symbol_embedding(ids)  # (T, D)
        h = x.T.unsqueeze(0)  # (1, D, T)
        for conv in self.encoder_convs:
            h = torch.tanh(conv(h))
        h = h.squeeze(0).T.unsqueeze(0)  # (1, T, D)
        out, _ = self.encoder_rnn(h)
        return out.squeeze(0)

    def energy_vector(self) -> Tensor:
        direction = self.energy_dir / torch.linalg.vector_norm(self.energy_dir)
        return self.energy_gain * direction

    def attend(self, query: Tensor, prev_weights: Tensor, memory: Tensor,
               memory_proj: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """One attention step.

        ``query`` is the attention-cell state, ``prev_weights`` the previous
        normalised weights over ``memory`` rows.  Returns the new weights and
        the context vector.  The location term is a 1-D convolution over the
        previous weights, so the mechanism sees where it attended last block.
        """
        if prev_weights.ndim != 1 or prev_weights.shape[0] != memory.shape[0]:
            raise AcousticError("prev_weights must align with the encoder memory")
        if memory_proj is None:
            memory_proj = self.key_proj(memory)
        loc = self.location_conv(prev_weights.view(1, 1, -1)).squeeze(0).T  # (T, F)
        hidden = torch.tanh(
            self.query_proj(query).unsqueeze(0) + memory_proj
            + self.location_proj(loc) + self.energy_bias
        )
        energies = hidden @ self.energy_vector()
        weights = torch.softmax(energies, dim=0)
        context = weights @ memory
        return weights, context

    def initial_attention_weights(self, memory_len: int) -> Tensor:
        w = torch.zeros(memory_len, dtype=self.symbol_embedding.weight.dtype)
        w[0] = 1.0
        return w

    def initial_decoder_state(self) -> Tensor:
        return torch.zeros(self.config.decoder_dim, dtype=self.symbol_embedding.weight.dtype)

    def decode_block(self, context: Tensor, last_frame: Tensor, speaker_embedding: Tensor,
                     state: Tensor, rng: torch.Generator | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Emit one block: (block_size, n_mels) frames, stop logit, new state.

        ``state`` must come from ``initial_decoder_state`` or a previous call;
        ``rng`` enables dropout on the decoder input and pre-projection
        activations.
        """
        if state is None:
            raise AcousticError("decoder state not initialised; call initial_decoder_state()")
        c = self.config
        x = torch.cat([context, last_frame, speaker_embedding])
        x = _seeded_dropout(x, c.dropout_p, rng)
        new_state = self.decoder_cell(x, state)
        feat = torch.cat([new_state, context])
        feat = _seeded_dropout(feat, c.dropout_p, rng)
        block = self.frame_proj(feat).view(c.block_size, c.n_mels)
        stop_logit = self.stop_proj(feat).squeeze(-1)
        return block, stop_logit, new_state

    # -- unrolled decoding --------------------------------------------------

    def run_decoder(self, symbol_ids, speaker_id: str, *,
                    target_blocks: Tensor | None = None,
                    rng: torch.Generator | None = None,
                    use_dropout: bool = False,
                    teacher_forcing_p: float | None = None,
                    max_blocks: int | None = None) -> dict:
        """Shared autoregressive loop for training and synthesis.

        With ``target_blocks`` the loop runs exactly that many blocks and
        applies scheduled sampling; without, it free-runs until the stop
        gate fires or ``max_blocks`` is hit.  Returns a dict with stacked
        ``blocks``, ``stop_logits``, ``attention`` rows, the termination
        flag and the scheduled-sampling counters.
        """
        c = self.config
        memory = self.encode_sequence(symbol_ids)
        memory_proj = self.key_proj(memory)
        spk = self.speaker_embed(speaker_id)

        drop_rng = rng if use_dropout else None
        tf_p = c.teacher_forcing_p if teacher_forcing_p is None else teacher_forcing_p
        if target_blocks is not None:
            n_blocks = target_blocks.shape[0]
        else:
            n_blocks = max_blocks if max_blocks is not None else c.max_decoder_blocks

        weights = self.initial_attention_weights(memory.shape[0])
        att_state = self.initial_decoder_state()
        dec_state = self.initial_decoder_state()
        last_frame = torch.zeros(c.n_mels, dtype=memory.dtype)

        blocks, stop_logits, att_rows = [], [], []
        forced = 0
        terminated = False
        for b in range(n_blocks):
            frame_in = _seeded_dropout(last_frame, c.dropout_p, drop_rng)
            att_state = self.attention_cell(torch.cat([frame_in, spk]), att_state)
            weights, context = self.attend(att_state, weights, memory, memory_proj)
            block, stop_logit, dec_state = self.decode_block(
                context, frame_in, spk, dec_state, rng=drop_rng
            )
            blocks.append(block)
            stop_logits.append(stop_logit)
            att_rows.append(weights)

            if target_blocks is not None:
                if rng is None:
                    take_truth = tf_p >= 1.0
                else:
                    take_truth = bool(torch.rand((), generator=rng) < tf_p)
                if take_truth:
                    forced += 1
                    last_frame = target_blocks[b, -1]
                else:
                    last_frame = block[-1].detach()
            else:
                last_frame = block[-1]
                if torch.sigmoid(stop_logit) >= c.stop_threshold:
                    terminated = True
                    break

        return {
            "blocks": torch.stack(blocks),
            "stop_logits": torch.stack(stop_logits),
            "attention": torch.stack(att_rows),
            "terminated": terminated,
            "teacher_forced_blocks": forced,
            "total_blocks": len(blocks),
        }


# -- training and synthesis --------------------------------------------------


def pad_to_blocks(frames: np.ndarray, block_size: int = BLOCK_SIZE) -> np.ndarray:
    """Repeat the final frame until the count is a multiple of block_size."""
    if frames.ndim != 2:
        raise AcousticError("frames must be 2-D (time, mel)")
    if frames.shape[0] == 0:
        raise AcousticError("cannot pad an empty mel target")
    remainder = frames.shape[0] % block_size
    if remainder == 0:
        return frames
    pad = np.repeat(frames[-1:], block_size - remainder, axis=0)
    return np.concatenate([frames, pad], axis=0)


def _target_tensor(mel, dtype) -> Tensor:
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    padded = pad_to_blocks(frames.astype(np.float64))
    return torch.as_tensor(padded, dtype=dtype).view(-1, BLOCK_SIZE, N_MELS)


def train_step(model: AcousticModel, optimizer: torch.optim.Optimizer,
               batch: list[tuple], rng: torch.Generator,
               grad_clip: float | None = 1.0) -> TrainStats:
    """One optimiser step over ``batch`` of (symbol_ids, mel, speaker_id).

    Loss is mean L1 on mel frames plus stop-gate BCE with a positive-class
    weight (exactly one positive per utterance, so unweighted BCE would let
    the gate sit at zero).  Raises TrainingDiverged on a non-finite loss,
    before the optimiser mutates any weights.
    """
    if not batch:
        raise AcousticError("empty training batch")
    model.train()
    dtype = model.symbol_embedding.weight.dtype
    pos_weight = torch.tensor(model.config.stop_pos_weight, dtype=dtype)

    mel_losses, stop_losses = [], []
    forced = total = 0
    for symbol_ids, mel, speaker_id in batch:
        targets = _target_tensor(mel, dtype)
        out = model.run_decoder(
            symbol_ids, speaker_id, target_blocks=targets, rng=rng, use_dropout=True
        )
        mel_losses.append(torch.mean(torch.abs(out["blocks"] - targets)))
        stop_target = torch.zeros(targets.shape[0], dtype=dtype)
        stop_target[-1] = 1.0
        stop_losses.append(
            nn.functional.binary_cross_entropy_with_logits(
                out["stop_logits"], stop_target, pos_weight=pos_weight
            )
        )
        forced += out["teacher_forced_blocks"]
        total += out["total_blocks"]

    mel_loss = torch.stack(mel_losses).mean()
    stop_loss = torch.stack(stop_losses).mean()
    loss = mel_loss + stop_loss
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            "non-finite training loss", tuple(str(b[0][:8]) for b in batch)
        )

    optimizer.zero_grad()
    loss.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return TrainStats(
        loss=float(loss.detach()), mel_loss=float(mel_loss.detach()),
        stop_loss=float(stop_loss.detach()),
        teacher_forced_blocks=forced, total_blocks=total,
    )


def synthesize(model: AcousticModel, symbol_ids, speaker_id: str, *,
               rng_seed: int = 0, utterance_id: str = "synth",
               max_blocks: int | None = None) -> SynthesisRecord:
    """Free-running synthesis; fully determined by the model and rng_seed.

    Dropout stays on when the config says so; the seed fixes its draws,
    and two calls with equal arguments produce identical records.
    """
    model.eval()
    rng = torch.Generator()
    rng.manual_seed(rng_seed)
    use_dropout = model.config.inference_dropout and model.config.dropout_p > 0.0
    with torch.no_grad():
        out = model.run_decoder(
            symbol_ids, speaker_id, rng=rng, use_dropout=use_dropout,
            max_blocks=max_blocks,
        )
    frames = out["blocks"].reshape(-1, N_MELS).numpy().astype(np.float32)
    attention = out["attention"].numpy().astype(np.float64)
    stops = torch.sigmoid(out["stop_logits"]).numpy().astype(np.float64)
    if not out["terminated"]:
        logger.warning("synthesis for %s hit the block cap without stopping", utterance_id)
    return SynthesisRecord(
        utterance_id=utterance_id,
        speaker_id=speaker_id,
        mel=MelSpectrogram(frames),
        attention=attention,
        stop_trajectory=stops,
        terminated=out["terminated"],
        rng_seed=rng_seed,
        extra={"blocks": out["total_blocks"]},
    )


def frame_attention(record: SynthesisRecord, block_size: int = BLOCK_SIZE) -> np.ndarray:
    """Expand block-rate attention rows to frame rate for plotting overlays."""
    return np.repeat(record.attention, block_size, axis=0)[: record.mel.frames.shape[0]]


# -- persistence --------------------------------------------------------------


def inventory_fingerprint(symbols) -> str:
    return hashlib.sha256("\n".join(symbols).encode("utf-8")).hexdigest()


def save_acoustic(path, model: AcousticModel, extra: dict | None = None) -> None:
    payload = dict(extra or {})
    payload["speakers"] = list(model.speakers.ids)
    save_checkpoint(path, MODEL_TYPE, model.config.to_dict(), model.state_dict(), payload)


def load_acoustic(path) -> AcousticModel:
    payload = load_checkpoint(path, expect_type=MODEL_TYPE)
    config = AcousticConfig.from_dict(payload["config"])
    speakers = SpeakerTable(tuple(payload["extra"]["speakers"]))
    model = AcousticModel(config, speakers)
    model.load_state_dict(payload["state_dict"])
    return model
