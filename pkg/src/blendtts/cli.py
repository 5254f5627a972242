"""Command-line pipeline: blend prep, features, training, synthesis, evaluation.

Every subcommand writes a JSON run manifest next to its outputs recording
the parameters, seeds, input hashes and output hashes.  Rerunning a
subcommand with identical parameters while the recorded output hashes
still match is a no-op, which makes long experiment scripts restartable.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Config files are flat ``key = value`` text; ``#`` starts a comment and
``include <path>`` splices another file (relative to the including file).
Keys seen later override earlier ones.  Model keys are prefixed, e.g.
``acoustic.encoder_dim = 32`` or ``vocoder.scale = 8``.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import logging
import os
import sys
import time

import click
import numpy as np
import torch

from . import acoustic as ac
from . import blends, melspec, mushra, stability, vocoder as vc
from .evalserve import EvalError
from .records import load_record, save_record
from .textfront import Lexicon, SymbolInventory, TextFrontendError, text_to_sequence

logger = logging.getLogger(__name__)

_FAILURES = (
    ValueError, RuntimeError, OSError, KeyError, TextFrontendError, EvalError,
)


def _friendly_errors(fn):
    """Map module failures onto exit code 1 with the error text preserved."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except _FAILURES as e:
            raise click.ClickException(f"{type(e).__name__}: {e}") from e

    return wrapper


# -- config files ---------------------------------------------------------------


def parse_config(path) -> dict[str, str]:
    values: dict[str, str] = {}

    def load(p: str, stack: tuple[str, ...]):
        p = os.path.abspath(p)
        if p in stack:
            raise click.ClickException(f"config include cycle via {p}")
        with open(p, encoding="utf-8") as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if line.startswith("include "):
                    target = line[len("include "):].strip()
                    load(os.path.join(os.path.dirname(p), target), stack + (p,))
                    continue
                if "=" not in line:
                    raise click.ClickException(f"{p}:{lineno}: expected key = value")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()

    load(str(path), ())
    return values


def _typed_overrides(config: dict[str, str], prefix: str, defaults) -> dict:
    """Pull ``prefix.field`` keys and coerce them to the dataclass field types."""
    out = {}
    fields = {f.name: f.type for f in dataclasses.fields(defaults)}
    for key, raw in config.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name not in fields:
            raise click.ClickException(f"unknown config key {key!r}")
        ftype = str(fields[name])
        if "bool" in ftype:
            out[name] = raw.lower() in ("1", "true", "yes")
        elif "int" in ftype:
            out[name] = int(raw)
        elif "float" in ftype:
            out[name] = float(raw)
        else:
            out[name] = raw
    return out


# -- run manifests ----------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(out_dir, command: str) -> str:
    return os.path.join(out_dir, f"{command}.manifest.json")


def _up_to_date(out_dir, command: str, params: dict) -> bool:
    path = _manifest_path(out_dir, command)
    if not os.path.isfile(path):
        return False
    try:
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError):
        return False
    if manifest.get("params") != params:
        return False
    outputs = manifest.get("outputs", {})
    if not outputs:
        return False
    return all(os.path.isfile(p) and _sha256(p) == h for p, h in outputs.items())


def _write_manifest(out_dir, command: str, params: dict,
                    inputs: list[str], outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "params": params,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(_manifest_path(out_dir, command), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


# -- commands ----------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable info-level logging.")
def main(verbose: bool):
    """Multi-speaker blending experiments: data prep through evaluation."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("prepare-blend")
@click.option("--corpus", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--preset", "preset_name", required=True,
              type=click.Choice([s.name for s in blends.table1_presets()]))
@click.option("--target-speaker", default=None, help="Override the default target speaker.")
@click.option("--scale", default=1.0, show_default=True,
              help="Shrink per-speaker counts for desk-scale runs.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_friendly_errors
def prepare_blend(corpus, preset_name, target_speaker, scale, seed, out_dir):
    """Select a training blend and write train/dev manifests."""
    params = {"corpus": str(corpus), "preset": preset_name, "seed": seed,
              "scale": scale, "target_speaker": target_speaker}
    data_dir = os.path.join(out_dir, preset_name, "data")
    if _up_to_date(data_dir, "prepare-blend", params):
        click.echo(f"prepare-blend {preset_name}: up to date")
        return
    spec = dataclasses.replace(blends.preset(preset_name), seed=seed)
    manifest = blends.read_corpus_manifest(corpus)
    train, dev = blends.build_blend(manifest, spec, target_speaker=target_speaker, scale=scale)
    os.makedirs(data_dir, exist_ok=True)
    train_path = os.path.join(data_dir, "train.tsv")
    dev_path = os.path.join(data_dir, "dev.tsv")
    blends.write_training_manifest(train_path, train)
    blends.write_training_manifest(dev_path, dev)
    _write_manifest(data_dir, "prepare-blend", params, [corpus], [train_path, dev_path])
    click.echo(
        f"prepare-blend {preset_name}: {len(train)} train + {len(dev)} dev utterances"
    )


@main.command("extract-features")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_friendly_errors
def extract_features(manifest, out_dir):
    """Compute log-mel features for every utterance in a training manifest."""
    params = {"manifest": str(manifest)}
    if _up_to_date(out_dir, "extract-features", params):
        click.echo("extract-features: up to date")
        return
    records = blends.read_training_manifest(manifest)
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    for rec in records:
        clip = melspec.read_wav(rec.audio_path)
        mel = melspec.extract_mel(clip)
        out_path = os.path.join(out_dir, f"{rec.utterance_id}.mel")
        melspec.write_mel(out_path, mel)
        outputs.append(out_path)
    _write_manifest(out_dir, "extract-features", params, [manifest], outputs)
    click.echo(f"extract-features: {len(outputs)} utterances")


def _load_training_set(manifest, features_dir):
    """(symbol_ids, mel_frames, speaker) triples plus inventory and speakers."""
    inventory = SymbolInventory.default()
    lexicon = Lexicon.bundled()
    records = blends.read_training_manifest(manifest)
    speakers = tuple(sorted({r.speaker_id for r in records}))
    triples = []
    for rec in records:
        seq = text_to_sequence(rec.text, lexicon, inventory, utterance_id=rec.utterance_id)
        mel = melspec.read_mel(os.path.join(features_dir, f"{rec.utterance_id}.mel"))
        triples.append((list(seq.symbol_ids), mel, rec.speaker_id))
    return triples, inventory, speakers


@main.command("train-acoustic")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--features", "features_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--steps", default=100, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_friendly_errors
def train_acoustic(manifest, features_dir, config_path, steps, batch_size, lr, seed, out_dir):
    """Train the sequence-to-sequence model on extracted features."""
    overrides = _typed_overrides(parse_config(config_path), "acoustic", _ACOUSTIC_DEFAULTS) \
        if config_path else {}
    params = {"manifest": str(manifest), "steps": steps, "batch_size": batch_size,
              "lr": lr, "seed": seed, "overrides": {k: str(v) for k, v in sorted(overrides.items())}}
    if _up_to_date(out_dir, "train-acoustic", params):
        click.echo("train-acoustic: up to date")
        return
    triples, inventory, speakers = _load_training_set(manifest, features_dir)
    config = ac.AcousticConfig(
        inventory_size=len(inventory.symbols), speaker_count=len(speakers), **overrides
    )
    torch.manual_seed(seed)
    model = ac.AcousticModel(config, ac.SpeakerTable(speakers))
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    rng = torch.Generator()
    rng.manual_seed(seed)

    os.makedirs(out_dir, exist_ok=True)
    losses_path = os.path.join(out_dir, "acoustic_losses.jsonl")
    with open(losses_path, "w", encoding="utf-8") as losses:
        for step in range(steps):
            batch = [triples[(step * batch_size + i) % len(triples)] for i in range(batch_size)]
            batch = [(ids, mel.frames, spk) for ids, mel, spk in batch]
            stats = ac.train_step(model, optimizer, batch, rng)
            losses.write(json.dumps({"step": step, "loss": stats.loss,
                                     "mel": stats.mel_loss, "stop": stats.stop_loss}) + "\n")
            if step % 50 == 0:
                logger.info("step %d loss %.4f", step, stats.loss)
    ckpt_path = os.path.join(out_dir, "acoustic.pt")
    ac.save_acoustic(ckpt_path, model, extra={
        "seed": seed,
        "inventory": list(inventory.symbols),
        "inventory_sha256": ac.inventory_fingerprint(inventory.symbols),
    })
    _write_manifest(out_dir, "train-acoustic", params, [manifest], [ckpt_path, losses_path])
    click.echo(f"train-acoustic: {steps} steps, checkpoint at {ckpt_path}")


_ACOUSTIC_DEFAULTS = ac.AcousticConfig(inventory_size=1, speaker_count=1)
_VOCODER_DEFAULTS = vc.VocoderConfig()


@main.command("train-vocoder")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--features", "features_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--steps", default=50, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_friendly_errors
def train_vocoder(manifest, features_dir, config_path, steps, lr, seed, out_dir):
    """Train the sample-level vocoder on audio/feature pairs."""
    overrides = _typed_overrides(parse_config(config_path), "vocoder", _VOCODER_DEFAULTS) \
        if config_path else {}
    params = {"manifest": str(manifest), "steps": steps, "lr": lr, "seed": seed,
              "overrides": {k: str(v) for k, v in sorted(overrides.items())}}
    if _up_to_date(out_dir, "train-vocoder", params):
        click.echo("train-vocoder: up to date")
        return
    records = blends.read_training_manifest(manifest)
    pairs = []
    for rec in records:
        clip = melspec.read_wav(rec.audio_path)
        mel = melspec.read_mel(os.path.join(features_dir, f"{rec.utterance_id}.mel"))
        pairs.append((clip, mel))
    torch.manual_seed(seed)
    model = vc.VocoderModel(vc.VocoderConfig(**overrides))
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)

    os.makedirs(out_dir, exist_ok=True)
    losses_path = os.path.join(out_dir, "vocoder_losses.jsonl")
    with open(losses_path, "w", encoding="utf-8") as losses:
        for step in range(steps):
            clip, mel = pairs[step % len(pairs)]
            loss = vc.train_step(model, optimizer, clip, mel)
            losses.write(json.dumps({"step": step, "loss": loss}) + "\n")
            if step % 50 == 0:
                logger.info("step %d loss %.4f", step, loss)
    ckpt_path = os.path.join(out_dir, "vocoder.pt")
    vc.save_vocoder(ckpt_path, model, extra={"seed": seed})
    _write_manifest(out_dir, "train-vocoder", params, [manifest], [ckpt_path, losses_path])
    click.echo(f"train-vocoder: {steps} steps, checkpoint at {ckpt_path}")


@main.command("synth")
@click.option("--acoustic", "acoustic_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--vocoder", "vocoder_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--sentences", "sentences_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="TSV: utterance_id<TAB>text, one per line.")
@click.option("--speaker", required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_friendly_errors
def synth(acoustic_path, vocoder_path, sentences_path, speaker, seed, out_dir):
    """Synthesize sentences for one speaker; writes records, mels, optional WAVs."""
    params = {"acoustic": str(acoustic_path), "vocoder": vocoder_path and str(vocoder_path),
              "sentences": str(sentences_path), "speaker": speaker, "seed": seed}
    if _up_to_date(out_dir, "synth", params):
        click.echo("synth: up to date")
        return
    model = ac.load_acoustic(acoustic_path)
    payload = torch.load(acoustic_path, map_location="cpu", weights_only=False)
    inventory = SymbolInventory(tuple(payload["extra"]["inventory"]))
    lexicon = Lexicon.bundled()
    voc = vc.load_vocoder(vocoder_path) if vocoder_path else None

    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    with open(sentences_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise click.ClickException(
                    f"{sentences_path}:{lineno}: expected utterance_id<TAB>text"
                )
            utt_id, text = line.split("\t", 1)
            seq = text_to_sequence(text, lexicon, inventory, utterance_id=utt_id)
            record = ac.synthesize(
                model, list(seq.symbol_ids), speaker,
                rng_seed=seed + lineno, utterance_id=utt_id,
            )
            rec_path = os.path.join(out_dir, f"{utt_id}.npz")
            save_record(rec_path, record)
            mel_path = os.path.join(out_dir, f"{utt_id}.mel")
            melspec.write_mel(mel_path, record.mel)
            outputs.extend([rec_path, mel_path])
            if voc is not None:
                clip = vc.generate(voc, record.mel, seed=seed + lineno)
                wav_path = os.path.join(out_dir, f"{utt_id}.wav")
                melspec.write_wav(wav_path, clip)
                outputs.append(wav_path)
    _write_manifest(out_dir, "synth", params, [acoustic_path, sentences_path], outputs)
    click.echo(f"synth: wrote {len(outputs)} files to {out_dir}")


@main.command("stability-report")
@click.option("--exp-dir", default=".", show_default=True, type=click.Path(file_okay=False),
              help="Experiment root holding <model>/synth/ record directories.")
@click.option("--model", "models", required=True, multiple=True,
              help="Model (blend) name; repeatable.")
@click.option("--n-utts", default=None, type=int,
              help="Expected synthesized utterances per speaker; mismatch fails.")
@_friendly_errors
def stability_report(exp_dir, models, n_utts):
    """Classify synthesized alignments and print the stability table."""
    reports, training_utts = [], {}
    for name in models:
        synth_dir = os.path.join(exp_dir, name, "synth")
        if not os.path.isdir(synth_dir):
            raise click.ClickException(f"no synth directory for model {name!r}: {synth_dir}")
        paths = sorted(
            os.path.join(synth_dir, p) for p in os.listdir(synth_dir) if p.endswith(".npz")
        )
        if not paths:
            raise click.ClickException(f"no synthesis records under {synth_dir}")
        verdicts = [stability.classify(load_record(p)) for p in paths]
        if n_utts is not None:
            per_speaker: dict[str, int] = {}
            for v in verdicts:
                per_speaker[v.speaker_id] = per_speaker.get(v.speaker_id, 0) + 1
            bad = {s: c for s, c in per_speaker.items() if c != n_utts}
            if bad:
                raise click.ClickException(
                    f"model {name!r}: expected {n_utts} utterances per speaker, got {bad}"
                )
        reports.append(stability.stability_rate(verdicts, name))
        try:
            training_utts[name] = str(blends.preset(name).total_utterances())
        except blends.BlendError:
            training_utts[name] = "-"

    table = stability.format_table(reports, training_utts)
    for rep, name in zip(reports, models):
        report_dir = os.path.join(exp_dir, name, "reports")
        os.makedirs(report_dir, exist_ok=True)
        out_path = os.path.join(report_dir, "stability.json")
        with open(out_path, "w", encoding="utf-8") as f:
            json.dump(stability.report_dict(rep), f, indent=2, sort_keys=True)
            f.write("\n")
        _write_manifest(report_dir, "stability-report",
                        {"model": name, "n_utts": n_utts}, [], [out_path])
    click.echo(table, nl=False)


@main.command("mushra-serve")
@click.option("--db", "db_path", required=True, type=click.Path(dir_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8571, show_default=True)
@click.option("--ui", "static_dir", default=None, type=click.Path(file_okay=False, exists=True),
              help="Directory of built rater-UI assets to serve at /.")
@_friendly_errors
def mushra_serve(db_path, host, port, static_dir):
    """Run the listening-test service until interrupted."""
    from . import evalserve

    click.echo(f"serving listening tests on http://{host}:{port} (db: {db_path})")
    evalserve.serve(db_path, host=host, port=port, static_dir=static_dir)


@main.command("mushra-analyze")
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", default="naturalness", show_default=True,
              type=click.Choice(["naturalness", "similarity"]))
@click.option("--alpha", default=0.05, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_friendly_errors
def mushra_analyze(scores_path, mode, alpha, out_dir):
    """Aggregate a scores file: medians, rank order, pairwise significance."""
    params = {"scores": str(scores_path), "mode": mode, "alpha": alpha}
    rows = mushra.read_scores(scores_path)
    stats = mushra.aggregate(rows)
    significance = mushra.significance_matrix(rows, alpha=alpha)
    report = mushra.format_report(stats, significance, mode=mode, alpha=alpha)

    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.txt")
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(report)
    boxplot_path = os.path.join(out_dir, "boxplot.csv")
    with open(boxplot_path, "w", encoding="utf-8") as f:
        f.write(mushra.boxplot_data(stats))
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(
            {s.system: dataclasses.asdict(s) for s in stats.values()},
            f, indent=2, sort_keys=True,
        )
        f.write("\n")
    _write_manifest(out_dir, "mushra-analyze", params, [scores_path],
                    [report_path, boxplot_path, summary_path])
    click.echo(report, nl=False)


if __name__ == "__main__":
    main()
