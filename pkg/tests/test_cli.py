"""Command line: config parsing, run manifests, exit codes, pipeline end to end."""

import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from blendtts import cli, melspec, records, synthdata
from blendtts.cli import main

TEXTS = [
    "hello world.",
    "the dog is lazy.",
    "this is a test.",
    "speech of the world.",
]


def write_tone(path, seed):
    t = np.arange(2400) / melspec.SAMPLE_RATE
    freq = 200.0 + 60.0 * (seed % 9)
    clip = melspec.AudioClip(0.3 * np.sin(2 * np.pi * freq * t))
    melspec.write_wav(path, clip)


def build_corpus(root, n_utts=20, speaker="spk0"):
    """Corpus manifest with real tiny WAVs; returns the manifest path."""
    wav_dir = root / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n_utts):
        wav = wav_dir / f"{speaker}_{i:03d}.wav"
        write_tone(wav, i)
        lines.append(f"{speaker}_{i:03d}\t{speaker}\tF\t{wav}\t{TEXTS[i % len(TEXTS)]}")
    path = root / "corpus.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


TOY_CONFIG = """\
# toy dims keep the pipeline fast
acoustic.encoder_dim = 16
acoustic.attention_dim = 12
acoustic.decoder_dim = 20
acoustic.speaker_embedding_dim = 4
acoustic.location_filters = 4
acoustic.max_decoder_blocks = 4
vocoder.scale = 32
"""


@pytest.fixture()
def runner():
    return CliRunner()


def invoke(runner, args, expect=0):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == expect, result.output
    return result


class TestParseConfig:
    def test_values_comments_and_whitespace(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text(
            "# leading comment\n"
            "acoustic.encoder_dim = 32   # trailing\n"
            "\n"
            "  vocoder.scale=8\n",
            encoding="utf-8",
        )
        assert cli.parse_config(cfg) == {
            "acoustic.encoder_dim": "32", "vocoder.scale": "8",
        }

    def test_include_splices_and_later_wins(self, tmp_path):
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "base.cfg").write_text(
            "acoustic.encoder_dim = 16\nacoustic.decoder_dim = 20\n", encoding="utf-8")
        top = tmp_path / "top.cfg"
        top.write_text(
            "include sub/base.cfg\nacoustic.encoder_dim = 48\n", encoding="utf-8")
        assert cli.parse_config(top) == {
            "acoustic.encoder_dim": "48", "acoustic.decoder_dim": "20",
        }

    def test_include_cycle_detected(self, tmp_path):
        (tmp_path / "a.cfg").write_text("include b.cfg\n", encoding="utf-8")
        (tmp_path / "b.cfg").write_text("include a.cfg\n", encoding="utf-8")
        import click
        with pytest.raises(click.ClickException, match="cycle"):
            cli.parse_config(tmp_path / "a.cfg")

    def test_diamond_include_is_not_a_cycle(self, tmp_path):
        (tmp_path / "base.cfg").write_text("k = base\n", encoding="utf-8")
        (tmp_path / "left.cfg").write_text("include base.cfg\nk = left\n", encoding="utf-8")
        (tmp_path / "right.cfg").write_text("include base.cfg\n", encoding="utf-8")
        top = tmp_path / "top.cfg"
        top.write_text("include left.cfg\ninclude right.cfg\n", encoding="utf-8")
        # right re-splices base after left's override: later wins.
        assert cli.parse_config(top) == {"k": "base"}

    def test_malformed_line_reports_location(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("just words\n", encoding="utf-8")
        import click
        with pytest.raises(click.ClickException, match="bad.cfg:1"):
            cli.parse_config(cfg)


class TestTypedOverrides:
    def parse(self, tmp_path, text, prefix, defaults):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(text, encoding="utf-8")
        return cli._typed_overrides(cli.parse_config(cfg), prefix, defaults)

    def test_int_and_float_coercion(self, tmp_path):
        out = self.parse(
            tmp_path,
            "acoustic.encoder_dim = 32\nacoustic.dropout_p = 0.25\n",
            "acoustic", cli._ACOUSTIC_DEFAULTS,
        )
        assert out == {"encoder_dim": 32, "dropout_p": 0.25}
        assert isinstance(out["encoder_dim"], int)

    def test_other_prefixes_ignored(self, tmp_path):
        out = self.parse(
            tmp_path,
            "vocoder.scale = 8\nacoustic.encoder_dim = 32\n",
            "vocoder", cli._VOCODER_DEFAULTS,
        )
        assert out == {"scale": 8}

    def test_unknown_field_rejected(self, tmp_path):
        import click
        with pytest.raises(click.ClickException, match="acoustic.bogus"):
            self.parse(tmp_path, "acoustic.bogus = 1\n", "acoustic",
                       cli._ACOUSTIC_DEFAULTS)


class TestRunManifest:
    def test_fresh_dir_is_stale(self, tmp_path):
        assert not cli._up_to_date(str(tmp_path), "synth", {"seed": 0})

    def test_roundtrip_and_invalidation(self, tmp_path):
        out = tmp_path / "artifact.txt"
        out.write_text("payload", encoding="utf-8")
        params = {"seed": 0, "steps": 3}
        cli._write_manifest(str(tmp_path), "train-acoustic", params, [], [str(out)])
        assert cli._up_to_date(str(tmp_path), "train-acoustic", params)
        assert not cli._up_to_date(str(tmp_path), "train-acoustic", {"seed": 1, "steps": 3})
        out.write_text("tampered", encoding="utf-8")
        assert not cli._up_to_date(str(tmp_path), "train-acoustic", params)

    def test_missing_output_is_stale(self, tmp_path):
        out = tmp_path / "artifact.txt"
        out.write_text("payload", encoding="utf-8")
        cli._write_manifest(str(tmp_path), "synth", {}, [], [str(out)])
        out.unlink()
        assert not cli._up_to_date(str(tmp_path), "synth", {})

    def test_manifest_records_input_hashes(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text("x", encoding="utf-8")
        out = tmp_path / "out.txt"
        out.write_text("y", encoding="utf-8")
        cli._write_manifest(str(tmp_path), "synth", {"seed": 7}, [str(src)], [str(out)])
        with open(tmp_path / "synth.manifest.json", encoding="utf-8") as f:
            manifest = json.load(f)
        assert manifest["command"] == "synth"
        assert manifest["params"]["seed"] == 7
        assert set(manifest["inputs"]) == {str(src)}
        assert all(len(h) == 64 for h in manifest["outputs"].values())


class TestPrepareBlend:
    def test_blend_then_rerun_is_noop(self, runner, tmp_path):
        corpus = build_corpus(tmp_path)
        args = ["prepare-blend", "--corpus", corpus, "--preset", "sd-8500",
                "--scale", "0.002", "--out", str(tmp_path / "exp")]
        first = invoke(runner, args)
        assert "15 train + 2 dev" in first.output
        data = tmp_path / "exp" / "sd-8500" / "data"
        train_text = (data / "train.tsv").read_text(encoding="utf-8")
        assert len(train_text.strip().splitlines()) == 15

        again = invoke(runner, args)
        assert "up to date" in again.output
        assert (data / "train.tsv").read_text(encoding="utf-8") == train_text

    def test_changed_seed_recomputes(self, runner, tmp_path):
        corpus = build_corpus(tmp_path)
        base = ["prepare-blend", "--corpus", corpus, "--preset", "sd-8500",
                "--scale", "0.002", "--out", str(tmp_path / "exp")]
        invoke(runner, base)
        reseeded = invoke(runner, base + ["--seed", "1"])
        assert "up to date" not in reseeded.output

    def test_tampered_output_recomputes(self, runner, tmp_path):
        corpus = build_corpus(tmp_path)
        args = ["prepare-blend", "--corpus", corpus, "--preset", "sd-8500",
                "--scale", "0.002", "--out", str(tmp_path / "exp")]
        invoke(runner, args)
        train = tmp_path / "exp" / "sd-8500" / "data" / "train.tsv"
        original = train.read_text(encoding="utf-8")
        train.write_text(original + "junk\tspk0\tx\ty\n", encoding="utf-8")
        repaired = invoke(runner, args)
        assert "up to date" not in repaired.output
        assert train.read_text(encoding="utf-8") == original

    def test_insufficient_corpus_is_runtime_failure(self, runner, tmp_path):
        corpus = build_corpus(tmp_path, n_utts=4)
        result = runner.invoke(main, [
            "prepare-blend", "--corpus", corpus, "--preset", "sd-8500",
            "--out", str(tmp_path / "exp"),
        ])
        assert result.exit_code == 1
        assert "8500" in result.output

    def test_unknown_preset_is_usage_error(self, runner, tmp_path):
        corpus = build_corpus(tmp_path, n_utts=1)
        result = runner.invoke(main, [
            "prepare-blend", "--corpus", corpus, "--preset", "sd-999",
            "--out", str(tmp_path / "exp"),
        ])
        assert result.exit_code == 2

    def test_missing_corpus_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(main, [
            "prepare-blend", "--corpus", str(tmp_path / "absent.tsv"),
            "--preset", "sd-8500", "--out", str(tmp_path / "exp"),
        ])
        assert result.exit_code == 2


class TestPipeline:
    def test_end_to_end(self, runner, tmp_path):
        corpus = build_corpus(tmp_path)
        exp = tmp_path / "exp"
        model_dir = exp / "sd-8500"
        cfg = tmp_path / "toy.cfg"
        cfg.write_text(TOY_CONFIG, encoding="utf-8")

        invoke(runner, ["prepare-blend", "--corpus", corpus, "--preset", "sd-8500",
                        "--scale", "0.002", "--out", str(exp)])
        train_tsv = model_dir / "data" / "train.tsv"

        features = model_dir / "features"
        extracted = invoke(runner, ["extract-features", "--manifest", str(train_tsv),
                                    "--out", str(features)])
        assert "15 utterances" in extracted.output
        assert len(list(features.glob("*.mel"))) == 15
        assert "up to date" in invoke(
            runner, ["extract-features", "--manifest", str(train_tsv),
                     "--out", str(features)]).output

        ckpt = model_dir / "ckpt"
        invoke(runner, ["train-acoustic", "--manifest", str(train_tsv),
                        "--features", str(features), "--config", str(cfg),
                        "--steps", "3", "--batch-size", "2", "--out", str(ckpt)])
        assert (ckpt / "acoustic.pt").is_file()
        losses = (ckpt / "acoustic_losses.jsonl").read_text(encoding="utf-8")
        assert len(losses.strip().splitlines()) == 3
        assert all({"step", "loss", "mel", "stop"} == set(json.loads(l))
                   for l in losses.strip().splitlines())
        assert "up to date" in invoke(
            runner, ["train-acoustic", "--manifest", str(train_tsv),
                     "--features", str(features), "--config", str(cfg),
                     "--steps", "3", "--batch-size", "2", "--out", str(ckpt)]).output

        invoke(runner, ["train-vocoder", "--manifest", str(train_tsv),
                        "--features", str(features), "--config", str(cfg),
                        "--steps", "2", "--out", str(ckpt)])
        assert (ckpt / "vocoder.pt").is_file()
        voc_losses = (ckpt / "vocoder_losses.jsonl").read_text(encoding="utf-8")
        assert len(voc_losses.strip().splitlines()) == 2

        sentences = tmp_path / "sentences.tsv"
        sentences.write_text("s1\thello world.\ns2\tthe lazy dog.\n", encoding="utf-8")
        synth_dir = model_dir / "synth"
        synth_args = ["synth", "--acoustic", str(ckpt / "acoustic.pt"),
                      "--vocoder", str(ckpt / "vocoder.pt"),
                      "--sentences", str(sentences), "--speaker", "spk0",
                      "--out", str(synth_dir)]
        invoke(runner, synth_args)
        for utt in ("s1", "s2"):
            assert (synth_dir / f"{utt}.npz").is_file()
            assert (synth_dir / f"{utt}.mel").is_file()
            clip = melspec.read_wav(synth_dir / f"{utt}.wav")
            assert len(clip.samples) % melspec.HOP_LENGTH == 0
        assert "up to date" in invoke(runner, synth_args).output

        report = invoke(runner, ["stability-report", "--exp-dir", str(exp),
                                 "--model", "sd-8500", "--n-utts", "2"])
        assert "sd-8500" in report.output
        assert (model_dir / "reports" / "stability.json").is_file()

        # Every stage left a resumability manifest beside its outputs.
        for stage_dir, command in [
            (model_dir / "data", "prepare-blend"),
            (features, "extract-features"),
            (ckpt, "train-acoustic"),
            (ckpt, "train-vocoder"),
            (synth_dir, "synth"),
            (model_dir / "reports", "stability-report"),
        ]:
            assert (stage_dir / f"{command}.manifest.json").is_file()

    def test_synth_rejects_malformed_sentences(self, runner, tmp_path):
        corpus = build_corpus(tmp_path, n_utts=20)
        exp = tmp_path / "exp"
        cfg = tmp_path / "toy.cfg"
        cfg.write_text(TOY_CONFIG, encoding="utf-8")
        invoke(runner, ["prepare-blend", "--corpus", corpus, "--preset", "sd-8500",
                        "--scale", "0.002", "--out", str(exp)])
        train_tsv = exp / "sd-8500" / "data" / "train.tsv"
        features = exp / "sd-8500" / "features"
        invoke(runner, ["extract-features", "--manifest", str(train_tsv),
                        "--out", str(features)])
        ckpt = exp / "sd-8500" / "ckpt"
        invoke(runner, ["train-acoustic", "--manifest", str(train_tsv),
                        "--features", str(features), "--config", str(cfg),
                        "--steps", "1", "--batch-size", "2", "--out", str(ckpt)])
        bad = tmp_path / "bad.tsv"
        bad.write_text("no tab here\n", encoding="utf-8")
        result = runner.invoke(main, ["synth", "--acoustic", str(ckpt / "acoustic.pt"),
                                      "--sentences", str(bad), "--speaker", "spk0",
                                      "--out", str(tmp_path / "synth")])
        assert result.exit_code == 1
        assert "bad.tsv:1" in result.output


class TestTrainConfigErrors:
    def test_unknown_config_key_fails_friendly(self, runner, tmp_path):
        manifest = tmp_path / "train.tsv"
        manifest.write_text("", encoding="utf-8")
        features = tmp_path / "features"
        features.mkdir()
        cfg = tmp_path / "c.cfg"
        cfg.write_text("acoustic.bogus = 1\n", encoding="utf-8")
        result = runner.invoke(main, ["train-acoustic", "--manifest", str(manifest),
                                      "--features", str(features), "--config", str(cfg),
                                      "--out", str(tmp_path / "ckpt")])
        assert result.exit_code == 1
        assert "acoustic.bogus" in result.output


def plant_record(utt_id, speaker, positions):
    att = synthdata.attention_from_path(np.asarray(positions, dtype=np.int64))
    n = att.shape[0]
    stops = np.full(n, 0.01)
    stops[-1] = 0.95
    mel = melspec.MelSpectrogram(np.zeros((5 * n, melspec.N_MELS), dtype=np.float32))
    return records.SynthesisRecord(utt_id, speaker, mel, att, stops, True, 0)


class TestStabilityReport:
    def build_exp(self, tmp_path, model="sd-8500"):
        synth_dir = tmp_path / model / "synth"
        synth_dir.mkdir(parents=True)
        clean = list(range(12))
        skip = [0, 1, 2, 9, 10, 11]
        plan = [
            ("u0", "spk0", clean), ("u1", "spk0", clean), ("u2", "spk0", skip),
            ("u3", "spk1", clean), ("u4", "spk1", clean), ("u5", "spk1", clean),
        ]
        for utt, speaker, positions in plan:
            records.save_record(synth_dir / f"{utt}.npz",
                                plant_record(utt, speaker, positions))
        return tmp_path

    def test_table_and_report_files(self, runner, tmp_path):
        exp = self.build_exp(tmp_path)
        result = invoke(runner, ["stability-report", "--exp-dir", str(exp),
                                 "--model", "sd-8500", "--n-utts", "3"])
        assert "sd-8500" in result.output
        assert "83.3%" in result.output  # 5 of 6 records are stable
        assert "8500" in result.output   # training utterances from the preset
        with open(exp / "sd-8500" / "reports" / "stability.json", encoding="utf-8") as f:
            report = json.load(f)
        assert report["stable"] == 5
        assert report["total"] == 6

    def test_utterance_count_mismatch(self, runner, tmp_path):
        exp = self.build_exp(tmp_path)
        result = runner.invoke(main, ["stability-report", "--exp-dir", str(exp),
                                      "--model", "sd-8500", "--n-utts", "75"])
        assert result.exit_code == 1
        assert "75" in result.output

    def test_missing_synth_dir(self, runner, tmp_path):
        result = runner.invoke(main, ["stability-report", "--exp-dir", str(tmp_path),
                                      "--model", "mx7-5000"])
        assert result.exit_code == 1
        assert "mx7-5000" in result.output


class TestMushraAnalyze:
    def test_report_artifacts(self, runner, tmp_path, table2_csv):
        out = tmp_path / "analysis"
        result = invoke(runner, ["mushra-analyze", "--scores", table2_csv,
                                 "--out", str(out)])
        assert "naturalness" in result.output
        report_text = (out / "report.txt").read_text(encoding="utf-8")
        assert result.output == report_text
        assert (out / "boxplot.csv").is_file()
        with open(out / "summary.json", encoding="utf-8") as f:
            summary = json.load(f)
        assert len(summary) == 4
        assert all("median" in entry for entry in summary.values())
        assert (out / "mushra-analyze.manifest.json").is_file()

    def test_rerun_is_deterministic(self, runner, tmp_path, table2_csv):
        out = tmp_path / "analysis"
        invoke(runner, ["mushra-analyze", "--scores", table2_csv, "--out", str(out)])
        first = (out / "report.txt").read_bytes()
        invoke(runner, ["mushra-analyze", "--scores", table2_csv, "--out", str(out)])
        assert (out / "report.txt").read_bytes() == first

    def test_bad_scores_file(self, runner, tmp_path):
        bad = tmp_path / "scores.csv"
        bad.write_text("wrong,header\n", encoding="utf-8")
        result = runner.invoke(main, ["mushra-analyze", "--scores", str(bad),
                                      "--out", str(tmp_path / "out")])
        assert result.exit_code == 1
        assert "header" in result.output

    def test_unknown_mode_is_usage_error(self, runner, tmp_path, table2_csv):
        result = runner.invoke(main, ["mushra-analyze", "--scores", table2_csv,
                                      "--mode", "preference", "--out", str(tmp_path)])
        assert result.exit_code == 2


class TestUsage:
    def test_help_lists_all_commands(self, runner):
        result = invoke(runner, ["--help"])
        for command in ("prepare-blend", "extract-features", "train-acoustic",
                        "train-vocoder", "synth", "stability-report",
                        "mushra-serve", "mushra-analyze"):
            assert command in result.output

    def test_unknown_flag_is_usage_error(self, runner):
        assert runner.invoke(main, ["synth", "--frobnicate"]).exit_code == 2

    def test_unknown_command_is_usage_error(self, runner):
        assert runner.invoke(main, ["transmogrify"]).exit_code == 2

    def test_missing_required_option_is_usage_error(self, runner):
        assert runner.invoke(main, ["extract-features"]).exit_code == 2
