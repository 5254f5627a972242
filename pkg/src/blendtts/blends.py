"""Speaker-blend training set construction with 90/10 train/dev splits.

A blend picks a fixed number of utterances per speaker from a corpus
manifest, uniformly at random without replacement under an explicit seed,
then splits each speaker's selection 90/10. The eleven stock recipes cover
speaker-dependent models (one speaker at 8.5k/15k/25k), female-only and
mixed-gender pools at 2.5k/5k/8.5k per speaker, and unbalanced pools of six
supporting speakers at 5k plus a smaller target-speaker share.
"""

from __future__ import annotations

import os
import random
from collections import Counter
from dataclasses import dataclass, field

SUPPORT_COUNT = 5000  # per supporting speaker in unbalanced blends


class BlendError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusRecord:
    utterance_id: str
    speaker_id: str
    gender: str | None
    audio_path: str
    text: str


@dataclass
class CorpusManifest:
    records: list[CorpusRecord]
    by_speaker: dict[str, list[CorpusRecord]] = field(init=False, repr=False)

    def __post_init__(self):
        seen = set()
        by_speaker: dict[str, list[CorpusRecord]] = {}
        for rec in self.records:
            if rec.utterance_id in seen:
                raise BlendError(f"duplicate utterance id {rec.utterance_id!r} in corpus")
            seen.add(rec.utterance_id)
            by_speaker.setdefault(rec.speaker_id, []).append(rec)
        self.by_speaker = by_speaker

    def speaker_counts(self) -> dict[str, int]:
        return {s: len(r) for s, r in self.by_speaker.items()}

    def gender_of(self, speaker_id: str) -> str | None:
        return self.by_speaker[speaker_id][0].gender


@dataclass(frozen=True)
class BlendSpec:
    """Recipe: how many speakers, how many utterances each, optional gender
    filter, and for unbalanced blends a reduced target-speaker count."""

    name: str
    n_speakers: int
    utts_per_speaker: int
    gender: str | None = None
    target_count: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 1 or self.utts_per_speaker < 1:
            raise BlendError(f"blend {self.name}: counts must be positive")
        if self.target_count is not None and self.n_speakers < 2:
            raise BlendError(f"blend {self.name}: unbalanced blend needs supporting speakers")

    def total_utterances(self) -> int:
        if self.target_count is None:
            return self.n_speakers * self.utts_per_speaker
        return (self.n_speakers - 1) * self.utts_per_speaker + self.target_count


def table1_presets() -> list[BlendSpec]:
    return [
        BlendSpec("sd-8500", 1, 8500),
        BlendSpec("sd-15000", 1, 15000),
        BlendSpec("sd-25000", 1, 25000),
        BlendSpec("fe4-2500", 4, 2500, gender="F"),
        BlendSpec("fe4-5000", 4, 5000, gender="F"),
        BlendSpec("fe4-8500", 4, 8500, gender="F"),
        BlendSpec("mx7-2500", 7, 2500),
        BlendSpec("mx7-5000", 7, 5000),
        BlendSpec("mx7-8500", 7, 8500),
        BlendSpec("mx6+1250", 7, SUPPORT_COUNT, target_count=1250),
        BlendSpec("mx6+2500", 7, SUPPORT_COUNT, target_count=2500),
    ]


def preset(name: str) -> BlendSpec:
    for spec in table1_presets():
        if spec.name == name:
            return spec
    raise BlendError(f"unknown preset {name!r}; known: {[s.name for s in table1_presets()]}")


def _dev_count(n: int) -> int:
    # round(0.1 * n) without float error; ties (n % 10 == 5) round half to even
    q, r = divmod(n, 10)
    if r > 5 or (r == 5 and q % 2 == 1):
        q += 1
    return q


def _scaled(count: int, scale: float) -> int:
    if scale == 1.0:
        return count
    return max(1, round(count * scale))


def resolve_speakers(
    corpus: CorpusManifest, spec: BlendSpec, target_speaker: str | None = None, scale: float = 1.0
) -> dict[str, int]:
    """Pick concrete speakers for the recipe and return speaker -> count.

    Speakers with the most data are preferred; the target of an unbalanced
    blend defaults to the eligible speaker with the least data (its count is
    the small one). All choices are deterministic.
    """
    counts = corpus.speaker_counts()
    eligible = sorted(
        (s for s in counts if spec.gender is None or corpus.gender_of(s) == spec.gender),
        key=lambda s: (-counts[s], s),
    )
    need = _scaled(spec.utts_per_speaker, scale)
    if spec.target_count is None:
        chosen = [s for s in eligible if counts[s] >= need][: spec.n_speakers]
        if len(chosen) < spec.n_speakers:
            raise BlendError(
                f"blend {spec.name}: only {len(chosen)} speaker(s) have >= {need} utterances"
                + (f" with gender {spec.gender}" if spec.gender else "")
            )
        return {s: need for s in chosen}

    target_need = _scaled(spec.target_count, scale)
    if target_speaker is None:
        candidates = [s for s in eligible if counts[s] >= target_need]
        if not candidates:
            raise BlendError(f"blend {spec.name}: no speaker has >= {target_need} utterances")
        target_speaker = min(candidates, key=lambda s: (counts[s], s))
    elif target_speaker not in counts:
        raise BlendError(f"blend {spec.name}: unknown target speaker {target_speaker!r}")
    supporters = [s for s in eligible if s != target_speaker and counts[s] >= need]
    supporters = supporters[: spec.n_speakers - 1]
    if len(supporters) < spec.n_speakers - 1:
        raise BlendError(
            f"blend {spec.name}: only {len(supporters)} supporting speaker(s) have >= {need} utterances"
        )
    resolved = {s: need for s in supporters}
    resolved[target_speaker] = target_need
    return resolved


def build_blend(
    corpus: CorpusManifest,
    spec: BlendSpec,
    target_speaker: str | None = None,
    scale: float = 1.0,
) -> tuple[list[CorpusRecord], list[CorpusRecord]]:
    """Seeded per-speaker selection and 90/10 split.

    Returns (train, dev) record lists sorted by (speaker, utterance id);
    identical inputs give identical manifests.
    """
    resolved = resolve_speakers(corpus, spec, target_speaker, scale)
    train: list[CorpusRecord] = []
    dev: list[CorpusRecord] = []
    for speaker in sorted(resolved):
        count = resolved[speaker]
        pool = sorted(corpus.by_speaker[speaker], key=lambda r: r.utterance_id)
        if count > len(pool):
            raise BlendError(
                f"blend {spec.name}: speaker {speaker} has {len(pool)} utterances, "
                f"needs {count} (short by {count - len(pool)})"
            )
        rng = random.Random(f"{spec.seed}:{spec.name}:{speaker}")
        selected = rng.sample(pool, count)
        n_dev = _dev_count(count)
        dev.extend(selected[:n_dev])
        train.extend(selected[n_dev:])
    key = lambda r: (r.speaker_id, r.utterance_id)
    return sorted(train, key=key), sorted(dev, key=key)


# --- manifest I/O -------------------------------------------------------------

def read_corpus_manifest(path) -> CorpusManifest:
    """5-column TSV: utterance_id, speaker_id, gender, audio_path, text."""
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise BlendError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            records.append(CorpusRecord(*parts))
    return CorpusManifest(records)


def write_corpus_manifest(path, records: list[CorpusRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.utterance_id}\t{r.speaker_id}\t{r.gender or 'U'}\t{r.audio_path}\t{r.text}\n")


def read_training_manifest(path) -> list[CorpusRecord]:
    """4-column TSV consumed by model training: utterance_id, speaker_id,
    audio_path, text. Gender is absent by design."""
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise BlendError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            records.append(CorpusRecord(parts[0], parts[1], None, parts[2], parts[3]))
    return records


def write_training_manifest(path, records: list[CorpusRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.utterance_id}\t{r.speaker_id}\t{r.audio_path}\t{r.text}\n")


# --- validation -----------------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    kind: str       # duplicate_id | missing_audio | empty_text
    detail: str


@dataclass
class ValidationReport:
    findings: list[Finding]

    @property
    def ok(self) -> bool:
        return not self.findings

    def counts(self) -> dict[str, int]:
        return dict(Counter(f.kind for f in self.findings))


def validate_manifest(records: list[CorpusRecord], check_files: bool = True) -> ValidationReport:
    findings = []
    seen: set[str] = set()
    for r in records:
        if r.utterance_id in seen:
            findings.append(Finding("duplicate_id", r.utterance_id))
        seen.add(r.utterance_id)
        if not r.text.strip():
            findings.append(Finding("empty_text", r.utterance_id))
        if check_files and not os.path.exists(r.audio_path):
            findings.append(Finding("missing_audio", r.audio_path))
    return ValidationReport(findings)
