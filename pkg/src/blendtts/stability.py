"""Attention-based stability auditing of synthesized utterances.

Synthesis failures show up as pathologies of the alignment path (the argmax
encoder position per decoder block): large forward jumps (skipped phones),
regressions that re-traverse covered positions (repeated speech), long
dwells on one position (stuck in silence), and decoders that never fire the
stop token. Detector thresholds are declared approximations of an auditory
judgment, not calibrated against human labels; they are validated against
synthetic suites with planted failures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .records import SynthesisRecord

SKIP_THRESHOLD = 4          # encoder positions jumped over between blocks
REGRESSION_TOLERANCE = 2    # backward steps >= this start a repeat candidate
DWELL_THRESHOLD = 20        # blocks on one position (~1.25 s at 5x12.5 ms)

FINDING_KINDS = ("skip", "repeat", "stuck", "non_termination")


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentPath:
    positions: np.ndarray    # attended encoder position per decoder block
    confidences: np.ndarray  # max attention weight per block

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class StabilityFinding:
    kind: str
    block: int              # first decoder block involved
    magnitude: float
    position: int = -1      # encoder position, where meaningful (stuck/repeat)


@dataclass(frozen=True)
class StabilityVerdict:
    utterance_id: str
    speaker_id: str
    findings: tuple[StabilityFinding, ...]

    @property
    def stable(self) -> bool:
        return not self.findings


@dataclass
class StabilityReport:
    model_name: str
    verdicts: list[StabilityVerdict]
    per_speaker: dict[str, tuple[int, int]] = field(init=False)  # (stable, total)

    def __post_init__(self):
        per: dict[str, list[int]] = {}
        for v in self.verdicts:
            entry = per.setdefault(v.speaker_id, [0, 0])
            entry[0] += v.stable
            entry[1] += 1
        self.per_speaker = {s: (c[0], c[1]) for s, c in per.items()}

    @property
    def stable_count(self) -> int:
        return sum(v.stable for v in self.verdicts)

    @property
    def total(self) -> int:
        return len(self.verdicts)

    @property
    def percent_stable(self) -> float:
        return round(100.0 * self.stable_count / self.total, 1)


def extract_path(attention: np.ndarray) -> AlignmentPath:
    """Argmax path with per-block confidence; ties break to the smaller index."""
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim != 2 or attention.size == 0:
        raise StabilityError(f"attention matrix must be non-empty 2-D, got shape {attention.shape}")
    positions = attention.argmax(axis=1)
    confidences = attention[np.arange(attention.shape[0]), positions]
    return AlignmentPath(positions, confidences)


def detect_skip(path: AlignmentPath, threshold: int = SKIP_THRESHOLD) -> list[StabilityFinding]:
    """One finding per forward jump of more than ``threshold`` positions."""
    if len(path) == 0:
        raise StabilityError("empty alignment path")
    steps = np.diff(path.positions)
    return [
        StabilityFinding("skip", int(i + 1), float(steps[i]))
        for i in np.nonzero(steps > threshold)[0]
    ]


def detect_repeat(path: AlignmentPath, tolerance: int = REGRESSION_TOLERANCE) -> list[StabilityFinding]:
    """Backward regressions of at least ``tolerance`` positions that later
    re-traverse the abandoned position count as repeats."""
    if len(path) == 0:
        raise StabilityError("empty alignment path")
    pos = path.positions.astype(np.int64)
    findings = []
    for i in range(len(pos) - 1):
        drop = int(pos[i] - pos[i + 1])
        if drop >= tolerance:
            # re-traversal: the path climbs back to the position it abandoned
            if np.any(pos[i + 2 :] >= pos[i]):
                findings.append(StabilityFinding("repeat", int(i + 1), float(drop), int(pos[i + 1])))
    return findings


def detect_stuck(
    path: AlignmentPath,
    stop_trajectory: np.ndarray,
    terminated: bool,
    dwell_threshold: int = DWELL_THRESHOLD,
) -> list[StabilityFinding]:
    """Dwells longer than ``dwell_threshold`` blocks on one position, plus a
    non_termination finding when the decoder hit its block cap."""
    if len(path) != len(stop_trajectory):
        raise StabilityError(
            f"path has {len(path)} blocks but stop trajectory has {len(stop_trajectory)}"
        )
    findings = []
    pos = path.positions
    run_start = 0
    for i in range(1, len(pos) + 1):
        if i == len(pos) or pos[i] != pos[run_start]:
            run = i - run_start
            if run > dwell_threshold:
                findings.append(
                    StabilityFinding("stuck", int(run_start), float(run), int(pos[run_start]))
                )
            run_start = i
    if not terminated:
        findings.append(StabilityFinding("non_termination", int(len(pos) - 1), 0.0))
    return findings


def classify(
    record: SynthesisRecord,
    skip_threshold: int = SKIP_THRESHOLD,
    regression_tolerance: int = REGRESSION_TOLERANCE,
    dwell_threshold: int = DWELL_THRESHOLD,
) -> StabilityVerdict:
    path = extract_path(record.attention)
    findings = (
        detect_skip(path, skip_threshold)
        + detect_repeat(path, regression_tolerance)
        + detect_stuck(path, record.stop_trajectory, record.terminated, dwell_threshold)
    )
    return StabilityVerdict(record.utterance_id, record.speaker_id, tuple(findings))


def stability_rate(verdicts: list[StabilityVerdict], model_name: str) -> StabilityReport:
    if not verdicts:
        raise StabilityError("no verdicts to aggregate")
    return StabilityReport(model_name, list(verdicts))


def format_table(reports: list[StabilityReport], training_utts: dict[str, str] | None = None) -> str:
    """Stability table: model name, training utterance count, percent stable."""
    lines = [f"{'model name':<14}{'#training utt':<16}{'% stable':>9}"]
    for rep in reports:
        utts = (training_utts or {}).get(rep.model_name, "-")
        lines.append(f"{rep.model_name:<14}{utts:<16}{rep.percent_stable:>8.1f}%")
    return "\n".join(lines) + "\n"


def report_dict(report: StabilityReport) -> dict:
    """Machine-readable mirror of the stability table plus per-speaker detail."""
    return {
        "model": report.model_name,
        "total": report.total,
        "stable": report.stable_count,
        "percent_stable": report.percent_stable,
        "per_speaker": {
            s: {"stable": st, "total": tot, "percent_stable": round(100.0 * st / tot, 1)}
            for s, (st, tot) in sorted(report.per_speaker.items())
        },
        "findings": {
            kind: sum(1 for v in report.verdicts for f in v.findings if f.kind == kind)
            for kind in FINDING_KINDS
        },
    }
