"""MUSHRA test assembly and statistical analysis.

Panels present all systems for one sentence side by side, in a seeded random
slot order, with the natural recording hidden among them as the upper
anchor. Analysis covers per-system medians, average within-panel ranks
(midranks on ties), Wilcoxon signed-rank and paired t tests, and
Bonferroni-Holm correction over the pairwise family.
"""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import stdtr

# Exact Wilcoxon null distribution is used up to this many nonzero pairs;
# beyond it the normal approximation with tie correction takes over.
EXACT_WILCOXON_MAX_N = 25

SCORES_HEADER = ["panel_id", "rater_id", "slot", "system", "score"]


class MushraError(ValueError):
    pass


@dataclass(frozen=True)
class Stimulus:
    slot: int
    system: str
    audio: str
    is_anchor: bool = False


@dataclass(frozen=True)
class MushraPanel:
    panel_id: str
    sentence_id: str
    stimuli: tuple[Stimulus, ...]
    seed: int
    quota: int

    def __post_init__(self):
        anchors = sum(1 for s in self.stimuli if s.is_anchor)
        if anchors != 1:
            raise MushraError(f"panel {self.panel_id}: {anchors} recording anchors, expected 1")


@dataclass(frozen=True)
class ScoreRow:
    panel_id: str
    rater_id: str
    slot: int
    system: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 100.0:
            raise MushraError(f"score {self.score} outside [0, 100]")


@dataclass(frozen=True)
class SignificanceResult:
    pair: tuple[str, str]
    wilcoxon_stat: float
    wilcoxon_p: float
    t_stat: float
    t_p: float
    wilcoxon_reject: bool = False
    t_reject: bool = False


@dataclass(frozen=True)
class AggregateStats:
    system: str
    n: int
    median: float
    mean: float
    average_rank: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float


def assemble_panels(
    systems: list[str],
    sentences: list[str],
    raters_per_panel: int,
    seed: int,
    audio_for,
    recordings_system: str = "recordings",
) -> list[MushraPanel]:
    """One panel per sentence with an independent seeded slot permutation.

    ``audio_for`` maps (system, sentence_id) to an audio reference and must
    cover every combination, including the recordings anchor.
    """
    slots_systems = list(systems)
    if recordings_system not in slots_systems:
        slots_systems.append(recordings_system)
    lookup = audio_for if callable(audio_for) else lambda s, u: audio_for[(s, u)]
    rng = random.Random(seed)
    panels = []
    for i, sentence in enumerate(sentences):
        order = list(slots_systems)
        rng.shuffle(order)
        stimuli = []
        for slot, system in enumerate(order):
            try:
                audio = lookup(system, sentence)
            except KeyError:
                raise MushraError(f"missing stimulus for system {system!r}, sentence {sentence!r}") from None
            if audio is None:
                raise MushraError(f"missing stimulus for system {system!r}, sentence {sentence!r}")
            stimuli.append(Stimulus(slot, system, audio, is_anchor=system == recordings_system))
        panels.append(MushraPanel(f"p{i:05d}", sentence, tuple(stimuli), seed, raters_per_panel))
    return panels


# --- rank helpers -------------------------------------------------------------

def _midranks(values) -> np.ndarray:
    """Ranks 1..n of ``values`` ascending, tied entries sharing their mean rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def within_panel_ranks(scores) -> np.ndarray:
    """Rank 1 = highest score; ties get midranks."""
    return _midranks(-np.asarray(scores, dtype=np.float64))


# --- Wilcoxon signed-rank -----------------------------------------------------

def _signed_rank_counts(ranks2: list[int]) -> list[int]:
    # counts[s] = number of sign assignments whose positive-rank sum (doubled
    # ranks, hence integer) equals s
    total = sum(ranks2)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in ranks2:
        for s in range(total - r, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
    return counts


def wilcoxon_signed_rank(differences) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped. Returns (W, p) with W = min(W+, W-).
    p is exact -- P(min(W+, W-) <= W_observed) under random signs -- for
    n <= EXACT_WILCOXON_MAX_N, else a normal approximation with tie
    correction. All differences zero yields (0.0, 1.0).
    """
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return 0.0, 1.0
    ranks = _midranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    w = min(w_pos, w_neg)

    if n <= EXACT_WILCOXON_MAX_N:
        ranks2 = [int(round(2 * r)) for r in ranks]
        total2 = sum(ranks2)
        w2 = int(round(2 * w))
        counts = _signed_rank_counts(ranks2)
        favorable = sum(c for s, c in enumerate(counts) if min(s, total2 - s) <= w2)
        return w, favorable / (1 << n)

    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var -= float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    z = (w - mean) / math.sqrt(var)
    p = math.erfc(-z / math.sqrt(2.0))  # 2 * Phi(z), z <= 0
    return w, min(1.0, p)


# --- paired t ----------------------------------------------------------------

def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t test: t = mean(d) / (sd(d)/sqrt(n)), d = a - b.

    Degenerate zero-variance differences: p = 0 when the mean differs from
    zero (t = +/-inf), p = 1 when it does not (t = 0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MushraError(f"paired samples differ in shape: {a.shape} vs {b.shape}")
    d = a - b
    n = len(d)
    if n < 2:
        raise MushraError("paired t test needs at least 2 pairs")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * float(stdtr(n - 1, -abs(t)))
    return t, p


# --- Holm step-down ------------------------------------------------------------

def holm_bonferroni(p_values, alpha: float) -> list[bool]:
    """Step-down rejection decisions in the input order.

    Sorted ascending, p(i) is rejected while p(i) <= alpha/(m - i + 1); the
    procedure stops at the first failure.
    """
    p = list(p_values)
    for v in p:
        if not 0.0 <= v <= 1.0:
            raise MushraError(f"p-value {v} outside [0, 1]")
    m = len(p)
    decisions = [False] * m
    for step, idx in enumerate(sorted(range(m), key=lambda i: p[i])):
        if p[idx] <= alpha / (m - step):
            decisions[idx] = True
        else:
            break
    return decisions


# --- aggregation ---------------------------------------------------------------

def _grouped(rows: list[ScoreRow]) -> dict[tuple[str, str], dict[str, float]]:
    groups: dict[tuple[str, str], dict[str, float]] = {}
    for row in rows:
        groups.setdefault((row.panel_id, row.rater_id), {})[row.system] = row.score
    return groups


def _check_balanced(groups) -> list[str]:
    systems = sorted(set().union(*(g.keys() for g in groups.values())))
    missing = [
        f"({panel}, {rater}, {system})"
        for (panel, rater), g in sorted(groups.items())
        for system in systems
        if system not in g
    ]
    if missing:
        raise MushraError("unbalanced rating matrix; missing cells: " + ", ".join(missing))
    return systems


def aggregate(rows: list[ScoreRow]) -> dict[str, AggregateStats]:
    """Medians, means, average within-panel ranks, and boxplot stats per system.

    A 'panel' for ranking purposes is one rater's pass over one stimulus
    panel; ranks are averaged over all such passes.
    """
    if not rows:
        raise MushraError("no score rows to aggregate")
    groups = _grouped(rows)
    systems = _check_balanced(groups)
    scores = {s: [] for s in systems}
    rank_sums = dict.fromkeys(systems, 0.0)
    for g in groups.values():
        vals = [g[s] for s in systems]
        for s, r in zip(systems, within_panel_ranks(vals)):
            rank_sums[s] += r
            scores[s].append(g[s])
    out = {}
    for s in systems:
        arr = np.asarray(scores[s], dtype=np.float64)
        q1, q3 = np.percentile(arr, [25, 75])
        iqr = q3 - q1
        in_lo = arr[arr >= q1 - 1.5 * iqr]
        in_hi = arr[arr <= q3 + 1.5 * iqr]
        out[s] = AggregateStats(
            system=s,
            n=len(arr),
            median=float(np.median(arr)),
            mean=float(arr.mean()),
            average_rank=rank_sums[s] / len(groups),
            q1=float(q1),
            q3=float(q3),
            whisker_lo=float(in_lo.min()),
            whisker_hi=float(in_hi.max()),
        )
    return out


def significance_matrix(rows: list[ScoreRow], alpha: float = 0.05) -> list[SignificanceResult]:
    """All unordered system pairs tested with both tests, Holm per test type."""
    groups = _grouped(rows)
    systems = _check_balanced(groups)
    if len(systems) < 2:
        raise MushraError("need at least 2 systems for significance testing")
    keys = sorted(groups.keys())
    results = []
    for sys_a, sys_b in combinations(systems, 2):
        a = [groups[k][sys_a] for k in keys]
        b = [groups[k][sys_b] for k in keys]
        w_stat, w_p = wilcoxon_signed_rank(np.asarray(a) - np.asarray(b))
        t_stat, t_p = paired_t_test(a, b)
        results.append(SignificanceResult((sys_a, sys_b), w_stat, w_p, t_stat, t_p))
    w_rej = holm_bonferroni([r.wilcoxon_p for r in results], alpha)
    t_rej = holm_bonferroni([r.t_p for r in results], alpha)
    return [
        SignificanceResult(r.pair, r.wilcoxon_stat, r.wilcoxon_p, r.t_stat, r.t_p, w, t)
        for r, w, t in zip(results, w_rej, t_rej)
    ]


# --- scores file / reports -------------------------------------------------------

def scores_to_csv(rows: list[ScoreRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(SCORES_HEADER)
    for r in rows:
        writer.writerow([r.panel_id, r.rater_id, r.slot, r.system, _fmt_score(r.score)])
    return buf.getvalue()


def write_scores(path, rows: list[ScoreRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(scores_to_csv(rows))


def _fmt_score(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def scores_from_csv(text: str, origin: str = "scores") -> list[ScoreRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != SCORES_HEADER:
        raise MushraError(f"{origin}: unexpected scores header {header}")
    rows = []
    for line in reader:
        if not line:
            continue
        panel, rater, slot, system, score = line
        rows.append(ScoreRow(panel, rater, int(slot), system, float(score)))
    return rows


def read_scores(path) -> list[ScoreRow]:
    with open(path, newline="", encoding="utf-8") as f:
        return scores_from_csv(f.read(), origin=str(path))


def format_report(
    stats: dict[str, AggregateStats],
    significance: list[SignificanceResult],
    mode: str = "naturalness",
    alpha: float = 0.05,
) -> str:
    """Human-readable table: median score and average rank per system, then
    the pairwise decisions."""
    order = sorted(stats.values(), key=lambda s: s.average_rank)
    lines = [f"MUSHRA {mode} results ({order[0].n} ratings/system)"]
    lines.append(f"{'system':<24}{'median':>8}{'mean':>8}{'avg rank':>10}")
    for s in order:
        lines.append(f"{s.system:<24}{s.median:>8g}{s.mean:>8.1f}{s.average_rank:>10.2f}")
    lines.append("")
    lines.append(f"pairwise significance at alpha={alpha} (Holm-corrected)")
    for r in significance:
        verdict = []
        verdict.append("wilcoxon " + ("reject" if r.wilcoxon_reject else "retain") + f" (p={r.wilcoxon_p:.4g})")
        verdict.append("t " + ("reject" if r.t_reject else "retain") + f" (p={r.t_p:.4g})")
        lines.append(f"  {r.pair[0]} vs {r.pair[1]}: " + "; ".join(verdict))
    return "\n".join(lines) + "\n"


def boxplot_data(stats: dict[str, AggregateStats]) -> str:
    """Whisker/quartile rows consumable by any plotting tool."""
    lines = ["system,whisker_lo,q1,median,q3,whisker_hi,mean,average_rank,n"]
    for s in sorted(stats.values(), key=lambda s: s.average_rank):
        lines.append(
            f"{s.system},{s.whisker_lo:g},{s.q1:g},{s.median:g},{s.q3:g},"
            f"{s.whisker_hi:g},{s.mean:g},{s.average_rank:.6g},{s.n}"
        )
    return "\n".join(lines) + "\n"
