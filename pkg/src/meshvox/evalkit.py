"""Experiment protocol: stratified nested cross-validation splits, the exact
Wilcoxon signed-rank test, Holm correction and model comparison tables."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

# lesion-volume quartile intervals (voxels), lower-exclusive / upper-inclusive
DEFAULT_CUTOFFS = (203, 33619, 67891, 128314, 363885)


class StratumClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StrataSpec:
    cutoffs: tuple[int, ...] = DEFAULT_CUTOFFS

    def __post_init__(self):
        if len(self.cutoffs) < 2 or any(b <= a for a, b in zip(self.cutoffs, self.cutoffs[1:])):
            raise ValueError("cutoffs must be strictly increasing with at least two entries")

    @property
    def n_strata(self) -> int:
        return len(self.cutoffs) - 1


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    lesion_vol: int
    acquisition: str = ""

    def __post_init__(self):
        if self.lesion_vol < 0:
            raise ValueError("lesion volume must be >= 0")


def stratum_of(lesion_vol: float, spec: StrataSpec = StrataSpec()) -> int:
    """1-based index of the interval ``(lo, hi]`` containing ``lesion_vol``.

    Values outside the overall range are clamped to the first or last
    stratum with a :class:`StratumClampWarning`.
    """
    cuts = spec.cutoffs
    if lesion_vol <= cuts[0]:
        warnings.warn(f"lesion volume {lesion_vol} below range; clamped to stratum 1", StratumClampWarning, stacklevel=2)
        return 1
    if lesion_vol > cuts[-1]:
        warnings.warn(
            f"lesion volume {lesion_vol} above range; clamped to stratum {spec.n_strata}", StratumClampWarning, stacklevel=2
        )
        return spec.n_strata
    for i in range(1, len(cuts)):
        if lesion_vol <= cuts[i]:
            return i
    raise AssertionError("unreachable")


@dataclass
class SplitPlan:
    outer_folds: list[tuple[list[str], list[str]]]
    inner_folds: list[list[tuple[list[str], list[str]]]]
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "outer": [{"train": tr, "test": te} for tr, te in self.outer_folds],
                "inner": [[{"train": tr, "val": va} for tr, va in fold] for fold in self.inner_folds],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        outer = [(f["train"], f["test"]) for f in d["outer"]]
        inner = [[(f["train"], f["val"]) for f in fold] for fold in d["inner"]]
        return cls(outer, inner, d.get("seed"))


def _cell_key(rec: SubjectRecord, spec: StrataSpec):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StratumClampWarning)
        return stratum_of(rec.lesion_vol, spec), rec.acquisition


def _assign(records: list[SubjectRecord], n_folds: int, rng: np.random.Generator, spec: StrataSpec) -> list[list[str]]:
    """Seeded shuffle within each (stratum, acquisition) cell, then round-robin.

    The round-robin position carries over between cells so total fold sizes
    stay balanced as well.
    """
    cells = defaultdict(list)
    for rec in records:
        cells[_cell_key(rec, spec)].append(rec.subject_id)
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    pos = 0
    for key in sorted(cells, key=lambda k: (k[0], str(k[1]))):
        ids = sorted(cells[key])
        for i in rng.permutation(len(ids)):
            folds[pos % n_folds].append(ids[i])
            pos += 1
    return folds


def make_splits(records, n_outer: int = 3, n_inner: int = 3, seed: int = 0, spec: StrataSpec = StrataSpec()) -> SplitPlan:
    """Nested cross-validation stratified by lesion-size stratum and acquisition."""
    records = list(records)
    if not records:
        raise ValueError("no subjects to split")
    if len({r.subject_id for r in records}) != len(records):
        raise ValueError("subject ids must be unique")
    by_id = {r.subject_id: r for r in records}
    rng = np.random.default_rng(seed)
    outer_groups = _assign(records, n_outer, rng, spec)
    outer, inner = [], []
    for k, test in enumerate(outer_groups):
        train = [sid for j, g in enumerate(outer_groups) if j != k for sid in g]
        outer.append((train, test))
        inner_groups = _assign([by_id[s] for s in train], n_inner, rng, spec)
        inner.append(
            [([s for j, g in enumerate(inner_groups) if j != i for s in g], val) for i, val in enumerate(inner_groups)]
        )
    return SplitPlan(outer, inner, seed)


def read_subjects_csv(path) -> list[SubjectRecord]:
    with open(path, newline="") as f:
        return [
            SubjectRecord(row["subject_id"], int(float(row["lesion_vol"])), row.get("acquisition", "") or "")
            for row in csv.DictReader(f)
        ]


# -- Wilcoxon signed-rank ----------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    statistic: float  # W+, sum of positive ranks
    n: int  # nonzero differences used
    n_zero: int  # zero differences dropped
    method: str  # "exact" | "normal" | "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def signed_ranks(diffs) -> np.ndarray:
    """Ranks of |d| with ties averaged, carrying the sign of d."""
    d = np.asarray(diffs, dtype=np.float64)
    absd = np.abs(d)
    order = np.argsort(absd, kind="mergesort")
    ranks = np.empty(len(d))
    sorted_abs = absd[order]
    i = 0
    while i < len(d):
        j = i
        while j + 1 < len(d) and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return np.sign(d) * ranks


def _exact_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    """Exact null distribution of W+ by counting sign assignments.

    Ranks are integers or half-integers, so doubling them gives an integer
    subset-sum problem solved by dynamic programming over all 2^n signs.
    """
    r2 = np.rint(2 * np.abs(ranks)).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in r2:
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    n_assign = 2.0 ** len(r2)
    w2 = int(round(2 * w_plus))
    mean2 = total / 2
    dev = abs(w2 - mean2)
    values = np.arange(total + 1)
    extreme = counts[np.abs(values - mean2) >= dev - 1e-9].sum()
    return min(1.0, extreme / n_assign)


def wilcoxon_signed_rank(a, b, mode: str = "auto", exact_max_n: int = 20, zero_method: str = "wilcox") -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test of ``a - b``.

    ``zero_method="wilcox"`` drops zero differences before ranking;
    ``"pratt"`` ranks them with the rest and then drops them. ``mode="exact"``
    enumerates the sign distribution; ``"normal"`` uses the tie-corrected
    normal approximation with continuity correction; ``"auto"`` is exact up to
    ``exact_max_n`` nonzero differences.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValueError("a and b must be 1-D arrays of equal nonzero length")
    if zero_method not in ("wilcox", "pratt"):
        raise ValueError(f"zero_method must be 'wilcox' or 'pratt', got {zero_method!r}")
    d = a - b
    keep = d != 0
    n_zero = int(d.size - keep.sum())
    n = int(keep.sum())
    if n == 0:
        return WilcoxonResult(1.0, 0.0, 0, n_zero, "degenerate")
    ranks = signed_ranks(d[keep]) if zero_method == "wilcox" else signed_ranks(d)[keep]
    w_plus = float(ranks[ranks > 0].sum())
    if mode == "auto":
        mode = "exact" if n <= exact_max_n else "normal"
    if mode == "exact":
        return WilcoxonResult(float(_exact_two_sided(ranks, w_plus)), w_plus, n, n_zero, "exact")
    if mode != "normal":
        raise ValueError(f"mode must be 'auto', 'exact' or 'normal', got {mode!r}")
    # moments of sum(sign_i * r_i > 0) under random signs; with ties these
    # equal the usual tie-corrected n(n+1)/4 and n(n+1)(2n+1)/24 - sum(t^3-t)/48
    r = np.abs(ranks)
    mean = r.sum() / 2
    var = (r**2).sum() / 4
    if var <= 0:
        return WilcoxonResult(1.0, w_plus, n, n_zero, "normal")
    delta = w_plus - mean
    z = (abs(delta) - 0.5) / math.sqrt(var) if abs(delta) >= 0.5 else 0.0
    p = math.erfc(z / math.sqrt(2))
    return WilcoxonResult(min(1.0, p), w_plus, n, n_zero, "normal")


def holm(p_values, alpha: float = 0.05) -> tuple[list[float], list[bool]]:
    """Holm step-down adjustment. Returns (adjusted p-values, reject flags)
    in the input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, (m - rank) * p[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted.tolist(), (adjusted <= alpha).tolist()


# -- model comparison --------------------------------------------------------

METRICS = ("dice", "avd", "mcc")


@dataclass
class ScoreTable:
    """Per-subject scores: ``scores[model][metric][subject_id]``."""

    scores: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)

    @property
    def models(self) -> list[str]:
        return list(self.scores)

    def subjects(self) -> list[str]:
        ids = set()
        for per_metric in self.scores.values():
            for per_subject in per_metric.values():
                ids.update(per_subject)
        return sorted(ids)

    def add(self, subject_id: str, model: str, **metrics: float):
        per_metric = self.scores.setdefault(model, {m: {} for m in METRICS})
        for name, value in metrics.items():
            per_metric.setdefault(name, {})[subject_id] = float(value)

    @classmethod
    def from_csv(cls, path_or_text) -> "ScoreTable":
        if isinstance(path_or_text, str) and "\n" in path_or_text:
            f = io.StringIO(path_or_text)
        else:
            f = open(path_or_text, newline="")
        with f:
            table = cls()
            for row in csv.DictReader(f):
                table.add(row["subject_id"], row["model"], **{m: row[m] for m in METRICS if row.get(m, "") != ""})
        return table


@dataclass
class ComparisonRow:
    model: str
    mean: dict[str, float]
    std: dict[str, float]
    p_raw: dict[str, float | None]
    p_adjusted: dict[str, float | None]
    significant: dict[str, bool]


def compare_models(table: ScoreTable, baseline: str, alpha: float = 0.05, metrics=METRICS,
                   zero_method: str = "wilcox") -> list[ComparisonRow]:
    """Paired Wilcoxon of every model against ``baseline`` per metric, Holm
    corrected across models within each metric. The baseline row comes
    first and carries no p-values.

    The paired samples are whatever rows the table holds: per-subject scores
    on held-out sets by default, or per-fold summaries if the caller builds
    the table that way.
    """
    if baseline not in table.scores:
        raise ValueError(f"baseline model {baseline!r} not in score table")
    subjects = table.subjects()
    missing = [
        f"{model}/{metric}/{sid}"
        for model in table.models
        for metric in metrics
        for sid in subjects
        if sid not in table.scores[model].get(metric, {})
    ]
    if missing:
        raise ValueError("score table has missing cells: " + ", ".join(missing))

    others = [m for m in table.models if m != baseline]
    rows = {m: ComparisonRow(m, {}, {}, {}, {}, {}) for m in [baseline, *others]}
    for metric in metrics:
        base = np.array([table.scores[baseline][metric][s] for s in subjects])
        raw = []
        for model in [baseline, *others]:
            vals = np.array([table.scores[model][metric][s] for s in subjects])
            rows[model].mean[metric] = float(vals.mean())
            rows[model].std[metric] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            if model != baseline:
                raw.append(wilcoxon_signed_rank(vals, base, zero_method=zero_method).p_value)
        adjusted, reject = holm(raw, alpha) if raw else ([], [])
        rows[baseline].p_raw[metric] = rows[baseline].p_adjusted[metric] = None
        rows[baseline].significant[metric] = False
        for model, p, q, r in zip(others, raw, adjusted, reject):
            rows[model].p_raw[metric] = p
            rows[model].p_adjusted[metric] = q
            rows[model].significant[metric] = bool(r)
    return list(rows.values())


def format_table(rows: list[ComparisonRow], metrics=METRICS) -> str:
    """Aligned text: ``mean (std)`` per metric followed by a ``*`` column."""
    header = ["Model"]
    for m in metrics:
        header += [m.upper(), "p<0.05"]
    body = []
    for i, row in enumerate(rows):
        cells = [row.model]
        for m in metrics:
            cells.append(f"{row.mean[m]:.3f} ({row.std[m]:.3f})")
            cells.append("N/A" if i == 0 else ("*" if row.significant[m] else ""))
        body.append(cells)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def rows_to_csv(rows: list[ComparisonRow], metrics=METRICS) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["model"] + [f"{m}_{k}" for m in metrics for k in ("mean", "std", "p_raw", "p_holm", "significant")])
    for row in rows:
        cells = [row.model]
        for m in metrics:
            cells += [row.mean[m], row.std[m], row.p_raw[m] if row.p_raw[m] is not None else "",
                      row.p_adjusted[m] if row.p_adjusted[m] is not None else "", int(row.significant[m])]
        writer.writerow(cells)
    return out.getvalue()
