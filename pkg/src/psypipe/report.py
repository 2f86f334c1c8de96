"""Result tables, report bundles, and deterministic CSV / text emission."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from . import psychometrics as pm
from .content import ConvergentTable, CrossContextTable, ReactivityResult, ReliabilityReport
from .errors import AlignmentError, CoverageError, DegenerateInputError, SchemaError
from .stats import BootstrapResult, CorrelationResult, bonferroni, bootstrap_mean_r, pearson
from .validation import BiasReport, LeakageScan, MatchResult

DEGENERATE = "degenerate"


class _Degenerate:
    """Marker for a statistic that is undefined on its input (rendered as ``degenerate``)."""

    def __repr__(self):
        return DEGENERATE


DEG = _Degenerate()


@dataclass(frozen=True)
class Table:
    name: str
    rows: tuple[str, ...]
    columns: tuple[str, ...]
    values: Mapping[tuple[str, str], Any]
    n: int
    config_hash: str
    footnote: str = ""
    marked: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 0:
            raise SchemaError(f"table {self.name}: n must be a non-negative integer")
        if not self.config_hash:
            raise SchemaError(f"table {self.name}: config_hash is required")
        stray = set(self.values) - {(r, c) for r in self.rows for c in self.columns}
        if stray:
            raise SchemaError(f"table {self.name}: values outside the grid: {sorted(stray)[:5]}")

    def cell(self, row: str, column: str) -> Any:
        return self.values.get((row, column))

    @property
    def cell_count(self) -> int:
        return len(self.rows) * len(self.columns)


def fmt(value: Any, digits: int = 3) -> str:
    if value is DEG:
        return DEGENERATE
    if value is None:
        return ""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "n/a"
        text = f"{value:.{digits}f}"
        return "0.000" if text == "-0.000" else text
    return str(value)


def raw(value: Any) -> str:
    if value is DEG:
        return DEGENERATE
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


# Recovery ------------------------------------------------------------------

@dataclass(frozen=True)
class RecoveryRow:
    generator_id: str
    scorer_id: str
    cells: Mapping[str, CorrelationResult | None]
    n: int
    refusals: int = 0
    exclusions: int = 0
    bootstrap: BootstrapResult | None = None
    config_hash: str = ""

    @property
    def self_scoring(self) -> bool:
        return self.generator_id == self.scorer_id

    @property
    def mean_r(self) -> float:
        values = [c.r for c in self.cells.values() if c is not None]
        if len(values) != len(self.cells):
            return float("nan")
        return math.fsum(values) / len(values)


@dataclass(frozen=True)
class RecoveryTable:
    rows: tuple[RecoveryRow, ...]

    def mean_of_means(self) -> float:
        """Mean of row means, leaving out self-scoring rows."""
        values = [r.mean_r for r in self.rows if not r.self_scoring]
        return math.fsum(values) / len(values) if values else float("nan")


def _profiles(recovered: Mapping[str, Any], scales: Sequence[str]) -> dict[str, dict[str, float]]:
    out = {}
    for pid, value in recovered.items():
        if hasattr(value, "profile"):
            value = value.profile()
        out[pid] = {s: float(value[s]) for s in scales}
    return out


def _correlate(truth, recovered, scales, ids) -> dict[str, CorrelationResult | None]:
    cells = {}
    for s in scales:
        try:
            cells[s] = pearson([truth[i][s] for i in ids], [recovered[i][s] for i in ids])
        except DegenerateInputError:
            cells[s] = None
    return cells


def _align(truth: Mapping, recovered: Mapping, min_n: int = 10) -> list[str]:
    unknown = sorted(set(recovered) - set(truth))
    if unknown:
        raise AlignmentError(f"recovered scores for participants without truth: {unknown[:10]}")
    ids = sorted(recovered)
    if len(ids) < min_n:
        raise CoverageError(f"need at least {min_n} aligned participants, got {len(ids)}")
    return ids


def recovery_report(
    truth: Mapping[str, Mapping[str, float]],
    recovered: Mapping[str, Any],
    generator_id: str,
    scorer_id: str,
    config_hash: str,
    refusals: int = 0,
    exclusions: int = 0,
    n_resamples: int = 10_000,
    seed: int = 0,
) -> RecoveryRow:
    """Per-domain Pearson r with Fisher intervals plus a bootstrap interval on the mean r.

    Participants missing from ``recovered`` (refused or excluded upstream) are
    left out; pass their counts so the row reports them.
    """
    rec = _profiles(recovered, pm.DOMAINS)
    ids = _align(truth, rec)
    cells = _correlate(truth, rec, pm.DOMAINS, ids)
    boot = None
    if n_resamples and all(c is not None for c in cells.values()):
        boot = bootstrap_mean_r([truth[i] for i in ids], [rec[i] for i in ids], n_resamples, seed)
    return RecoveryRow(generator_id, scorer_id, cells, len(ids), refusals, exclusions, boot, config_hash)


def recovery_to_table(table: RecoveryTable, name: str = "recovery") -> Table:
    columns = []
    for d in pm.DOMAINS:
        columns += [f"{d}_r", f"{d}_ci_low", f"{d}_ci_high", f"{d}_p"]
    columns += ["mean_r", "boot_ci_low", "boot_ci_high", "boot_redraws", "n", "refusals", "exclusions", "self_scoring"]
    values, labels = {}, []
    for row in table.rows:
        label = f"{row.generator_id} | {row.scorer_id}"
        labels.append(label)
        for d in pm.DOMAINS:
            c = row.cells[d]
            for stat, attr in (("r", "r"), ("ci_low", "ci_low"), ("ci_high", "ci_high"), ("p", "p_two_tailed")):
                values[(label, f"{d}_{stat}")] = DEG if c is None else getattr(c, attr)
        values[(label, "mean_r")] = DEG if math.isnan(row.mean_r) else row.mean_r
        if row.bootstrap is not None:
            values[(label, "boot_ci_low")] = row.bootstrap.ci_low
            values[(label, "boot_ci_high")] = row.bootstrap.ci_high
            values[(label, "boot_redraws")] = row.bootstrap.redraws
        values[(label, "n")] = row.n
        values[(label, "refusals")] = row.refusals
        values[(label, "exclusions")] = row.exclusions
        values[(label, "self_scoring")] = row.self_scoring
    hashes = sorted({r.config_hash for r in table.rows})
    n = min((r.n for r in table.rows), default=0)
    note = "Self-scoring rows are excluded from the mean of means."
    if any(r.bootstrap for r in table.rows):
        b = next(r.bootstrap for r in table.rows if r.bootstrap)
        note += f" Bootstrap: {b.n_resamples} participant resamples, percentile interval."
    return Table(name, tuple(labels), tuple(columns), values, n, ",".join(hashes), note)


def beyond_hexaco_report(
    truth: Mapping[str, Mapping[str, float]],
    recovered: Mapping[str, Any],
    config_hash: str,
    alpha: float = 0.05,
    m_tests: int = 15,
    name: str = "beyond_hexaco",
) -> Table:
    """Per-subscale Pearson r, marked significant at alpha / m_tests."""
    scales = pm.subscales()
    rec = _profiles(recovered, scales)
    ids = _align(truth, rec)
    cells = _correlate(truth, rec, scales, ids)
    threshold = bonferroni(alpha, m_tests)
    columns = ("r", "ci_low", "ci_high", "p", "significant")
    values = {}
    marked = set()
    for s, c in cells.items():
        if c is None:
            values.update({(s, col): DEG for col in columns})
            continue
        sig = c.significant(threshold)
        values.update({(s, "r"): c.r, (s, "ci_low"): c.ci_low, (s, "ci_high"): c.ci_high, (s, "p"): c.p_two_tailed,
                       (s, "significant"): sig})
        if sig:
            marked.add((s, "r"))
    return Table(name, scales, columns, values, len(ids), config_hash,
                 f"Bonferroni threshold {threshold:.4f} (alpha {alpha} / {m_tests} tests).", frozenset(marked))


# Other tables -----------------------------------------------------------------

def bias_table(report: BiasReport, config_hash: str) -> Table:
    columns = ("stage1", "stage2", "stage2a", "stage2b", "total")
    rows = tuple(report.total)
    values = {(d, c): getattr(report, c)[d] for d in rows for c in columns}
    return Table("bias", rows, columns, values, report.n, config_hash,
                 "total = stage1 + stage2; stage2 = stage2a (resting) + stage2b (conditioning).")


def matching_table(results: Sequence[MatchResult], config_hash: str) -> Table:
    columns = ("trials", "correct", "unparseable", "accuracy", "chance", "p_value")
    rows = tuple(r.matcher for r in results)
    values = {(r.matcher, c): r.summary()[c] for r in results for c in columns}
    return Table("matching", rows, columns, values, max((r.trials for r in results), default=0), config_hash,
                 "Unparseable answers count as incorrect; p from an exact two-sided binomial test against chance.")


def leakage_table(scan: LeakageScan, config_hash: str) -> Table:
    columns = ("sentences", "skipped", "flags", "max_jaccard", "threshold")
    top = scan.flags[0].jaccard if scan.flags else 0.0
    values = {("all", "sentences"): scan.sentences, ("all", "skipped"): scan.skipped, ("all", "flags"): len(scan.flags),
              ("all", "max_jaccard"): top, ("all", "threshold"): scan.threshold}
    return Table("leakage", ("all",), columns, values, scan.sentences, config_hash,
                 "Sentence-level Jaccard on lowercased unigram token sets.")


def reliability_table(report: ReliabilityReport, config_hash: str, name: str = "reliability") -> Table:
    rows = tuple(report.per_feature) + ("mean",)
    values = {(f, "icc"): (DEG if r is None else r.icc) for f, r in report.per_feature.items()}
    values[("mean", "icc")] = report.mean_icc
    return Table(name, rows, ("icc",), values, report.n_units, config_hash,
                 "ICC(2,1) across annotators: " + ", ".join(report.annotators) + ".")


def convergent_to_table(table: ConvergentTable, config_hash: str) -> Table:
    values = {k: (DEG if c is None else c.r) for k, c in table.cells.items()}
    marked = frozenset(table.significant())
    return Table("convergent", table.features, table.domains, values, table.n, config_hash,
                 f"* p < {table.threshold:.5f} (Bonferroni over {table.m_tests} tests).", marked)


def cross_context_to_table(table: CrossContextTable, config_hash: str) -> Table:
    columns = ("r", "p")
    values = {}
    for f, c in table.cells.items():
        values[(f, "r")] = DEG if c is None else c.r
        values[(f, "p")] = DEG if c is None else c.p_two_tailed
    marked = frozenset((f, "r") for f in table.significant())
    return Table("cross_context", tuple(table.cells), columns, values, table.n, config_hash,
                 f"* p < {table.threshold:.4f} (Bonferroni over {len(table.cells)} tests); mean |r| = {table.mean_abs_r:.3f}.",
                 marked)


def reactivity_table(result: ReactivityResult, config_hash: str) -> Table:
    rows = ("valence_sd", "valence_mean")
    values = {}
    for label, c in zip(rows, (result.r_sd_emotionality, result.r_mean_emotionality)):
        values[(label, "r_emotionality")] = c.r
        values[(label, "p")] = c.p_two_tailed
    return Table("reactivity", rows, ("r_emotionality", "p"), values, result.n, config_hash,
                 "Within-narrative SD and mean of section valence ratings against Emotionality.")


def summary_table(name: str, rows: Mapping[str, Mapping[str, Any]], n: int, config_hash: str, footnote: str = "") -> Table:
    labels = tuple(rows)
    columns = tuple(dict.fromkeys(c for r in rows.values() for c in r))
    values = {(l, c): rows[l][c] for l in labels for c in rows[l]}
    return Table(name, labels, columns, values, n, config_hash, footnote)


# Bundle and emission ----------------------------------------------------------

@dataclass(frozen=True)
class ReportBundle:
    tables: tuple[Table, ...]
    config: Mapping[str, Any] = field(default_factory=dict)
    footnotes: tuple[str, ...] = ()

    def __post_init__(self):
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate table names in bundle: {names}")

    def table(self, name: str) -> Table:
        return next(t for t in self.tables if t.name == name)

    @property
    def cell_count(self) -> int:
        return sum(t.cell_count for t in self.tables)


CSV_HEADER = ("table", "row", "column", "value", "n", "config_hash")


def render_csv(bundle: ReportBundle) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for t in bundle.tables:
        for r in t.rows:
            for c in t.columns:
                writer.writerow((t.name, r, c, raw(t.cell(r, c)), t.n, t.config_hash))
    return buf.getvalue()


def render_text(bundle: ReportBundle) -> str:
    out = []
    for t in bundle.tables:
        out.append(f"== {t.name} (n = {t.n}, config {t.config_hash[:12] if ',' not in t.config_hash else t.config_hash}) ==")
        cells = [[fmt(t.cell(r, c)) + ("*" if (r, c) in t.marked else "") for c in t.columns] for r in t.rows]
        label_w = max([len(r) for r in t.rows] + [0])
        widths = [max([len(c)] + [len(row[j]) for row in cells]) for j, c in enumerate(t.columns)]
        out.append(" " * label_w + "  " + "  ".join(c.rjust(w) for c, w in zip(t.columns, widths)))
        for r, row in zip(t.rows, cells):
            out.append(r.ljust(label_w) + "  " + "  ".join(v.rjust(w) for v, w in zip(row, widths)))
        if t.footnote:
            out.append(t.footnote)
        out.append("")
    if bundle.footnotes:
        out.append("Notes")
        out += [f"- {note}" for note in bundle.footnotes]
        out.append("")
    if bundle.config:
        out.append("Configuration")
        out.append(yaml.safe_dump(_plain(bundle.config), sort_keys=True, default_flow_style=False).rstrip())
        out.append("")
    return "\n".join(out)


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def emit(bundle: ReportBundle, out_dir: str | Path, formats: Sequence[str] = ("csv", "text"), stem: str = "report") -> list[Path]:
    """Write the bundle; identical bundles always produce identical bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in formats:
        if f == "csv":
            path, body = out / f"{stem}.csv", render_csv(bundle)
        elif f == "text":
            path, body = out / f"{stem}.txt", render_text(bundle)
        else:
            raise SchemaError(f"unknown report format {f!r}")
        path.write_bytes(body.encode("utf-8"))
        written.append(path)
    return written
