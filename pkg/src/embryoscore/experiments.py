"""Evaluation reports: cohort AUCs, subgroups, leave-one-clinic-out, morphokinetics, model comparison.

Every report is a pure function of (scores, records). Scores are a mapping
``embryo_id -> score``; any monotone rescaling gives identical AUCs.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .cohort import EmbryoRecord, OutcomeLabel, TransferProtocol
from .morphokinetics import TB_LABELS, CleavagePattern, classify_direct_cleavage, tb_group
from .stats import RocResult, TestResult, delong_test_paired, delong_test_unpaired, mann_whitney, roc, write_roc_points

log = logging.getLogger(__name__)

ALPHA = 0.05
KID_THRESHOLD = 250

# Published figures, reproduced only as footers for orientation.
REFERENCE_TARGETS = {
    "cohorts": "reference: KID AUC 0.67 (0.64-0.69); whole-cohort AUC 0.95 (0.95-0.96)",
    "subgroups": "reference: ICSI n=738 AUC 0.69; fresh 0.69 vs cryopreserved 0.65*",
    "holdout": "reference: per-clinic KID AUC 0.60-0.75, two clinics starred",
    "morpho": "reference: DC groups differ (p < 0.0001); blastocyst-only DC1-3 vs DC2-5 p = 0.18",
    "compare": "reference: annotated whole cohort 0.92 vs 0.89 (significant); KID 0.67 vs 0.66 (not significant)",
}


class ExperimentError(ValueError):
    pass


def _label(rec: EmbryoRecord) -> int:
    return int(rec.outcome_label is OutcomeLabel.FH_POS)


def _labeled(records: Iterable[EmbryoRecord]) -> list[EmbryoRecord]:
    return [r for r in records if r.labeled]


def _arrays(scores: Mapping[str, float], records: Sequence[EmbryoRecord]) -> tuple[np.ndarray, np.ndarray]:
    missing = [r.embryo_id for r in records if r.embryo_id not in scores]
    if missing:
        raise ExperimentError(f"{len(missing)} embryos unscored, e.g. {missing[:3]}")
    return (
        np.array([scores[r.embryo_id] for r in records], dtype=np.float64),
        np.array([_label(r) for r in records], dtype=np.int64),
    )


def _try_roc(s: np.ndarray, y: np.ndarray) -> RocResult | None:
    if (y == 1).sum() < 1 or (y == 0).sum() < 1:
        return None
    return roc(s, y)


def _fmt(x, digits=3) -> str:
    return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


def _fmt_ci(ci) -> str:
    return "-" if ci is None else f"{ci[0]:.2f} - {ci[1]:.2f}"


def _table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(headers), line(["-" * w for w in widths]), *(line(r) for r in rows)])


# --- overall --------------------------------------------------------------------


@dataclass
class CohortEvaluation:
    auc_all: RocResult | None
    auc_kid: RocResult | None
    n_all: int
    n_kid: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "auc_all": self.auc_all.to_dict() if self.auc_all else None,
            "auc_kid": self.auc_kid.to_dict() if self.auc_kid else None,
            "n_all": self.n_all,
            "n_kid": self.n_kid,
            "warnings": self.warnings,
        }

    def render(self) -> str:
        rows = []
        for name, r, n in (("whole cohort", self.auc_all, self.n_all), ("KID", self.auc_kid, self.n_kid)):
            rows.append([name, str(n), _fmt(r.auc if r else None), _fmt_ci(r.ci95 if r else None)])
        return _table(["cohort", "n", "AUC", "95% CI"], rows) + "\n\n" + REFERENCE_TARGETS["cohorts"]


def evaluate_cohorts(scores: Mapping[str, float], records: Sequence[EmbryoRecord]) -> CohortEvaluation:
    """Whole-cohort AUC over every labeled embryo, KID AUC over the transferred-known subset."""
    labeled = _labeled(records)
    s, y = _arrays(scores, labeled)
    warnings = []
    kid_idx = np.array([r.kid for r in labeled], dtype=bool)
    auc_all = _try_roc(s, y)
    auc_kid = _try_roc(s[kid_idx], y[kid_idx]) if kid_idx.any() else None
    if auc_kid is None:
        warnings.append("no KID embryos with both outcomes in the evaluated set; KID metric omitted")
        log.warning(warnings[-1])
    return CohortEvaluation(auc_all, auc_kid, len(labeled), int(kid_idx.sum()), warnings)


# --- subgroups ------------------------------------------------------------------


def age_bin(age: int | None) -> str | None:
    if age is None:
        return None
    if age <= 29:
        return "<30"
    if age <= 34:
        return "30-34"
    if age <= 39:
        return "35-39"
    return ">39"


_DIMENSIONS: dict[str, Callable[[EmbryoRecord], str | None]] = {
    "age": lambda r: age_bin(r.female_age),
    "insemination": lambda r: None if r.insemination.value == "unknown" else r.insemination.value,
    "incubation_length": lambda r: None if r.incubation_day.value == "unknown" else r.incubation_day.value,
    "transfer_protocol": lambda r: (
        None if r.transfer_protocol is TransferProtocol.NOT_TRANSFERRED else r.transfer_protocol.value
    ),
}


@dataclass(frozen=True)
class SubgroupSpec:
    dimension: str
    bins: tuple[str, ...]

    def __post_init__(self):
        if self.dimension not in _DIMENSIONS:
            raise ExperimentError(f"unknown subgroup dimension {self.dimension!r}")
        object.__setattr__(self, "bins", tuple(self.bins))

    def assign(self, rec: EmbryoRecord) -> str | None:
        b = _DIMENSIONS[self.dimension](rec)
        if b is not None and b not in self.bins:
            raise ExperimentError(f"{rec.embryo_id}: {self.dimension} value {b!r} not in bins {self.bins}")
        return b


DEFAULT_SUBGROUPS = (
    SubgroupSpec("age", ("<30", "30-34", "35-39", ">39")),
    SubgroupSpec("insemination", ("IVF", "ICSI")),
    SubgroupSpec("incubation_length", ("D5", "D6")),
    SubgroupSpec("transfer_protocol", ("fresh", "cryopreserved")),
)


@dataclass
class SubgroupRow:
    dimension: str
    subgroup: str
    n: int
    n_pos: int
    n_neg: int
    auc: float | None = None
    ci95: tuple[float, float] | None = None
    p_value: float | None = None
    star: bool = False


def _enough(y: np.ndarray) -> bool:
    return (y == 1).sum() >= 2 and (y == 0).sum() >= 2


def subgroup_analysis(
    scores: Mapping[str, float],
    records: Sequence[EmbryoRecord],
    specs: Sequence[SubgroupSpec] = DEFAULT_SUBGROUPS,
    alpha: float = ALPHA,
) -> list[SubgroupRow]:
    """Per-bin KID AUC; a star marks a bin whose AUC is significantly below its complement's.

    The star test is the unpaired one-tailed DeLong test of the bin against
    the remaining bins of the same dimension (disjoint embryo sets).
    Embryos missing a dimension's metadata are left out of that dimension only.
    """
    kid = [r for r in _labeled(records) if r.kid]
    rows = []
    for spec in specs:
        assigned = [(r, spec.assign(r)) for r in kid]
        assigned = [(r, b) for r, b in assigned if b is not None]
        for b in spec.bins:
            inside = [r for r, g in assigned if g == b]
            outside = [r for r, g in assigned if g != b]
            s_in, y_in = _arrays(scores, inside)
            row = SubgroupRow(spec.dimension, b, len(inside), int(y_in.sum()), int(len(y_in) - y_in.sum()))
            if _enough(y_in):
                r = roc(s_in, y_in)
                row.auc, row.ci95 = r.auc, r.ci95
                s_out, y_out = _arrays(scores, outside)
                if _enough(y_out):
                    t = delong_test_unpaired(s_in, y_in, s_out, y_out, tail="less")
                    row.p_value = t.p_value
                    row.star = t.p_value < alpha
            rows.append(row)
    return rows


def render_subgroups(rows: Sequence[SubgroupRow]) -> str:
    body = [
        [r.dimension, r.subgroup + ("*" if r.star else ""), str(r.n), _fmt(r.auc, 2), _fmt_ci(r.ci95), _fmt(r.p_value, 4)]
        for r in rows
    ]
    header = "KID embryos; * = AUC lower than the rest of the dimension (unpaired DeLong, one-tailed)"
    return header + "\n\n" + _table(["dimension", "subgroup", "n", "AUC", "95% CI", "p"], body) + "\n\n" + REFERENCE_TARGETS["subgroups"]


# --- leave-one-clinic-out -------------------------------------------------------


@dataclass(frozen=True)
class HoldoutPlan:
    eligible_clinics: tuple[str, ...]
    folds: tuple[tuple[str, tuple[str, ...]], ...]
    threshold: int = KID_THRESHOLD

    def __post_init__(self):
        for held, training in self.folds:
            if held in training:
                raise ExperimentError(f"clinic {held} appears in its own training clinics")


def plan_holdout(records: Sequence[EmbryoRecord], threshold: int = KID_THRESHOLD) -> HoldoutPlan:
    """Clinics with strictly more than ``threshold`` KID embryos become folds."""
    clinics = sorted({r.clinic_id for r in records})
    kid_counts = {c: 0 for c in clinics}
    for r in records:
        if r.kid and r.labeled:
            kid_counts[r.clinic_id] += 1
    eligible = tuple(c for c in clinics if kid_counts[c] > threshold)
    folds = tuple((c, tuple(o for o in clinics if o != c)) for c in eligible)
    return HoldoutPlan(eligible, folds, threshold)


# train_fn(training records, held-out clinic) -> scorer(records) -> {embryo_id: score}
TrainFn = Callable[[Sequence[EmbryoRecord], str], Callable[[Sequence[EmbryoRecord]], Mapping[str, float]]]


@dataclass
class HoldoutRow:
    clinic: str
    n_kid: int
    auc_kid: float | None = None
    ci95: tuple[float, float] | None = None
    auc_all: float | None = None
    p_value: float | None = None
    star: bool = False
    error: str | None = None


@dataclass
class HoldoutResult:
    plan: HoldoutPlan
    rows: list[HoldoutRow]
    pooled: RocResult | None
    scores: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "threshold": self.plan.threshold,
            "eligible_clinics": list(self.plan.eligible_clinics),
            "rows": [asdict(r) for r in self.rows],
            "pooled_kid": self.pooled.to_dict() if self.pooled else None,
        }


def clinic_holdout(
    records: Sequence[EmbryoRecord],
    train_fn: TrainFn,
    threshold: int = KID_THRESHOLD,
    alpha: float = ALPHA,
) -> HoldoutResult:
    """Train one model per eligible clinic on every other clinic; evaluate on that clinic.

    A failing fold is logged and reported with its error; the other folds
    continue. Stars compare each clinic's KID AUC with the pooled KID AUC of
    all other held-out clinics (unpaired DeLong, one-tailed).
    """
    labeled = _labeled(records)
    plan = plan_holdout(labeled, threshold)
    rows, fold_scores = [], {}
    for held, _ in plan.folds:
        training = [r for r in labeled if r.clinic_id != held]
        test = [r for r in labeled if r.clinic_id == held]
        overlap = {r.embryo_id for r in training} & {r.embryo_id for r in test}
        assert not overlap, f"fold {held}: {len(overlap)} embryos on both sides"
        kid = [r for r in test if r.kid]
        row = HoldoutRow(held, len(kid))
        try:
            scorer = train_fn(training, held)
            scores = dict(scorer(test))
        except Exception as exc:  # noqa: BLE001 - one failed fold must not sink the others
            log.error("hold-out fold %s failed: %s", held, exc)
            row.error = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            continue
        s_kid, y_kid = _arrays(scores, kid)
        if _enough(y_kid):
            r = roc(s_kid, y_kid)
            row.auc_kid, row.ci95 = r.auc, r.ci95
        s_all, y_all = _arrays(scores, test)
        if (y_all == 1).any() and (y_all == 0).any():
            row.auc_all = roc(s_all, y_all).auc
        fold_scores[held] = (scores, kid)
        rows.append(row)

    pooled_s = {r.embryo_id: sc[r.embryo_id] for sc, kid in fold_scores.values() for r in kid}
    by_clinic = {c: kid for c, (_, kid) in fold_scores.items()}
    pooled = None
    all_kid = [r for kid in by_clinic.values() for r in kid]
    if all_kid:
        s, y = _arrays(pooled_s, all_kid)
        pooled = _try_roc(s, y)
    for row in rows:
        if row.clinic not in by_clinic or row.auc_kid is None:
            continue
        inside = by_clinic[row.clinic]
        outside = [r for c, kid in by_clinic.items() if c != row.clinic for r in kid]
        s_in, y_in = _arrays(pooled_s, inside)
        s_out, y_out = _arrays(pooled_s, outside)
        if _enough(y_out):
            t = delong_test_unpaired(s_in, y_in, s_out, y_out, tail="less")
            row.p_value, row.star = t.p_value, t.p_value < alpha
    return HoldoutResult(plan, rows, pooled, pooled_s)


def render_holdout(result: HoldoutResult) -> str:
    body = [
        [
            r.clinic + ("*" if r.star else ""), str(r.n_kid), _fmt(r.auc_kid, 2), _fmt_ci(r.ci95),
            _fmt(r.auc_all, 2), _fmt(r.p_value, 4), r.error or "",
        ]
        for r in result.rows
    ]
    head = (
        f"leave-one-clinic-out over clinics with > {result.plan.threshold} KID embryos; "
        "* = KID AUC lower than the other held-out clinics (unpaired DeLong, one-tailed)"
    )
    pooled = f"pooled hold-out KID AUC: {_fmt(result.pooled.auc if result.pooled else None)}"
    table = _table(["clinic", "n KID", "AUC", "95% CI", "AUC all", "p", "error"], body)
    return f"{head}\n\n{table}\n\n{pooled}\n{REFERENCE_TARGETS['holdout']}"


# --- morphokinetics -------------------------------------------------------------


@dataclass
class GroupRow:
    group: str
    n: int
    mean: float
    sd: float


@dataclass
class GroupComparison:
    name: str
    rows: list[GroupRow]
    p_values: dict[str, float]


def _group_report(name: str, groups: Mapping[str, list[float]], order: Sequence[str]) -> GroupComparison:
    rows = []
    present = [g for g in order if groups.get(g)]
    for g in present:
        v = np.asarray(groups[g], dtype=float)
        rows.append(GroupRow(g, len(v), float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else float("nan")))
    p = {}
    for a, b in itertools.combinations(present, 2):
        p[f"{a} vs {b}"] = mann_whitney(groups[a], groups[b], tail="two").p_value
    return GroupComparison(name, rows, p)


def morphokinetic_report(scores: Mapping[str, float], records: Sequence[EmbryoRecord]) -> list[GroupComparison]:
    """Score distributions by direct cleavage, blastulation time, ICM and TE grade.

    Only annotated embryos enter; the blastocyst subset is those with tB.
    Group differences use two-tailed Mann-Whitney tests.
    """
    annotated = [r for r in records if r.annotations is not None and r.embryo_id in scores]
    dc_order = [CleavagePattern.NO_DC.value, CleavagePattern.DC2_5.value, CleavagePattern.DC1_3.value]

    def grouped(rs, key):
        out: dict[str, list[float]] = {}
        for r in rs:
            k = key(r)
            if k is not None:
                out.setdefault(k, []).append(float(scores[r.embryo_id]))
        return out

    def dc_key(r):
        c = classify_direct_cleavage(r.annotations)
        return None if c is CleavagePattern.UNDETERMINED else c.value

    blast = [r for r in annotated if r.annotations.tB is not None]
    return [
        _group_report("direct cleavage (all)", grouped(annotated, dc_key), dc_order),
        _group_report("direct cleavage (blastocysts)", grouped(blast, dc_key), dc_order),
        _group_report("tB", grouped(blast, lambda r: tb_group(r.annotations)), TB_LABELS),
        _group_report("ICM", grouped(blast, lambda r: r.annotations.icm.value if r.annotations.icm else None), "ABC"),
        _group_report("TE", grouped(blast, lambda r: r.annotations.te.value if r.annotations.te else None), "ABC"),
    ]


def render_morpho(reports: Sequence[GroupComparison]) -> str:
    parts = []
    for rep in reports:
        rows = [[g.group, str(g.n), _fmt(g.mean, 2), _fmt(g.sd, 2)] for g in rep.rows]
        parts.append(rep.name + "\n" + _table(["group", "n", "mean", "sd"], rows))
        parts.extend(f"  Mann-Whitney {k}: p = {v:.4g}" for k, v in rep.p_values.items())
        parts.append("")
    return "\n".join(parts) + REFERENCE_TARGETS["morpho"]


# --- model comparison -----------------------------------------------------------


@dataclass
class ModelComparison:
    cohort: str
    n: int
    roc_a: RocResult
    roc_b: RocResult
    test: TestResult


def fully_annotated(rec: EmbryoRecord) -> bool:
    a = rec.annotations
    return a is not None and a.tB is not None and a.icm is not None and a.te is not None


def compare_models(
    scores_a: Mapping[str, float],
    scores_b: Mapping[str, float],
    records: Sequence[EmbryoRecord],
    tail: str = "greater",
) -> list[ModelComparison]:
    """Paired DeLong comparison on the annotated whole cohort and its KID subset.

    Annotated means tB, ICM and TE are all present. Both models must score
    exactly the same embryos.
    """
    if set(scores_a) != set(scores_b):
        raise ExperimentError(
            f"models scored different embryo sets ({len(set(scores_a) ^ set(scores_b))} ids differ)"
        )
    subset = [r for r in _labeled(records) if fully_annotated(r) and r.embryo_id in scores_a]
    out = []
    for name, rs in (("annotated whole cohort", subset), ("annotated KID", [r for r in subset if r.kid])):
        sa, y = _arrays(scores_a, rs)
        sb, _ = _arrays(scores_b, rs)
        if not _enough(y):
            log.warning("%s: fewer than 2 embryos of a class; comparison skipped", name)
            continue
        out.append(ModelComparison(name, len(rs), roc(sa, y), roc(sb, y), delong_test_paired(sa, sb, y, tail=tail)))
    return out


def render_compare(results: Sequence[ModelComparison], names: tuple[str, str] = ("model A", "model B")) -> str:
    rows = [
        [
            c.cohort, str(c.n), _fmt(c.roc_a.auc), _fmt_ci(c.roc_a.ci95), _fmt(c.roc_b.auc), _fmt_ci(c.roc_b.ci95),
            _fmt(c.test.p_value, 4) + (" (degenerate)" if c.test.degenerate else ""),
        ]
        for c in results
    ]
    head = f"{names[0]} vs {names[1]}; paired DeLong, alternative: {results[0].test.alternative if results else '-'}"
    return head + "\n\n" + _table(["cohort", "n", f"AUC {names[0]}", "CI", f"AUC {names[1]}", "CI", "p"], rows) + "\n\n" + REFERENCE_TARGETS["compare"]


# --- persistence ----------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


def write_report(out_dir: str | Path, name: str, text: str, data) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.txt").write_text(text + "\n", encoding="utf-8")
    with open(out / f"{name}.json", "w", encoding="utf-8") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)


def comparison_data(results: Sequence[ModelComparison]) -> list[dict]:
    return [
        {"cohort": c.cohort, "n": c.n, "model_a": c.roc_a.to_dict(), "model_b": c.roc_b.to_dict(), "test": c.test.to_dict()}
        for c in results
    ]


def write_comparison_roc(out_dir: str | Path, results: Sequence[ModelComparison]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in results:
        slug = c.cohort.replace(" ", "_")
        for tag, r in (("a", c.roc_a), ("b", c.roc_b)):
            p = out / f"roc_{slug}_{tag}.tsv"
            write_roc_points(p, r)
            paths.append(p)
    return paths
