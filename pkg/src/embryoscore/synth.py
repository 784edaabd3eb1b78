"""Deterministic synthetic clinics for desk-scale runs.

Each embryo has a latent viability ``v`` in [0, 1] that drives arrest,
direct cleavage, blastulation time, ICM/TE grades and implantation. Frames are
procedural: a dark zona ring, bright cell blobs between cleavage events, a
compacted morula, then an expanding blastocyst ring whose ICM and TE contrast
follows the grades. Arrested embryos freeze at their arrest state.

Output layout of :func:`generate_cohort`::

    out/manifest.jsonl        unlabeled cohort records
    out/events.jsonl          one TransferEvent per treatment
    out/sequences/<id>/       frames.bin + times.csv
    out/truth/truth.jsonl     latent viability and true events (never trained on)
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np

from .cohort import (
    EmbryoRecord,
    IncubationDay,
    Insemination,
    TransferEvent,
    TransferProtocol,
    write_events,
    write_manifest,
)
from .morphokinetics import Grade, MorphokineticRecord
from .sequences import RawSequence, write_container
from .stats import auc

log = logging.getLogger(__name__)

TRUTH_DIR = "truth"
TRUTH_FILE = "truth.jsonl"
MORULA_AFTER_T5_H = 24.0
EIGHT_CELL_AFTER_T5_H = 8.0
BLAST_EXPANSION_H = 20.0


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    num_clinics: int = 4
    embryos_per_clinic: tuple[int, int] = (135, 165)
    treatment_size: tuple[int, int] = (2, 5)
    age_mean_range: tuple[float, float] = (32.0, 37.0)
    age_sd: float = 4.0
    age_viability_slope: float = 0.01  # viability lost per year over 35
    viability_beta: tuple[float, float] = (2.0, 2.0)
    # arrest probability = clip(intercept - slope * v, 0, 1)
    arrest_intercept: float = 1.1
    arrest_slope: float = 1.6
    # direct cleavage probability = dc_max * (1 - v)
    dc_max: float = 0.25
    # viability lost by direct-cleaving embryos; the earlier abnormality costs more
    dc_penalty_2_5: float = 0.15
    dc_penalty_1_3: float = 0.30
    pn_abnormal_prob: float = 0.04
    tpnf_mean: float = 23.0
    tb_base: float = 98.0
    tb_slope: float = 22.0
    tb_noise: float = 3.0
    grade_noise: float = 0.15
    transfer_k: tuple[int, ...] = (1, 2)
    transfer_k_probs: tuple[float, ...] = (0.8, 0.2)
    proxy_noise: float = 0.2
    implant_slope: float = 10.0
    implant_midpoint: float = 0.55
    fresh_prob: float = 0.7
    d6_prob: float = 0.3
    icsi_prob: float = 0.5
    annotation_fraction: float = 0.7
    side: int = 32
    num_focals: int = 3
    interval_minutes: tuple[float, float] = (11.0, 15.0)
    noise_sd: float = 6.0
    blur_per_plane: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("embryos_per_clinic", "treatment_size", "age_mean_range", "viability_beta", "interval_minutes"):
            setattr(self, name, tuple(getattr(self, name)))
        self.transfer_k = tuple(int(k) for k in self.transfer_k)
        self.transfer_k_probs = tuple(float(p) for p in self.transfer_k_probs)
        probs = (self.dc_max, self.dc_penalty_2_5, self.dc_penalty_1_3, self.pn_abnormal_prob, self.fresh_prob, self.d6_prob, self.icsi_prob, self.annotation_fraction)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise SynthError("probabilities must lie in [0, 1]")
        if abs(sum(self.transfer_k_probs) - 1.0) > 1e-9 or len(self.transfer_k) != len(self.transfer_k_probs):
            raise SynthError("transfer_k_probs must be a probability vector over transfer_k")
        lo, hi = self.interval_minutes
        if not 11.0 <= lo <= hi <= 15.0:
            raise SynthError("acquisition interval must lie within [11, 15] minutes")
        if not 3 <= self.num_focals <= 11 or self.num_focals % 2 == 0:
            raise SynthError("num_focals must be odd and within 3-11")
        if self.num_clinics < 1 or self.embryos_per_clinic[0] < 1 or self.treatment_size[0] < 1:
            raise SynthError("clinic, cohort and treatment sizes must be positive")
        if self.side < 16:
            raise SynthError("side must be >= 16")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise SynthError(f"unknown synth fields: {sorted(bad)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def arrest_probability(self, v: float) -> float:
        return float(np.clip(self.arrest_intercept - self.arrest_slope * v, 0.0, 1.0))

    def dc_probability(self, v: float) -> float:
        return float(np.clip(self.dc_max * (1.0 - v), 0.0, 1.0))

    def implantation_probability(self, v: float) -> float:
        return float(1.0 / (1.0 + np.exp(-self.implant_slope * (v - self.implant_midpoint))))


@dataclass(frozen=True)
class SynthEmbryoTruth:
    embryo_id: str
    latent_viability: float
    true_events: MorphokineticRecord
    arrested: bool
    arrest_time: float | None = None
    insertion_hpi: float = 4.0
    removal_hpi: float = 118.0

    def to_dict(self) -> dict:
        return {
            "embryo_id": self.embryo_id,
            "latent_viability": self.latent_viability,
            "arrested": self.arrested,
            "arrest_time": self.arrest_time,
            "insertion_hpi": self.insertion_hpi,
            "removal_hpi": self.removal_hpi,
            "true_events": self.true_events.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthEmbryoTruth":
        return cls(
            d["embryo_id"], d["latent_viability"], MorphokineticRecord.from_dict(d["true_events"]),
            d["arrested"], d.get("arrest_time"), d["insertion_hpi"], d["removal_hpi"],
        )


@dataclass
class SynthCohort:
    records: list[EmbryoRecord]
    events: list[TransferEvent]
    truths: list[SynthEmbryoTruth]
    clinic_of: dict[str, str] = field(default_factory=dict)


def embryo_rng(seed: int, embryo_id: str) -> np.random.Generator:
    """Per-embryo stream derived from the root seed and the id, not from call order."""
    return np.random.default_rng([int(seed), zlib.crc32(embryo_id.encode())])


# --- embryo biology -------------------------------------------------------------


def _grade(q: float) -> Grade:
    return Grade.A if q > 0.6 else Grade.B if q > 0.35 else Grade.C


def simulate_embryo(embryo_id: str, v: float, removal_hpi: float, config: SynthConfig, rng) -> SynthEmbryoTruth:
    """Draw true events for one embryo of latent viability ``v``.

    Direct cleavage lowers the viability the embryo carries forward (and the
    one recorded in its truth) by ``dc_penalty_1_3`` or ``dc_penalty_2_5``.
    """
    insertion = float(rng.uniform(2.0, 10.0))
    pn = 2 if rng.random() >= config.pn_abnormal_prob else int(rng.choice([1, 3]))
    slow = 1.0 - v
    tpnf = config.tpnf_mean + 3.0 * slow + rng.normal(0.0, 1.0)
    t2 = tpnf + 2.5 + abs(rng.normal(0.0, 0.5))
    t3 = t2 + 11.0 + rng.normal(0.0, 1.0)
    t5 = t3 + 13.0 + rng.normal(0.0, 1.5)
    if rng.random() < config.dc_probability(v):
        if rng.random() < 0.5:
            t3 = tpnf + rng.uniform(1.0, 4.5)
            t2 = min(t2, tpnf + 0.5 * (t3 - tpnf))
            t5 = t3 + 13.0 + rng.normal(0.0, 1.5)
            v = max(0.0, v - config.dc_penalty_1_3)
        else:
            t5 = t3 + rng.uniform(0.5, 4.5)
            v = max(0.0, v - config.dc_penalty_2_5)
        slow = 1.0 - v
    tb = config.tb_base + config.tb_slope * slow + rng.normal(0.0, config.tb_noise)
    tb = max(tb, t5 + MORULA_AFTER_T5_H + 6.0)
    q_icm = v + rng.normal(0.0, config.grade_noise)
    q_te = v + rng.normal(0.0, config.grade_noise)

    times = {"tPNf": tpnf, "t2": t2, "t3": t3, "t5": t5, "tB": tb}
    arrested = rng.random() < config.arrest_probability(v)
    arrest_time = None
    if arrested:
        # arrest somewhere between the 2-cell stage and the onset of blastulation
        arrest_time = float(rng.uniform(t2 + 0.5, tb - 0.5))
    cut = arrest_time if arrested else removal_hpi
    kept = {k: round(float(t), 2) if t < cut else None for k, t in times.items()}
    has_blast = kept["tB"] is not None
    events = MorphokineticRecord(
        pn=pn, **kept,
        icm=_grade(q_icm) if has_blast else None,
        te=_grade(q_te) if has_blast else None,
    )
    return SynthEmbryoTruth(embryo_id, float(v), events, bool(arrested), arrest_time, round(insertion, 3), float(removal_hpi))


def simulate_cohort(config: SynthConfig) -> SynthCohort:
    """Cohort records, transfer events and truth without rendering any pixels."""
    rng = np.random.default_rng(config.seed)
    records, events, truths, clinic_of = [], [], [], {}
    for c in range(config.num_clinics):
        clinic = f"clinic{c + 1:02d}"
        n_target = int(rng.integers(config.embryos_per_clinic[0], config.embryos_per_clinic[1] + 1))
        age_mean = float(rng.uniform(*config.age_mean_range))
        n, t = 0, 0
        while n < n_target:
            t += 1
            tid = f"{clinic}-t{t:04d}"
            size = int(rng.integers(config.treatment_size[0], config.treatment_size[1] + 1))
            k = int(rng.choice(config.transfer_k, p=config.transfer_k_probs))
            age = int(np.clip(round(rng.normal(age_mean, config.age_sd)), 18, 52))
            insemination = Insemination.ICSI if rng.random() < config.icsi_prob else Insemination.IVF
            day = IncubationDay.D6 if rng.random() < config.d6_prob else IncubationDay.D5
            protocol = TransferProtocol.FRESH if rng.random() < config.fresh_prob else TransferProtocol.CRYOPRESERVED
            removal = float(rng.uniform(136.0, 140.0) if day is IncubationDay.D6 else rng.uniform(116.0, 120.0))
            treatment, proxies = [], []
            for e in range(size):
                eid = f"{tid}-e{e + 1}"
                erng = embryo_rng(config.seed, eid)
                v0 = erng.beta(*config.viability_beta)
                v = float(np.clip(v0 - config.age_viability_slope * (age - 35), 0.0, 1.0))
                truth = simulate_embryo(eid, v, removal, config, erng)
                ann = truth.true_events if erng.random() < config.annotation_fraction else None
                proxy = v + erng.normal(0.0, config.proxy_noise) - (1.0 if truth.true_events.tB is None else 0.0)
                treatment.append((truth, ann))
                proxies.append(proxy)
                records.append(EmbryoRecord(
                    eid, clinic, tid, female_age=age, insemination=insemination, incubation_day=day,
                    sequence_ref=f"sequences/{eid}", annotations=ann,
                ))
                truths.append(truth)
                clinic_of[eid] = clinic
            if k > size:
                raise SynthError(f"{tid}: transfer policy k={k} exceeds cohort size {size}")
            order = np.argsort(-np.asarray(proxies), kind="stable")
            chosen = [treatment[i][0] for i in order[:k]]
            fh = int(sum(rng.random() < config.implantation_probability(tr.latent_viability) for tr in chosen))
            discarded = [
                tr.embryo_id for i, (tr, _) in enumerate(treatment)
                if i not in set(order[:k].tolist()) and _discard(tr)
            ]
            events.append(TransferEvent(tid, tuple(tr.embryo_id for tr in chosen), fh, tuple(discarded), protocol))
            n += size
    return SynthCohort(records, events, truths, clinic_of)


def _discard(truth: SynthEmbryoTruth) -> bool:
    ev = truth.true_events
    return truth.arrested or ev.tB is None or Grade.C in (ev.icm, ev.te)


# --- rendering ------------------------------------------------------------------


def stage_at(truth: SynthEmbryoTruth, t: float) -> tuple[str, int]:
    """(stage name, blob count) shown at time ``t``; frozen after arrest."""
    if truth.arrested and t >= truth.arrest_time:
        t = truth.arrest_time
    ev = truth.true_events
    if ev.t2 is None or t < ev.t2:
        return ("pronuclear" if ev.tPNf is None or t < ev.tPNf else "zygote"), 1
    if ev.t3 is None or t < ev.t3:
        return "2-cell", 2
    if ev.t5 is None or t < ev.t5:
        return "3-cell", 3
    if t < ev.t5 + EIGHT_CELL_AFTER_T5_H:
        return "5-cell", 5
    if t < ev.t5 + MORULA_AFTER_T5_H:
        return "8-cell", 8
    if ev.tB is None or t < ev.tB:
        return "morula", 1
    return "blastocyst", 0


def _disk(img, yy, xx, cy, cx, r, amp):
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    img += amp * np.clip(r - d + 0.5, 0.0, 1.0)


def _ring(img, yy, xx, cy, cx, r, width, amp):
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    img += amp * np.clip(0.5 * width - np.abs(d - r) + 0.5, 0.0, 1.0)


class _Layout:
    """Per-embryo geometry: zona centre and blob positions for each cell count."""

    def __init__(self, side: int, rng):
        self.side = side
        self.cy = side / 2 + rng.uniform(-1.0, 1.0)
        self.cx = side / 2 + rng.uniform(-1.0, 1.0)
        self.radius = 0.36 * side
        self.blobs = {}
        for n in (1, 2, 3, 5, 8):
            r_cell = 0.62 * self.radius / np.sqrt(n)
            if n == 1:
                self.blobs[n] = [(0.0, 0.0, r_cell)]
                continue
            phase = rng.uniform(0, 2 * np.pi)
            ring = self.radius - r_cell - 0.5
            self.blobs[n] = [
                (ring * np.sin(phase + 2 * np.pi * i / n), ring * np.cos(phase + 2 * np.pi * i / n), r_cell)
                for i in range(n)
            ]
        self.icm_angle = rng.uniform(0, 2 * np.pi)


def _template(truth: SynthEmbryoTruth, stage: str, blobs: int, expansion: float, layout: _Layout) -> np.ndarray:
    s = layout.side
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = np.full((s, s), 110.0)
    cy, cx, R = layout.cy, layout.cx, layout.radius
    ev = truth.true_events
    if stage == "blastocyst":
        Rz = R * (1.0 + 0.18 * expansion)
        _disk(img, yy, xx, cy, cx, Rz - 1.0, -25.0)  # cavity
        te_amp = {Grade.A: 90.0, Grade.B: 60.0, Grade.C: 30.0}[ev.te]
        _ring(img, yy, xx, cy, cx, Rz - 1.5, 1.6, te_amp)
        icm_r = {Grade.A: 0.42, Grade.B: 0.32, Grade.C: 0.22}[ev.icm] * Rz
        icm_amp = {Grade.A: 110.0, Grade.B: 80.0, Grade.C: 50.0}[ev.icm]
        off = Rz - icm_r - 1.5
        _disk(img, yy, xx, cy + off * np.sin(layout.icm_angle), cx + off * np.cos(layout.icm_angle), icm_r, icm_amp)
        _ring(img, yy, xx, cy, cx, Rz + 0.5, 1.2, -50.0)
    else:
        _ring(img, yy, xx, cy, cx, R + 0.5, 1.5, -50.0)
        if stage == "morula":
            _disk(img, yy, xx, cy, cx, 0.7 * R, 70.0)
            _disk(img, yy, xx, cy, cx, 0.45 * R, 15.0)
        else:
            for dy, dx, r in layout.blobs[blobs]:
                _disk(img, yy, xx, cy + dy, cx + dx, r, 60.0)
            if stage == "pronuclear":
                for i in range(ev.pn or 0):
                    a = 2 * np.pi * i / max(ev.pn, 1)
                    _disk(img, yy, xx, cy + 0.2 * R * np.sin(a), cx + 0.2 * R * np.cos(a), 0.12 * R, -45.0)
    return img


@dataclass(frozen=True)
class RenderedFrame:
    """Instrumentation for one rendered frame."""

    time: float
    focal: int
    stage: str
    blob_count: int


def render_frames(
    truth: SynthEmbryoTruth,
    config: SynthConfig,
    rng,
    instrumentation: list | None = None,
) -> RawSequence:
    """Render every acquisition between insertion and removal on all focal planes.

    When ``instrumentation`` is a list, one :class:`RenderedFrame` per frame
    is appended to it.
    """
    interval_h = rng.uniform(*config.interval_minutes) / 60.0
    times = np.round(truth.insertion_hpi + interval_h * np.arange(
        int((truth.removal_hpi - truth.insertion_hpi) / interval_h) + 1), 3)
    layout = _Layout(config.side, rng)
    F = config.num_focals
    centre = F // 2
    frames = np.empty((len(times) * F, config.side, config.side), dtype=np.uint8)
    cache: dict[tuple, np.ndarray] = {}
    for i, t in enumerate(times):
        stage, blobs = stage_at(truth, float(t))
        expansion = 0.0
        if stage == "blastocyst":
            t_eff = min(float(t), truth.arrest_time) if truth.arrested else float(t)
            expansion = round(min((t_eff - truth.true_events.tB) / BLAST_EXPANSION_H, 1.0) * 10) / 10
        key = (stage, blobs, expansion)
        if key not in cache:
            base = _template(truth, stage, blobs, expansion, layout)
            planes = []
            for f in range(F):
                sigma = 0.3 + config.blur_per_plane * abs(f - centre)
                planes.append(cv2.GaussianBlur(base, (0, 0), sigma))
            cache[key] = np.stack(planes)
        noise = rng.normal(0.0, config.noise_sd, (F, config.side, config.side))
        frames[i * F:(i + 1) * F] = np.clip(np.rint(cache[key] + noise), 0, 255).astype(np.uint8)
        if instrumentation is not None:
            instrumentation.extend(RenderedFrame(float(t), f, stage, blobs) for f in range(F))
    return RawSequence(
        truth.embryo_id, frames, np.repeat(times, F), np.tile(np.arange(F), len(times)), F,
    )


# --- cohort output --------------------------------------------------------------


@dataclass
class GeneratedCohort:
    root: Path
    manifest_path: Path
    events_path: Path
    truth_path: Path
    cohort: SynthCohort


def write_truth(path: str | Path, truths: Sequence[SynthEmbryoTruth]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in truths:
            fh.write(json.dumps(tr.to_dict(), separators=(",", ":")) + "\n")


def read_truth(path: str | Path) -> list[SynthEmbryoTruth]:
    with open(path, encoding="utf-8") as fh:
        return [SynthEmbryoTruth.from_dict(json.loads(line)) for line in fh if line.strip()]


def generate_cohort(config: SynthConfig, out_dir: str | Path, render: bool = True) -> GeneratedCohort:
    """Write manifest, events, containers and the truth sidecar under ``out_dir``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cohort = simulate_cohort(config)
    manifest, events_path = root / "manifest.jsonl", root / "events.jsonl"
    truth_path = root / TRUTH_DIR / TRUTH_FILE
    truth_path.parent.mkdir(exist_ok=True)
    write_manifest(manifest, cohort.records)
    write_events(events_path, cohort.events)
    write_truth(truth_path, cohort.truths)
    if render:
        for i, tr in enumerate(cohort.truths):
            # a separate stream from the biology so rendering changes never move outcomes
            rng = embryo_rng(config.seed + 1_000_003, tr.embryo_id)
            write_container(root / "sequences" / tr.embryo_id, render_frames(tr, config, rng))
            if (i + 1) % 100 == 0:
                log.info("rendered %d/%d embryos", i + 1, len(cohort.truths))
    return GeneratedCohort(root, manifest, events_path, truth_path, cohort)


@dataclass(frozen=True)
class OracleAUC:
    auc: float
    ceiling: float
    n_pos: int
    n_neg: int


def oracle_auc(
    truth: Sequence[SynthEmbryoTruth] | Mapping[str, SynthEmbryoTruth],
    scores: Mapping[str, float],
    labels: Mapping[str, int],
) -> OracleAUC:
    """AUC of ``scores`` against realized outcomes, next to the AUC of the latent viability."""
    by_id = truth if isinstance(truth, Mapping) else {t.embryo_id: t for t in truth}
    ids = sorted(labels)
    y = np.array([labels[i] for i in ids])
    s = np.array([scores[i] for i in ids], dtype=float)
    v = np.array([by_id[i].latent_viability for i in ids])
    return OracleAUC(auc(s, y), auc(v, y), int(y.sum()), int(len(y) - y.sum()))
