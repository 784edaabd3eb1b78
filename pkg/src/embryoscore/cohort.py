"""Embryo/cohort data model, outcome labeling and the train/test split.

Records are frozen dataclasses. Labeling never mutates its input; it returns
new records built with :func:`dataclasses.replace`.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .morphokinetics import MorphokineticRecord

log = logging.getLogger(__name__)

MANIFEST_FIELDS = (
    "embryo_id",
    "clinic_id",
    "treatment_id",
    "female_age",
    "insemination",
    "incubation_day",
    "transfer_protocol",
    "transferred",
    "outcome_label",
    "provenance",
    "kid",
    "sequence_ref",
    "annotations",
)


class CohortError(ValueError):
    """Raised for inconsistent cohort data (bad events, degenerate datasets)."""


class Insemination(str, Enum):
    IVF = "IVF"
    ICSI = "ICSI"
    UNKNOWN = "unknown"


class IncubationDay(str, Enum):
    D5 = "D5"
    D6 = "D6"
    UNKNOWN = "unknown"


class TransferProtocol(str, Enum):
    FRESH = "fresh"
    CRYOPRESERVED = "cryopreserved"
    NOT_TRANSFERRED = "not_transferred"


class OutcomeLabel(str, Enum):
    FH_POS = "FH_POS"
    FH_NEG = "FH_NEG"
    UNKNOWN = "UNKNOWN"
    PENDING = "PENDING"


class Provenance(str, Enum):
    """How an FH- label came about; the sampler treats the two routes differently."""

    TRANSFERRED_NEGATIVE = "transferred_negative"
    DISCARDED = "discarded"


@dataclass(frozen=True)
class EmbryoRecord:
    embryo_id: str
    clinic_id: str
    treatment_id: str
    female_age: int | None = None
    insemination: Insemination = Insemination.UNKNOWN
    incubation_day: IncubationDay = IncubationDay.UNKNOWN
    transfer_protocol: TransferProtocol = TransferProtocol.NOT_TRANSFERRED
    transferred: bool = False
    outcome_label: OutcomeLabel | None = None
    provenance: Provenance | None = None
    kid: bool = False
    sequence_ref: str | None = None
    annotations: MorphokineticRecord | None = None

    def __post_init__(self):
        if self.female_age is not None and not 18 <= self.female_age <= 52:
            raise CohortError(f"{self.embryo_id}: female_age {self.female_age} outside 18-52")
        if self.kid and not (
            self.transferred and self.outcome_label in (OutcomeLabel.FH_POS, OutcomeLabel.FH_NEG)
        ):
            raise CohortError(f"{self.embryo_id}: kid requires a transferred embryo with known outcome")
        if not self.transferred and self.transfer_protocol is not TransferProtocol.NOT_TRANSFERRED:
            raise CohortError(f"{self.embryo_id}: untransferred embryo with protocol {self.transfer_protocol.value}")
        if self.outcome_label is OutcomeLabel.PENDING and self.transferred:
            raise CohortError(f"{self.embryo_id}: PENDING embryo cannot be transferred")

    @property
    def labeled(self) -> bool:
        return self.outcome_label in (OutcomeLabel.FH_POS, OutcomeLabel.FH_NEG)

    @property
    def discarded(self) -> bool:
        return self.provenance is Provenance.DISCARDED


@dataclass(frozen=True)
class TransferEvent:
    """Outcome of one treatment: which embryos went in, heartbeats seen, which were discarded.

    ``protocol`` (fresh or cryopreserved) applies to every transferred embryo
    of the event; when absent the records must already carry one.
    """

    treatment_id: str
    embryo_ids: tuple[str, ...] = ()
    num_fetal_heartbeats: int | None = None
    discarded_ids: tuple[str, ...] = ()
    protocol: TransferProtocol | None = None

    def __post_init__(self):
        object.__setattr__(self, "embryo_ids", tuple(self.embryo_ids))
        object.__setattr__(self, "discarded_ids", tuple(self.discarded_ids))
        if self.num_fetal_heartbeats is not None:
            if self.num_fetal_heartbeats < 0:
                raise CohortError(f"{self.treatment_id}: negative heartbeat count")
            if self.num_fetal_heartbeats > len(self.embryo_ids):
                raise CohortError(
                    f"{self.treatment_id}: {self.num_fetal_heartbeats} heartbeats for "
                    f"{len(self.embryo_ids)} transferred embryos"
                )


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int
    fraction: float = 0.85
    grouped_by: str | None = None

    def __post_init__(self):
        if self.train_ids & self.test_ids:
            raise CohortError("train and test sets overlap")

    @property
    def all_ids(self) -> frozenset[str]:
        return self.train_ids | self.test_ids


def label_outcomes(events: Sequence[TransferEvent], all_embryos: Sequence[EmbryoRecord]) -> list[EmbryoRecord]:
    """Assign FH+/FH-/Unknown/Pending to every embryo.

    Transferred embryos of one event share a label: all FH+ when the heartbeat
    count equals the number transferred, all FH- when it is zero, otherwise
    Unknown. A transfer with no recorded heartbeat count is also Unknown.
    Discarded embryos are FH-; everything else is Pending.

    Labels depend only on ``events`` and the static fields of each record, so
    relabeling already-labeled records is a no-op.
    """
    by_id = {r.embryo_id: r for r in all_embryos}
    if len(by_id) != len(all_embryos):
        raise CohortError("duplicate embryo ids in records")

    transferred: dict[str, TransferEvent] = {}
    discarded: set[str] = set()
    for ev in events:
        for eid in (*ev.embryo_ids, *ev.discarded_ids):
            if eid not in by_id:
                raise CohortError(f"event {ev.treatment_id} references unknown embryo {eid}")
        for eid in ev.embryo_ids:
            if eid in transferred:
                raise CohortError(f"embryo {eid} appears in more than one transfer event")
            transferred[eid] = ev
        for eid in ev.discarded_ids:
            if eid in discarded:
                raise CohortError(f"embryo {eid} discarded twice")
            discarded.add(eid)

    both = discarded & transferred.keys()
    if both:
        raise CohortError(f"embryos both transferred and discarded: {sorted(both)}")

    out = []
    for rec in all_embryos:
        eid = rec.embryo_id
        if eid in transferred:
            ev = transferred[eid]
            protocol = ev.protocol or rec.transfer_protocol
            if protocol is TransferProtocol.NOT_TRANSFERRED:
                raise CohortError(f"transferred embryo {eid} has no fresh/cryopreserved protocol")
            n_fh, n_tr = ev.num_fetal_heartbeats, len(ev.embryo_ids)
            if n_fh is None or 0 < n_fh < n_tr:
                label, prov = OutcomeLabel.UNKNOWN, None
            elif n_fh == n_tr:
                label, prov = OutcomeLabel.FH_POS, None
            else:
                label, prov = OutcomeLabel.FH_NEG, Provenance.TRANSFERRED_NEGATIVE
            new = replace(
                rec,
                transferred=True,
                transfer_protocol=protocol,
                outcome_label=label,
                provenance=prov,
                kid=label in (OutcomeLabel.FH_POS, OutcomeLabel.FH_NEG),
            )
        elif eid in discarded:
            new = replace(
                rec,
                transferred=False,
                transfer_protocol=TransferProtocol.NOT_TRANSFERRED,
                outcome_label=OutcomeLabel.FH_NEG,
                provenance=Provenance.DISCARDED,
                kid=False,
            )
        else:
            new = replace(
                rec,
                transferred=False,
                transfer_protocol=TransferProtocol.NOT_TRANSFERRED,
                outcome_label=OutcomeLabel.PENDING,
                provenance=None,
                kid=False,
            )
        out.append(new)
    return out


def label_counts(embryos: Iterable[EmbryoRecord]) -> dict[str, int]:
    counts = Counter(r.outcome_label.value if r.outcome_label else "UNLABELED" for r in embryos)
    return dict(sorted(counts.items()))


def dataset_report(embryos: Iterable[EmbryoRecord]) -> dict[str, int]:
    """Counts broken down the way the data description reports them."""
    embryos = list(embryos)
    rep = label_counts(embryos)
    rep["transferred"] = sum(r.transferred for r in embryos)
    rep["kid"] = sum(r.kid for r in embryos)
    rep["kid_fh_pos"] = sum(r.kid and r.outcome_label is OutcomeLabel.FH_POS for r in embryos)
    rep["kid_fh_neg"] = sum(r.kid and r.outcome_label is OutcomeLabel.FH_NEG for r in embryos)
    rep["fh_neg_discarded"] = sum(r.provenance is Provenance.DISCARDED for r in embryos)
    rep["labeled"] = sum(r.labeled for r in embryos)
    return rep


def build_dataset(embryos: Sequence[EmbryoRecord]) -> list[EmbryoRecord]:
    """Keep only FH+ and FH- embryos; Unknown and Pending are dropped."""
    kept = [r for r in embryos if r.labeled]
    if not kept:
        raise CohortError("no FH+/FH- embryos: degenerate dataset")
    log.info("dataset counts: %s", label_counts(embryos))
    return kept


def split_dataset(
    embryos: Sequence[EmbryoRecord],
    fraction: float = 0.85,
    seed: int = 0,
    group_by: str | None = None,
) -> DatasetSplit:
    """Random per-embryo train/test split.

    ``round(fraction * n)`` embryos go to training. Ids are sorted before
    shuffling so the split does not depend on input order. ``group_by`` names
    a record attribute (``"treatment_id"`` or ``"clinic_id"``) to keep groups
    intact; it is off by default so siblings can land on both sides.
    """
    if not 0.0 < fraction < 1.0:
        raise CohortError(f"fraction must be in (0, 1), got {fraction}")
    if len(embryos) < 2:
        raise CohortError("need at least 2 embryos to split")
    rng = np.random.default_rng(seed)

    if group_by is None:
        ids = sorted(r.embryo_id for r in embryos)
        if len(set(ids)) != len(ids):
            raise CohortError("duplicate embryo ids")
        order = rng.permutation(len(ids))
        n_train = int(round(fraction * len(ids)))
        n_train = min(max(n_train, 1), len(ids) - 1)
        train = frozenset(ids[i] for i in order[:n_train])
        test = frozenset(ids[i] for i in order[n_train:])
        return DatasetSplit(train, test, seed, fraction)

    groups: dict[str, list[str]] = {}
    for r in embryos:
        groups.setdefault(str(getattr(r, group_by)), []).append(r.embryo_id)
    keys = sorted(groups)
    target = fraction * len(embryos)
    train_ids: set[str] = set()
    for k in (keys[i] for i in rng.permutation(len(keys))):
        if len(train_ids) + len(groups[k]) / 2 <= target:
            train_ids.update(groups[k])
    test_ids = {r.embryo_id for r in embryos} - train_ids
    return DatasetSplit(frozenset(train_ids), frozenset(test_ids), seed, fraction, group_by)


# --- manifest / events files ------------------------------------------------


def record_to_dict(rec: EmbryoRecord) -> dict:
    d = {}
    for name in MANIFEST_FIELDS:
        v = getattr(rec, name)
        if isinstance(v, Enum):
            v = v.value
        elif isinstance(v, MorphokineticRecord):
            v = v.to_dict()
        d[name] = v
    return d


def record_from_dict(d: dict) -> EmbryoRecord:
    unknown = set(d) - set(MANIFEST_FIELDS)
    if unknown:
        raise CohortError(f"unexpected manifest fields: {sorted(unknown)}")

    def enum(cls, key, default):
        v = d.get(key)
        return default if v is None else cls(v)

    ann = d.get("annotations")
    return EmbryoRecord(
        embryo_id=d["embryo_id"],
        clinic_id=d["clinic_id"],
        treatment_id=d["treatment_id"],
        female_age=d.get("female_age"),
        insemination=enum(Insemination, "insemination", Insemination.UNKNOWN),
        incubation_day=enum(IncubationDay, "incubation_day", IncubationDay.UNKNOWN),
        transfer_protocol=enum(TransferProtocol, "transfer_protocol", TransferProtocol.NOT_TRANSFERRED),
        transferred=bool(d.get("transferred", False)),
        outcome_label=enum(OutcomeLabel, "outcome_label", None),
        provenance=enum(Provenance, "provenance", None),
        kid=bool(d.get("kid", False)),
        sequence_ref=d.get("sequence_ref"),
        annotations=None if ann is None else MorphokineticRecord.from_dict(ann),
    )


def write_manifest(path: str | Path, records: Iterable[EmbryoRecord]) -> None:
    """One JSON object per line, fixed key order, ``null`` for absent values."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), separators=(",", ":")) + "\n")


def read_manifest(path: str | Path) -> list[EmbryoRecord]:
    with open(path, encoding="utf-8") as fh:
        return [record_from_dict(json.loads(line)) for line in fh if line.strip()]


def event_to_dict(ev: TransferEvent) -> dict:
    return {
        "treatment_id": ev.treatment_id,
        "embryo_ids": list(ev.embryo_ids),
        "num_fetal_heartbeats": ev.num_fetal_heartbeats,
        "discarded_ids": list(ev.discarded_ids),
        "protocol": ev.protocol.value if ev.protocol else None,
    }


def write_events(path: str | Path, events: Iterable[TransferEvent]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(json.dumps(event_to_dict(ev), separators=(",", ":")) + "\n")


def read_events(path: str | Path) -> list[TransferEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            proto = d.get("protocol")
            out.append(
                TransferEvent(
                    treatment_id=d["treatment_id"],
                    embryo_ids=tuple(d.get("embryo_ids", ())),
                    num_fetal_heartbeats=d.get("num_fetal_heartbeats"),
                    discarded_ids=tuple(d.get("discarded_ids", ())),
                    protocol=None if proto is None else TransferProtocol(proto),
                )
            )
    return out


def write_split(path: str | Path, split: DatasetSplit) -> None:
    payload = {
        "seed": split.seed,
        "fraction": split.fraction,
        "grouped_by": split.grouped_by,
        "train_ids": sorted(split.train_ids),
        "test_ids": sorted(split.test_ids),
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def read_split(path: str | Path) -> DatasetSplit:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return DatasetSplit(
        frozenset(d["train_ids"]), frozenset(d["test_ids"]), d["seed"], d["fraction"], d.get("grouped_by")
    )
