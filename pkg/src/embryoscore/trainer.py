"""Stratified batch sampling, focal loss, one-cycle schedule, training loop and scoring."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .augment import AugmentationConfig, stage1_temporal, stage2_spatial
from .cohort import EmbryoRecord, OutcomeLabel, Provenance
from .network import EmbryoNet, NetworkConfig, save_checkpoint, to_input
from .sequences import FrameSequence, RawSequence, frame_grid, read_container, sample_sequence

log = logging.getLogger(__name__)

STRATA = ("fh_pos_kid", "fh_neg_kid", "discarded")
SCORE_MIN, SCORE_MAX = 1.0, 9.9
FOCAL_EPS = 1e-7
TRUTH_MARKER_KEYS = ("latent_viability", "true_events")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_batches: int = 9264
    initial_lr: float = 1e-5
    max_lr: float = 1e-4
    warmup_fraction: float = 0.3
    final_lr_divisor: float = 10.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    strata_probs: tuple[float, float, float] = (0.50, 0.10, 0.40)
    seed: int = 0
    profile: str = "paper"

    def __post_init__(self):
        self.strata_probs = tuple(float(p) for p in self.strata_probs)
        if len(self.strata_probs) != 3 or abs(sum(self.strata_probs) - 1.0) > 1e-9 or min(self.strata_probs) < 0:
            raise ValueError(f"strata_probs must be 3 probabilities summing to 1, got {self.strata_probs}")
        if not 0.0 < self.initial_lr <= self.max_lr:
            raise ValueError("need 0 < initial_lr <= max_lr")
        if self.focal_gamma < 0 or not 0.0 < self.focal_alpha < 1.0:
            raise ValueError("need gamma >= 0 and alpha in (0, 1)")
        if self.batch_size < 1 or self.total_batches < 1:
            raise ValueError("batch_size and total_batches must be positive")
        if self.profile not in ("paper", "tiny"):
            raise ValueError(f"unknown profile {self.profile!r}")

    @classmethod
    def paper(cls, seed: int = 0) -> "TrainConfig":
        return cls(seed=seed)

    @classmethod
    def tiny(cls, seed: int = 0) -> "TrainConfig":
        """Desk-scale settings for the tiny network (not the published recipe)."""
        return cls(batch_size=32, total_batches=600, initial_lr=1e-4, max_lr=2e-3, seed=seed, profile="tiny")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown train fields: {sorted(bad)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strata_probs"] = list(self.strata_probs)
        return d


@dataclass(frozen=True)
class ScoredEmbryo:
    embryo_id: str
    fh_probability: float
    idascore: float

    @classmethod
    def from_probability(cls, embryo_id: str, p: float) -> "ScoredEmbryo":
        return cls(embryo_id, float(p), rescale_score(p))


def rescale_score(p: float) -> float:
    """Affine map of a probability onto the [1.0, 9.9] score range."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    return SCORE_MIN + (SCORE_MAX - SCORE_MIN) * float(p)


def input_grid(net_config: NetworkConfig, start: float = 12.0) -> np.ndarray:
    """Target times for the network input, always spanning 128 h from ``start``.

    The paper profile samples hourly; smaller profiles widen the spacing so the
    same developmental window is covered with fewer frames.
    """
    return frame_grid(start, net_config.input_frames, 128.0 / net_config.input_frames)


# --- sampling ----------------------------------------------------------------


def stratum_of(rec: EmbryoRecord) -> str | None:
    if rec.outcome_label is OutcomeLabel.FH_POS and rec.kid:
        return "fh_pos_kid"
    if rec.outcome_label is OutcomeLabel.FH_NEG and rec.provenance is Provenance.TRANSFERRED_NEGATIVE:
        return "fh_neg_kid"
    if rec.outcome_label is OutcomeLabel.FH_NEG and rec.provenance is Provenance.DISCARDED:
        return "discarded"
    return None


def partition_strata(records: Iterable[EmbryoRecord]) -> dict[str, list[EmbryoRecord]]:
    strata: dict[str, list[EmbryoRecord]] = {k: [] for k in STRATA}
    for rec in records:
        k = stratum_of(rec)
        if k is not None:
            strata[k].append(rec)
    for k in STRATA:
        strata[k].sort(key=lambda r: r.embryo_id)
    return strata


def sample_batch(
    strata: Mapping[str, Sequence[EmbryoRecord]], config: TrainConfig, rng: np.random.Generator,
) -> list[tuple[EmbryoRecord, int, int]]:
    """Draw ``batch_size`` (embryo, fh_target, discard_target) triples.

    Each slot picks a stratum with ``strata_probs`` and then an embryo
    uniformly within it, with replacement.
    """
    for k in STRATA:
        if not strata.get(k):
            raise TrainingError(f"stratum {k!r} is empty")
    which = rng.choice(len(STRATA), size=config.batch_size, p=config.strata_probs)
    out = []
    for s in which:
        group = strata[STRATA[s]]
        rec = group[int(rng.integers(len(group)))]
        out.append((rec, int(rec.outcome_label is OutcomeLabel.FH_POS), int(rec.provenance is Provenance.DISCARDED)))
    return out


# --- loss and schedule -----------------------------------------------------------


def focal_loss(p, y, gamma: float = 2.0, alpha: float = 0.5) -> torch.Tensor:
    """Elementwise ``-alpha_t (1 - p_t)^gamma log(p_t)`` with p clamped to [eps, 1 - eps]."""
    p = torch.as_tensor(p, dtype=torch.get_default_dtype() if not torch.is_tensor(p) else p.dtype)
    y = torch.as_tensor(y, dtype=p.dtype)
    p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
    p_t = y * p + (1 - y) * (1 - p)
    alpha_t = y * alpha + (1 - y) * (1 - alpha)
    return -alpha_t * (1 - p_t) ** gamma * torch.log(p_t)


def one_cycle_lr(
    step: int, total_steps: int, initial_lr: float, max_lr: float,
    warmup_fraction: float = 0.3, final_divisor: float = 10.0,
) -> float:
    """Cosine warm-up from ``initial_lr`` to ``max_lr`` at step ``floor(0.3 * total)``,
    then cosine annealing to ``initial_lr / 10`` at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = int(math.floor(warmup_fraction * total_steps))
    final_lr = initial_lr / final_divisor
    if step <= peak:
        if peak == 0:
            return initial_lr
        w = (1.0 - math.cos(math.pi * step / peak)) / 2.0
        return initial_lr * (1.0 - w) + max_lr * w
    span = total_steps - 1 - peak
    w = (1.0 + math.cos(math.pi * (step - peak) / span)) / 2.0
    return final_lr * (1.0 - w) + max_lr * w


# --- inputs --------------------------------------------------------------------


class SequenceSource:
    """Maps records to raw sequences, reading containers lazily (memory-mapped)."""

    def __init__(self, root: str | Path | None = None, cache: bool = True):
        self.root = Path(root) if root is not None else None
        self._cache: dict[str, RawSequence] | None = {} if cache else None

    def path_for(self, rec: EmbryoRecord) -> Path:
        if rec.sequence_ref is None:
            raise TrainingError(f"{rec.embryo_id} has no sequence_ref")
        p = Path(rec.sequence_ref)
        return p if p.is_absolute() or self.root is None else self.root / p

    def __call__(self, rec: EmbryoRecord) -> RawSequence:
        if self._cache is not None and rec.embryo_id in self._cache:
            return self._cache[rec.embryo_id]
        raw = read_container(self.path_for(rec), rec.embryo_id, mmap=True)
        if self._cache is not None:
            self._cache[rec.embryo_id] = raw
        return raw


class MemorySource:
    def __init__(self, sequences: Mapping[str, RawSequence]):
        self.sequences = dict(sequences)

    def __call__(self, rec: EmbryoRecord) -> RawSequence:
        return self.sequences[rec.embryo_id]


def eval_input(raw: RawSequence, net_config: NetworkConfig) -> FrameSequence:
    return sample_sequence(raw, input_grid(net_config), 0, 140.0, net_config.input_side)


def train_input(raw: RawSequence, net_config: NetworkConfig, aug: AugmentationConfig, rng) -> FrameSequence:
    targets, focal_offset, end_time = stage1_temporal(aug, rng, input_grid(net_config))
    seq = sample_sequence(raw, targets, focal_offset, end_time, net_config.input_side)
    return stage2_spatial(seq, aug, rng)


def assert_no_truth(paths: Iterable[str | Path]) -> None:
    """Refuse to train on the synthetic generator's ground-truth sidecar."""
    for p in paths:
        p = Path(p)
        if p.name == "truth.jsonl" or p.parent.name == "truth":
            raise TrainingError(f"refusing ground-truth input {p}")
        if p.is_file():
            with open(p, encoding="utf-8", errors="replace") as fh:
                head = fh.readline()
            if any(f'"{k}"' in head for k in TRUTH_MARKER_KEYS):
                raise TrainingError(f"refusing ground-truth input {p}")


# --- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    steps: int
    log: list[dict]


def train(
    network: EmbryoNet,
    train_set: Sequence[EmbryoRecord],
    source: Callable[[EmbryoRecord], RawSequence],
    config: TrainConfig,
    aug: AugmentationConfig | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    forbidden_ids: Iterable[str] = (),
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train both heads with focal loss, Adam and the one-cycle schedule.

    Deterministic for a fixed ``config.seed`` (single process, single worker).
    ``forbidden_ids`` (e.g. the test split) must not occur in ``train_set``.
    """
    aug = aug or AugmentationConfig()
    leaked = {r.embryo_id for r in train_set} & set(forbidden_ids)
    if leaked:
        raise TrainingError(f"{len(leaked)} test embryos in the training set")
    strata = partition_strata(train_set)
    for k in STRATA:
        if not strata[k]:
            raise TrainingError(f"stratum {k!r} is empty")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(network.parameters(), lr=config.initial_lr)
    network.train()
    records: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(config.total_batches):
            lr = one_cycle_lr(
                step, config.total_batches, config.initial_lr, config.max_lr,
                config.warmup_fraction, config.final_lr_divisor,
            )
            for group in opt.param_groups:
                group["lr"] = lr
            batch = sample_batch(strata, config, rng)
            frames = np.stack([train_input(source(rec), network.config, aug, rng).data for rec, _, _ in batch])
            y_fh = torch.tensor([b[1] for b in batch], dtype=torch.float32)
            y_dc = torch.tensor([b[2] for b in batch], dtype=torch.float32)

            p_fh, p_dc = network(to_input(frames))
            loss_fh = focal_loss(p_fh, y_fh, config.focal_gamma, config.focal_alpha).mean()
            loss_dc = focal_loss(p_dc, y_dc, config.focal_gamma, config.focal_alpha).mean()
            loss = loss_fh + loss_dc
            if not torch.isfinite(loss):
                ids = [rec.embryo_id for rec, _, _ in batch]
                raise TrainingError(
                    f"non-finite loss at step {step} (fh={loss_fh.item()}, discard={loss_dc.item()}); batch ids: {ids}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()

            entry = {"step": step, "lr": lr, "loss_fh": loss_fh.item(), "loss_discard": loss_dc.item()}
            records.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
            if progress:
                progress(entry)
    finally:
        if log_fh:
            log_fh.close()
    network.eval()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, network, config.total_batches, {"train": config.to_dict(), "augmentation": aug.to_dict()})
    return TrainResult(config.total_batches, records)


def score_embryos(
    network: EmbryoNet,
    records: Sequence[EmbryoRecord],
    source: Callable[[EmbryoRecord], RawSequence],
    batch_size: int = 16,
) -> list[ScoredEmbryo]:
    """Eval-mode FH probability on the unaugmented grid, plus the rescaled score."""
    network.eval()
    out: list[ScoredEmbryo] = []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i : i + batch_size]
            frames = np.stack([eval_input(source(r), network.config).data for r in chunk])
            p_fh, _ = network(to_input(frames))
            out.extend(ScoredEmbryo.from_probability(r.embryo_id, p) for r, p in zip(chunk, p_fh.tolist()))
    return out


def kfold_ids(records: Sequence[EmbryoRecord], k: int = 5, seed: int = 0) -> list[tuple[set[str], set[str]]]:
    """Per-embryo k-fold partition of a training set for hyperparameter experiments."""
    ids = sorted(r.embryo_id for r in records)
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(order, k)
    all_ids = set(ids)
    return [(all_ids - {ids[i] for i in f}, {ids[i] for i in f}) for f in folds]


def write_scores(path: str | Path, scores: Iterable[ScoredEmbryo]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(json.dumps({"embryo_id": s.embryo_id, "fh_probability": s.fh_probability, "idascore": s.idascore}) + "\n")


def read_scores(path: str | Path) -> list[ScoredEmbryo]:
    with open(path, encoding="utf-8") as fh:
        return [ScoredEmbryo(**json.loads(line)) for line in fh if line.strip()]
