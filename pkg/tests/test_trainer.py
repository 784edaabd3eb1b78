import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from embryoscore.cohort import EmbryoRecord, OutcomeLabel, Provenance, TransferProtocol
from embryoscore.network import NetworkConfig, build_network
from embryoscore.sequences import RawSequence
from embryoscore.stats import auc
from embryoscore.trainer import (
    STRATA,
    MemorySource,
    ScoredEmbryo,
    TrainConfig,
    TrainingError,
    assert_no_truth,
    focal_loss,
    input_grid,
    kfold_ids,
    one_cycle_lr,
    partition_strata,
    read_scores,
    rescale_score,
    sample_batch,
    score_embryos,
    train,
    write_scores,
)

FRESH = TransferProtocol.FRESH


def rec(eid, kind):
    if kind == "fh_pos_kid":
        return EmbryoRecord(eid, "c", "t", transfer_protocol=FRESH, transferred=True,
                            outcome_label=OutcomeLabel.FH_POS, kid=True, sequence_ref=eid)
    if kind == "fh_neg_kid":
        return EmbryoRecord(eid, "c", "t", transfer_protocol=FRESH, transferred=True,
                            outcome_label=OutcomeLabel.FH_NEG, provenance=Provenance.TRANSFERRED_NEGATIVE,
                            kid=True, sequence_ref=eid)
    return EmbryoRecord(eid, "c", "t", outcome_label=OutcomeLabel.FH_NEG, provenance=Provenance.DISCARDED,
                        sequence_ref=eid)


def small_cohort(n_per_stratum=(12, 6, 12)):
    return [rec(f"{k}{i}", k) for k, n in zip(STRATA, n_per_stratum) for i in range(n)]


def memory_source(records, seed=0):
    rng = np.random.default_rng(seed)
    times = np.arange(10.0, 140.01, 0.5)
    seqs = {}
    for r in records:
        level = 200 if r.outcome_label is OutcomeLabel.FH_POS else 60
        frames = np.clip(rng.normal(level, 20, (len(times) * 3, 16, 16)), 0, 255).astype(np.uint8)
        seqs[r.embryo_id] = RawSequence(r.embryo_id, frames, np.repeat(times, 3), np.tile(np.arange(3), len(times)), 3)
    return MemorySource(seqs)


def quick_config(steps, seed=0, batch=8):
    return TrainConfig(batch_size=batch, total_batches=steps, initial_lr=1e-4, max_lr=1e-3, seed=seed, profile="tiny")


class TestSampler:
    def test_stratum_fractions(self):
        strata = partition_strata(small_cohort())
        cfg = TrainConfig.paper(seed=0)
        rng = np.random.default_rng(0)
        counts = dict.fromkeys(STRATA, 0)
        kind = {r.embryo_id: k for k, rs in strata.items() for r in rs}
        for _ in range(10_000):
            for r, _, _ in sample_batch(strata, cfg, rng):
                counts[kind[r.embryo_id]] += 1
        total = 10_000 * 64
        frac = [counts[k] / total for k in STRATA]
        assert np.allclose(frac, (0.50, 0.10, 0.40), atol=0.02)

    def test_single_embryo_strata(self):
        strata = partition_strata([rec("a", "fh_pos_kid"), rec("b", "fh_neg_kid"), rec("c", "discarded")])
        rng = np.random.default_rng(1)
        for _ in range(50):
            batch = sample_batch(strata, TrainConfig.paper(), rng)
            assert len(batch) == 64
            assert {r.embryo_id for r, _, _ in batch} <= {"a", "b", "c"}

    def test_targets(self):
        strata = partition_strata([rec("a", "fh_pos_kid"), rec("b", "fh_neg_kid"), rec("c", "discarded")])
        targets = {r.embryo_id: (fh, dc) for r, fh, dc in sample_batch(strata, TrainConfig.paper(), np.random.default_rng(0))}
        assert targets == {"a": (1, 0), "b": (0, 0), "c": (0, 1)}

    def test_empty_stratum_named(self):
        strata = partition_strata([rec("a", "fh_pos_kid"), rec("c", "discarded")])
        with pytest.raises(TrainingError, match="fh_neg_kid"):
            sample_batch(strata, TrainConfig.paper(), np.random.default_rng(0))

    def test_unlabeled_excluded(self):
        pending = EmbryoRecord("p", "c", "t", outcome_label=OutcomeLabel.PENDING)
        assert all("p" not in {r.embryo_id for r in rs} for rs in partition_strata([pending]).values())

    def test_paper_epoch_arithmetic(self):
        cfg = TrainConfig.paper()
        presentations = cfg.total_batches * cfg.batch_size * cfg.strata_probs[0]
        assert presentations == 296_448
        # "80 epochs" of the FH+ training embryos (85% of 4,337), within 1%
        assert abs(presentations / (0.85 * 4337) - 80) / 80 < 0.01


class TestFocalLoss:
    def test_reference_value(self):
        v = focal_loss(torch.tensor(0.5, dtype=torch.float64), 1.0, 2.0, 0.5).item()
        assert v == pytest.approx(0.5 * 0.25 * math.log(2), abs=1e-12)
        assert abs(v - 0.086643) <= 1e-6

    def test_half_cross_entropy(self):
        v = focal_loss(torch.tensor(0.5, dtype=torch.float64), 0.0, 0.0, 0.5).item()
        assert abs(v - 0.346574) <= 1e-6

    def test_perfect_prediction(self):
        assert focal_loss(torch.tensor(1 - 1e-9, dtype=torch.float64), 1.0).item() < 1e-12
        assert focal_loss(torch.tensor(1.0), 1.0).item() < 1e-6

    def test_clamped_extremes_finite(self):
        vals = focal_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))
        assert torch.all(torch.isfinite(vals)) and torch.all(vals > 0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([0.0, 1.0]), st.floats(0, 5), st.floats(0.01, 0.99))
    def test_non_negative(self, p, y, gamma, alpha):
        assert focal_loss(torch.tensor(p, dtype=torch.float64), y, gamma, alpha).item() >= 0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-4, 1 - 1e-4), st.sampled_from([0.0, 1.0]))
    def test_gamma_zero_is_half_bce(self, p, y):
        pt = torch.tensor(p, dtype=torch.float64)
        bce = torch.nn.functional.binary_cross_entropy(pt, torch.tensor(y, dtype=torch.float64)).item()
        assert focal_loss(pt, y, 0.0, 0.5).item() == pytest.approx(0.5 * bce, rel=1e-12)

    @pytest.mark.parametrize("y", [0.0, 1.0])
    @pytest.mark.parametrize("p", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    def test_gradient_finite_differences(self, p, y):
        pt = torch.tensor(p, dtype=torch.float64, requires_grad=True)
        focal_loss(pt, y).backward()
        h = 1e-6
        f = lambda q: focal_loss(torch.tensor(q, dtype=torch.float64), y).item()
        numeric = (f(p + h) - f(p - h)) / (2 * h)
        assert abs(pt.grad.item() - numeric) <= 1e-6 * abs(numeric)


class TestSchedule:
    TOTAL = 9264

    def lrs(self, total=TOTAL, lo=1e-5, hi=1e-4):
        return [one_cycle_lr(s, total, lo, hi) for s in range(total)]

    def test_endpoints(self):
        lrs = self.lrs()
        assert lrs[0] == 1e-5
        assert max(lrs) == 1e-4
        assert lrs[int(math.floor(0.3 * self.TOTAL))] == 1e-4
        assert lrs[-1] == pytest.approx(1e-6, rel=1e-12)

    def test_continuous_and_unimodal(self):
        lrs = np.array(self.lrs())
        assert np.abs(np.diff(lrs)).max() < 1e-4 / 10
        peak = int(np.argmax(lrs))
        assert np.all(np.diff(lrs[: peak + 1]) >= 0) and np.all(np.diff(lrs[peak:]) <= 0)

    @pytest.mark.parametrize("total", [20, 600])
    def test_short_runs(self, total):
        lrs = np.array(self.lrs(total))
        assert lrs[0] == 1e-5 and lrs.max() == 1e-4
        assert lrs[-1] == pytest.approx(1e-6, rel=1e-12)

    @pytest.mark.parametrize("step", [-1, 9264])
    def test_out_of_range(self, step):
        with pytest.raises(ValueError):
            one_cycle_lr(step, self.TOTAL, 1e-5, 1e-4)


class TestRescale:
    @pytest.mark.parametrize("p,s", [(0.0, 1.0), (1.0, 9.9), (0.5, 5.45)])
    def test_values(self, p, s):
        assert rescale_score(p) == pytest.approx(s, abs=1e-12)

    @pytest.mark.parametrize("p", [-0.01, 1.01])
    def test_range(self, p):
        with pytest.raises(ValueError):
            rescale_score(p)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_order_preserving(self, p, q):
        if p < q:
            assert rescale_score(p) < rescale_score(q)

    def test_auc_unchanged(self):
        rng = np.random.default_rng(0)
        p = rng.random(300)
        y = (rng.random(300) < p).astype(int)
        assert auc(p, y) == auc([rescale_score(x) for x in p], y)

    def test_scored_embryo(self):
        s = ScoredEmbryo.from_probability("e", 0.25)
        assert s.idascore == pytest.approx(1.0 + 8.9 * 0.25)


class TestTrainLoop:
    def test_smoke_50_steps(self, tmp_path):
        records = small_cohort()
        net = build_network(NetworkConfig.tiny(), seed=0)
        res = train(net, records, memory_source(records), quick_config(50), log_path=tmp_path / "log.jsonl",
                    checkpoint_path=tmp_path / "ck.pt")
        assert res.steps == 50 and len(res.log) == 50
        assert all(math.isfinite(e["loss_fh"]) and math.isfinite(e["loss_discard"]) for e in res.log)
        lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert lines == res.log and set(lines[0]) == {"step", "lr", "loss_fh", "loss_discard"}
        assert (tmp_path / "ck.pt").is_file()

    def test_deterministic_first_10_losses(self):
        records = small_cohort()
        source = memory_source(records)
        traces = []
        for _ in range(2):
            net = build_network(NetworkConfig.tiny(), seed=3)
            traces.append([(e["loss_fh"], e["loss_discard"]) for e in train(net, records, source, quick_config(10, seed=3)).log])
        assert traces[0] == traces[1]

    def test_leakage_refused(self):
        records = small_cohort()
        with pytest.raises(TrainingError, match="test embryos"):
            train(build_network(NetworkConfig.tiny(), seed=0), records, memory_source(records), quick_config(1),
                  forbidden_ids={records[0].embryo_id})

    def test_batches_only_from_train_set(self):
        records = small_cohort()
        strata = partition_strata(records)
        seen = set()
        rng = np.random.default_rng(0)
        for _ in range(200):
            seen |= {r.embryo_id for r, _, _ in sample_batch(strata, TrainConfig.paper(), rng)}
        assert seen <= {r.embryo_id for r in records}

    def test_non_finite_loss_aborts_with_batch_ids(self):
        records = small_cohort()
        net = build_network(NetworkConfig.tiny(), seed=0)
        with torch.no_grad():
            net.fh_head.bias.fill_(float("nan"))
        with pytest.raises(TrainingError, match="non-finite loss at step 0.*batch ids"):
            train(net, records, memory_source(records), quick_config(3))

    def test_empty_stratum(self):
        records = [r for r in small_cohort() if r.provenance is not Provenance.DISCARDED]
        with pytest.raises(TrainingError, match="discarded"):
            train(build_network(NetworkConfig.tiny(), seed=0), records, memory_source(records), quick_config(1))

    def test_score_embryos(self):
        records = small_cohort((3, 2, 2))
        net = build_network(NetworkConfig.tiny(), seed=0)
        scored = score_embryos(net, records, memory_source(records), batch_size=3)
        assert [s.embryo_id for s in scored] == [r.embryo_id for r in records]
        assert all(0 < s.fh_probability < 1 and 1.0 <= s.idascore <= 9.9 for s in scored)
        again = score_embryos(net, records, memory_source(records), batch_size=5)
        assert [s.fh_probability for s in scored] == pytest.approx([s.fh_probability for s in again], abs=1e-6)


@pytest.mark.slow
def test_learnability_training_set_auc(desk_run):
    """Tiny profile, 600 steps: whole-cohort AUC on the embryos it trained on."""
    y = desk_run.labels(desk_run.train_set)
    assert len(desk_run.train_set) >= 300
    assert auc(desk_run.score_array(desk_run.train_set), y) >= 0.80


class TestTruthRefusal:
    def test_truth_path(self, tmp_path):
        with pytest.raises(TrainingError):
            assert_no_truth([tmp_path / "truth" / "truth.jsonl"])

    def test_truth_content(self, tmp_path):
        p = tmp_path / "renamed.jsonl"
        p.write_text('{"embryo_id":"e","latent_viability":0.4}\n')
        with pytest.raises(TrainingError):
            assert_no_truth([p])

    def test_manifest_ok(self, tmp_path):
        p = tmp_path / "manifest.jsonl"
        p.write_text('{"embryo_id":"e"}\n')
        assert_no_truth([p])


def test_input_grid_covers_same_window():
    assert input_grid(NetworkConfig.paper()).tolist() == [12.0 + i for i in range(128)]
    g = input_grid(NetworkConfig.tiny())
    assert len(g) == 32 and g[0] == 12.0 and g[1] - g[0] == 4.0


def test_kfold_partition():
    records = small_cohort()
    folds = kfold_ids(records, k=5, seed=0)
    tests = [t for _, t in folds]
    assert set().union(*tests) == {r.embryo_id for r in records}
    assert sum(len(t) for t in tests) == len(records)
    assert all(not (tr & te) for tr, te in folds)


def test_scores_round_trip(tmp_path):
    s = [ScoredEmbryo.from_probability("a", 0.1), ScoredEmbryo.from_probability("b", 0.93)]
    write_scores(tmp_path / "s.jsonl", s)
    assert read_scores(tmp_path / "s.jsonl") == s


def test_config_round_trip_and_validation():
    cfg = TrainConfig.tiny(seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig.paper().batch_size == 64 and TrainConfig.paper().total_batches == 9264
    with pytest.raises(ValueError):
        TrainConfig(strata_probs=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        TrainConfig(initial_lr=1e-3, max_lr=1e-4)
