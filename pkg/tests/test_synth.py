import json

import numpy as np
import pytest
from scipy.stats import spearmanr

from embryoscore.cohort import OutcomeLabel, label_outcomes, read_events, read_manifest
from embryoscore.morphokinetics import MorphokineticRecord
from embryoscore.sequences import read_container
from embryoscore.synth import (
    SynthConfig,
    SynthError,
    embryo_rng,
    generate_cohort,
    oracle_auc,
    read_truth,
    render_frames,
    simulate_cohort,
)
from embryoscore.trainer import TrainingError, assert_no_truth

SMALL = dict(num_clinics=1, embryos_per_clinic=(12, 14))


@pytest.fixture(scope="module")
def big_cohort():
    return simulate_cohort(SynthConfig(num_clinics=6, seed=5))


@pytest.fixture(scope="module")
def small_generated(tmp_path_factory):
    return generate_cohort(SynthConfig(**SMALL, seed=2), tmp_path_factory.mktemp("small"))


def files_of(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_byte_identical_for_same_seed(tmp_path):
    a = generate_cohort(SynthConfig(**SMALL, seed=1), tmp_path / "a")
    b = generate_cohort(SynthConfig(**SMALL, seed=1), tmp_path / "b")
    fa, fb = files_of(a.root), files_of(b.root)
    assert fa.keys() == fb.keys() and len(fa) > 3
    assert all(fa[k] == fb[k] for k in fa)


def test_different_seed_differs(tmp_path):
    a = generate_cohort(SynthConfig(**SMALL, seed=1), tmp_path / "a", render=False)
    b = generate_cohort(SynthConfig(**SMALL, seed=2), tmp_path / "b", render=False)
    assert a.truth_path.read_bytes() != b.truth_path.read_bytes()


def test_viability_drives_blastulation(big_cohort):
    pairs = [(t.latent_viability, t.true_events.tB) for t in big_cohort.truths if not t.arrested and t.true_events.tB]
    assert len(pairs) >= 500
    rho = spearmanr(*zip(*pairs))[0]
    assert rho < -0.3


def test_event_invariants(big_cohort):
    for t in big_cohort.truths:
        MorphokineticRecord(**{**t.true_events.__dict__})  # re-validates ordering and positivity
        assert 0.0 <= t.latent_viability <= 1.0
        if t.arrested:
            assert t.true_events.tB is None and t.arrest_time is not None


def test_transfer_count_matches_policy():
    cohort = simulate_cohort(SynthConfig(num_clinics=2, transfer_k=(2,), transfer_k_probs=(1.0,), seed=3))
    sizes = {}
    for r in cohort.records:
        sizes[r.treatment_id] = sizes.get(r.treatment_id, 0) + 1
    for ev in cohort.events:
        assert len(ev.embryo_ids) == 2
        assert len(ev.embryo_ids) / sizes[ev.treatment_id] == 2 / sizes[ev.treatment_id]


def test_default_policy_mixes_single_and_double(big_cohort):
    ks = [len(ev.embryo_ids) for ev in big_cohort.events]
    assert set(ks) == {1, 2}


def test_unsatisfiable_policy():
    with pytest.raises(SynthError):
        simulate_cohort(SynthConfig(num_clinics=1, treatment_size=(2, 2), transfer_k=(3,), transfer_k_probs=(1.0,)))


def test_labels_round_trip(small_generated, big_cohort):
    g = small_generated
    direct = label_outcomes(g.cohort.events, g.cohort.records)
    from_disk = label_outcomes(read_events(g.events_path), read_manifest(g.manifest_path))
    assert direct == from_disk
    assert label_outcomes(g.cohort.events, direct) == direct
    labels = {r.outcome_label for r in label_outcomes(big_cohort.events, big_cohort.records)}
    assert {OutcomeLabel.FH_POS, OutcomeLabel.FH_NEG, OutcomeLabel.UNKNOWN, OutcomeLabel.PENDING} <= labels


def test_truth_kept_apart(small_generated):
    g = small_generated
    assert g.truth_path.parent.name == "truth"
    assert "latent_viability" not in g.manifest_path.read_text()
    with pytest.raises(TrainingError):
        assert_no_truth([g.truth_path])
    assert [t.embryo_id for t in read_truth(g.truth_path)] == [r.embryo_id for r in g.cohort.records]


def expected_blobs(events, arrest_time, t):
    """Stage rule restated from the truth file: blobs visible at time t."""
    if arrest_time is not None:
        t = min(t, arrest_time)
    if events["t2"] is None or t < events["t2"]:
        return 1
    if events["t3"] is None or t < events["t3"]:
        return 2
    if events["t5"] is None or t < events["t5"]:
        return 3
    if t < events["t5"] + 8.0:
        return 5
    if t < events["t5"] + 24.0:
        return 8
    if events["tB"] is None or t < events["tB"]:
        return 1  # compacted morula
    return 0


def render(truth, **cfg):
    log = []
    raw = render_frames(truth, SynthConfig(**cfg), embryo_rng(9, truth.embryo_id), instrumentation=log)
    return raw, log


class TestRender:
    def test_two_blobs_between_t2_and_t3(self, big_cohort):
        truth = next(t for t in big_cohort.truths if not t.arrested)
        _, log = render(truth)
        ev = truth.true_events
        window = [f for f in log if ev.t2 <= f.time < ev.t3]
        assert window and all(f.blob_count == 2 for f in window)

    def test_cross_check_against_truth_file(self, small_generated):
        rows = [json.loads(x) for x in small_generated.truth_path.read_text().splitlines()]
        rng = np.random.default_rng(0)
        cfg = SynthConfig(**SMALL, seed=2)
        checked = 0
        logs = {}
        truths = {t.embryo_id: t for t in small_generated.cohort.truths}
        while checked < 100:
            row = rows[int(rng.integers(len(rows)))]
            eid = row["embryo_id"]
            if eid not in logs:
                logs[eid] = []
                render_frames(truths[eid], cfg, embryo_rng(cfg.seed + 1_000_003, eid), logs[eid])
            frame = logs[eid][int(rng.integers(len(logs[eid])))]
            assert frame.blob_count == expected_blobs(row["true_events"], row["arrest_time"], frame.time)
            checked += 1

    def test_container_matches_rerender(self, small_generated):
        g = small_generated
        truth = g.cohort.truths[0]
        stored = read_container(g.root / "sequences" / truth.embryo_id)
        rendered = render_frames(truth, SynthConfig(**SMALL, seed=2), embryo_rng(2 + 1_000_003, truth.embryo_id))
        assert stored.equals(rendered)

    def test_arrested_is_static(self, big_cohort):
        truth = next(t for t in big_cohort.truths if t.arrested and t.arrest_time < 100)
        raw, log = render(truth, noise_sd=0.0)
        after = [i for i, f in enumerate(log) if f.time >= truth.arrest_time and f.focal == 1]
        assert len(after) > 10
        first = raw.frames[after[0]]
        assert all(np.array_equal(raw.frames[i], first) for i in after)
        assert len({(log[i].stage, log[i].blob_count) for i in after}) == 1

    def test_arrested_static_up_to_noise(self, big_cohort):
        truth = next(t for t in big_cohort.truths if t.arrested and t.arrest_time < 100)
        raw, log = render(truth)
        after = [i for i, f in enumerate(log) if f.time >= truth.arrest_time and f.focal == 1]
        diffs = [raw.frames[i].astype(float) - raw.frames[after[0]] for i in after[1:]]
        # two independent N(0, 6) draws differ with sd 6 * sqrt(2)
        assert np.std(diffs) < 6 * np.sqrt(2) * 1.2

    def test_blastocyst_ring_appears(self, big_cohort):
        truth = next(t for t in big_cohort.truths if not t.arrested and t.true_events.tB and t.true_events.tB < 110)
        _, log = render(truth)
        assert any(f.stage == "blastocyst" for f in log)
        assert all(f.stage == "blastocyst" for f in log if f.time >= truth.true_events.tB)

    @pytest.mark.parametrize("seed", range(5))
    def test_acquisition_interval_band(self, big_cohort, seed):
        truth = big_cohort.truths[seed]
        raw = render_frames(truth, SynthConfig(), embryo_rng(seed, truth.embryo_id))
        _, times = raw.plane(0)
        minutes = np.mean(np.diff(times)) * 60
        assert 11.0 - 0.01 <= minutes <= 15.0 + 0.01

    def test_interval_band_enforced(self):
        with pytest.raises(SynthError):
            SynthConfig(interval_minutes=(5.0, 10.0))

    @pytest.mark.parametrize("bad", [2, 4, 13])
    def test_focal_count_enforced(self, bad):
        with pytest.raises(SynthError):
            SynthConfig(num_focals=bad)

    def test_plane_dependent_blur(self, big_cohort):
        truth = big_cohort.truths[0]
        raw, _ = render(truth, num_focals=5, noise_sd=0.0)
        sharp = [np.abs(np.diff(raw.plane(f)[0][0].astype(float), axis=1)).mean() for f in range(5)]
        assert sharp[2] > sharp[1] > sharp[0]
        assert sharp[2] > sharp[3] > sharp[4]


class TestOracle:
    def test_viability_hits_ceiling(self, big_cohort):
        labeled = [r for r in label_outcomes(big_cohort.events, big_cohort.records) if r.labeled]
        labels = {r.embryo_id: int(r.outcome_label is OutcomeLabel.FH_POS) for r in labeled}
        v = {t.embryo_id: t.latent_viability for t in big_cohort.truths}
        res = oracle_auc(big_cohort.truths, v, labels)
        assert res.auc == res.ceiling
        assert res.ceiling < 1.0

    def test_random_scores_near_half(self):
        cohort = simulate_cohort(SynthConfig(num_clinics=20, seed=11))
        labeled = [r for r in label_outcomes(cohort.events, cohort.records) if r.labeled]
        assert len(labeled) >= 2000
        labels = {r.embryo_id: int(r.outcome_label is OutcomeLabel.FH_POS) for r in labeled}
        rng = np.random.default_rng(0)
        res = oracle_auc(cohort.truths, {k: rng.random() for k in labels}, labels)
        assert abs(res.auc - 0.5) <= 0.05
