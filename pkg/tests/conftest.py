"""Shared fixtures. ``desk_run`` is the one expensive end-to-end run: a seeded
four-clinic synthetic cohort, 600 tiny-profile training steps, then scoring of
both splits. It is built once per session and reused."""

import time
from dataclasses import dataclass

import numpy as np
import pytest

from embryoscore.cohort import OutcomeLabel, build_dataset, dataset_report, label_outcomes, read_events, read_manifest, split_dataset
from embryoscore.network import NetworkConfig, build_network
from embryoscore.synth import SynthConfig, generate_cohort
from embryoscore.trainer import SequenceSource, TrainConfig, score_embryos, train


@dataclass
class DeskRun:
    generated: object
    dataset: list
    train_set: list
    test_set: list
    train_result: object
    scores: dict  # embryo_id -> fh probability, both splits
    truth: dict
    report: dict
    seconds: dict

    def labels(self, records):
        return np.array([int(r.outcome_label is OutcomeLabel.FH_POS) for r in records])

    def score_array(self, records):
        return np.array([self.scores[r.embryo_id] for r in records])


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    t0 = time.perf_counter()
    g = generate_cohort(SynthConfig(seed=0), tmp_path_factory.mktemp("desk"))
    t_synth = time.perf_counter() - t0
    labeled = label_outcomes(read_events(g.events_path), read_manifest(g.manifest_path))
    dataset = build_dataset(labeled)
    split = split_dataset(dataset, 0.85, seed=0)
    train_set = [r for r in dataset if r.embryo_id in split.train_ids]
    test_set = [r for r in dataset if r.embryo_id in split.test_ids]

    net = build_network(NetworkConfig.tiny(), seed=0)
    source = SequenceSource(g.root)
    result = train(net, train_set, source, TrainConfig.tiny(seed=0), forbidden_ids=split.test_ids)
    t_train = time.perf_counter() - t0 - t_synth
    scored = score_embryos(net, test_set + train_set, source)
    total = time.perf_counter() - t0
    return DeskRun(
        g, dataset, train_set, test_set, result,
        {s.embryo_id: s.fh_probability for s in scored},
        {t.embryo_id: t for t in g.cohort.truths},
        dataset_report(labeled),
        {"synth": t_synth, "train": t_train, "total": total},
    )


# --- acceptance report ------------------------------------------------------------
# Each acceptance test records one PASS/FAIL line; the lines are repeated in the
# terminal summary so they appear in a plain ``pytest -v`` log.

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    def check(ok: bool, detail: str):
        name = request.node.get_closest_marker("criterion").args[0]
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        request.node.user_properties.append(("acceptance", line))
        print(line)
        assert ok, line

    return check


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call" and report.failed:
        if not any(k == "acceptance" for k, _ in item.user_properties):
            ACCEPTANCE_LINES.append(f"FAIL  {marker.args[0]}: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
