import json

import numpy as np
import pytest

from pace.dag import DagSample, LabeledDag, OperationDictionary, is_valid
from pace.encoder import ModelConfig
from pace.errors import DegenerateTargets, GenerationFailed
from pace.harness import (
    ABLATION_VARIANTS,
    ExperimentRecord,
    GeneratorConfig,
    bag_of_ops_baseline,
    epoch_timing,
    longest_path_profile,
    make_dataset,
    op_histogram,
    random_dag,
    run_ablation,
    structure_score,
)

from oracles import random_dag as oracle_dag


def test_edge_prob_near_one_gives_complete_dag():
    cfg = GeneratorConfig(n_min=6, n_max=6, edge_prob=1 - 1e-12)
    dag = random_dag(cfg, np.random.default_rng(0))
    assert len(dag.edges) == 15


def test_single_node():
    dag = random_dag(GeneratorConfig(n_min=1, n_max=1), np.random.default_rng(0))
    assert dag.n == 1 and dag.edges == ()


def test_edge_count_binomial():
    cfg = GeneratorConfig(n_min=8, n_max=8, edge_prob=0.3, connectivity=False)
    rng = np.random.default_rng(1)
    counts = np.array([len(random_dag(cfg, rng).edges) for _ in range(10_000)])
    mean, sd = 0.3 * 28, np.sqrt(28 * 0.3 * 0.7)
    assert abs(counts.mean() - mean) < 3 * sd / np.sqrt(10_000)


def test_outputs_valid_and_connected():
    rng = np.random.default_rng(2)
    for rule in ("uniform", "structured"):
        cfg = GeneratorConfig(n_min=2, n_max=12, edge_prob=0.1, label_rule=rule, shuffle_ids=True)
        for _ in range(200):
            dag = random_dag(cfg, rng)
            assert is_valid(dag, cfg.n_ops)
            undirected = {v: set() for v in range(dag.n)}
            for u, v in dag.edges:
                undirected[u].add(v)
                undirected[v].add(u)
            seen, stack = {0}, [0]
            while stack:
                for w in undirected[stack.pop()] - seen:
                    seen.add(w)
                    stack.append(w)
            assert len(seen) == dag.n


def test_linking_disabled_fails():
    cfg = GeneratorConfig(n_min=12, n_max=12, edge_prob=1e-9, link_components=False)
    with pytest.raises(GenerationFailed):
        random_dag(cfg, np.random.default_rng(0))


@pytest.mark.parametrize(
    "kwargs", [{"n_min": 0}, {"n_min": 5, "n_max": 4}, {"edge_prob": 0.0}, {"edge_prob": 1.0}, {"label_rule": "x"}]
)
def test_generator_validation(kwargs):
    with pytest.raises(ValueError):
        GeneratorConfig(**kwargs)


def test_score_examples():
    assert structure_score(LabeledDag(1, (), (1,))) == pytest.approx(-0.3)
    assert structure_score(LabeledDag(3, ((0, 1), (1, 2)), (0, 0, 0))) == pytest.approx(3.2)


def test_longest_path_prefers_designated_among_ties():
    # two longest paths 0-1-3 and 0-2-3; only the second passes a designated node
    dag = LabeledDag(4, ((0, 1), (0, 2), (1, 3), (2, 3)), (1, 1, 0, 1))
    assert longest_path_profile(dag) == (2, 1)


def brute_profile(dag):
    succ = dag.successors()
    best = (0, 0)

    def walk(v, length, count):
        nonlocal best
        count += dag.labels[v] == 0
        best = max(best, (length, count))
        for w in succ[v]:
            walk(w, length + 1, count)

    for v in range(dag.n):
        walk(v, 0, 0)
    return best


def test_longest_path_matches_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(300):
        dag = oracle_dag(rng, int(rng.integers(1, 9)), 0.4, 3)
        assert longest_path_profile(dag) == brute_profile(dag)


def test_score_isomorphism_invariant():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        dag = oracle_dag(rng, int(rng.integers(1, 10)), 0.3, 3)
        perm = [int(x) for x in rng.permutation(dag.n)]
        assert structure_score(dag) == structure_score(dag.relabel(perm))


def test_dataset_deterministic():
    cfg = GeneratorConfig(seed=9)
    assert make_dataset(cfg, 20) == make_dataset(cfg, 20)
    assert all(s.target is None for s in make_dataset(cfg, 5, with_scores=False))


def test_histogram():
    assert op_histogram(LabeledDag(3, (), (0, 2, 2)), 4).tolist() == [1.0, 0.0, 2.0, 0.0]


def test_baseline_realizable():
    rng = np.random.default_rng(5)
    dags = [oracle_dag(rng, int(rng.integers(2, 9)), 0.3, 4) for _ in range(300)]
    samples = [DagSample(d, float(op_histogram(d, 4) @ [1.0, -2.0, 0.5, 3.0] + 1.0)) for d in dags]
    out = bag_of_ops_baseline(samples, 4, seed=0)
    assert out["pearson"] == pytest.approx(1.0, abs=1e-9)
    assert out["rmse"] < 1e-9


def test_baseline_constant_targets():
    samples = [DagSample(LabeledDag(1, (), (0,)), 2.0)] * 10
    with pytest.raises(DegenerateTargets):
        bag_of_ops_baseline(samples, 2, seed=0)


def test_small_ablation_is_finite():
    data = make_dataset(GeneratorConfig(n_min=3, n_max=5, n_ops=3, seed=1), 60)
    ops = OperationDictionary.default(3)
    table = run_ablation(data, ModelConfig(K=1, h=2, d_t=4, d_pe=4, N=6), ops, seeds=[0, 1, 2], epochs=1)
    assert set(table) == set(ABLATION_VARIANTS)
    for row in table.values():
        assert len(row["pearson"]) == 3
        assert all(np.isfinite(row["pearson"]))
        assert row["mean"] == pytest.approx(np.mean(row["pearson"]))


def test_record_round_trip(tmp_path):
    path = tmp_path / "r.jsonl"
    a = ExperimentRecord({"K": 3}, 1, [{"epoch": 1, "loss": 0.5}], {"loss": 0.5}, "m.pact", {"total_s": 1.0})
    b = ExperimentRecord({"K": 2}, 2)
    a.write(path)
    b.write(path)
    assert ExperimentRecord.read_all(path) == [a, b]
    assert json.loads(path.read_text().splitlines()[0])["seed"] == 1


def test_epoch_timing_median_of_three():
    assert epoch_timing([9.0, 1.0, 3.0, 2.0]) == {"median_epoch_s": 2.0, "total_s": 15.0}
    assert epoch_timing([]) == {"median_epoch_s": 0.0, "total_s": 0.0}
