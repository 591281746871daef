"""Acceptance suite: one check per criterion, each recording a PASS/FAIL line.

Run under pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py`` to print the lines as they finish.
"""

import json
import os
import subprocess
import sys
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import (  # noqa: E402
    all_labeled_dags,
    apply_closure_mask,
    brute_canonical_key,
    check_gradients,
    check_gradients_joint,
    random_dag,
    random_preorder_tree,
)
from verdicts import verdict  # noqa: E402

from pace.canonize import canonical_form  # noqa: E402
from pace.dag import LabeledDag, OperationDictionary  # noqa: E402
from pace.dag2seq import exact_sequence  # noqa: E402
from pace.encoder import Batch, ModelConfig, PaceEncoder, forward, init_encoder_params, prepare  # noqa: E402
from pace.harness import GeneratorConfig, bag_of_ops_baseline, make_dataset, run_ablation  # noqa: E402
from pace.mask import mask_dfs, mask_floyd, mask_tree_backtracking  # noqa: E402
from pace.tensor import Tensor  # noqa: E402
from pace.training import (  # noqa: E402
    MlmBatchItem,
    init_mlm_params,
    init_regression_params,
    mlm_accuracy,
    mlm_corrupt,
    mlm_loss,
    regression_predict,
    train_mlm,
    train_regressor,
)
from pace.tensor import mse  # noqa: E402
from pace.vae import VaeConfig, VaeModel, elbo_loss, generation_metrics, train_vae  # noqa: E402

pytestmark = pytest.mark.acceptance

# pinned thresholds and budgets
GRAD_TOL_OP = 1e-4
GRAD_TOL_E2E = 1e-3
GRAD_INSTANCES = 20
NO_MASK_CHANGE_RATE = 0.90
MLM_MIN_ACC = 0.40
MLM_MAX_EPOCHS = 20
OVERFIT_LOSS = 0.1
OVERFIT_STEPS = 200
REG_MIN_GAP = 0.1
ABLATION_MIN_GAP = 0.05
VAE_MIN_RECON = 0.95
VAE_MIN_VALID = 0.95
RUNTIME_S = {1: 300, 2: 120, 3: 120, 4: 300, 7: 600, 8: 1200}

# the model used by the learning criteria: literal blocks (no residual, no
# normalization) with the default score divisor d
LEARN_MODEL = dict(N=12, d_t=32, d_pe=32, h=4, K=3)


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def within(number, seconds):
    limit = RUNTIME_S.get(number)
    return limit is None or seconds < limit, (f"{seconds:.1f}s" + (f" (limit {limit}s)" if limit else ""))


_ENUMERATION = {}


def small_dag_classes():
    """Every labeled DAG with n <= 4 over two labels, keyed by brute-force canonical key."""
    if not _ENUMERATION:
        for n in range(1, 5):
            for dag in all_labeled_dags(n, 2):
                _ENUMERATION.setdefault("dags", []).append((dag, brute_canonical_key(dag)))
    return _ENUMERATION["dags"]


def partition_agrees(keyed):
    """Zero collisions and zero splits between ``key`` and the brute-force class."""
    forward_map, backward_map = {}, {}
    collisions = splits = 0
    for key, brute in keyed:
        if forward_map.setdefault(key, brute) != brute:
            collisions += 1
        if backward_map.setdefault(brute, key) != key:
            splits += 1
    return collisions, splits, len(backward_map)


def test_c01_injectivity():
    def run():
        keyed = [(tuple(exact_sequence(canonical_form(d))), b) for d, b in small_dag_classes()]
        return partition_agrees(keyed), len(keyed)

    ((collisions, splits, classes), count), secs = timed(run)
    fast, tstr = within(1, secs)
    ok = collisions == 0 and splits == 0 and fast
    verdict(1, "dag2seq injectivity, n<=4, |O|=2", ok,
            f"{count} DAGs, {classes} classes, {collisions} collisions, {splits} splits, {tstr}")
    assert ok


def test_c02_canonization():
    def run():
        rng = np.random.default_rng(2)
        mismatches = 0
        for _ in range(1000):
            dag = random_dag(rng, int(rng.integers(1, 13)), float(rng.uniform(0.1, 0.6)), 3)
            moved = dag.relabel([int(x) for x in rng.permutation(dag.n)])
            mismatches += canonical_form(dag).certificate != canonical_form(moved).certificate
        keyed = [(canonical_form(d).certificate, b) for d, b in small_dag_classes()]
        return mismatches, partition_agrees(keyed)

    (mismatches, (collisions, splits, classes)), secs = timed(run)
    fast, tstr = within(2, secs)
    ok = mismatches == 0 and collisions == 0 and splits == 0 and fast
    verdict(2, "canonization soundness", ok,
            f"1000 relabeled pairs, {mismatches} mismatches; exhaustive n<=4: {classes} classes, "
            f"{collisions} collisions, {splits} splits, {tstr}")
    assert ok


def test_c03_masks():
    def run():
        rng = np.random.default_rng(3)
        dag_bad = 0
        for _ in range(1000):
            n = int(rng.integers(1, 17))
            dag = random_dag(rng, n, float(rng.uniform(0.05, 0.5)), 2)
            oracle = apply_closure_mask(dag, 16)
            dag_bad += not (mask_dfs(dag, 16) == mask_floyd(dag, 16) == oracle)
        tree_bad = 0
        for _ in range(500):
            tree, depths = random_preorder_tree(rng, int(rng.integers(1, 65)))
            tree_bad += mask_tree_backtracking(tree, depths, 64) != mask_floyd(tree, 64)
        return dag_bad, tree_bad

    (dag_bad, tree_bad), secs = timed(run)
    fast, tstr = within(3, secs)
    ok = dag_bad == 0 and tree_bad == 0 and fast
    verdict(3, "mask correctness", ok, f"{dag_bad}/1000 DAG mismatches, {tree_bad}/500 tree mismatches, {tstr}")
    assert ok


def _op_gradients():
    from test_tensor import OPS, grad_case

    worst = {}
    for name in OPS:
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = max(max(check_gradients(*grad_case(name, rng)[:2]).values()) for _ in range(GRAD_INSTANCES))
    return worst


def _end_to_end_gradients():
    ops = OperationDictionary.default(3)
    cfg = ModelConfig(K=2, h=2, d_t=4, d_pe=4, N=6)
    vae_cfg = VaeConfig(d_z=4, d_k=8, K=1, h=2)
    rng = np.random.default_rng(4)
    worst = {"mlm": 0.0, "regression": 0.0, "vae": 0.0}
    for _ in range(GRAD_INSTANCES):
        params = init_mlm_params(cfg, ops, rng)
        item = mlm_corrupt(random_dag(rng, 4, 0.5, 3), rng, ops.mask)
        err = check_gradients_joint(lambda: mlm_loss(item, params, cfg, ops), params, max_entries=6, rng=rng)
        worst["mlm"] = max(worst["mlm"], err)

        params = init_regression_params(cfg, ops, "output", rng)
        batch = Batch.stack([prepare(random_dag(rng, 4, 0.5, 3), cfg, ops) for _ in range(3)])
        y = rng.normal(size=3)
        err = check_gradients_joint(lambda: mse(regression_predict(batch, params, cfg, "output"), y), params, max_entries=6, rng=rng)
        worst["regression"] = max(worst["regression"], err)

        model = VaeModel.create(cfg, vae_cfg, ops, int(rng.integers(1 << 30)))
        dag = random_dag(rng, 4, 0.5, 3)
        noise = rng.standard_normal((1, vae_cfg.d_z))
        err = check_gradients_joint(lambda: elbo_loss(dag, model, 1.0, noise), model.params, max_entries=4, rng=rng)
        worst["vae"] = max(worst["vae"], err)
    return worst


def test_c04_gradients():
    (op_worst, e2e_worst), secs = timed(lambda: (_op_gradients(), _end_to_end_gradients()))
    fast, tstr = within(4, secs)
    op_max = max(op_worst, key=op_worst.get)
    ok = max(op_worst.values()) < GRAD_TOL_OP and max(e2e_worst.values()) < GRAD_TOL_E2E and fast
    e2e = ", ".join(f"{k} {v:.1e}" for k, v in e2e_worst.items())
    verdict(4, "gradient fidelity", ok,
            f"{len(op_worst)} ops x {GRAD_INSTANCES}: worst {op_worst[op_max]:.1e} ({op_max}) < {GRAD_TOL_OP:g}; "
            f"end-to-end {e2e} < {GRAD_TOL_E2E:g}; {tstr}")
    assert ok


def _ancestors(form, j):
    preds = form.predecessor_sets()
    seen, stack = set(), list(preds[j])
    while stack:
        u = stack.pop()
        if u not in seen:
            seen.add(u)
            stack.extend(preds[u])
    return seen


def _flow_trials(use_mask, count=200):
    ops = OperationDictionary.default(5)
    cfg = ModelConfig(**{**LEARN_MODEL, "d_t": 16, "d_pe": 16}, use_mask=use_mask)
    rng = np.random.default_rng(5)
    params = init_encoder_params(cfg, ops, rng)
    changed = trials = 0
    while trials < count:
        p = prepare(random_dag(rng, int(rng.integers(2, 12)), 0.3, 5), cfg, ops)
        j = int(rng.integers(0, p.n_real))
        others = [i for i in range(p.n_real) if i != j and i not in _ancestors(p.form, j)]
        if not others:
            continue
        i = others[int(rng.integers(0, len(others)))]
        labels = p.labels.copy()
        labels[i] = (labels[i] + 1 + int(rng.integers(0, len(ops) - 1))) % len(ops)
        a = forward(Batch.stack([p]), params, cfg).data[0, j]
        b = forward(Batch.stack([p.with_labels(labels)]), params, cfg).data[0, j]
        trials += 1
        changed += not np.array_equal(a, b)
    return changed, trials


def test_c05_information_flow():
    masked, n = _flow_trials(True)
    unmasked, _ = _flow_trials(False)
    ok = masked == 0 and unmasked > NO_MASK_CHANGE_RATE * n
    verdict(5, "masked information flow", ok,
            f"masked: {masked}/{n} rows changed; no mask: {unmasked}/{n} changed (need > {NO_MASK_CHANGE_RATE:.0%})")
    assert ok


def test_c06_invariance():
    ops = OperationDictionary.default(5)
    enc = PaceEncoder(ModelConfig(**LEARN_MODEL), ops, seed=6)
    rng = np.random.default_rng(6)
    differing = 0
    for _ in range(50):
        dag = random_dag(rng, int(rng.integers(1, 12)), 0.3, 5)
        base = enc.encode(dag).data.tobytes()
        for _ in range(100):
            moved = dag.relabel([int(x) for x in rng.permutation(dag.n)])
            differing += enc.encode(moved).data.tobytes() != base
    ok = differing == 0
    verdict(6, "isomorphism invariance", ok, f"{differing}/5000 relabelings differ bitwise")
    assert ok


def _expected_mlm_loss(dag, params, config, ops):
    total = 0.0
    for v in range(dag.n):
        for label, weight in ((ops.mask, 0.8), (dag.labels[v], 0.2)):
            labels = list(dag.labels)
            labels[v] = label
            item = MlmBatchItem(dag, (v,), tuple(labels), (dag.labels[v],))
            total += weight / dag.n * mlm_loss(item, params, config, ops).item()
    return total


def test_c07_mlm():
    ops = OperationDictionary.default(5)
    config = ModelConfig(**LEARN_MODEL)

    def learn():
        gen = GeneratorConfig(n_min=4, n_max=10, n_ops=5, edge_prob=0.3, label_rule="structured", shuffle_ids=True, seed=1)
        dags = [s.dag for s in make_dataset(gen, 2000, with_scores=False)]
        train, held = dags[:1800], dags[1800:]
        prepared = [prepare(d, config, ops) for d in dags]
        params = init_mlm_params(config, ops, np.random.default_rng(0))
        curve = []

        def on_epoch(record):
            curve.append(mlm_accuracy(held, params, config, ops, seed=11, prepared=prepared[1800:]))

        train_mlm(train, config, ops, MLM_MAX_EPOCHS, seed=0, prepared=prepared[:1800], params=params,
                  on_epoch=on_epoch, stop_when=lambda _: curve[-1] >= MLM_MIN_ACC)
        return curve

    def overfit():
        dag = LabeledDag(6, ((0, 1), (1, 2), (1, 3), (3, 4), (2, 5), (4, 5)), (0, 1, 2, 1, 3, 4))
        result = train_mlm([dag], config, ops, epochs=OVERFIT_STEPS, seed=0)
        return _expected_mlm_loss(dag, result.params, config, ops)

    curve, secs = timed(learn)
    loss, secs2 = timed(overfit)
    fast, tstr = within(7, secs + secs2)
    acc_ok = max(curve) >= MLM_MIN_ACC
    ok = acc_ok and loss < OVERFIT_LOSS and fast
    verdict(7, "MLM learnability", ok,
            f"held-out masked accuracy {max(curve):.3f} after {len(curve)} epochs (need >= {MLM_MIN_ACC}); "
            f"single-DAG expected loss {loss:.3f} after {OVERFIT_STEPS} steps (need < {OVERFIT_LOSS}); {tstr}")
    assert ok


def _regression_data():
    gen = GeneratorConfig(n_min=4, n_max=10, n_ops=5, edge_prob=0.3, shuffle_ids=True, seed=2)
    return make_dataset(gen, 5000)


REG_EPOCHS = 10


def test_c08_regression():
    ops = OperationDictionary.default(5)
    config = ModelConfig(**LEARN_MODEL)

    def run():
        samples = _regression_data()
        prepared = [prepare(s.dag, config, ops) for s in samples]
        pace_r, base_r = [], []
        for seed in (0, 1, 2):
            result = train_regressor(samples, config, ops, "output", REG_EPOCHS, seed, prepared=prepared)
            pace_r.append(result.final["pearson"])
            base_r.append(bag_of_ops_baseline(samples, len(ops), seed)["pearson"])
        return pace_r, base_r

    (pace_r, base_r), secs = timed(run)
    fast, tstr = within(8, secs)
    gap = float(np.mean(pace_r) - np.mean(base_r))
    ok = gap >= REG_MIN_GAP and fast
    verdict(8, "regression advantage", ok,
            f"PACE r {np.mean(pace_r):.3f} {np.round(pace_r, 3).tolist()} vs bag-of-ops r {np.mean(base_r):.3f}; "
            f"gap {gap:.3f} (need >= {REG_MIN_GAP}); {tstr}")
    assert ok


ABLATION_COUNT = 3000
ABLATION_EPOCHS = 5


def test_c09_ablation():
    ops = OperationDictionary.default(5)
    samples = _regression_data()[:ABLATION_COUNT]
    table, secs = timed(lambda: run_ablation(samples, ModelConfig(**LEARN_MODEL), ops, seeds=[0, 1, 2], epochs=ABLATION_EPOCHS))
    m = {k: v["mean"] for k, v in table.items()}
    trend = m["mask"] >= m["no_mask"] >= m["no_dag2seq"]
    gap = m["mask"] - m["no_dag2seq"]
    orderings = m["topological"] < m["mask"] and m["bfs"] < m["mask"]
    ok = trend and gap >= ABLATION_MIN_GAP and orderings
    rows = ", ".join(f"{k} {v['mean']:.3f}±{v['sd']:.3f}" for k, v in table.items())
    verdict(9, "ablation trend", ok,
            f"{rows}; mask>=no_mask>=no_dag2seq {trend}; gap {gap:.3f} (need >= {ABLATION_MIN_GAP}); "
            f"ordering variants trail {orderings}; {secs:.0f}s")
    assert ok


VAE_EPOCHS = 200


def test_c10_vae():
    ops = OperationDictionary.default(3)
    gen = GeneratorConfig(n_min=3, n_max=6, n_ops=3, edge_prob=0.4, shuffle_ids=True, seed=5)
    dags = [s.dag for s in make_dataset(gen, 500, with_scores=False)]
    # literal encoder blocks; scores divided by sqrt(d/h) as in standard attention
    enc = ModelConfig(N=8, d_t=32, d_pe=32, h=4, K=3, attention_scale="sqrt")
    model = VaeModel.create(enc, VaeConfig(d_z=32, d_k=64, K=3, h=4, beta=0.005, kl_warmup=0.3), ops, 0)

    def run():
        train_vae(dags, model, VAE_EPOCHS, seed=0, lr=1e-3, batch_size=32)
        return generation_metrics(model, dags, 1000, seed=1, recon_subset=100)

    metrics, secs = timed(run)
    ok = metrics["recon_acc"] >= VAE_MIN_RECON and metrics["valid"] >= VAE_MIN_VALID and metrics["acyclic"] == 1.0
    verdict(10, "VAE generation", ok,
            f"recon {metrics['recon_acc']:.3f} (need >= {VAE_MIN_RECON}), valid {metrics['valid']:.3f} "
            f"(need >= {VAE_MIN_VALID}), acyclic {metrics['acyclic']:.3f}, unique {metrics['unique']:.3f}, "
            f"novel {metrics['novel']:.3f}; {secs:.0f}s")
    assert ok


CLI_MODEL = "N=8\nd_t=8\nd_pe=8\nh=2\nK=2\nepochs=2\nops=op0,op1,op2\nvae.d_z=4\nvae.d_k=8\nvae.h=2\nvae.K=1\n"


def _cli(*args):
    env = {**os.environ, "PYTHONHASHSEED": "0"}
    return subprocess.run([sys.executable, "-m", "pace.cli", *args], capture_output=True, text=True, env=env, check=True)


def test_c11_determinism(tmp_path):
    (tmp_path / "gen.cfg").write_text("gen.n_min=3\ngen.n_max=7\ngen.n_ops=3\n")
    (tmp_path / "model.cfg").write_text(CLI_MODEL)
    outputs = {}
    for tag in ("a", "b"):
        data = tmp_path / f"data-{tag}.jsonl"
        _cli("--seed", "4", "gen-data", "--config", str(tmp_path / "gen.cfg"), "--count", "60", "--out", str(data))
        runs = {"gen-data": data.read_bytes()}
        for cmd in ("train-mlm", "train-reg", "train-vae"):
            out = tmp_path / f"{cmd}-{tag}"
            printed = _cli("--seed", "4", cmd, "--data", str(data), "--config", str(tmp_path / "model.cfg"), "--out", str(out)).stdout
            runs[cmd] = (printed, (out / "metrics.jsonl").read_bytes(), (out / "final.json").read_bytes())
        out = tmp_path / f"abl-{tag}"
        _cli("--seed", "4", "ablate", "--data", str(data), "--config", str(tmp_path / "model.cfg"), "--epochs", "1",
             "--seeds", "0,1", "--out", str(out))
        runs["ablate"] = (out / "ablation.jsonl").read_bytes()
        outputs[tag] = runs
    differing = [k for k in outputs["a"] if outputs["a"][k] != outputs["b"][k]]
    ok = not differing
    verdict(11, "CLI determinism", ok,
            f"{len(outputs['a'])} commands run twice in fresh processes; differing: {differing or 'none'}")
    assert ok


if __name__ == "__main__":
    import tempfile

    from verdicts import LINES

    checks = [v for k, v in sorted(globals().items()) if k.startswith("test_c")]
    for check in checks:
        try:
            if check is test_c11_determinism:
                with tempfile.TemporaryDirectory() as tmp:
                    check(Path(tmp))
            else:
                check()
        except AssertionError:
            pass
        print(LINES[-1], flush=True)
    print(json.dumps({"passed": sum(x.startswith("PASS") for x in LINES), "total": len(LINES)}))
