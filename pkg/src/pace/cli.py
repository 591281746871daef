"""Command-line entry point ``pace``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .canonize import canonical_form
from .dag import DagSample, OperationDictionary, read_dag_file, sample_to_record, scan_operations, write_dag_file
from .encoder import Batch, ModelConfig, PaceEncoder, forward, readout
from .errors import PaceError
from .harness import (
    ExperimentRecord,
    GeneratorConfig,
    bag_of_ops_baseline,
    epoch_timing,
    make_dataset,
    run_ablation,
)
from .mask import mask_dfs, mask_floyd, mask_tree_backtracking
from .training import params_from_arrays, train_mlm, train_regressor
from .vae import VaeConfig, VaeModel, generate_batch, generation_metrics, train_vae

log = logging.getLogger("pace")

# Training keys accepted in config files besides model fields; "gen." and
# "vae." prefixes route to the generator and VAE configs.
TRAIN_DEFAULTS: dict[str, Any] = {"epochs": 10, "lr": 1e-3, "batch_size": 32, "readout": "output", "ops": ""}


def parse_value(raw: str) -> Any:
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config(path: str | Path | None) -> dict[str, Any]:
    """Flat ``key=value`` file; ``#`` starts a comment."""
    if path is None:
        return {}
    out: dict[str, Any] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = parse_value(value)
    return out


def _section(raw: dict[str, Any], prefix: str) -> dict[str, Any]:
    return {k[len(prefix) :]: v for k, v in raw.items() if k.startswith(prefix)}


def _plain(raw: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in raw.items() if "." not in k}


def _check_keys(raw: dict[str, Any]) -> None:
    known = {f.name for f in fields(ModelConfig)} | set(TRAIN_DEFAULTS)
    unknown = sorted(set(_plain(raw)) - known)
    unknown += sorted(f"gen.{k}" for k in set(_section(raw, "gen.")) - {f.name for f in fields(GeneratorConfig)})
    unknown += sorted(f"vae.{k}" for k in set(_section(raw, "vae.")) - {f.name for f in fields(VaeConfig)})
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")


def model_config(raw: dict[str, Any]) -> ModelConfig:
    return ModelConfig.from_dict(_plain(raw))


def train_option(raw: dict[str, Any], key: str) -> Any:
    return raw.get(key, TRAIN_DEFAULTS[key])


def load_ops(raw: dict[str, Any], data: str | Path) -> OperationDictionary:
    names = str(train_option(raw, "ops"))
    if names:
        return OperationDictionary(tuple(x.strip() for x in names.split(",") if x.strip()))
    return scan_operations(data)


def emit(record: dict[str, Any], fh: Any = None) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line)
    if fh is not None:
        fh.write(line + "\n")
        fh.flush()


def _load_model_checkpoint(path: str | Path) -> tuple[dict[str, Any], Any]:
    arrays, meta = checkpoint.load(path)
    if meta is None or "model" not in meta:
        raise ValueError(f"{path} carries no model configuration")
    return meta, params_from_arrays(arrays)


def cmd_canonize(args: argparse.Namespace) -> int:
    ops = scan_operations(args.input)
    samples = read_dag_file(args.input, ops)
    with open(args.out, "w", encoding="utf-8") as fh:
        for s in samples:
            cf = canonical_form(s.dag)
            rec = sample_to_record(s, ops)
            rec["perm"] = list(cf.perm)
            rec["certificate"] = cf.certificate.hex()
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return 0


def cmd_encode(args: argparse.Namespace) -> int:
    if args.model is not None:
        meta, params = _load_model_checkpoint(args.model)
        config = ModelConfig.from_dict(meta["model"])
        ops = OperationDictionary(tuple(meta["ops"]))
    else:
        config = model_config(read_config(args.config))
        ops = scan_operations(args.input)
        params = None
    if args.mode is not None:
        config = ModelConfig.from_dict({**config.to_dict(), "combine_mode": args.mode})
    encoder = PaceEncoder(config, ops, params, seed=args.seed)
    samples = read_dag_file(args.input, ops)
    out: dict[str, np.ndarray] = {}
    for i, s in enumerate(samples):
        batch = Batch.stack([encoder.prepare(s.dag)])
        emb = forward(batch, encoder.params, config)
        vec = readout(emb, batch, args.readout) if args.readout else emb
        out[f"dag{i}"] = vec.data[0]
    checkpoint.save(args.out, out, {"kind": "embeddings", "model": config.to_dict(), "readout": args.readout})
    return 0


def tree_depths(n: int, edges: Sequence[tuple[int, int]]) -> list[int]:
    parent = {v: u for u, v in edges}
    depths = [0] * n
    for v in range(1, n):
        depths[v] = depths[parent[v]] + 1 if v in parent and parent[v] < v else -1
    return depths


def cmd_mask(args: argparse.Namespace) -> int:
    ops = scan_operations(args.input)
    samples = read_dag_file(args.input, ops)
    size = args.size if args.size is not None else max((s.dag.n for s in samples), default=0)
    with open(args.out, "w", encoding="utf-8") as fh:
        for s in samples:
            dag = s.dag
            if args.algo == "dfs":
                mm = mask_dfs(dag, size)
            elif args.algo == "floyd":
                mm = mask_floyd(dag, size)
            else:
                mm = mask_tree_backtracking(dag, tree_depths(dag.n, dag.edges), size)
            fh.write(f"{mm.n_real} {mm.size}\n")
            for row in mm.m:
                fh.write("".join("1" if x else "0" for x in row) + "\n")
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    raw = read_config(args.config)
    gen = {**_section(raw, "gen."), "seed": args.seed}
    cfg = GeneratorConfig(**gen)
    samples = make_dataset(cfg, args.count, with_scores=not args.no_scores)
    write_dag_file(samples, args.out, OperationDictionary.default(cfg.n_ops))
    return 0


def _prepare_run(args: argparse.Namespace) -> tuple[dict[str, Any], ModelConfig, OperationDictionary, list[DagSample], Path]:
    raw = read_config(args.config)
    _check_keys(raw)
    if getattr(args, "epochs", None) is not None:
        raw["epochs"] = args.epochs
    ops = load_ops(raw, args.data)
    samples = read_dag_file(args.data, ops)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return raw, model_config(raw), ops, samples, out


def _finish(out: Path, raw: dict[str, Any], seed: int, metrics: list[dict[str, Any]], final: dict[str, Any], ckpt: Path, timings: list[float]) -> None:
    with open(out / "final.json", "w", encoding="utf-8") as fh:
        json.dump(final, fh, sort_keys=True)
        fh.write("\n")
    ExperimentRecord(raw, seed, metrics, final, str(ckpt), epoch_timing(timings)).write(out / "record.jsonl")


def _snapshot(args: argparse.Namespace, raw: dict[str, Any]) -> dict[str, Any]:
    # enough to replay the run: command, data file and every config key
    snap = {**raw, "command": args.command, "data": str(args.data)}
    for flag in ("init", "freeze"):
        if getattr(args, flag, None):
            snap[flag] = getattr(args, flag)
    return snap


def cmd_train_mlm(args: argparse.Namespace) -> int:
    raw, config, ops, samples, out = _prepare_run(args)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        result = train_mlm(
            [s.dag for s in samples], config, ops, int(train_option(raw, "epochs")), args.seed,
            lr=float(train_option(raw, "lr")), batch_size=int(train_option(raw, "batch_size")),
            out_dir=out, on_epoch=lambda r: emit(r, fh),
        )
    ckpt = out / "model.pact"
    checkpoint.save(ckpt, {k: v.data for k, v in result.params.items()}, {"kind": "mlm", "model": config.to_dict(), "ops": list(ops.ops)})
    _finish(out, _snapshot(args, raw), args.seed, result.metrics, result.final, ckpt, result.timings)
    return 0


def cmd_train_reg(args: argparse.Namespace) -> int:
    raw, config, ops, samples, out = _prepare_run(args)
    if args.readout:
        raw["readout"] = args.readout
    kind = str(train_option(raw, "readout"))
    params = None
    if args.init is not None:
        meta, params = _load_model_checkpoint(args.init)
        config = ModelConfig.from_dict(meta["model"])
        ops = OperationDictionary(tuple(meta["ops"]))
        params = {k: v for k, v in params.items() if not k.startswith(("mlm.", "reg."))}
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        result = train_regressor(
            samples, config, ops, kind, int(train_option(raw, "epochs")), args.seed,
            lr=float(train_option(raw, "lr")), batch_size=int(train_option(raw, "batch_size")),
            freeze_encoder=args.freeze, out_dir=out, params=params, on_epoch=lambda r: emit(r, fh),
        )
    final = dict(result.final)
    try:
        final["baseline"] = bag_of_ops_baseline(samples, len(ops), args.seed)
    except PaceError as exc:
        final["baseline_error"] = str(exc)
    ckpt = out / "model.pact"
    checkpoint.save(
        ckpt, {k: v.data for k, v in result.params.items()},
        {"kind": "regression", "model": config.to_dict(), "ops": list(ops.ops), "readout": kind},
    )
    _finish(out, _snapshot(args, raw), args.seed, result.metrics, final, ckpt, result.timings)
    return 0


def cmd_train_vae(args: argparse.Namespace) -> int:
    raw, config, ops, samples, out = _prepare_run(args)
    vae_raw = _section(raw, "vae.")
    if args.beta is not None:
        raw["vae.beta"] = vae_raw["beta"] = args.beta
    model = VaeModel.create(config, VaeConfig.from_dict(vae_raw), ops, args.seed)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        metrics, timings = train_vae(
            [s.dag for s in samples], model, int(train_option(raw, "epochs")), args.seed,
            lr=float(train_option(raw, "lr")), batch_size=int(train_option(raw, "batch_size")),
            out_dir=out, on_epoch=lambda r: emit(r, fh),
        )
    ckpt = out / "model.pact"
    model.save(ckpt)
    _finish(out, _snapshot(args, raw), args.seed, metrics, dict(metrics[-1]) if metrics else {}, ckpt, timings)
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    model = VaeModel.load(args.model)
    z = np.random.default_rng(args.seed).standard_normal((args.n, model.vae.d_z))
    generated = generate_batch(z, model)
    write_dag_file([DagSample(g.dag, None) for g in generated], args.out, model.ops)
    return 0


def cmd_vae_metrics(args: argparse.Namespace) -> int:
    model = VaeModel.load(args.model)
    train = [s.dag for s in read_dag_file(args.train, model.ops)]
    emit(generation_metrics(model, train, args.samples, args.seed, recon_subset=args.recon_subset))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    raw, config, ops, samples, out = _prepare_run(args)
    seeds = [int(x) for x in args.seeds.split(",")]
    table = run_ablation(
        samples, config, ops, seeds, int(train_option(raw, "epochs")),
        lr=float(train_option(raw, "lr")), batch_size=int(train_option(raw, "batch_size")),
        kind=str(train_option(raw, "readout")), split_seed=args.seed,
        variants=args.variants.split(",") if args.variants else None,
    )
    with open(out / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for name, row in table.items():
            emit({"variant": name, **row}, fh)
    return 0


def _flatten(prefix: str, value: Any, into: dict[str, Any]) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, into)
    else:
        into[prefix] = value


def cmd_report(args: argparse.Namespace) -> int:
    rows = []
    for path in args.records:
        for rec in ExperimentRecord.read_all(path):
            row: dict[str, Any] = {"record": str(path), "seed": rec.seed}
            _flatten("final", rec.final, row)
            _flatten("time", rec.timings, row)
            rows.append(row)
    columns = sorted({k for row in rows for k in row}, key=lambda k: (k not in ("record", "seed"), k))
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        if args.format == "json":
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        else:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread cap")
    common.add_argument("--log", default=argparse.SUPPRESS, help="log file")

    parser = argparse.ArgumentParser(prog="pace", description="PACE DAG encoder toolkit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--log", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func: Any, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("canonize", cmd_canonize, "canonical permutation and certificate per DAG")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("encode", cmd_encode, "encoder embeddings per DAG (tensor file)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--model", "--params", dest="model", default=None, help="trained checkpoint")
    p.add_argument("--config", default=None, help="model config for an untrained encoder")
    p.add_argument("--mode", choices=("concat", "sum"), default=None)
    p.add_argument("--readout", choices=("output", "concat"), default=None)
    p.add_argument("--out", required=True)

    p = add("mask", cmd_mask, "attention masks as 0/1 text matrices")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--algo", choices=("dfs", "floyd", "tree"), default="floyd")
    p.add_argument("--size", type=int, default=None, help="padded size (default: largest n)")
    p.add_argument("--out", required=True)

    p = add("gen-data", cmd_gen_data, "synthetic DAG dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--no-scores", action="store_true")
    p.add_argument("--out", required=True)

    for name, func, help_ in (
        ("train-mlm", cmd_train_mlm, "masked-node pre-training"),
        ("train-reg", cmd_train_reg, "supervised regression"),
        ("train-vae", cmd_train_vae, "variational autoencoder training"),
        ("ablate", cmd_ablate, "ablation table over encoder variants"),
    ):
        p = add(name, func, help_)
        p.add_argument("--data", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--out", required=True)
        if name == "train-reg":
            p.add_argument("--readout", choices=("output", "concat"), default=None)
            p.add_argument("--init", default=None, help="start from a pre-trained checkpoint")
            p.add_argument("--freeze", action="store_true", help="train the head only")
        if name == "train-vae":
            p.add_argument("--beta", type=float, default=None)
        if name == "ablate":
            p.add_argument("--seeds", default="0,1,2")
            p.add_argument("--variants", default=None, help="comma-separated subset")

    p = add("generate", cmd_generate, "decode standard-normal prior samples")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("vae-metrics", cmd_vae_metrics, "reconstruction, validity, uniqueness, novelty")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--recon-subset", type=int, default=None)

    p = add("report", cmd_report, "aggregate experiment records")
    p.add_argument("records", nargs="+")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.log else logging.WARNING,
        filename=args.log,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (PaceError, ValueError, OSError) as exc:
        print(f"pace: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
