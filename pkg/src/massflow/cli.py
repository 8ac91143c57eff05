"""Command-line entry point: gen, train, eval, verify, bench.

Every command is config-driven and deterministic: a JSON config file
(``--config``) provides any subset of the experiment fields, explicit flags
override it, and unknown keys are rejected by name. All artifacts (datasets,
checkpoints, metrics, summaries, reports) embed the seed and a hash of the
resolved config, so re-running a command with identical inputs reproduces
identical outputs.

Output paths resolve against ``--out`` relative to the ``MASSFLOW_OUTPUT_ROOT``
environment variable (default: the current directory).

Exit codes: 0 success, 1 usage or config error, 2 verification failure,
3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from . import cells as cl
from . import engine as eg
from . import tasks as tk
from . import training as tr
from . import verify as vf
from .errors import ContractError, DivergenceError, MassflowError, ShapeError

log = logging.getLogger("massflow.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_DIVERGED = 3

OUTPUT_ROOT_ENV = "MASSFLOW_OUTPUT_ROOT"

# train flag name -> ExperimentConfig field it overrides
_TRAIN_FLAG_FIELDS = {
    "task": "task", "variant": "variant", "hidden": "n_cells",
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr",
    "data_seed": "data_seed", "readout": "readout", "l2": "l2",
    "clip_norm": "clip_norm", "op": "arithmetic_op", "out": "out_dir",
    "seq_len": "seq_len", "value_hi": "value_hi", "n_marked": "n_marked",
    "gamma": "gamma", "noise_sigma": "noise_sigma", "n_steps": "n_steps",
    "theta0": "theta0", "max_updates": "max_updates",
}


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV, ".")
    out = path if os.path.isabs(path) else os.path.join(root, path)
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _load_config(args) -> tr.ExperimentConfig:
    """Config file first, then explicit flags on top."""
    doc = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    config = tr.ExperimentConfig.from_dict(doc)
    for flag, fieldname in _TRAIN_FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, fieldname, value)
    if getattr(args, "seeds", None) is not None:
        config.seeds = list(range(args.seeds))
    if getattr(args, "seed_list", None) is not None:
        config.seeds = [int(s) for s in args.seed_list.split(",") if s]
    if getattr(args, "verify_every_batch", False):
        config.verify_every_batch = True
    return config


# === gen ===

def _gen_out_path(out_dir: str, task: str, name: str) -> str:
    return os.path.join(out_dir, f"{task}-{name}.mfds")


def cmd_gen(args) -> int:
    config = _load_config(args)
    out_dir = _resolve_out(config.out_dir)
    chash = tr.config_hash(config)
    written = []

    def emit(name: str, ds: tk.Dataset) -> None:
        ds.descriptor["config_hash"] = chash
        path = _gen_out_path(out_dir, config.task, name)
        tk.write_dataset(path, ds)
        written.append({"split": name, "path": path, "n": ds.n_samples,
                        "seq_len": ds.seq_len})

    if config.task == "addition":
        train, valid, test = tk.addition_reference_splits(
            config.data_seed, n_train_valid=config.n_train_valid,
            n_test=config.n_test)
        emit("train", train)
        emit("valid", valid)
        emit("test", test)
        if args.generalization:
            for name, (n, seq_len, hi, marked) in tk.ADDITION_GENERALIZATION.items():
                seed = tk._child_seed(config.data_seed, f"addition-gen-{name}")
                emit(name, tk.gen_addition(n, seq_len, hi, marked, seed, split=name))
    elif config.task == "recurrent-arithmetic":
        train, valid, test = tr._dataset_for(config)
        emit("train", train)
        emit("valid", valid)
        emit("test", test)
    elif config.task == "static-arithmetic":
        train, test = tk.gen_static_arithmetic(config.arithmetic_op, config.data_seed)
        emit("train", train)
        emit("test", test)
    elif config.task == "pendulum":
        cfg = tk.PendulumConfig(theta0=config.theta0, length=config.length,
                                gamma=config.gamma, noise_sigma=config.noise_sigma,
                                n_steps=config.n_steps, dt=config.dt,
                                seed=config.data_seed)
        emit("series", tk.pendulum_dataset(cfg))
    else:
        raise ContractError(f"gen: unknown task {config.task!r}")

    manifest = {"config": asdict(config), "config_hash": chash, "files": written}
    _write_json(os.path.join(out_dir, f"{config.task}-manifest.json"), manifest)
    for row in written:
        print(f"wrote {row['path']} ({row['n']} samples, T={row['seq_len']})")
    return EXIT_OK


# === train ===

def _experiment_dir(config: tr.ExperimentConfig) -> str:
    out_dir = _resolve_out(config.out_dir)
    name = f"{config.task}-{config.variant}-{tr.config_hash(config)}"
    path = os.path.join(out_dir, name)
    os.makedirs(path, exist_ok=True)
    return path


def _save_run(exp_dir: str, config: tr.ExperimentConfig, res: dict, seed: int) -> None:
    run_dir = os.path.join(exp_dir, f"seed-{seed}")
    os.makedirs(run_dir, exist_ok=True)
    params = res["params"]
    params.meta["seed"] = int(seed)
    params.meta["config_hash"] = tr.config_hash(config)
    cl.save_checkpoint(params, os.path.join(run_dir, "checkpoint.json"))
    tr.write_metrics_csv(os.path.join(run_dir, "metrics.csv"), res["history"])
    summary = dict(res["summary"])
    summary["config_hash"] = tr.config_hash(config)
    _write_json(os.path.join(run_dir, "summary.json"), summary)


def cmd_train(args) -> int:
    config = _load_config(args)
    exp_dir = _experiment_dir(config)
    with open(os.path.join(exp_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(config.to_json() + "\n")

    if config.task == "pendulum":
        cfg = tk.PendulumConfig(theta0=config.theta0, length=config.length,
                                gamma=config.gamma, noise_sigma=config.noise_sigma,
                                n_steps=config.n_steps, dt=config.dt,
                                seed=config.data_seed)
        dataset = tk.pendulum_dataset(cfg)
        summaries = []
        for seed in config.seeds:
            print(f"pendulum: training seed {seed}")
            res = tr.train_autoregressive_pendulum(config, dataset, seed)
            _save_run(exp_dir, config, res, seed)
            summaries.append(res["summary"])
        n_diverged = sum(s["diverged"] for s in summaries)
        doc = {"task": config.task, "config": asdict(config),
               "config_hash": tr.config_hash(config),
               "runs": summaries, "n_diverged": n_diverged}
        _write_json(os.path.join(exp_dir, "experiment.json"), doc)
        ok = [s for s in summaries if not s["diverged"]]
        if ok:
            med = float(np.median([s["rollout_mse"] for s in ok]))
            print(f"median rollout MSE over {len(ok)} runs: {med:.6g}")
        print(f"artifacts in {exp_dir}")
        return EXIT_DIVERGED if n_diverged else EXIT_OK

    outcome = tr.run_experiment(config, progress=lambda m: print(m),
                                parallel=args.parallel_seeds or 1)
    for seed, res in zip(config.seeds, outcome["runs"]):
        _save_run(exp_dir, config, res, seed)
    doc = {"task": config.task, "config": asdict(config),
           "config_hash": outcome["config_hash"],
           "chosen_lr": outcome["chosen_lr"],
           "median_test_mse": outcome["median_test_mse"],
           "n_diverged": outcome["n_diverged"],
           "runs": [r["summary"] for r in outcome["runs"]]}
    _write_json(os.path.join(exp_dir, "experiment.json"), doc)
    print(f"chosen lr: {outcome['chosen_lr']}")
    print(f"median test MSE over {len(outcome['runs'])} seeds: "
          f"{outcome['median_test_mse']:.6g}")
    if outcome["n_diverged"]:
        print(f"{outcome['n_diverged']} run(s) diverged")
    print(f"artifacts in {exp_dir}")
    return EXIT_DIVERGED if outcome["n_diverged"] else EXIT_OK


# === eval ===

def _eval_pendulum(params: cl.CellParams, ds: tk.Dataset) -> dict:
    targets = ds.targets[0]
    embeddings = ds.aux[0]
    c0 = np.maximum(targets[0], 0.0)
    with eg.no_grad():
        pred = tr.rollout_pendulum(params, c0, embeddings, targets.shape[0] - 1).data
    err = pred - targets[1:]
    out = {"rollout_mse": float(np.mean(err ** 2)), "n_steps": int(targets.shape[0])}
    for ch, name in enumerate(("pearson_pot", "pearson_kin")):
        a, b = pred[:, ch], targets[1:, ch]
        denom = float(np.std(a) * np.std(b))
        out[name] = float(np.mean((a - a.mean()) * (b - b.mean())) / denom) if denom > 0 else 0.0
    return out


def cmd_eval(args) -> int:
    params = cl.load_checkpoint(args.checkpoint)
    ds = tk.read_dataset(args.dataset)
    if ds.descriptor.get("task") == "pendulum":
        metrics = _eval_pendulum(params, ds)
    else:
        if ds.mass.shape[2] != params.n_mass or ds.aux.shape[2] != params.n_aux:
            raise ShapeError(
                f"eval: dataset carries (M={ds.mass.shape[2]}, L={ds.aux.shape[2]}) "
                f"inputs but the checkpoint expects (M={params.n_mass}, L={params.n_aux})")
        metrics = tr.evaluate(params, ds)
    metrics["split"] = ds.split
    metrics["checkpoint"] = args.checkpoint
    metrics["dataset"] = args.dataset
    for key in ("seed", "config_hash"):
        if key in params.meta:
            metrics[key] = params.meta[key]
    print(json.dumps(metrics, indent=2, sort_keys=True, default=float))
    if args.out:
        _write_json(args.out, metrics)
    return EXIT_OK


# === verify ===

def _sweep_configs(rng: np.random.Generator, n: int, variants, seed0: int):
    """Random (variant, dims, T, seed) draws for the conservation sweep."""
    picks = []
    for idx in range(n):
        variant = cl.CellVariant(variants[int(rng.integers(len(variants)))])
        K = int(rng.choice([1, 2, 4, 8, 64]))
        M = 1 if variant is cl.CellVariant.MCLSTM_HYDRO else int(rng.choice([1, 3]))
        L = int(rng.choice([1, 5]))
        T = int(rng.choice([1, 10, 50]))
        picks.append((variant, K, M, L, T, seed0 + idx))
    return picks


def _run_conserving_trace(variant, K, M, L, T, seed, perturb: float = 0.5):
    """Init a cell, shake its parameters, and trace a random-input run."""
    rng = tk._rng(seed)
    params = cl.init_params(variant, K, n_mass=M, n_aux=L, seed=seed)
    for arr in params.arrays.values():
        arr += perturb * rng.standard_normal(arr.shape)
    xs = rng.uniform(0.0, 1.0, (T, M))
    aux = rng.standard_normal((T, L))
    c0 = rng.uniform(0.0, 1.0, K)
    with eg.no_grad():
        _, trace = cl.forward_sequence(params, c0, xs, aux, collect_trace=True)
    return trace


def _verify_conservation(rows: list, n_configs: int, include_ablations: bool) -> None:
    rng = tk._rng(2024)
    conserving = [v.value for v in cl.RECURRENT_CONSERVING]
    worst = 0.0
    ok = True
    for variant, K, M, L, T, seed in _sweep_configs(rng, n_configs, conserving, 100):
        trace = _run_conserving_trace(variant, K, M, L, T, seed)
        rep = vf.check_conservation(trace)
        bnd = vf.check_boundedness(trace)
        sto = vf.check_stochasticity(trace)
        worst = max(worst, rep.max_residual / rep.scale)
        if not (rep.passed and bnd.passed and sto.passed):
            ok = False
    rows.append({"check": "conservation-sweep", "passed": ok,
                 "configs": n_configs, "worst_scaled_residual": worst})
    if not include_ablations:
        return
    ablations = [cl.CellVariant.ABLATION_SIGMOID_GATE,
                 cl.CellVariant.ABLATION_LINEAR_R,
                 cl.CellVariant.ABLATION_KEEP_MASS]
    for variant in ablations:
        violations = 0
        n_seeds = 20
        for seed in range(n_seeds):
            try:
                trace = _run_conserving_trace(variant, 4, 1, 2, 10, 300 + seed)
            except ContractError:
                # The run itself degenerates (negative states): the cell
                # refuses to continue, which is a conservation break in kind.
                violations += 1
                continue
            rep = vf.check_conservation(trace, tol=1e-6)
            if not rep.passed:
                violations += 1
        rows.append({"check": f"ablation:{variant.value}",
                     "passed": violations >= int(0.95 * n_seeds),
                     "expected_fail": True,
                     "conservation_violations": f"{violations}/{n_seeds}"})


def _verify_markov(rows: list) -> None:
    rng = tk._rng(7)
    ok = True
    worst = 0.0
    for _ in range(10):
        r = rng.uniform(0.0, 1.0, (5, 5)) + 1e-3
        r /= r.sum(axis=0, keepdims=True)
        c0 = rng.uniform(0.0, 1.0, 5)
        c0 /= c0.sum()
        rep = vf.markov_convergence(r, c0, steps=1000, tol=1e-8)
        if rep.converged_at is None or rep.converged_at > 1000 or rep.reducible:
            ok = False
        worst = max(worst, rep.distances[-1])
    rows.append({"check": "markov-convergence", "passed": ok,
                 "final_distance_worst": worst})


def _verify_spectral(rows: list, K: int, n_seeds: int = 20) -> None:
    ok = True
    values = []
    for seed in range(n_seeds):
        rng = tk._rng(1000 + seed)
        r = rng.uniform(0.0, 1.0, (K, K))
        r /= r.sum(axis=0, keepdims=True)
        s1 = vf.spectral_norm(r, seed=seed)
        values.append(s1)
        if not (1.0 - 1e-9 <= s1 <= np.sqrt(K) + 1e-9):
            ok = False
    large_k_band = (K < 256) or all(v <= 1.2 for v in values)
    rows.append({"check": f"spectral-K{K}", "passed": ok and large_k_band,
                 "s1_min": min(values), "s1_max": max(values)})


def _verify_gradcheck(rows: list) -> None:
    rng = tk._rng(99)
    ok = True
    worst = 0.0
    for variant in (cl.CellVariant.MCLSTM, cl.CellVariant.LSTM):
        params = cl.init_params(variant, 3, n_mass=1, n_aux=2, seed=5)
        mass = rng.uniform(0.1, 1.0, (4, 1))
        aux = rng.standard_normal((4, 2))
        rep = vf.gradcheck_model(params, mass, aux)
        worst = max(worst, rep.max_relative_error)
        ok = ok and rep.passed
    rows.append({"check": "gradcheck", "passed": ok, "max_relative_error": worst})


def _verify_probe(rows: list) -> None:
    params = cl.init_params(cl.CellVariant.MCLSTM, 16, n_mass=1, n_aux=3, seed=11)
    probe = vf.gradient_flow_probe(params, 50, seed=11)
    ok = 0.5 <= probe["chain_norm"] <= 1.5
    rows.append({"check": "gradient-flow-probe", "passed": ok,
                 "chain_norm": probe["chain_norm"]})


def cmd_verify(args) -> int:
    selected = {name for name in ("conservation", "markov", "spectral",
                                  "gradcheck", "probe")
                if getattr(args, name.replace("-", "_"))}
    if not selected:
        selected = {"conservation", "markov", "spectral", "gradcheck", "probe"}
    rows: list[dict] = []
    if "conservation" in selected:
        _verify_conservation(rows, args.configs, args.include_ablations)
    if "markov" in selected:
        _verify_markov(rows)
    if "spectral" in selected:
        _verify_spectral(rows, args.K)
    if "gradcheck" in selected:
        _verify_gradcheck(rows)
    if "probe" in selected:
        _verify_probe(rows)

    failed = [r for r in rows if not r["passed"]]
    for r in rows:
        status = "PASS" if r["passed"] else "FAIL"
        if r.get("expected_fail"):
            status = "EXPECTED-FAIL" if r["passed"] else "UNEXPECTED-PASS"
        detail = {k: v for k, v in r.items()
                  if k not in ("check", "passed", "expected_fail")}
        print(f"{status:15s} {r['check']:28s} {json.dumps(detail, default=float)}")
    if args.out:
        _write_json(args.out, {"rows": rows, "failed": len(failed)})
    return EXIT_VERIFY if failed else EXIT_OK


# === bench ===

def cmd_bench(args) -> int:
    if args.quick:
        dims = dict(n_cells=32, n_aux=15, seq_len=182, batch=128, repeats=3)
        scaling_kwargs = dict(cell_counts=(8, 16, 32, 64), seq_len=8, batch=4,
                              repeats=3)
    else:
        dims = dict(n_cells=64, n_aux=30, seq_len=365, batch=256, repeats=5)
        scaling_kwargs = {}
    report = vf.runtime_bench(**dims)
    print(f"{'variant':18s} {'median_ms':>10s}")
    for row in report["rows"]:
        print(f"{row['variant']:18s} {1000 * row['median_seconds']:10.1f}")
    for name, value in report["ratios"].items():
        print(f"ratio {name}: {value:.2f}")

    scaling = None
    if args.scaling:
        scaling = vf.superlinear_scaling(**scaling_kwargs)
        pairs = zip(scaling["cell_counts"], scaling["median_seconds"])
        table = ", ".join(f"K={k}: {1000 * t:.1f}ms" for k, t in pairs)
        print(f"scaling [{table}] fitted exponent {scaling['exponent']:.2f}")

    if args.out:
        out_dir = _resolve_out(args.out)
        doc = {"bench": report, "scaling": scaling}
        _write_json(os.path.join(out_dir, "bench.json"), doc)
        csv_rows = [dict(row) for row in report["rows"]]
        if scaling:
            for k, t in zip(scaling["cell_counts"], scaling["median_seconds"]):
                csv_rows.append({"variant": scaling["variant"], "n_cells": k,
                                 "n_mass": 1, "n_aux": 8, "seq_len": 16,
                                 "batch": 8, "median_seconds": t, "seconds": []})
        for row in csv_rows:
            row.pop("seconds", None)
        tr.write_metrics_csv(os.path.join(out_dir, "bench.csv"), csv_rows)
        print(f"wrote bench.csv and bench.json in {out_dir}")
    return EXIT_OK


# === parser ===

class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on malformed arguments, which this tool reserves
    # for verification failures; route usage errors to EXIT_USAGE instead.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="massflow",
        description="Mass-conserving recurrent cells: data, training, verification.")
    parser.add_argument("--version", action="version", version=f"massflow {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p, with_train_flags: bool = True):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--task", choices=["addition", "recurrent-arithmetic",
                                          "static-arithmetic", "pendulum"])
        p.add_argument("--out", help="output directory (under the output root)")
        p.add_argument("--data-seed", type=int, dest="data_seed")
        p.add_argument("--op", choices=list(tk.ARITHMETIC_OPS),
                       help="arithmetic operation for the arithmetic tasks")
        p.add_argument("--seq-len", type=int, dest="seq_len")
        p.add_argument("--value-hi", type=float, dest="value_hi")
        p.add_argument("--n-marked", type=int, dest="n_marked")
        p.add_argument("--theta0", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
        p.add_argument("--n-steps", type=int, dest="n_steps")
        if with_train_flags:
            p.add_argument("--variant",
                           choices=[v.value for v in cl.CellVariant])
            p.add_argument("--hidden", type=int, help="number of cells (K)")
            p.add_argument("--seeds", type=int,
                           help="train seeds 0..N-1 (count)")
            p.add_argument("--seed-list", dest="seed_list",
                           help="explicit comma-separated seed list")
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int, dest="batch_size")
            p.add_argument("--lr", type=float,
                           help="pin the learning rate (skips the grid)")
            p.add_argument("--l2", type=float)
            p.add_argument("--clip-norm", type=float, dest="clip_norm")
            p.add_argument("--readout", choices=list(cl.READOUT_MODES))
            p.add_argument("--max-updates", type=int, dest="max_updates")
            p.add_argument("--verify-every-batch", action="store_true",
                           dest="verify_every_batch")
            p.add_argument("--parallel-seeds", type=int, dest="parallel_seeds",
                           help="fan per-seed runs out to N processes")

    p_gen = sub.add_parser("gen", help="generate dataset files")
    add_config_flags(p_gen, with_train_flags=False)
    p_gen.add_argument("--generalization", action="store_true",
                       help="also write the out-of-distribution addition splits")
    p_gen.set_defaults(fn=cmd_gen)

    p_train = sub.add_parser("train", help="train a model, write artifacts")
    add_config_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", help="write metrics JSON here")
    p_eval.set_defaults(fn=cmd_eval)

    p_verify = sub.add_parser("verify", help="run the property-check suites")
    p_verify.add_argument("--conservation", action="store_true")
    p_verify.add_argument("--markov", action="store_true")
    p_verify.add_argument("--spectral", action="store_true")
    p_verify.add_argument("--gradcheck", action="store_true")
    p_verify.add_argument("--probe", action="store_true")
    p_verify.add_argument("--include-ablations", action="store_true",
                          dest="include_ablations",
                          help="also run the broken variants (expected failures)")
    p_verify.add_argument("--configs", type=int, default=100,
                          help="conservation sweep size")
    p_verify.add_argument("--K", type=int, default=64,
                          help="matrix size for the spectral suite")
    p_verify.add_argument("--out", help="write the report JSON here")
    p_verify.set_defaults(fn=cmd_verify)

    p_bench = sub.add_parser("bench", help="runtime table across variants")
    p_bench.add_argument("--quick", action="store_true", help="halved dimensions")
    p_bench.add_argument("--scaling", action="store_true",
                         help="also fit cost against the cell count")
    p_bench.add_argument("--out", help="write bench.csv / bench.json here")
    p_bench.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, ShapeError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except MassflowError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
