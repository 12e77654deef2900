"""Command-line entry point: ``gfndag <command> [flags]``.

Commands: gen-data, train, evaluate, baseline, enumerate. Each run writes its
outputs plus a ``manifest.json`` into ``--out-dir``. Exit codes are 0 on
success, 2 for argument errors and 3 for runtime or numeric failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata
from pathlib import Path

import numpy as np

from . import baselines, data as datamod
from .dag_env import DagState, closure_transpose, state_from_key
from .envs import EnvSpecError, explicit_env, galton_env
from .exact_eval import (
    MAX_ENUM_D,
    DagSpace,
    ExactDagPolicy,
    EnumerationTooLarge,
    correlation_report,
    estimate_log_pftop,
    exact_posterior,
    features,
    jsd,
    policy_tables,
    structural_metrics,
    terminating_log_probs,
)
from .flow_core import make_rng, terminating_distribution_dp
from .objectives import corrected_reward
from .policy_nn import MlpPolicy, TabularFlowModel, TabularPolicy, load_checkpoint, save_checkpoint
from .scores import BDeScore, BGeScore, EdgePenaltyPrior, LocalScoreCache, UniformPrior, standardize
from .trainer import ExactTarget, ScoreBinding, TrainConfig, train_modified_db, train_sql, train_tb, \
    sample_dags, write_trace_csv

__all__ = ["main", "build_parser", "RunManifest"]

LOSSES = ("modified-db", "tb", "reverse-kl", "sql")
FEATURE_KINDS = ("edge", "path", "markov")


class UsageError(Exception):
    """Bad flag combination detected after parsing; exits with status 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def write(self, out_dir: Path) -> None:
        (out_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _read_config_file(path) -> dict:
    """``key = value`` lines; keys use flag spelling with or without dashes."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected key = value")
        k, v = (p.strip() for p in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    p.add_argument("--config", type=Path, help="key=value file merged under explicit flags")


def _add_data_flags(p, required=True) -> None:
    p.add_argument("--data", type=Path, required=required, help="dataset CSV")
    p.add_argument("--score", choices=("bge", "bde", "uniform"), default="bge")
    p.add_argument("--edge-penalty", type=_nonneg_float, default=0.0,
                   help="log prior -beta*|E| (0 gives the uniform prior)")
    p.add_argument("--no-standardize", action="store_true",
                   help="do not standardize continuous data before scoring")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfndag", description="GFlowNets for Bayesian structure learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample an ER graph, a BN and a dataset")
    _add_common(p)
    p.add_argument("--d", type=_positive_int, required=True)
    p.add_argument("--er", type=_nonneg_float, default=1.0, help="expected edges per node")
    p.add_argument("--n", type=_positive_int, default=100)
    p.add_argument("--kind", choices=("lingauss", "discrete"), default="lingauss")
    p.add_argument("--arity", type=_positive_int, default=3)
    p.add_argument("--noise-var", type=float, default=0.01)

    p = sub.add_parser("train", help="train a policy")
    _add_common(p)
    p.add_argument("--env", default="dag", help="dag, galton<rows> or a path to an env spec file")
    p.add_argument("--loss", default="modified-db", help="one of: " + ", ".join(LOSSES))
    _add_data_flags(p, required=False)
    p.add_argument("--policy", choices=("tabular", "mlp"), default="tabular")
    p.add_argument("--hidden", default="128,128")
    p.add_argument("--steps", type=_positive_int, default=50_000)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float, default=1.0, help="temperature for sql")
    p.add_argument("--off-policy", choices=("yes", "no"), default="yes")
    p.add_argument("--baseline", choices=("local", "global"), default="local")
    p.add_argument("--max-parents", type=_positive_int)
    p.add_argument("--eval-every", type=_positive_int, default=1000)
    p.add_argument("--target-jsd", type=float)
    p.add_argument("--exact-eval", action="store_true", help="periodic JSD against the exact posterior")
    p.add_argument("--workers", type=_positive_int, default=1,
                   help="accepted for compatibility; rollouts are vectorized in one process")

    p = sub.add_parser("evaluate", help="metrics for a trained checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint path (.bin/.json stem)")
    _add_data_flags(p)
    p.add_argument("--truth", type=Path, help="ground-truth edge list CSV")
    p.add_argument("--features", default="edge,path,markov")
    p.add_argument("--samples", type=_positive_int, default=1000)
    p.add_argument("--corr-samples", type=_positive_int, default=100)
    p.add_argument("--beam", type=_positive_int, default=10)
    p.add_argument("--mc", type=_positive_int, default=100)
    p.add_argument("--sampled", action="store_true", help="features from samples even when d is small")

    p = sub.add_parser("baseline", help="structure MC^3")
    _add_common(p)
    p.add_argument("--mc3", action="store_true", required=True)
    _add_data_flags(p, required=False)
    p.add_argument("--d", type=_positive_int, help="number of variables (uniform score without data)")
    p.add_argument("--steps", type=_positive_int, required=True)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=_positive_int, default=10)
    p.add_argument("--truth", type=Path)
    p.add_argument("--features", default="edge,path,markov")
    p.add_argument("--max-parents", type=_positive_int)

    p = sub.add_parser("enumerate", help="exact posterior by enumeration")
    _add_common(p)
    _add_data_flags(p, required=False)
    p.add_argument("--d", type=_positive_int, help="number of variables (uniform score without data)")
    p.add_argument("--policy-out", action="store_true", help="also save the exact forward policy")
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` so explicit flags still win."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    cfg = _read_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in cfg.items():
        if k not in known or k in ("config", "help"):
            raise UsageError(f"{args.config}: unknown key {k!r}")
        act = known[k]
        if act.const is True and act.nargs == 0:
            defaults[k] = v.lower() in ("1", "true", "yes")
        else:
            try:
                defaults[k] = act.type(v) if act.type else v
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"{args.config}: {k}: {e}") from None
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _load_scoring(args, d_flag=None):
    """(dataset or None, local score cache, prior, d, input digests)."""
    prior = EdgePenaltyPrior(args.edge_penalty) if args.edge_penalty else UniformPrior()
    inputs = {}
    if args.score == "uniform":
        d = d_flag
        ds = None
        if args.data is not None:
            ds = datamod.read_dataset(args.data)
            d = ds.d
            inputs[str(args.data)] = _digest(args.data)
        if d is None:
            raise UsageError("--d or --data is required")
        return ds, LocalScoreCache(lambda c, p: 0.0, d), prior, d, inputs
    if args.data is None:
        raise UsageError(f"--data is required with --score {args.score}")
    if not args.data.exists():
        raise UsageError(f"missing input {args.data}")
    ds = datamod.read_dataset(args.data, kind="continuous" if args.score == "bge" else "categorical")
    inputs[str(args.data)] = _digest(args.data)
    if args.score == "bge":
        if not args.no_standardize:
            ds = standardize(ds)
        scorer = BGeScore(ds)
    else:
        scorer = BDeScore(ds)
    return ds, LocalScoreCache(scorer, ds.d), prior, ds.d, inputs


def _rows_to_states(rows: np.ndarray, d: int) -> list:
    return [DagState(d, tuple(int(x) for x in r), closure_transpose([int(x) for x in r], d)) for r in rows]


def _write_features(out: Path, reps: list) -> list:
    names = []
    for rep in reps:
        name = f"features_{rep.kind}.csv"
        (out / name).write_text(rep.to_csv())
        names.append(name)
    return names


def _feature_kinds(text: str) -> list:
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in FEATURE_KINDS]
    if bad:
        raise UsageError(f"unknown feature kind(s) {bad}; valid: {', '.join(FEATURE_KINDS)}")
    return kinds


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- commands -------------------------------------------------------------

def cmd_gen_data(args) -> RunManifest:
    rng = make_rng(args.seed, 0)
    g = datamod.sample_er_dag(args.d, args.er, rng)
    if args.kind == "lingauss":
        bn = datamod.sample_lingauss_bn(g, rng, args.noise_var)
    else:
        bn = datamod.sample_discrete_bn(g, args.arity, rng)
    ds = datamod.ancestral_sample(bn, args.n, rng)
    out = args.out_dir
    datamod.write_dataset(out / "data.csv", ds)
    datamod.write_edge_list(out / "truth.csv", g, ds.names)
    meta = {"seed": args.seed, "d": args.d, "er": args.er, "n": args.n, "kind": args.kind,
            "g_star": [list(e) for e in g.edges], "noise_var": args.noise_var,
            "arity": args.arity if args.kind == "discrete" else None,
            "standardized": False}
    if args.kind == "lingauss":
        meta["theta"] = bn.theta.tolist()
    datamod.write_metadata(out / "meta.json", meta)
    return RunManifest("gen-data", {}, args.seed, _version(), outputs=["data.csv", "truth.csv", "meta.json"])


def _train_config(args, **over) -> TrainConfig:
    kw = {"steps": args.steps, "seed": args.seed, "eval_every": args.eval_every,
          "off_policy": args.off_policy == "yes", "baseline": args.baseline,
          "target_jsd": args.target_jsd, "max_parents": args.max_parents}
    if args.batch_size is not None:
        kw["batch_size"] = args.batch_size
    if args.lr is not None:
        kw["lr"] = args.lr
    kw.update(over)
    try:
        return TrainConfig(**kw)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> RunManifest:
    if args.loss not in LOSSES:
        raise UsageError(f"unknown loss {args.loss!r}; valid losses: {', '.join(LOSSES)}")
    out = args.out_dir
    if args.env == "dag":
        return _train_dag(args, out)
    return _train_explicit(args, out)


def _train_dag(args, out) -> RunManifest:
    if args.loss == "sql":
        raise UsageError("sql is only available on explicit environments")
    _, cache, prior, d, inputs = _load_scoring(args)
    binding = ScoreBinding(cache, d, prior)
    exact = None
    if args.exact_eval:
        if d > MAX_ENUM_D:
            raise UsageError(f"--exact-eval needs d <= {MAX_ENUM_D}")
        exact = ExactTarget.build(binding, args.max_parents)
    if args.policy == "tabular":
        policy = TabularPolicy(d, args.max_parents)
    else:
        hidden = tuple(int(h) for h in args.hidden.split(","))
        policy = MlpPolicy(d, hidden, seed=args.seed, max_parents=args.max_parents)
    if args.loss == "modified-db":
        cfg = _train_config(args)
        result = train_modified_db(d, binding, policy, cfg, exact)
    else:
        over = {"objective": "tb" if args.loss == "tb" else "reverse_kl", "loss": "squared",
                "batch_size": args.batch_size or 16}
        if args.loss == "reverse-kl":
            over["off_policy"] = False
        cfg = _train_config(args, **over)
        result = train_tb(d, binding, policy, cfg, exact)
        policy.log_z = result.log_z
    save_checkpoint(policy, out / "policy", {"loss": args.loss, "d": d})
    write_trace_csv(result.trace, out / "trace.csv")
    summary = {"steps_done": result.steps_done, "stopped_early": result.stopped_early}
    if result.evaluations():
        summary["final_jsd"] = result.evaluations()[-1]["jsd"]
    _write_json(out / "summary.json", summary)
    return RunManifest("train", cfg.to_dict(), args.seed, _version(), inputs,
                       ["policy.bin", "policy.json", "trace.csv", "summary.json"])


def _explicit_env(name: str):
    if name.startswith("galton"):
        try:
            rows = int(name[len("galton"):])
        except ValueError:
            raise UsageError(f"bad galton env {name!r}; use e.g. galton2") from None
        return galton_env(rows), {}
    path = Path(name)
    if not path.exists():
        raise UsageError(f"unknown env {name!r}: expected dag, galton<rows> or an env spec file")
    return explicit_env(path.read_text()), {str(path): _digest(path)}


def _train_explicit(args, out) -> RunManifest:
    if args.loss not in ("tb", "sql"):
        raise UsageError("explicit environments support the tb and sql losses")
    env, inputs = _explicit_env(args.env)
    if args.loss == "tb":
        cfg = _train_config(args, loss="squared", batch_size=args.batch_size or 16,
                            lr=args.lr if args.lr is not None else 0.05)
        model = TabularFlowModel(env)
        result = train_tb(env, None, model, cfg)
        policy = model
        trace = result.trace
    else:
        cfg = _train_config(args, lr=args.lr if args.lr is not None else 0.1)
        reward = corrected_reward(env, alpha=args.alpha, scheme="sparse")
        result = train_sql(env, reward, args.alpha, cfg)
        policy = result.policy
        trace = [{"step": i + 1, "abs_td": v} for i, v in enumerate(result.trace)]
    dist = terminating_distribution_dp(env, policy)
    with open(out / "distribution.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "probability"])
        for x in sorted(dist, key=lambda k: k.decode()):
            w.writerow([x.decode(), repr(dist[x])])
    write_trace_csv(trace, out / "trace.csv")
    return RunManifest("train", cfg.to_dict(), args.seed, _version(), inputs,
                       ["distribution.csv", "trace.csv"])


def cmd_evaluate(args) -> RunManifest:
    kinds = _feature_kinds(args.features)
    for p in (args.checkpoint.with_suffix(".json"), args.checkpoint.with_suffix(".bin")):
        if not p.exists():
            raise UsageError(f"missing input {p}")
    ds, cache, prior, d, inputs = _load_scoring(args)
    policy, info = load_checkpoint(args.checkpoint)
    inputs[str(args.checkpoint.with_suffix(".bin"))] = _digest(args.checkpoint.with_suffix(".bin"))
    if info["d"] != d:
        raise UsageError(f"checkpoint has d={info['d']} but the data has d={d}")
    out = args.out_dir
    rng_s, rng_c, rng_e = make_rng(args.seed, 1), make_rng(args.seed, 2), make_rng(args.seed, 3)
    binding = ScoreBinding(cache, d, prior)
    metrics = {}
    rows = sample_dags(policy, d, args.samples, rng_s, getattr(policy, "max_parents", None))
    samples = _rows_to_states(rows, d)
    exact = not args.sampled and d <= MAX_ENUM_D
    if exact:
        target = ExactTarget.build(binding, getattr(policy, "max_parents", None))
        ls, le = policy_tables(target.space, policy)
        p = np.exp(terminating_log_probs(target.space, ls, le))
        metrics["jsd"] = jsd(np.exp(target.log_posterior), p)
        reps = [features(p, k, space=target.space) for k in kinds]
    else:
        freq = {}
        for s in samples:
            k = s.key()
            freq[k] = freq.get(k, 0) + 1.0 / len(samples)
        reps = [features(freq, k, d=d) for k in kinds]
    outputs = _write_features(out, reps)
    if args.truth is not None:
        names = ds.names if ds is not None else [f"X{i}" for i in range(d)]
        g_star = datamod.read_edge_list(args.truth, names)
        inputs[str(args.truth)] = _digest(args.truth)
        edge = reps[kinds.index("edge")].matrix if "edge" in kinds else features(
            {s.key(): 1.0 / len(samples) for s in samples}, "edge", d=d).matrix
        eshd, au = structural_metrics(samples, g_star, edge)
        metrics["expected_shd"] = eshd
        metrics["auroc"] = au
    # correlation of log P_F^T estimates with log R over distinct sampled graphs
    seen, pairs = set(), []
    for s in samples:
        if s.adj in seen:
            continue
        seen.add(s.adj)
        est = estimate_log_pftop(policy, s, args.beam, args.mc, rng_e)
        lr = binding.log_reward_rows(np.array([s.adj], dtype=np.int64))[0]
        pairs.append((est.log_estimate, float(lr), s.key().hex()))
        if len(pairs) >= args.corr_samples:
            break
    with open(out / "correlation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "log_pf_top", "log_reward"])
        for a, b, k in pairs:
            w.writerow([k, repr(a), repr(b)])
    outputs.append("correlation.csv")
    try:
        rep = correlation_report([(a, b) for a, b, _ in pairs])
        metrics["correlation"] = asdict(rep)
    except ValueError as e:
        metrics["correlation"] = {"error": str(e)}
    _write_json(out / "metrics.json", metrics)
    outputs.append("metrics.json")
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return RunManifest("evaluate", cfg, args.seed, _version(), inputs, outputs)


def cmd_baseline(args) -> RunManifest:
    kinds = _feature_kinds(args.features)
    ds, cache, prior, d, inputs = _load_scoring(args, args.d)
    if args.burn_in is not None and not 0 <= args.burn_in < args.steps:
        raise UsageError("--burn-in must lie in [0, steps)")
    rng = make_rng(args.seed, 1)
    trace = baselines.structure_mc3(cache, d, args.steps, rng, prior, max_parents=args.max_parents,
                                    burn_in=args.burn_in, thin=args.thin)
    out = args.out_dir
    baselines.write_trace_csv(trace, out / "trace.csv")
    freq = trace.frequencies()
    reps = [features(freq, k, d=d) for k in kinds]
    outputs = ["trace.csv"] + _write_features(out, reps)
    metrics = {"acceptance_rate": trace.acceptance_rate, "n_samples": len(trace.states)}
    if d <= MAX_ENUM_D:
        post = exact_posterior(cache, d, prior)
        p = np.array([freq.get(k, 0.0) for k in post.log_probs])
        metrics["jsd"] = jsd(np.exp(np.array(list(post.log_probs.values()))), p)
    if args.truth is not None:
        names = ds.names if ds is not None else [f"X{i}" for i in range(d)]
        g_star = datamod.read_edge_list(args.truth, names)
        inputs[str(args.truth)] = _digest(args.truth)
        edge = features(freq, "edge", d=d).matrix
        eshd, au = structural_metrics(trace.states, g_star, edge)
        metrics["expected_shd"] = eshd
        metrics["auroc"] = au
    _write_json(out / "metrics.json", metrics)
    outputs.append("metrics.json")
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return RunManifest("baseline", cfg, args.seed, _version(), inputs, outputs)


def cmd_enumerate(args) -> RunManifest:
    _, cache, prior, d, inputs = _load_scoring(args, args.d)
    space = DagSpace(d)
    table = exact_posterior(cache, d, prior, space)
    out = args.out_dir
    (out / "posterior.tsv").write_text(table.to_text())
    outputs = ["posterior.tsv"]
    _write_json(out / "evidence.json", {"log_evidence": table.log_evidence, "n_dags": len(space)})
    outputs.append("evidence.json")
    if args.policy_out:
        pol = ExactDagPolicy.from_rewards(space, table.array(space)).to_tabular()
        pol.log_z = 0.0
        save_checkpoint(pol, out / "exact_policy", {"source": "enumeration"})
        outputs += ["exact_policy.bin", "exact_policy.json"]
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return RunManifest("enumerate", cfg, args.seed, _version(), inputs, outputs)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate,
            "baseline": cmd_baseline, "enumerate": cmd_enumerate}


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as e:
        return int(e.code or 0)
    except (UsageError, OSError) as e:
        print(f"gfndag: error: {e}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        manifest = COMMANDS[args.command](args)
    except UsageError as e:
        print(f"gfndag {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ArithmeticError, ValueError, EnumerationTooLarge, EnvSpecError, OSError) as e:
        print(f"gfndag {args.command}: failed: {e}", file=sys.stderr)
        return 3
    if not manifest.config:
        manifest.config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    manifest.wall_clock_s = time.perf_counter() - t0
    manifest.write(args.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
