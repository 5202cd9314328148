"""Command-line entry point: ``probekit <command> [flags]``.

Every command accepts ``--config FILE``, a JSON object whose flat keys are
flag names (``"learning-rate": 0.01``); explicit flags override it. Exit
status is 0 on success, 1 on invalid input and 2 on I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cascade as cas
from . import stats as st
from .datasets import (
    FormatError,
    ManifestError,
    SyntheticConfig,
    gen_synthetic,
    labels_of,
    load_examples,
    load_manifest,
    roles_of,
)
from .evaluation import (
    SCHEMES,
    eval_rates,
    score_dataset,
    select_threshold,
    weighted_error,
    write_results_table,
    write_scores,
)
from .probes import Architecture, ProbeSpec, load_params, predict_logits, save_params
from .streaming import stream_sequence
from .training import (
    TrainConfig,
    default_workers,
    read_sweep_table,
    run_seed_sweep,
    select_best_seed,
    sweep_summary,
    train_probe,
    write_sweep_table,
)

log = logging.getLogger("probekit")


class CliError(Exception):
    def __init__(self, field: str, message: str, code: int = 1):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("arguments", message, 1)


def _parse_seeds(text: str) -> list[int]:
    """'0-9', '1,3,5' or a mix such as '0-2,7'."""
    if isinstance(text, (list, tuple)):
        text = ",".join(str(int(t)) for t in text)
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("empty seed list")
    return sorted(set(seeds))


def _parse_widths(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(w) for w in text)
    return tuple(int(w) for w in str(text).split(",") if w.strip())


# ---------------------------------------------------------------------------
# argument helpers


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON file of flag values")
    p.add_argument("--out", default="out", help="output directory")


def _add_spec(p):
    p.add_argument("--manifest", default=None, help="dataset manifest.tsv")
    p.add_argument("--spec", default="multimax", help="architecture name or probe-spec JSON file")
    p.add_argument("--mlp-widths", default="100,100", help="comma-separated MLP widths")
    p.add_argument("--heads", type=int, default=10, help="number of heads")
    p.add_argument("--window", type=int, default=10, help="rolling window width")
    p.add_argument("--epochs", type=int, default=1000, help="full-batch AdamW steps")
    p.add_argument("--learning-rate", type=float, default=1e-4, help="AdamW learning rate")
    p.add_argument("--weight-decay", type=float, default=3e-3, help="AdamW weight decay")
    p.add_argument("--weights", choices=sorted(SCHEMES), default="main", help="weighted-error preset")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="probekit", description="Activation-probe experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic activation dataset", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--activation-dim", type=int, default=64, help="activation dimension d")
    p.add_argument("--scale", type=float, default=1.0, help="multiply every split count by this")
    p.add_argument("--workers", type=int, default=1, help="file-writing threads")

    p = sub.add_parser("train", help="train one probe", formatter_class=fmt)
    _add_common(p)
    _add_spec(p)
    p.add_argument("--seed", type=int, default=0, help="initialization seed")

    p = sub.add_parser("sweep", help="train one probe per seed and pick the best", formatter_class=fmt)
    _add_common(p)
    _add_spec(p)
    p.add_argument("--seeds", default="0-9", help="seed list, e.g. '0-9' or '0,3,5'")
    p.add_argument("--workers", type=int, default=default_workers(), help="parallel training processes")

    p = sub.add_parser("eval", help="per-role rates and weighted error", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--manifest", default=None, help="dataset manifest.tsv")
    p.add_argument("--params", default=None, help="trained probe .npz")
    p.add_argument("--weights", choices=sorted(SCHEMES), default="main", help="weighted-error preset")

    p = sub.add_parser("cascade", help="optimal probe -> expensive-model cascade", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--manifest", default=None, help="dataset manifest.tsv")
    p.add_argument("--params", default=None, help="trained probe .npz")
    p.add_argument("--expensive-scores", default=None, help="id/decision[/probability] TSV")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to evaluate")
    p.add_argument("--cost-multiplier", type=float, default=cas.DEFAULT_COST_MULTIPLIER,
                   help="expensive-model cost relative to the probe")
    p.add_argument("--cost-weight", type=float, default=0.0, help="objective weight on cost")
    p.add_argument("--weights", choices=sorted(SCHEMES), default="main", help="weighted-error preset")

    p = sub.add_parser("stats", help="best-of-k significance and KDE confidence intervals", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--sweep", action="append", default=None, metavar="NAME=PATH",
                   help="named sweep table (repeatable)")
    p.add_argument("--iterations", type=int, default=20000, help="bootstrap iterations")
    p.add_argument("--k", type=int, default=100, help="best-of-k sample size")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")

    p = sub.add_parser("stream-check", help="compare streaming and batch logits", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--manifest", default=None, help="dataset manifest.tsv")
    p.add_argument("--params", default=None, help="trained probe .npz")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to check")
    p.add_argument("--limit", type=int, default=50, help="maximum number of sequences")
    return parser


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise CliError("--config", str(e), 2) from None
    except json.JSONDecodeError as e:
        raise CliError("--config", f"invalid JSON: {e}") from None
    if not isinstance(data, dict):
        raise CliError("--config", "expected a JSON object of flag values")
    known = vars(args)
    defaults = {}
    for key, value in data.items():
        dest = key.lstrip("-").replace("-", "_").replace(".", "_")
        if dest not in known or dest in ("command", "config"):
            raise CliError(f"--config key {key!r}", "not a flag of this command")
        defaults[dest] = value
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands


def _require(args, name):
    value = getattr(args, name.replace("-", "_"))
    if value in (None, "", []):
        raise CliError(f"--{name}", "is required")
    return value


def _existing(args, name) -> Path:
    path = Path(_require(args, name))
    if not path.exists():
        raise CliError(f"--{name}", f"{path} does not exist", 2)
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return out


def _load_data(args):
    manifest = load_manifest(_existing(args, "manifest"))
    return {s: load_examples(manifest, s) for s in ("train", "val", "test")}


def _spec_from_args(args, input_dim: int) -> ProbeSpec:
    src = str(args.spec)
    path = Path(src)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise CliError("--spec", f"{path} does not exist", 2)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise CliError("--spec", f"invalid JSON: {e}") from None
        data.setdefault("input_dim", input_dim)
        spec = ProbeSpec.from_dict(data)
    else:
        try:
            arch = Architecture(src)
        except ValueError:
            names = ", ".join(a.value for a in Architecture)
            raise CliError("--spec", f"unknown architecture {src!r}; choose from {names}") from None
        spec = ProbeSpec(arch, input_dim, mlp_widths=_parse_widths(args.mlp_widths),
                         heads=args.heads, window=args.window)
    if spec.input_dim != input_dim:
        raise CliError("--spec", f"input_dim {spec.input_dim} does not match data dimension {input_dim}")
    return spec


def _train_config(args, seed=0) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, learning_rate=args.learning_rate,
                       weight_decay=args.weight_decay, seed=seed)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> None:
    out = _out_dir(args)
    cfg = SyntheticConfig(activation_dim=args.activation_dim, seed=args.seed)
    if args.scale != 1.0:
        if not args.scale > 0:
            raise CliError("--scale", "must be positive")
        cfg = cfg.scaled(args.scale)
    manifest = gen_synthetic(cfg, out, workers=args.workers)
    log.info("wrote %d examples to %s", len(manifest.entries), out)
    print(out / "manifest.tsv")


def cmd_train(args) -> None:
    data = _load_data(args)
    out = _out_dir(args)
    spec = _spec_from_args(args, data["train"][0].X.shape[1])
    scheme = SCHEMES[args.weights]
    result = train_probe(spec, data["train"], _train_config(args, args.seed))
    policy = select_threshold(score_dataset(result.params, data["val"]), labels_of(data["val"]),
                              roles_of(data["val"]), scheme)
    save_params(out / "params.npz", result.params)
    _write_json(out / "train.json", {
        "spec": spec.to_dict(),
        "seed": args.seed,
        "tau": policy.tau,
        "validation_loss": policy.validation_loss,
        "final_train_loss": result.history[-1] if result.history else None,
    })
    log.info("trained %s seed %d", spec.architecture.value, args.seed)
    print(out / "params.npz")


def cmd_sweep(args) -> None:
    data = _load_data(args)
    out = _out_dir(args)
    spec = _spec_from_args(args, data["train"][0].X.shape[1])
    try:
        seeds = _parse_seeds(args.seeds)
    except ValueError as e:
        raise CliError("--seeds", str(e)) from None
    if args.workers < 1:
        raise CliError("--workers", "must be >= 1")
    scheme = SCHEMES[args.weights]
    sweep = run_seed_sweep(spec, data, _train_config(args), seeds, scheme, workers=args.workers, keep_params=True)
    write_sweep_table(out / "sweep.tsv", sweep, params_dir=out / "params")
    best = select_best_seed(sweep)
    summary = sweep_summary(sweep)
    _write_json(out / "best.json", {
        "best_seed": best.seed,
        "tau": best.tau,
        "validation_loss": best.validation_loss,
        "test_loss": best.test_loss,
        "median_test_loss": summary.median,
        "oracle_test_loss": summary.oracle,
        "params": str(out / "params" / f"seed_{best.seed}.npz"),
    })
    print(out / "sweep.tsv")


def _load_probe(args):
    path = _existing(args, "params")
    try:
        return load_params(path)
    except (OSError, KeyError, ValueError) as e:
        raise CliError("--params", f"cannot read probe parameters: {e}", 2) from None


def cmd_eval(args) -> None:
    data = _load_data(args)
    params = _load_probe(args)
    out = _out_dir(args)
    scheme = SCHEMES[args.weights]
    val, test = data["val"], data["test"]
    policy = select_threshold(score_dataset(params, val), labels_of(val), roles_of(val), scheme)
    test_probs = score_dataset(params, test)
    report = eval_rates(test_probs, labels_of(test), roles_of(test), policy.tau)
    constant = eval_rates(np.zeros(len(test)), labels_of(test), roles_of(test), 0.5)
    write_results_table(out / "results.tsv", {"probe": report, "all_negative": constant}, scheme)
    ids, probs, labels, roles, splits = [], [], [], [], []
    for split in ("train", "val", "test"):
        ex = data[split]
        ids += [e.id for e in ex]
        probs += list(score_dataset(params, ex))
        labels += list(labels_of(ex))
        roles += roles_of(ex)
        splits += [split] * len(ex)
    write_scores(out / "scores.tsv", ids, probs, labels, roles, splits)
    ci = st.binomial_ci(report, scheme)
    _write_json(out / "summary.json", {
        "tau": policy.tau,
        "validation_loss": policy.validation_loss,
        "test_error": weighted_error(report, scheme),
        "test_error_ci": [ci.low, ci.high],
        "all_negative_test_error": weighted_error(constant, scheme),
        "weights": scheme.name,
    })
    print(out / "results.tsv")


def cmd_cascade(args) -> None:
    score_path = _existing(args, "expensive-scores")
    manifest = load_manifest(_existing(args, "manifest"))
    params = _load_probe(args)
    out = _out_dir(args)
    scheme = SCHEMES[args.weights]
    if not args.cost_multiplier > 0:
        raise CliError("--cost-multiplier", "must be positive")
    examples = load_examples(manifest, args.split)
    if not examples:
        raise CliError("--split", f"split {args.split!r} is empty")
    try:
        scores = cas.read_expensive_scores(score_path)
    except ValueError as e:
        raise CliError("--expensive-scores", str(e)) from None
    missing = [e.id for e in examples if e.id not in scores]
    if missing:
        raise CliError("--expensive-scores", f"no decision for {len(missing)} examples, e.g. {missing[0]!r}")
    logits = predict_logits(params, [e.X for e in examples])
    llm = np.array([scores[e.id][0] for e in examples])
    labels, roles = labels_of(examples), roles_of(examples)
    samples = cas.sample_losses(logits, labels, llm, roles, scheme, ids=[e.id for e in examples])
    front = cas.cascade_frontier(samples)
    cas.write_frontier(out / "frontier.tsv", front, args.cost_multiplier)
    vertex, policy = cas.optimal_vertex(front, args.cost_weight, 1.0, args.cost_multiplier)
    realized = cas.apply_cascade(logits, llm, labels, policy, roles, scheme, args.cost_multiplier)
    _write_json(out / "cascade.json", {
        "optimal": {
            "t0": policy.t0, "t1": policy.t1, "saved": vertex.saved,
            "frontier_error": cas.vertex_error(front, vertex),
            "realized_error": realized.weighted_error,
            "deferral_fraction": realized.deferral_fraction,
            "cost": realized.cost,
        },
        "pure_probe_error": float(front.base_error + front.vertices[-1].added_error)
        if front.vertices[-1].saved == front.n else None,
        "pure_expensive_error": float(front.base_error),
        "cost_multiplier": args.cost_multiplier,
    })
    print(out / "frontier.tsv")


def cmd_stats(args) -> None:
    if not args.sweep:
        raise CliError("--sweep", "at least one NAME=PATH is required")
    sweeps = {}
    for item in args.sweep:
        if "=" not in item:
            raise CliError("--sweep", f"expected NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        if not Path(path).exists():
            raise CliError("--sweep", f"{path} does not exist", 2)
        sweeps[name] = read_sweep_table(path)
    out = _out_dir(args)
    try:
        config = st.BootstrapConfig(iterations=args.iterations, k=args.k, seed=args.seed)
    except ValueError as e:
        raise CliError("--iterations/--k", str(e)) from None
    st.write_significance_table(out / "significance.tsv", st.significance_matrix(sweeps, config))
    cis = {}
    for name, sweep in sweeps.items():
        try:
            cis[name] = st.kde_bootstrap_ci(sweep, config)
        except ValueError as e:
            log.warning("no CI for %s: %s", name, e)
    st.write_ci_report(out / "ci.tsv", cis)
    print(out / "significance.tsv")


def cmd_stream_check(args) -> None:
    manifest = load_manifest(_existing(args, "manifest"))
    params = _load_probe(args)
    out = _out_dir(args)
    if args.limit < 1:
        raise CliError("--limit", "must be >= 1")
    examples = load_examples(manifest, args.split)[: args.limit]
    if not examples:
        raise CliError("--split", f"split {args.split!r} is empty")
    batch = predict_logits(params, [e.X for e in examples]) - params.bias
    dev = [abs(stream_sequence(params, e.X)[-1] - b) for e, b in zip(examples, batch)]
    _write_json(out / "stream_check.json", {
        "sequences": len(examples),
        "max_abs_deviation": float(max(dev)),
        "architecture": params.spec.architecture.value,
    })
    print(f"max |stream - batch| = {max(dev):.3e}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "cascade": cmd_cascade,
    "stats": cmd_stats,
    "stream-check": cmd_stream_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except FormatError as e:
        print(f"error: activation file: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {getattr(e, 'filename', None) or 'io'}: {e.strerror or e}", file=sys.stderr)
        return 2
    except ManifestError as e:
        print(f"error: --manifest: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    finally:
        for h in list(log.handlers):
            log.removeHandler(h)
            h.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
