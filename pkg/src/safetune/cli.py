"""Command-line entry point.

Every flag is a config key. The value used is, in increasing precedence: the
built-in default, the ``--config`` file, ``--set key=value`` pairs, then the
dedicated flag. The resolved key=value set is written to ``config.txt`` in the
output directory before anything else, and passing that file back through
``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import VOCAB, DatasetSpec, build_dataset, load_dataset, save_dataset
from .errors import ContractError, ParseError, SchemaError
from .evalsuite import experiments as ex
from .evalsuite.metrics import evaluate
from .model import embedding_view, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, base_for, config_from_dict, config_to_dict, default_heldout, format_kv, metrics_csv, parse_kv, train

log = logging.getLogger("safetune")

CONFIG_NAME = "config.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _train_keys() -> dict[str, str]:
    return {k: str(v) for k, v in config_to_dict(TrainConfig()).items()}


# keys each subcommand accepts, with their defaults
COMMAND_KEYS: dict[str, dict[str, str]] = {
    "gen-data": {"seed": "0", "n_safe": "4000", "n_toxic": "20", "contrastive_count": "0"},
    "train": {"data": "", **_train_keys()},
    "eval": {"checkpoint": "", "data": "", "seed": "0"},
    "sweep": {"toxic_counts": "20,10,6,2", "methods": "EMD,NLCL,STL", "seeds": "0,1,2", "n_safe": "4000", "jobs": "1",
              **{k: v for k, v in _train_keys().items() if k not in ("method", "lam", "seed")}},
    "verify-bound": {"instances": "1000", "vocab": "4,8,16,32,64", "dim": "16", "seed": "0", "timings": "false"},
    "curve": {"data": "", "points": "6", "methods": "EMD,STL", **{k: v for k, v in _train_keys().items() if k != "method"}},
    "contrastive": {"n_safe": "4000", "n_toxic": "20", "contrastive_count": "400", **_train_keys()},
    "export": {"checkpoint": ""},
}

# dedicated flags: (flag, config key, help)
FLAGS: dict[str, list[tuple[str, str, str]]] = {
    "gen-data": [("--seed", "seed", "dataset seed"), ("--n-safe", "n_safe", ""), ("--n-toxic", "n_toxic", ""),
                 ("--contrastive-count", "contrastive_count", "")],
    "train": [("--data", "data", "training set (JSONL)"), ("--method", "method", "SFT, EMD, NLCL or STL"),
              ("--lambda", "lam", "penalty weight"), ("--steps", "steps", ""), ("--seed", "seed", "")],
    "eval": [("--checkpoint", "checkpoint", ""), ("--data", "data", "training set, for the disjointness check"),
             ("--seed", "seed", "held-out seed")],
    "sweep": [("--methods", "methods", ""), ("--toxic-counts", "toxic_counts", ""), ("--seeds", "seeds", ""),
              ("--steps", "steps", ""), ("--jobs", "jobs", "parallel seed groups")],
    "verify-bound": [("--instances", "instances", "instances per vocabulary size"), ("--vocab", "vocab", "comma-separated sizes"),
                     ("--seed", "seed", ""), ("--timings", "timings", "fill solve_time_ns (true/false)")],
    "curve": [("--data", "data", ""), ("--steps", "steps", ""), ("--seed", "seed", ""), ("--lambda", "lam", ""),
              ("--points", "points", "checkpoints per series")],
    "contrastive": [("--method", "method", ""), ("--lambda", "lam", ""), ("--steps", "steps", ""), ("--seed", "seed", ""),
                    ("--contrastive-count", "contrastive_count", "")],
    "export": [("--checkpoint", "checkpoint", "")],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safetune", description="Toxicity-avoiding fine-tuning laboratory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMAND_KEYS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value file")
        p.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        for flag, key, help_ in FLAGS[name]:
            p.add_argument(flag, dest=f"k_{key}", default=None, help=help_ or None)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict[str, str]:
    values = dict(COMMAND_KEYS[command])
    layers = []
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read --config {args.config}: {exc.strerror}") from exc
        layers.append(parse_kv(text, args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        layers.append({k.strip(): v.strip()})
    layers.append({key: getattr(args, f"k_{key}") for _, key, _ in FLAGS[command] if getattr(args, f"k_{key}") is not None})
    for layer in layers:
        for k, v in layer.items():
            if k not in values:
                raise UsageError(f"{command}: unknown config key {k!r}")
            values[k] = v
    return values


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


def _train_cfg(values: dict[str, str], **fixed) -> TrainConfig:
    keys = set(_train_keys())
    return config_from_dict({**{k: v for k, v in values.items() if k in keys}, **fixed})


def _require(values: dict[str, str], key: str, flag: str) -> str:
    if not values[key]:
        raise UsageError(f"missing required {flag}")
    return values[key]


def _load_data(path: str, flag: str = "--data"):
    if not Path(path).exists():
        raise UsageError(f"{flag} {path}: no such file")
    return load_dataset(path)


# ---------------------------------------------------------------- commands


def cmd_gen_data(v, out: Path) -> int:
    spec = DatasetSpec(n_safe=int(v["n_safe"]), n_toxic=int(v["n_toxic"]), seed=int(v["seed"]), contrastive_count=int(v["contrastive_count"]))
    data = build_dataset(spec)
    save_dataset(data, out / "train.jsonl")
    held = default_heldout(spec.seed, data)
    for part in ("toxic", "safe", "seemingly"):
        save_dataset(getattr(held, part), out / f"heldout_{part}.jsonl")
    log.info("wrote %d training examples to %s", len(data), out)
    return 0


def cmd_train(v, out: Path) -> int:
    path = _require(v, "data", "--data")
    data = _load_data(path)
    cfg = _train_cfg(v)
    base = base_for(cfg)
    res = train(cfg, data, heldout=default_heldout(cfg.seed, data), init=base)
    (out / "metrics.csv").write_text(metrics_csv(res.metrics))
    save_checkpoint(res.params, out / "checkpoint.json", extra={"method": cfg.method, "lam": res.lam, "steps": cfg.steps})
    log.info("final %s", res.metrics[-1])
    return 0


def cmd_eval(v, out: Path) -> int:
    params = load_checkpoint(_require(v, "checkpoint", "--checkpoint"))
    data = _load_data(v["data"]) if v["data"] else []
    rep = evaluate(params, default_heldout(int(v["seed"]), data), training=data)
    cols = list(rep.as_dict())
    (out / "eval.csv").write_text(ex._csv(cols, [rep.as_dict()]))
    log.info("%s", rep)
    return 0


def cmd_sweep(v, out: Path, jobs: int) -> int:
    spec = ex.SweepSpec(
        toxic_counts=_ints(v["toxic_counts"]), methods=_names(v["methods"]), seeds=_ints(v["seeds"]),
        n_safe=int(v["n_safe"]), train=_train_cfg(v),
    )
    rows = ex.data_efficiency_sweep(spec, jobs=jobs, base_cache=out / "bases")
    (out / "sweep.csv").write_text(ex.sweep_csv(rows))
    table = ex.sweep_table(rows)
    (out / "sweep_table.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_verify_bound(v, out: Path) -> int:
    rows = []
    for n in _ints(v["vocab"]):
        rows += ex.verify_bound(int(v["instances"]), n, int(v["seed"]), dim=int(v["dim"]))
    (out / "bound.csv").write_text(ex.bound_csv(rows, timings=_bool(v["timings"])))
    violations = sum(r["lower_bound"] > r["exact_emd"] + 1e-9 for r in rows)
    print(f"{len(rows)} instances, {violations} bound violations, max gap {max(r['gap'] for r in rows):.6g}")
    return 0 if violations == 0 else 2


def cmd_curve(v, out: Path) -> int:
    data = _load_data(_require(v, "data", "--data"))
    methods = _names(v["methods"])
    cfg = _train_cfg(v, method=methods[0])
    held = default_heldout(cfg.seed, data)
    cks = ex.curve_checkpoints(cfg, data, base_for(cfg), methods=methods, n_points=int(v["points"]))
    points = ex.over_refusal_curve(cks, held, training=data)
    (out / "curve.csv").write_text(ex.curve_csv(points))
    return 0


def cmd_contrastive(v, out: Path) -> int:
    cfg = _train_cfg(v)
    spec = DatasetSpec(n_safe=int(v["n_safe"]), n_toxic=int(v["n_toxic"]), seed=cfg.seed, contrastive_count=int(v["contrastive_count"]))
    result = ex.contrastive_experiment(cfg, spec)
    (out / "contrastive.csv").write_text(ex.contrastive_csv(result))
    return 0


def cmd_export(v, out: Path) -> int:
    params = load_checkpoint(_require(v, "checkpoint", "--checkpoint"))
    view = embedding_view(params)
    dim = view.dim
    lines = ["token,id,raw_norm," + ",".join(f"u{k}" for k in range(dim))]
    norms = np.linalg.norm(view.raw, axis=1)
    for i in range(view.vocab_size):
        name = VOCAB.names[i] if i < len(VOCAB) else f"tok{i}"
        lines.append(f"{name},{i},{norms[i]!r}," + ",".join(repr(float(x)) for x in view.unit[i]))
    (out / "embeddings.csv").write_text("\n".join(lines) + "\n")
    return 0


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        values = resolve(args.command, args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ParseError as exc:
        print(f"safetune: {exc}", file=sys.stderr)
        return 1

    out = Path(args.out) if args.out else Path("runs") / args.command
    try:
        if args.command == "train":
            _require(values, "data", "--data")
        if args.command == "sweep":
            jobs = int(values.pop("jobs"))
        out.mkdir(parents=True, exist_ok=True)
        # jobs changes scheduling only, never results, so it stays out of the logged config
        (out / CONFIG_NAME).write_text(format_kv(values))
        handler = {
            "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "verify-bound": cmd_verify_bound,
            "curve": cmd_curve, "contrastive": cmd_contrastive, "export": cmd_export,
        }
        if args.command == "sweep":
            return cmd_sweep(values, out, jobs)
        return handler[args.command](values, out)
    except UsageError as exc:
        print(f"safetune {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ContractError, ParseError, SchemaError, ValueError) as exc:
        print(f"safetune {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report, don't trace
        log.exception("run failed")
        print(f"safetune {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
