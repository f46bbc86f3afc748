"""Command line entry point: ``aclql <subcommand> [flags]``.

Run-config flags are generated from :class:`RunConfig`; values resolve as
flag > ``--config`` JSON file > ``--preset`` (``full`` or ``desk``).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .approximator import MLP, ApproximatorSpec, ParameterBlock, load_checkpoint, save_checkpoint
from .core import FORMAT_VERSION, DatasetFormatError, RunConfig, compute_stats, load_dataset, save_dataset
from .envs import QUALITIES, anchors_for, gen_dataset, normalized_score
from .quality import annotate_dataset, load_sidecar, quality_array, save_sidecar
from .tabular import run_corpus
from .trainer import evaluate_actor, pretrain_bc, read_metrics, train, write_json

log = logging.getLogger("aclql")

ALIASES = {"lambda_quality": ["--lambda"], "train_steps": ["--steps"]}


class UsageError(Exception):
    """Bad input detected after parsing; maps to exit code 2."""


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"hidden must be comma-separated integers, got {text!r}") from exc


def _optional_float(text: str) -> float | None:
    return None if text.lower() in ("none", "null") else float(text)


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run config")
    g.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    g.add_argument("--preset", choices=("full", "desk"), default="full")
    for f in fields(RunConfig):
        names = [f"--{f.name.replace('_', '-')}", *ALIASES.get(f.name, [])]
        kw: dict[str, Any] = {"dest": f"cfg_{f.name}", "default": None}
        if f.name == "hidden":
            kw["type"] = _parse_hidden
        elif f.name == "weight_clamp":
            kw["type"] = _optional_float
        elif f.type in (bool, "bool"):
            kw["action"] = argparse.BooleanOptionalAction
        elif f.type in (int, "int"):
            kw["type"] = int
        elif f.type in (float, "float"):
            kw["type"] = float
        else:
            kw["type"] = str
        g.add_argument(*names, **kw)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, Any] = (RunConfig.desk() if args.preset == "desk" else RunConfig()).to_dict()
    if args.config is not None:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_values, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = set(file_values) - set(values)
        if unknown:
            raise UsageError(f"unknown config fields: {sorted(unknown)}")
        values.update(file_values)
    for f in fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            values[f.name] = v
    try:
        return RunConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _params_hash(params: dict) -> str:
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:16]


def _load(path: Path):
    if not Path(path).exists():
        raise UsageError(f"file not found: {path}")
    try:
        return load_dataset(path)
    except DatasetFormatError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _load_quality(path: Path, dataset) -> np.ndarray:
    if not Path(path).exists():
        raise UsageError(f"file not found: {path}")
    _, rows = load_sidecar(path)
    arr = dataset.arrays
    if len(rows) != dataset.num_transitions:
        raise UsageError(f"quality file has {len(rows)} rows, dataset has {dataset.num_transitions} transitions")
    for k, r in enumerate(rows):
        if r.episode_id != arr["episode_ids"][k] or r.step_index != arr["step_indices"][k]:
            raise UsageError(f"quality row {k} does not match dataset transition order")
    return quality_array(rows)


def mlp_from_arrays(arrays: dict[str, np.ndarray], prefix: str, head: str, sigma: float | None = None) -> MLP:
    """Rebuild a network from checkpoint arrays, inferring the layer sizes."""
    n = 0
    while f"{prefix}.W{n}" in arrays:
        n += 1
    if n == 0:
        raise UsageError(f"checkpoint has no '{prefix}' network")
    shapes = [arrays[f"{prefix}.W{i}"].shape for i in range(n)]
    out = shapes[-1][1] // 2 if head == "tanh-gaussian" else shapes[-1][1]
    spec = ApproximatorSpec(shapes[0][0], out, tuple(s[1] for s in shapes[:-1]), head, sigma)
    blocks = {}
    for i in range(n):
        for kind in ("W", "b"):
            blocks[f"{kind}{i}"] = ParameterBlock(f"{kind}{i}", arrays[f"{prefix}.{kind}{i}"].copy())
    return MLP(spec, blocks)


# --- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    params = {"env": args.env, "quality": args.quality, "episodes": args.episodes, "seed": args.seed, "gamma": args.gamma}
    ds = gen_dataset(args.env, args.quality, args.episodes, args.seed, args.gamma)
    save_dataset(ds, args.out, {"quality": args.quality, "seed": args.seed, "config_hash": _params_hash(params)})
    log.info("wrote %d transitions to %s", ds.num_transitions, args.out)
    return 0


def cmd_quality(args) -> int:
    if args.cfg_nstep is not None and args.cfg_quality_mode is None:
        args.cfg_quality_mode = "nstep-sarsa"   # an explicit --nstep asks for n-step returns
    cfg = resolve_config(args)
    ds = _load(args.data)
    stats = compute_stats(ds, cfg.gamma)
    nstep = cfg.nstep if cfg.quality_mode == "nstep-sarsa" else None
    ann = annotate_dataset(ds, stats, cfg.lambda_quality, cfg.quality_mode, nstep, cfg.gamma)
    save_sidecar(args.out, ann, cfg.lambda_quality, cfg.quality_mode,
                 {"nstep": nstep, "config_hash": cfg.config_hash()})
    return 0


def cmd_train_bc(args) -> int:
    cfg = resolve_config(args)
    ds = _load(args.data)
    res = pretrain_bc(ds, cfg)
    save_checkpoint(args.out, {"behavior": res.behavior}, cfg.config_hash(), cfg.bc_steps)
    print(json.dumps({"version": FORMAT_VERSION, "config_hash": cfg.config_hash(), "final_mse": res.final_mse}))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = _load(args.data)
    behavior = None
    if args.behavior is not None:
        if not args.behavior.exists():
            raise UsageError(f"file not found: {args.behavior}")
        behavior = mlp_from_arrays(load_checkpoint(args.behavior)["arrays"], "behavior",
                                   "gaussian-fixed-sigma", cfg.bc_sigma)
        if behavior.spec.input_dim != ds.obs_dim or behavior.spec.output_dim != ds.action_dim:
            raise UsageError("behavior checkpoint dimensions do not match the dataset")
        if behavior.spec.hidden != cfg.hidden:
            raise UsageError(f"behavior checkpoint hidden sizes {behavior.spec.hidden} differ from config {cfg.hidden}")
    m = _load_quality(args.quality_file, ds) if args.quality_file is not None else None

    def progress(row):
        log.info("step %d avg_q %.4g eval %.4g", row["step"], row["avg_q_dataset"], row["eval_mean"])

    res = train(ds, cfg, args.run_dir, behavior=behavior, m=m, progress=progress)
    print(json.dumps({"version": FORMAT_VERSION, "config_hash": cfg.config_hash(), "run_dir": str(args.run_dir),
                      "selected_step": res.selected_step, "final": res.rows[-1]}))
    return 0


def _checkpoint_path(target: Path) -> Path:
    if target.is_dir():
        sel = target / "selected.json"
        if not sel.exists():
            raise UsageError(f"{target} has no selected.json")
        step = json.loads(sel.read_text())["step"]
        target = target / "checkpoints" / f"step_{step:08d}.json"
    if not target.exists():
        raise UsageError(f"file not found: {target}")
    return target


def cmd_eval(args) -> int:
    path = _checkpoint_path(args.checkpoint)
    ck = load_checkpoint(path)
    actor = mlp_from_arrays(ck["arrays"], "actor", "tanh-gaussian")
    mean, std = evaluate_actor(actor, args.env, args.episodes, args.seed)
    out = {"version": FORMAT_VERSION, "config_hash": ck["config_hash"], "step": ck["step"],
           "mean": mean, "std": std, "normalized_score": normalized_score(mean, anchors_for(args.env))}
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_verify_tabular(args) -> int:
    report = run_corpus(args.trials, args.seed, args.alpha)
    params = {"trials": args.trials, "seed": args.seed, "alpha": args.alpha}
    out = {"version": FORMAT_VERSION, "config_hash": _params_hash(params), **report}
    text = json.dumps(out, sort_keys=True)
    if args.out is not None:
        args.out.write_text(text + "\n")
    print(text)
    ok = not report["violations"] and report["checks_passed"] == report["checks"]
    return 0 if ok else 1


def cmd_export_plot(args) -> int:
    if not args.metrics.exists():
        raise UsageError(f"file not found: {args.metrics}")
    first = args.metrics.read_text().splitlines()[0]   # provenance line, carried over
    rows = read_metrics(args.metrics)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        if first.startswith("#"):
            fh.write(first + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "metric", "value"])
        for row in rows:
            for k, v in row.items():
                if k != "step":
                    w.writerow([row["step"], k, repr(v)])
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aclql", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a scripted offline dataset (JSONL)")
    s.add_argument("--env", default="pointmass")
    s.add_argument("--quality", choices=QUALITIES, required=True)
    s.add_argument("--episodes", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gamma", type=float, default=0.99)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("quality", help="annotate transitions with quality values (sidecar JSONL)")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    add_config_flags(s)
    s.set_defaults(func=cmd_quality)

    s = sub.add_parser("train-bc", help="fit the behavior policy and save its checkpoint")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    add_config_flags(s)
    s.set_defaults(func=cmd_train_bc)

    s = sub.add_parser("train", help="train and write a run directory")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--run-dir", type=Path, required=True)
    s.add_argument("--behavior", type=Path, help="behavior checkpoint from train-bc (otherwise trained here)")
    s.add_argument("--quality-file", type=Path, help="sidecar from the quality subcommand")
    add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint (or a run directory's selected model)")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--env", default="pointmass")
    s.add_argument("--episodes", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify-tabular", help="check the tabular operator properties on random MDPs")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--alpha", type=float, default=10.0)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_verify_tabular)

    s = sub.add_parser("export-plot", help="metrics CSV to long format (step, metric, value)")
    s.add_argument("--metrics", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_export_plot)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
