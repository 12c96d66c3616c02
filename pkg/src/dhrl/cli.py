"""Command-line front end for training runs and the measurement tools.

Subcommands: train, eval, rmedse, grad-bias, aggregate, histograms. Training
artifacts land in a per-run directory under the output root, which comes from
--out, the DHRL_OUT environment variable, or ./runs in that order. Config
files are flat key=value lines where the key prefix picks the section:
algo.* feeds the trainer hyperparameters, task.* overrides task constants,
and run.* holds run plumbing (task, steps). Explicit flags win over --set
entries, which win over the config file.
"""

import argparse
import csv
import json
import os
from pathlib import Path

import numpy as np

from .algo import AlgoConfig, Trainer
from .analysis import (
    HistogramRecorder,
    aggregate,
    grad_bias_sem,
    read_metrics,
    rmedse_experiment,
)
from .envs import evaluate

SECTIONS = ("algo", "task", "run")


def _coerce(text):
    value = text.strip()
    if value.lower() == "true":
        return True
    if value.lower() == "false":
        return False
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    return value


def parse_line(line):
    """Parse one `section.key=value` config line into (section, key, value)."""
    if "=" not in line:
        raise ValueError(f"expected key=value, got {line!r}")
    key, _, raw = line.partition("=")
    key = key.strip()
    if "." not in key:
        raise ValueError(f"expected section.key, got {key!r}")
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ValueError(f"unknown section in {key!r}; sections are {', '.join(SECTIONS)}")
    return section, name, _coerce(raw)


def parse_config(path):
    """Read a flat key=value config file; blank lines and # comments skipped."""
    sections = {s: {} for s in SECTIONS}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        section, name, value = parse_line(line)
        sections[section][name] = value
    return sections


def _seed_arg(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("seed must be >= 0")
    return value


def _variant_arg(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("variant must be 'D,T' (two integers)")
    try:
        dr, tr = int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError("variant must be 'D,T' (two integers)")
    if dr < 0 or tr < 0:
        raise argparse.ArgumentTypeError("variant horizons must be >= 0")
    return dr, tr


def _int_list_arg(text):
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        writer.writerows(rows)


def _fmt_cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


# -- train ---------------------------------------------------------------------------


def _merged_sections(args, parser):
    sections = parse_config(args.config) if args.config else {s: {} for s in SECTIONS}
    for entry in args.set or []:
        try:
            section, name, value = parse_line(entry)
        except ValueError as err:
            parser.error(str(err))
        sections[section][name] = value
    return sections


def _run_training(args, parser, listener=None):
    sections = _merged_sections(args, parser)
    run_opts = sections["run"]
    task_id = args.task or run_opts.get("task")
    if not task_id:
        parser.error("no task given; pass --task or set run.task in the config file")
    steps = args.steps if args.steps is not None else run_opts.get("steps", 30_000)
    algo_kw = dict(sections["algo"])
    if args.variant is not None:
        algo_kw["dr_horizon"], algo_kw["tr_horizon"] = args.variant
    try:
        config = AlgoConfig(**algo_kw)
    except TypeError as err:
        parser.error(f"bad algo config: {err}")
    except ValueError as err:
        parser.error(f"bad algo config: {err}")

    root = Path(args.out) if args.out else Path(os.environ.get("DHRL_OUT", "runs"))
    run_dir = root / f"{task_id}_d{config.dr_horizon}t{config.tr_horizon}_seed{args.seed}"
    try:
        trainer = Trainer(
            config,
            task_id,
            args.seed,
            run_dir=run_dir,
            task_overrides=sections["task"],
            update_listener=listener,
        )
    except KeyError as err:
        parser.error(f"unknown task {err}")
    except (TypeError, ValueError) as err:
        parser.error(str(err))
    trainer.train(steps)
    return trainer, run_dir


def cmd_train(args, parser):
    trainer, run_dir = _run_training(args, parser)
    print(f"{run_dir}: {trainer.env_step} env steps, {len(trainer.metrics_rows)} evaluation rows")
    return 0


def cmd_histograms(args, parser):
    recorder = HistogramRecorder(cadence=args.cadence, bins=args.bins)
    trainer, run_dir = _run_training(args, parser, listener=recorder)
    recorder.write(run_dir / "histograms.csv")
    print(
        f"{run_dir}: {trainer.env_step} env steps, "
        f"{len(recorder.rows)} histogram rows in histograms.csv"
    )
    return 0


# -- eval ----------------------------------------------------------------------------


def _load_run(path, parser):
    run_dir = Path(path)
    if not (run_dir / "manifest.json").exists():
        parser.error(f"{run_dir} is not a run directory (no manifest.json)")
    return Trainer.resume(run_dir)


def cmd_eval(args, parser):
    trainer = _load_run(args.run, parser)

    def act(state, rng):
        return trainer.policy.mean_np(state[None])[0]

    stats = evaluate(
        trainer.task,
        act,
        n_episodes=args.episodes,
        seed=np.random.SeedSequence([args.seed, trainer.env_step]),
    )
    payload = {
        "task": trainer.task_id,
        "env_step": trainer.env_step,
        "episodes": args.episodes,
        "mean": float(stats.mean),
        "std": float(stats.std),
        "returns": [float(r) for r in stats.returns],
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# -- analysis ------------------------------------------------------------------------


def cmd_rmedse(args, parser):
    run_dir = Path(args.run)
    if not (run_dir / "manifest.json").exists():
        parser.error(f"{run_dir} is not a run directory (no manifest.json)")
    arms = {"with-dr": [True], "without-dr": [False], "both": [True, False]}[args.arm]
    records = []
    for with_dr in arms:
        try:
            records.extend(
                rmedse_experiment(
                    run_dir,
                    with_dr=with_dr,
                    seeds=args.seeds,
                    probes=args.probes,
                    mc_rollouts=args.mc_rollouts,
                    iterations=args.iterations,
                    record_every=args.record_every,
                    mc_horizon=args.mc_horizon,
                    seed=args.seed,
                )
            )
        except ValueError as err:
            parser.error(str(err))
    fields = ["seed", "iteration", "value", "excluded", "probes", "rollouts", "with_dr"]
    out = Path(args.out) if args.out else run_dir / "rmedse.csv"
    _write_csv(
        out,
        fields,
        [[_fmt_cell(getattr(r, f)) for f in fields] for r in records],
    )
    print(f"{out}: {len(records)} records")
    return 0


def cmd_grad_bias(args, parser):
    trainer = _load_run(args.run, parser)
    if trainer.sampler is None:
        parser.error("checkpoint was trained without a model; gradient panel needs one")
    probe_rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0]))
    try:
        states = trainer.replay.sample(args.states, probe_rng).states
        records = grad_bias_sem(
            trainer.sampler,
            trainer.policy,
            trainer.critics,
            states,
            horizons=args.horizons,
            rollouts=args.rollouts,
            alpha=trainer.temp.alpha,
            gamma=trainer.config.gamma,
            t_star=args.t_star,
            seed=args.seed,
        )
    except ValueError as err:
        parser.error(str(err))
    fields = ["horizon", "bias", "sem", "states", "rollouts", "t_star"]
    out = Path(args.out) if args.out else Path(args.run) / "grad_bias.csv"
    _write_csv(
        out,
        fields,
        [[_fmt_cell(getattr(r, f)) for f in fields] for r in records],
    )
    print(f"{out}: {len(records)} horizons")
    return 0


def cmd_aggregate(args, parser):
    curves = []
    for path in args.runs:
        run_dir = Path(path)
        manifest_path = run_dir / "manifest.json"
        if not manifest_path.exists():
            parser.error(f"{run_dir} is not a run directory (no manifest.json)")
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        metrics = read_metrics(run_dir / "metrics.csv")
        curves.append(
            {
                "task": manifest["task"],
                "steps": metrics["env_step"],
                "returns": metrics["test_return_mean"],
            }
        )
    baselines = {}
    for item in args.baseline or []:
        task, sep, value = item.partition("=")
        if not sep:
            parser.error(f"baseline must be task=value, got {item!r}")
        try:
            baselines[task.strip()] = float(value)
        except ValueError:
            parser.error(f"baseline value in {item!r} is not a number")
    try:
        table = aggregate(curves, baselines, grid_points=args.grid_points, trim=args.trim)
    except ValueError as err:
        parser.error(str(err))
    fields = ["step_frac", "mean", "median", "iqm"]
    rows = [
        [_fmt_cell(table["grid"][i]), _fmt_cell(table["mean"][i]),
         _fmt_cell(table["median"][i]), _fmt_cell(table["iqm"][i])]
        for i in range(table["grid"].size)
    ]
    if args.out:
        _write_csv(args.out, fields, rows)
        skipped = ", ".join(table["excluded_tasks"]) or "none"
        print(f"{args.out}: {table['curves_used']} curves aggregated, excluded: {skipped}")
    else:
        print(",".join(fields))
        for row in rows:
            print(",".join(row))
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dhrl", description="Double-horizon model-based actor-critic laboratory."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train_common = argparse.ArgumentParser(add_help=False)
    train_common.add_argument("--task", help="task id (or run.task in the config file)")
    train_common.add_argument("--seed", type=_seed_arg, required=True, help="run seed (>= 0)")
    train_common.add_argument(
        "--variant",
        type=_variant_arg,
        help="rollout horizons 'D,T'; 0,0 disables the model",
    )
    train_common.add_argument("--steps", type=int, help="environment step budget")
    train_common.add_argument("--config", help="flat key=value config file")
    train_common.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one config entry; repeatable",
    )
    train_common.add_argument("--out", help="output root (default: $DHRL_OUT or ./runs)")

    p_train = sub.add_parser("train", parents=[train_common], help="run one training job")
    p_train.set_defaults(func=cmd_train)

    p_hist = sub.add_parser(
        "histograms",
        parents=[train_common],
        help="train while recording batch reward/target histograms",
    )
    p_hist.add_argument("--cadence", type=int, default=10_000, help="env steps between snapshots")
    p_hist.add_argument("--bins", type=int, default=64, help="uniform bins per snapshot")
    p_hist.set_defaults(func=cmd_histograms)

    p_eval = sub.add_parser("eval", help="evaluate the mean policy of a finished run")
    p_eval.add_argument("--run", required=True, help="run directory")
    p_eval.add_argument("--episodes", type=int, default=10)
    p_eval.add_argument("--seed", type=_seed_arg, default=0)
    p_eval.add_argument("--out", help="also write the JSON report here")
    p_eval.set_defaults(func=cmd_eval)

    p_rm = sub.add_parser(
        "rmedse", help="retrain critics from a frozen checkpoint and track relative error"
    )
    p_rm.add_argument("--run", required=True, help="run directory with a checkpoint")
    p_rm.add_argument("--arm", choices=["with-dr", "without-dr", "both"], default="both")
    p_rm.add_argument("--seeds", type=_int_list_arg, default=[0], help="critic seeds, comma separated")
    p_rm.add_argument("--probes", type=int, default=256)
    p_rm.add_argument("--mc-rollouts", type=int, default=256)
    p_rm.add_argument("--iterations", type=int, default=2000)
    p_rm.add_argument("--record-every", type=int, default=None)
    p_rm.add_argument("--mc-horizon", type=int, default=1000)
    p_rm.add_argument("--seed", type=_seed_arg, default=0, help="experiment seed")
    p_rm.add_argument("--out", help="output CSV (default: <run>/rmedse.csv)")
    p_rm.set_defaults(func=cmd_rmedse)

    p_gb = sub.add_parser(
        "grad-bias", help="gradient bias/SEM over rollout horizons at a checkpoint"
    )
    p_gb.add_argument("--run", required=True, help="run directory with a checkpoint")
    p_gb.add_argument("--horizons", type=_int_list_arg, default=[1, 3, 5, 7, 9])
    p_gb.add_argument("--states", type=int, default=256, help="start states from the replay buffer")
    p_gb.add_argument("--rollouts", type=int, default=256, help="rollouts averaged per state")
    p_gb.add_argument("--t-star", type=int, default=None, help="reference horizon (default: max)")
    p_gb.add_argument("--seed", type=_seed_arg, default=0, help="experiment seed")
    p_gb.add_argument("--out", help="output CSV (default: <run>/grad_bias.csv)")
    p_gb.set_defaults(func=cmd_grad_bias)

    p_agg = sub.add_parser("aggregate", help="normalize and aggregate run curves")
    p_agg.add_argument("runs", nargs="+", help="run directories")
    p_agg.add_argument(
        "--baseline",
        action="append",
        metavar="TASK=RETURN",
        help="final baseline return per task; repeatable",
    )
    p_agg.add_argument("--grid-points", type=int, default=101)
    p_agg.add_argument("--trim", type=float, default=0.25)
    p_agg.add_argument("--out", help="output CSV (default: stdout)")
    p_agg.set_defaults(func=cmd_aggregate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args, parser)


if __name__ == "__main__":
    raise SystemExit(main())
