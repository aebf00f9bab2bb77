"""Command line front end: demo generation, training, evaluation, stage
artifact production, and the sampler/schedule benchmark table.

Settings resolve as flag > config file > built-in default.  The config
file (--config) is a JSON object keyed by flag name.  Every command
writes its resolved settings to <out>/manifest.json, and
run_from_manifest replays a recorded run; because all randomness flows
from the recorded seeds, a replay reproduces the CSV artifacts bit for
bit.  Wall-clock timings are printed to stdout only, never written to
files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import struct
import sys
import tempfile
from dataclasses import fields

import numpy as np

from .diffusion import make_noise_schedule
from .env import TASK_DESCRIPTION, generate_demos, load_demos, save_demos
from .nets import load_checkpoint, save_checkpoint
from .rollout import compare_speedup, evaluate, hvts_schedule_table
from .scheduling import (
    ENDPOINT_ENV_VAR,
    ClassifierError,
    ResponseParseError,
    http_post,
)
from .stages import (
    ScheduleRanges,
    StageParseError,
    build_decomposition_prompt,
    build_schedule_prompt,
    parse_schedule,
    parse_stage_templates,
    schedule_from_json,
    schedule_to_json,
    templates_to_json,
)
from .training import TrainConfig, train


def _train_extras() -> dict:
    out = {}
    for f in fields(TrainConfig):
        if f.name != "total_steps":
            out[f.name] = f.default
    return out


# Built-in defaults per command; None marks values that must be supplied
# by a flag or the config file.
DEFAULTS = {
    "gen-data": {"n": 100, "seed": 0, "noise": 0.0, "out": None},
    "train": {"mode": "uniform", "steps": None, "data": None, "out": None,
              "eval_episodes": 20, **_train_extras()},
    "eval": {"policy": None, "episodes": 50, "schedule": "fixed:16,100",
             "sampler": "ddpm", "seeds": "0,1,2", "gap": 0.2,
             "beta_start": 1e-4, "beta_end": 0.02, "out": None},
    "decompose": {"task": TASK_DESCRIPTION, "num_images": 8, "num_stages": 5,
                  "ranges": "8,16,20,40", "mock": None, "endpoint": None,
                  "timeout": 10.0, "out": None},
    "bench": {"policy": None, "episodes": 50, "seeds": "0,1,2", "gap": 0.2,
              "beta_start": 1e-4, "beta_end": 0.02, "out": None},
}

_REQUIRED = {
    "gen-data": ("out",),
    "train": ("steps", "data", "out"),
    "eval": ("policy", "out"),
    "decompose": ("out",),
    "bench": ("policy", "out"),
}

# Flag values that name filesystem paths, made absolute in the manifest
# so a replay works from any working directory.
_PATH_KEYS = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "eval": ("policy", "out"),
    "decompose": ("out",),
    "bench": ("policy", "out"),
}

_BENCH_ROWS = (
    ("ddpm", "fixed:16,100"),
    ("ddpm", "oracle-hvts"),
    ("ddim", "fixed:16,25"),
    ("ddim", "oracle-hvts"),
)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="diffpol",
        description="Diffusion-policy toolkit for the toy push benchmark.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        # SUPPRESS keeps unset flags out of the namespace so the
        # flag > config > default precedence can be resolved later.
        p = sub.add_parser(name, help=help_,
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", metavar="FILE",
                       help="JSON object with defaults for any flag")
        p.add_argument("--out", metavar="DIR",
                       help="output directory, created if missing")
        return p

    g = add("gen-data", "generate scripted-expert demonstrations")
    g.add_argument("--n", type=int, help="number of demonstrations "
                   "(default 100)")
    g.add_argument("--seed", type=int, help="base RNG seed (default 0)")
    g.add_argument("--noise", type=float,
                   help="expert action noise scale (default 0)")

    t = add("train", "train a denoiser on saved demonstrations")
    t.add_argument("--mode", choices=("uniform", "aln"),
                   help="uniform baseline or adaptive sampling "
                   "(default uniform)")
    t.add_argument("--steps", type=int, help="gradient steps")
    t.add_argument("--seed", type=int, help="RNG seed (default 0)")
    t.add_argument("--data", metavar="FILE", help="demo file from gen-data")
    t.add_argument("--batch-size", type=int, dest="batch_size",
                   help="minibatch size (default 32)")
    t.add_argument("--warmup", type=int,
                   help="uniform warmup steps before adaptation kicks in "
                   "(default 500)")
    t.add_argument("--entropy-coef", type=float, dest="entropy_coef",
                   help="timestep sampler entropy coefficient (default 10)")
    t.add_argument("--lr", type=float,
                   help="denoiser learning rate (default 1e-3)")
    t.add_argument("--eval-every", type=int, dest="eval_every",
                   help="rollout-evaluate every N steps, 0 disables "
                   "(default 0)")
    t.add_argument("--eval-episodes", type=int, dest="eval_episodes",
                   help="episodes per mid-training evaluation (default 20)")

    e = add("eval", "evaluate a checkpoint on fresh episodes")
    e.add_argument("--policy", metavar="FILE", help="checkpoint to load")
    e.add_argument("--episodes", type=int,
                   help="episodes per evaluation seed (default 50)")
    e.add_argument("--schedule",
                   help="fixed:<Na>,<Nd> | table:<path> | oracle-hvts "
                   "(default fixed:16,100)")
    e.add_argument("--sampler", choices=("ddpm", "ddim"),
                   help="reverse-process sampler (default ddpm)")
    e.add_argument("--seeds", help="comma-separated evaluation seeds "
                   "(default 0,1,2)")
    e.add_argument("--gap", type=float,
                   help="stage selection confidence gap (default 0.2)")

    d = add("decompose", "produce stage and schedule artifacts")
    d.add_argument("--task", help="task description fed to the prompts")
    d.add_argument("--num-images", type=int, dest="num_images",
                   help="frames mentioned in the prompt (default 8)")
    d.add_argument("--num-stages", type=int, dest="num_stages",
                   help="stages to request (default 5)")
    d.add_argument("--ranges",
                   help="a_min,a_max,i_min,i_max budget bounds "
                   "(default 8,16,20,40)")
    d.add_argument("--mock", nargs=2,
                   metavar=("DECOMP_FILE", "SCHED_FILE"),
                   help="read canned responses instead of calling the "
                   "endpoint; no network traffic in this mode")
    d.add_argument("--endpoint", help="completion endpoint URL (default: "
                   f"${ENDPOINT_ENV_VAR})")
    d.add_argument("--timeout", type=float,
                   help="endpoint timeout in seconds (default 10)")

    b = add("bench", "four-row sampler/schedule comparison table")
    b.add_argument("--policy", metavar="FILE", help="checkpoint to load")
    b.add_argument("--episodes", type=int,
                   help="episodes per evaluation seed (default 50)")
    b.add_argument("--seeds", help="comma-separated evaluation seeds "
                   "(default 0,1,2)")
    b.add_argument("--gap", type=float,
                   help="stage selection confidence gap (default 0.2)")
    return ap


def resolve_args(command: str, ns: argparse.Namespace) -> dict:
    """Merge flags over config file over defaults; check required keys."""
    given = dict(vars(ns))
    given.pop("command", None)
    cfg_path = given.pop("config", None)
    merged = dict(DEFAULTS[command])
    if cfg_path is not None:
        with open(cfg_path) as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        unknown = set(loaded) - set(merged)
        if unknown:
            raise ValueError(
                f"unknown config keys for {command}: {sorted(unknown)}")
        merged.update(loaded)
    merged.update(given)
    for key in _REQUIRED[command]:
        if merged.get(key) is None:
            raise ValueError(
                f"{command} requires --{key.replace('_', '-')} "
                "(flag or config file)")
    for key in _PATH_KEYS[command]:
        if merged.get(key) is not None:
            merged[key] = os.path.abspath(merged[key])
    if merged.get("mock") is not None:
        merged["mock"] = [os.path.abspath(p) for p in merged["mock"]]
    sched = merged.get("schedule")
    if isinstance(sched, str) and sched.startswith("table:"):
        merged["schedule"] = "table:" + os.path.abspath(sched[len("table:"):])
    return merged


def write_manifest(out_dir: str, command: str, args: dict) -> None:
    doc = {"command": command, "args": args}
    _write_text(os.path.join(out_dir, "manifest.json"),
                json.dumps(doc, indent=4, sort_keys=True) + "\n")


def run_from_manifest(path: str, out: str | None = None) -> int:
    """Replay a recorded run, optionally into a different directory.

    The manifest already holds every resolved setting, so it is replayed
    by handing the stored values back as a config file.
    """
    with open(path) as f:
        doc = json.load(f)
    args = dict(doc["args"])
    if out is not None:
        args["out"] = out
    fd, tmp = tempfile.mkstemp(suffix=".json")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(args, f)
        return main([doc["command"], "--config", tmp])
    finally:
        os.unlink(tmp)


# -- shared plumbing ----------------------------------------------------------


def _ensure_out(path: str) -> str:
    path = os.path.abspath(path)
    os.makedirs(path, exist_ok=True)
    return path


def _require_file(path: str, what: str) -> None:
    if not os.path.isfile(path):
        raise ValueError(f"{what} not found: {path}")


def _write_text(path: str, text: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(text)


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(p) for p in str(text).split(","))
    except ValueError:
        raise ValueError(f"bad --seeds {text!r}; want e.g. 0,1,2") from None
    if not seeds:
        raise ValueError("need at least one seed")
    return seeds


def _parse_ranges(text: str) -> ScheduleRanges:
    parts = str(text).split(",")
    if len(parts) != 4:
        raise ValueError(
            f"bad --ranges {text!r}; want a_min,a_max,i_min,i_max")
    return ScheduleRanges(*(int(p) for p in parts))


def _parse_schedule_arg(text: str):
    """Decode --schedule into what evaluate() consumes: a fixed pair, or
    a ScheduleTable for the oracle-classified scheduler."""
    if text == "oracle-hvts":
        return hvts_schedule_table()
    kind, sep, rest = text.partition(":")
    if sep and kind == "fixed":
        parts = rest.split(",")
        if len(parts) == 2:
            try:
                return int(parts[0]), int(parts[1])
            except ValueError:
                pass
    elif sep and kind == "table":
        _require_file(rest, "schedule table")
        with open(rest) as f:
            return schedule_from_json(f.read())
    raise ValueError(
        f"bad --schedule {text!r}; use fixed:<Na>,<Nd>, table:<path>, "
        "or oracle-hvts")


def _metrics_rows(m) -> list[tuple[str, str]]:
    rows = [("success_rate", f"{m.success_rate:.17g}"),
            ("early_success_rate", f"{m.early_success_rate:.17g}"),
            ("mean_calls_per_step", f"{m.mean_calls_per_step:.17g}"),
            ("n_episodes", str(m.n_episodes)),
            ("total_calls", str(m.total_calls)),
            ("total_steps", str(m.total_steps))]
    for s, v in zip(m.seeds, m.per_seed_success):
        rows.append((f"seed_{s}_success", f"{v:.17g}"))
    return rows


def _completion_text(raw: bytes) -> str:
    try:
        data = json.loads(raw)
        return data["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as e:
        raise ResponseParseError(f"malformed completion response: {e}") from e


def _remote_text(prompt: str, args: dict, transport) -> str:
    endpoint = args["endpoint"] or os.environ.get(ENDPOINT_ENV_VAR)
    if not endpoint:
        raise ValueError(
            f"no endpoint given and {ENDPOINT_ENV_VAR} is not set; "
            "use --mock for offline runs")
    body = json.dumps({
        "messages": [{"role": "user",
                      "content": [{"type": "text", "text": prompt}]}],
        "temperature": 0.1,
        "top_p": 0.7,
        "max_new_tokens": 1024,
    }).encode("utf-8")
    post = transport if transport is not None else http_post
    return _completion_text(post(endpoint, body, args["timeout"]))


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args: dict) -> int:
    out = _ensure_out(args["out"])
    ds = generate_demos(args["n"], args["seed"], args["noise"])
    save_demos(os.path.join(out, "demos.bin"), ds)
    write_manifest(out, "gen-data", args)
    windows = sum(tr.n_windows for tr in ds.trajectories)
    mean_len = float(np.mean([tr.length for tr in ds.trajectories]))
    print(f"wrote {ds.n_traj} demos ({windows} windows, mean length "
          f"{mean_len:.1f}) to {out}")
    return 0


def cmd_train(args: dict) -> int:
    _require_file(args["data"], "demo file")
    out = _ensure_out(args["out"])
    ds = load_demos(args["data"])
    tc = TrainConfig(total_steps=args["steps"],
                     **{f.name: args[f.name] for f in fields(TrainConfig)
                        if f.name != "total_steps"})
    eval_fn = None
    if tc.eval_every > 0:
        sched = make_noise_schedule(tc.T, tc.beta_start, tc.beta_end)
        n_ep = args["eval_episodes"]
        # Offset keeps evaluation env seeds clear of the demo seeds.
        eval_seed = tc.seed + 101

        def eval_fn(params):
            m = evaluate(params, sched, n_ep, (8, 10), "ddim",
                         seeds=(eval_seed,))
            return m.success_rate

    params, report = train(tc, ds, args["mode"], eval_fn)
    save_checkpoint(os.path.join(out, "checkpoint.bin"), params)
    report.to_csv(os.path.join(out, "report.csv"))
    report.snapshots_to_csv(os.path.join(out, "snapshots.csv"))
    write_manifest(out, "train", args)
    if report.eval_success:
        tail = f"final eval success {report.eval_success[-1]:.3f}"
    else:
        tail = "no mid-training evaluations"
    print(f"trained {args['mode']} for {args['steps']} steps; {tail}; "
          f"artifacts in {out}")
    return 0


def cmd_eval(args: dict) -> int:
    _require_file(args["policy"], "checkpoint")
    out = _ensure_out(args["out"])
    params = load_checkpoint(args["policy"])
    sched = make_noise_schedule(params.T, args["beta_start"],
                                args["beta_end"])
    schedule = _parse_schedule_arg(args["schedule"])
    m = evaluate(params, sched, args["episodes"], schedule, args["sampler"],
                 seeds=_parse_seeds(args["seeds"]), gap=args["gap"])
    with open(os.path.join(out, "report.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["metric", "value"])
        wr.writerows(_metrics_rows(m))
    write_manifest(out, "eval", args)
    print(f"success {m.success_rate:.3f} (early {m.early_success_rate:.3f}), "
          f"{m.mean_calls_per_step:.4f} denoiser calls per control step over "
          f"{m.total_steps} steps")
    return 0


def cmd_decompose(args: dict, transport=None) -> int:
    """Produce stages.json and schedule.json, from canned response files
    in --mock mode or from the completion endpoint otherwise."""
    mock = args["mock"]
    if mock is not None:
        for p in mock:
            _require_file(p, "canned response")
    out = _ensure_out(args["out"])
    ranges = _parse_ranges(args["ranges"])

    prompt = build_decomposition_prompt(args["task"], args["num_images"],
                                        args["num_stages"])
    if mock is not None:
        with open(mock[0]) as f:
            decomp_text = f.read()
    else:
        decomp_text = _remote_text(prompt, args, transport)
    stage_templates = parse_stage_templates(decomp_text,
                                            expected_n=args["num_stages"])

    prompt = build_schedule_prompt(stage_templates, ranges)
    if mock is not None:
        with open(mock[1]) as f:
            sched_text = f.read()
    else:
        sched_text = _remote_text(prompt, args, transport)
    table = parse_schedule(sched_text, [s.name for s in stage_templates],
                           ranges)

    _write_text(os.path.join(out, "stages.json"),
                templates_to_json(stage_templates))
    _write_text(os.path.join(out, "schedule.json"), schedule_to_json(table))
    write_manifest(out, "decompose", args)
    print(f"wrote {len(stage_templates)} stages and their schedule to {out}")
    return 0


def format_bench_table(rows, metrics, reports) -> str:
    """Aligned text table; wall time appears here and nowhere else."""
    lines = [f"{'sampler':<9}{'schedule':<15}{'success':>8}{'early':>8}"
             f"{'calls/step':>12}{'speedup':>9}{'ms/episode':>12}"]
    for (sampler, label), m, r in zip(rows, metrics, reports):
        lines.append(
            f"{sampler:<9}{label:<15}{m.success_rate:>8.3f}"
            f"{m.early_success_rate:>8.3f}{m.mean_calls_per_step:>12.4f}"
            f"{r.nfe_reduction:>8.2f}x{m.mean_wall_time * 1e3:>12.1f}")
    return "\n".join(lines)


def cmd_bench(args: dict) -> int:
    _require_file(args["policy"], "checkpoint")
    out = _ensure_out(args["out"])
    params = load_checkpoint(args["policy"])
    sched = make_noise_schedule(params.T, args["beta_start"],
                                args["beta_end"])
    seeds = _parse_seeds(args["seeds"])
    metrics = []
    for sampler, label in _BENCH_ROWS:
        m = evaluate(params, sched, args["episodes"],
                     _parse_schedule_arg(label), sampler, seeds=seeds,
                     gap=args["gap"])
        metrics.append(m)
    reports = [compare_speedup(metrics[0], m) for m in metrics]
    with open(os.path.join(out, "report.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["sampler", "schedule", "success_rate",
                     "early_success_rate", "mean_calls_per_step",
                     "nfe_reduction", "success_delta"])
        for (sampler, label), m, r in zip(_BENCH_ROWS, metrics, reports):
            wr.writerow([sampler, label, f"{m.success_rate:.17g}",
                         f"{m.early_success_rate:.17g}",
                         f"{m.mean_calls_per_step:.17g}",
                         f"{r.nfe_reduction:.17g}",
                         f"{r.success_delta:.17g}"])
    write_manifest(out, "bench", args)
    print(format_bench_table(_BENCH_ROWS, metrics, reports))
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "decompose": cmd_decompose,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        args = resolve_args(ns.command, ns)
        return _HANDLERS[ns.command](args)
    except (ValueError, OSError, RuntimeError, struct.error,
            StageParseError, ClassifierError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
