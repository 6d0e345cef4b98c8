"""Command-line entry point: ``coin gen-data | train | eval | sweep | report``.

Every command reads an optional INI config (``--config``), applies flag
overrides on top (flags win), writes ``manifest.json`` plus the resolved
``config.ini`` into its output directory before doing any work, and exits 0
on success, 1 on usage errors and 2 when a run fails.

Output directories default to ``$COIN_OUTPUT_ROOT/<command>-<timestamp>``
(``./runs`` when the variable is unset).
"""

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .airlineenv import AirlineConfig, AirlineEnv
from .cloudenv import CloudConfig, CloudEnv
from .config import apply_overrides, format_value, read_config, write_config
from .errors import ConfigError, SchemaError, TrainingAborted
from .evaluation import DEFAULT_GS, build_report, emit_curves, read_log, tail_mean
from .telemetry import DatasetSpec, generate_dataset, load_traces, save_traces
from .trainer import TrainConfig, evaluate, load_policy, save_policy, train

log = logging.getLogger("coin")

OUTPUT_ROOT_ENV = "COIN_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 1 instead of 2."""

    def parse_known_args(self, args=None, namespace=None):
        self._seen = list(sys.argv[1:] if args is None else args)
        return super().parse_known_args(args, namespace)

    def _unknown_options(self):
        out = []
        for tok in getattr(self, "_seen", []):
            if tok.startswith("-") and tok.split("=")[0] not in self._option_string_actions:
                try:
                    float(tok)
                except ValueError:
                    out.append(tok)
        return out

    def error(self, message):
        # argparse checks required arguments before leftovers; name bad flags either way
        unknown = self._unknown_options()
        if unknown and "unrecognized" not in message:
            message = f"unrecognized arguments: {' '.join(unknown)}; {message}"
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# config resolution
# --------------------------------------------------------------------------

def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from exc
    return parse


def load_sections(path):
    if path is None:
        return {}
    return read_config(path)


def resolve(sections, overrides):
    """Merge ``{section: {key: value}}`` flag overrides into the file sections."""
    merged = {k: dict(v) for k, v in sections.items()}
    for section, items in overrides.items():
        for key, value in items.items():
            if value is not None:
                merged.setdefault(section, {})[key] = format_value(value)
    return merged


def dataset_for(sections, data_path=None):
    if data_path:
        return load_traces(data_path)
    return generate_dataset(DatasetSpec.from_config(sections))


def make_env(kind, sections, data_path=None):
    if kind == "cloud":
        ds = dataset_for(sections, data_path)
        cfg = apply_overrides(CloudConfig(horizon=ds.horizon), sections.get("env", {}), "env")
        return CloudEnv(ds, cfg)
    if kind == "airline":
        return AirlineEnv(apply_overrides(AirlineConfig(), sections.get("airline", {}), "airline"))
    raise ConfigError(f"unknown environment {kind!r}")


def snapshot(kind, sections):
    """Fully resolved config with every default spelled out."""
    out = {}
    if kind in ("cloud", None):
        spec = DatasetSpec.from_config(sections)
        out["data"] = {"n_users": spec.n_users, "horizon": spec.horizon, "seed": spec.seed,
                       "regimes": ",".join(r.name for r in spec.regimes)}
        for r in spec.regimes:
            out[f"regime.{r.name}"] = {k: v for k, v in dataclasses.asdict(r).items() if k != "name"}
        out["env"] = dataclasses.asdict(apply_overrides(CloudConfig(horizon=spec.horizon),
                                                        sections.get("env", {}), "env"))
    if kind in ("airline", None):
        out["airline"] = dataclasses.asdict(apply_overrides(AirlineConfig(), sections.get("airline", {}),
                                                            "airline"))
    tc = TrainConfig.from_sections(sections)
    train_items = tc.to_dict()
    out["chance"] = train_items.pop("chance")
    out["train"] = train_items
    if "eval" in sections:
        out["eval"] = dict(sections["eval"])
    return out


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

def output_dir(args):
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    return root / f"{args.command}-{stamp}"


def write_manifest(out, args, resolved, seeds=(), extra=None):
    out.mkdir(parents=True, exist_ok=True)
    write_config(resolved, out / "config.ini")
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_path": str(args.config) if args.config else None,
        "resolved_config": resolved,
        "resolved_config_file": "config.ini",
        "seeds": list(seeds),
        "output_dir": str(out),
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "version": __version__,
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return manifest


def finish_manifest(out, status):
    path = out / "manifest.json"
    m = json.loads(path.read_text())
    m["finished"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    m["status"] = status
    path.write_text(json.dumps(m, indent=2, default=str))


# --------------------------------------------------------------------------
# jobs (module-level so they pickle for worker processes)
# --------------------------------------------------------------------------

def _train_job(job):
    kind, sections, data_path, method, seed, run_dir = job
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    env = make_env(kind, sections, data_path)
    cfg = dataclasses.replace(TrainConfig.from_sections(sections), method=method, seed=seed)
    try:
        res = train(env, cfg, log_path=run_dir / "log.csv", checkpoint_dir=run_dir / "checkpoints")
    except TrainingAborted as exc:
        return {"method": method, "seed": seed, "dir": str(run_dir), "error": str(exc),
                "checkpoint": str(exc.checkpoint) if exc.checkpoint else None}
    save_policy(res.policy, run_dir / "policy.json")
    return {"method": method, "seed": seed, "dir": str(run_dir), "policy": str(run_dir / "policy.json")}


def _eval_job(job):
    kind, sections, data_path, policy_path, seed, n_episodes = job
    env = make_env(kind, sections, data_path)
    return evaluate(env, load_policy(policy_path), n_episodes, seed=seed)


def _run_jobs(fn, jobs, n_jobs):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, jobs))


def _check_trained(results):
    failed = [r for r in results if "error" in r]
    for r in failed:
        log.error("run %s seed %s aborted: %s (checkpoint %s)", r["method"], r["seed"], r["error"],
                  r["checkpoint"])
    return not failed


def _eval_settings(args, sections):
    ev = sections.get("eval", {})
    gs = args.g if args.g else [float(x) for x in ev.get("g", ",".join(map(str, DEFAULT_GS))).split(",")]
    delta = args.delta if args.delta is not None else float(ev.get("delta", 0.05))
    episodes = args.episodes if args.episodes is not None else int(ev.get("episodes", 100))
    return gs, delta, episodes


def _write_report(out, report):
    (out / "report.csv").write_text(report.to_csv())
    text = report.to_text()
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _train_overrides(args):
    return {"train": {"epochs": args.epochs, "mode": getattr(args, "mode", None)}}


def cmd_gen_data(args):
    sections = resolve(load_sections(args.config), {"data": {"seed": args.seed, "n_users": args.users,
                                                             "horizon": args.horizon}})
    out = output_dir(args)
    resolved = snapshot("cloud", sections)
    write_manifest(out, args, resolved, [DatasetSpec.from_config(sections).seed])
    ds = generate_dataset(DatasetSpec.from_config(sections))
    path = save_traces(ds, out / f"traces.{args.format}", args.format)
    print(path)
    finish_manifest(out, "ok")
    return EXIT_OK


def cmd_train(args):
    sections = resolve(load_sections(args.config), _train_overrides(args))
    out = output_dir(args)
    resolved = snapshot(args.env, sections)
    seeds = args.seeds or [0]
    write_manifest(out, args, resolved, seeds, {"env": args.env, "method": args.method,
                                                "data": str(args.data) if args.data else None})
    jobs = [(args.env, resolved, args.data, args.method, s, str(out / args.method / f"seed{s}")) for s in seeds]
    results = _run_jobs(_train_job, jobs, args.jobs)
    (out / "runs.json").write_text(json.dumps(results, indent=2))
    ok = _check_trained(results)
    finish_manifest(out, "ok" if ok else "aborted")
    for r in results:
        if "policy" in r:
            print(r["policy"])
    return EXIT_OK if ok else EXIT_FAILURE


def _checkpoint_list(paths):
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(p.rglob("policy.json")))
        elif p.exists():
            found.append(p)
        else:
            raise UsageError(f"checkpoint not found: {p}")
    if not found:
        raise UsageError("no checkpoints found")
    return found


def cmd_eval(args):
    sections = load_sections(args.config)
    gs, delta, episodes = _eval_settings(args, sections)
    checkpoints = _checkpoint_list(args.checkpoints)
    out = output_dir(args)
    resolved = snapshot(args.env, sections)
    resolved["eval"] = {"g": gs, "delta": delta, "episodes": episodes}
    write_manifest(out, args, resolved, list(range(len(checkpoints))),
                   {"env": args.env, "checkpoints": [str(c) for c in checkpoints],
                    "data": str(args.data) if args.data else None})
    methods = [json.loads(Path(c).read_text())["method"] for c in checkpoints]
    seed_of, jobs = {}, []
    for c, m in zip(checkpoints, methods):
        k = seed_of[m] = seed_of.get(m, -1) + 1
        jobs.append((args.env, resolved, args.data, str(c), k, episodes))
    results = _run_jobs(_eval_job, jobs, args.jobs)
    runs = {}
    for m, eps in zip(methods, results):
        runs.setdefault(m, []).append(eps)
    env_cfg = make_env(args.env, resolved, args.data).cfg
    _write_report(out, build_report(runs, args.env, gs, delta, env_cfg))
    finish_manifest(out, "ok")
    return EXIT_OK


def cmd_sweep(args):
    base = resolve(load_sections(args.config), _train_overrides(args))
    gs, delta, episodes = _eval_settings(args, base)
    out = output_dir(args)
    resolved = snapshot(args.env, base)
    resolved["eval"] = {"g": gs, "delta": delta, "episodes": episodes}
    seeds = args.seeds or [0]
    g_train = args.g_train or [TrainConfig.from_sections(base).chance.g]
    d_train = args.delta_train or [TrainConfig.from_sections(base).chance.delta]
    write_manifest(out, args, resolved, seeds, {"env": args.env, "methods": args.methods, "g_train": g_train,
                                                "delta_train": d_train,
                                                "data": str(args.data) if args.data else None})
    cells = []
    for method in args.methods:
        # grid and the unconstrained baseline ignore the chance budget
        grid = [(None, None)] if method in ("bc", "grid") else [(g, d) for g in g_train for d in d_train]
        for g, d in grid:
            label = method if g is None else f"{method}[g={g:g},delta={d:g}]"
            sec = resolve(resolved, {"chance": {"g": g, "delta": d}})
            cells.append((label, sec))
    jobs = [(args.env, sec, args.data, label.split("[")[0], s,
             str(out / _slug(label) / f"seed{s}")) for label, sec in cells for s in seeds]
    trained = _run_jobs(_train_job, jobs, args.jobs)
    (out / "runs.json").write_text(json.dumps(trained, indent=2))
    if not _check_trained(trained):
        finish_manifest(out, "aborted")
        return EXIT_FAILURE
    ev_jobs = [(args.env, job[1], args.data, r["policy"], job[4], episodes) for job, r in zip(jobs, trained)]
    results = _run_jobs(_eval_job, ev_jobs, args.jobs)
    runs = {}
    labels = [label for label, _ in cells for _ in seeds]
    for label, eps in zip(labels, results):
        runs.setdefault(label, []).append(eps)
    env_cfg = make_env(args.env, resolved, args.data).cfg
    _write_report(out, build_report(runs, args.env, gs, delta, env_cfg))
    finish_manifest(out, "ok")
    return EXIT_OK


def _slug(label):
    return label.replace("[", "_").replace("]", "").replace(",", "_").replace("=", "")


def cmd_report(args):
    logs = {}
    for d in map(Path, args.runs):
        found = sorted(d.rglob("log.csv")) if d.is_dir() else ([d] if d.exists() else [])
        if not found:
            raise UsageError(f"no training logs under {d}")
        for f in found:
            name = f.parent.parent.name if f.parent.name.startswith("seed") else f.parent.name
            seed = f.parent.name
            logs.setdefault(name, {})[seed] = f
    out = output_dir(args)
    write_manifest(out, args, {}, [], {"env": args.env, "runs": [str(r) for r in args.runs]})
    first = {m: next(iter(v.values())) for m, v in logs.items()}
    emit_curves(first, out, args.env)
    lines = ["method,runs,tail_mse,tail_metric"]
    for m, per_seed in logs.items():
        mses, metrics = [], []
        for f in per_seed.values():
            header, rows = read_log(f)
            mses.append(tail_mean([float(r[header.index("mse")]) for r in rows], args.tail))
            metrics.append(tail_mean([float(r[header.index("hot_metric")]) for r in rows], args.tail))
        lines.append(f"{m},{len(per_seed)},{sum(mses) / len(mses):.6g},{sum(metrics) / len(metrics):.6g}")
    text = "\n".join(lines) + "\n"
    (out / "convergence.csv").write_text(text)
    sys.stdout.write(text)
    finish_manifest(out, "ok")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="coin", description="Chance-constrained imitation for oversubscription.")
    p.add_argument("--version", action="version", version=f"coin {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, env=True):
        sp.add_argument("--config", type=Path, help="INI config file")
        sp.add_argument("--out", type=Path, help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>-<time>)")
        if env:
            sp.add_argument("--env", choices=("cloud", "airline"), default="cloud")
            sp.add_argument("--data", type=Path, help="trace file for the cloud environment")
            sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    g = sub.add_parser("gen-data", help="generate synthetic telemetry traces")
    common(g, env=False)
    g.add_argument("--seed", type=int)
    g.add_argument("--users", type=int)
    g.add_argument("--horizon", type=int)
    g.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one method for each seed")
    common(t)
    t.add_argument("--method", choices=("coin", "bc", "bc_hard", "grid"), required=True)
    t.add_argument("--seeds", type=_csv_list(int), help="comma-separated seeds (default 0)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--mode", choices=("cold", "warm"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints and print a benchmark report")
    common(e)
    e.add_argument("checkpoints", nargs="+", help="policy.json files or directories containing them")
    e.add_argument("--episodes", type=int)
    e.add_argument("--g", type=_csv_list(float), help="comma-separated verdict budgets")
    e.add_argument("--delta", type=float)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train and evaluate a method x g x delta grid")
    common(s)
    s.add_argument("--methods", type=_csv_list(str), default=["coin", "bc", "bc_hard"])
    s.add_argument("--g-train", type=_csv_list(float), help="training budgets for constrained methods")
    s.add_argument("--delta-train", type=_csv_list(float), help="training risk levels")
    s.add_argument("--seeds", type=_csv_list(int))
    s.add_argument("--epochs", type=int)
    s.add_argument("--episodes", type=int)
    s.add_argument("--g", type=_csv_list(float), help="comma-separated verdict budgets")
    s.add_argument("--delta", type=float)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="convergence curves and tail means from training logs")
    r.add_argument("runs", nargs="+", help="train/sweep output directories or log files")
    r.add_argument("--env", choices=("cloud", "airline"), default="cloud")
    r.add_argument("--out", type=Path)
    r.add_argument("--tail", type=float, default=0.2, help="fraction of final epochs averaged")
    r.set_defaults(func=cmd_report, config=None)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    if getattr(args, "command", None) == "sweep":
        bad = [m for m in args.methods if m not in ("coin", "bc", "bc_hard", "grid")]
        if bad:
            parser.error(f"unknown method(s) {', '.join(bad)}")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"coin {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, SchemaError, ValueError, OSError) as exc:
        print(f"coin {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
