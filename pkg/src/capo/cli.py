"""``capo`` command line: collect, train, eval, report, replay.

Exit codes: 0 success, 2 invalid configuration, 3 file or format problem,
4 numerical fault (non-finite loss, prediction or state).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import eval as ev
from .config import RunConfig, load_config
from .objectives import IncompatibleSchemeError, TrainingDivergedError, WeightingScheme, check_compatible, train
from .predictors import build_model
from .predictors.base import PredictionModel
from .simworld import ConfigError, EpisodeTrace, SceneSet, collect_dataset, run_episode, stream

log = logging.getLogger("capo")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _warn_hash(kind: str, theirs: str | None, ours: str) -> None:
    if theirs is not None and theirs != ours:
        log.warning("%s was produced under config hash %s but the current config hashes to %s", kind, theirs, ours)


# ---------------------------------------------------------------------------
# subcommands


def cmd_collect(args) -> int:
    cfg = _config(args)
    c = cfg.collect
    data = collect_dataset(
        cfg.world, cfg.pedestrians, c.n_episodes, c.seed, cfg.planner(), c.k_oracle, c.boost, jobs=args.jobs
    )
    data.meta["run_config_hash"] = cfg.world_hash()
    out = Path(args.out)
    data.save(out)
    manifest = {
        "dataset": out.name,
        "config_hash": cfg.world_hash(),
        "seed": c.seed,
        "n_episodes": c.n_episodes,
        "n_scenes": len(data),
        "n_agents": int(data.agents_past.shape[1]),
        "episodes": data.meta["episodes"],
    }
    _write_json(out.with_name(out.name + ".manifest.json"), manifest)
    print(f"wrote {len(data)} scenes from {c.n_episodes} episodes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = SceneSet.load(args.data)
    _warn_hash("dataset", data.meta.get("run_config_hash"), cfg.world_hash())
    scheme = WeightingScheme.parse(cfg.training.scheme)
    model = build_model(cfg.model.kind, **cfg.model.build_kwargs(cfg.world))
    check_compatible(scheme, model)
    out = Path(args.out)
    manifest = Path(args.manifest) if args.manifest else out.with_name(out.name + ".train.jsonl")
    result = train(model, data, scheme, cfg.training.config, planner=cfg.planner(), manifest_path=manifest)
    model.save(
        out,
        {
            "scheme": scheme.value,
            "config_hash": cfg.world_hash(),
            "run_config_hash": cfg.hash(),
            "seed": cfg.training.config.seed,
            "dataset_hash": data.meta.get("config_hash"),
            "final_loss": result.history[-1].loss,
        },
    )
    print(f"trained {model.kind} with {scheme.value}: final epoch loss {result.history[-1].loss:.4f}; wrote {out}")
    return EXIT_OK


def _load_models(args, cfg: RunConfig) -> dict:
    models = {}
    for path in args.checkpoints:
        model, header = PredictionModel.load(path)
        _warn_hash(f"checkpoint {path}", header.get("config_hash"), cfg.world_hash())
        model.k_test = cfg.eval.k_test
        name = f"{Path(path).stem} ({header.get('scheme', model.kind)})"
        models[name] = model
    if args.with_oracle:
        models["oracle"] = build_model("oracle", k_test=cfg.model.k_oracle)
    return models


def cmd_eval(args) -> int:
    cfg = _config(args)
    models = _load_models(args, cfg)
    if not models:
        raise ConfigError("checkpoints", "give at least one checkpoint or --with-oracle")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    e = cfg.eval
    planner = cfg.planner()
    trace_dir = out / "traces" if args.save_traces else None
    if len(models) == 1:
        (name, model), = models.items()
        rep = ev.run_closed_loop(
            model, planner, cfg.world, e.n_episodes, e.base_seed, params=cfg.pedestrians, name=name,
            jobs=args.jobs, trace_dir=None if trace_dir is None else trace_dir / name,
        )
        comp = ev.Comparison.from_reports([rep])
    else:
        comp = ev.compare_models(
            models, cfg.world, e.n_episodes, e.base_seed, planner=planner, params=cfg.pedestrians,
            jobs=args.jobs, trace_dir=trace_dir,
        )
    for rep in comp.reports:
        rep.config_hash = cfg.world_hash()
    (out / "closed_loop.txt").write_text(comp.to_text())
    (out / "closed_loop.jsonl").write_text(comp.to_jsonl())
    (out / "closed_loop.csv").write_text(comp.to_csv())
    _write_episodes_csv(out / "episodes.csv", comp.reports)
    if args.heldout:
        scenes = SceneSet.load(args.heldout)
        n = min(len(scenes), e.open_loop_scenes) if e.open_loop_scenes else len(scenes)
        idx = np.linspace(0, len(scenes) - 1, n).round().astype(int) if n < len(scenes) else np.arange(n)
        rows = []
        for name, model in models.items():
            if model.kind == "oracle":
                continue
            rep = ev.evaluate_open_loop(model, scenes.subset(idx), e.metrics, stream(e.open_loop_seed, 0))
            rows.append({"model": name, **ev.asdict(rep)})
        (out / "open_loop.jsonl").write_text("".join(json.dumps(ev._nan_to_none(r), sort_keys=True) + "\n" for r in rows))
    sys.stdout.write(comp.to_text())
    return EXIT_OK


def _write_episodes_csv(path: Path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seed", "outcome", "steps", "mean_speed", "jerk", "ade", "control_error"])
        for rep in reports:
            for r in rep.episodes:
                w.writerow([rep.model, r.seed, r.outcome, r.steps, repr(r.mean_speed), repr(r.jerk), repr(r.ade), repr(r.control_error)])


def cmd_report(args) -> int:
    reports = ev.read_reports(Path(args.reports).read_text())
    if not reports:
        raise ValueError(f"{args.reports} holds no reports")
    comp = ev.Comparison.from_reports(reports)
    sys.stdout.write(comp.to_csv() if args.csv else comp.to_text())
    return EXIT_OK


def cmd_replay(args) -> int:
    trace = EpisodeTrace.load(args.trace)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["t", "s", "v", "a", "u", "agent", "x", "y", "mode"])
        for i in range(len(trace)):
            s, v, a = trace.ego[i]
            for j, ((x, y), m) in enumerate(zip(trace.ped_pos[i], trace.ped_mode[i])):
                w.writerow([f"{i * trace.dt:.1f}", repr(s), repr(v), repr(a), repr(trace.controls[i]), j, repr(x), repr(y), int(m)])
    finally:
        if out is not sys.stdout:
            out.close()
    if args.checkpoint or args.oracle:
        cfg = _config(args)
        if args.oracle:
            model = build_model("oracle", k_test=cfg.model.k_oracle)
        else:
            model, _ = PredictionModel.load(args.checkpoint)
            model.k_test = cfg.eval.k_test
        live = run_episode(model, cfg.planner(), cfg.world, cfg.pedestrians, trace.seed, boost=cfg.world.crossing_boost_test)
        same = live.to_lines()[1:] == trace.to_lines()[1:] and live.outcome == trace.outcome
        print(f"replay of seed {trace.seed}: {'matches' if same else 'DIFFERS FROM'} the recorded trace", file=sys.stderr)
        if not same:
            return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run configuration (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. world.dt=0.05")
        return sp

    sp = with_config(sub.add_parser("collect", help="record expert episodes and slice them into scenes"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_collect)

    sp = with_config(sub.add_parser("train", help="fit a prediction model with one weighting scheme"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest", help="training manifest path (default: <out>.train.jsonl)")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("eval", help="closed-loop comparison on matched seeds"))
    sp.add_argument("checkpoints", nargs="*")
    sp.add_argument("--with-oracle", action="store_true")
    sp.add_argument("--heldout", help="dataset for open-loop metrics")
    sp.add_argument("--out-dir", default="reports")
    sp.add_argument("--save-traces", action="store_true")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="render closed-loop reports as a table")
    sp.add_argument("reports", help="closed_loop.jsonl written by eval")
    sp.add_argument("--csv", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = with_config(sub.add_parser("replay", help="re-render a trace to per-step records"))
    sp.add_argument("trace")
    sp.add_argument("--out", help="CSV output (default stdout)")
    sp.add_argument("--checkpoint", help="re-run the episode live with this model and compare")
    sp.add_argument("--oracle", action="store_true", help="re-run the episode live with the oracle and compare")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IncompatibleSchemeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"input/output error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
