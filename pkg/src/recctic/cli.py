"""Command-line interface: ``recctic {synth,train,eval,generate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Options may also come from a flat JSON ``--config`` file whose keys are
the long flag names; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .episodes import TIE_EPSILON, EpisodeError, censor, episode_record, load_cascades, load_episodes
from .evaluation import METRICS, evaluate
from .generator import Prefix, SimulationConfig, generate, generate_conditioned, sample_prefix
from .grad import DomainError, UsageError
from .inference import TrainConfig, TrainingDiverged, train
from .models import FAMILIES, build_model, load_model, model_from_dict, model_to_dict, save_model
from .synth import REGIMES, SyntheticSpec, build_graph, sample_corpus, write_corpus

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("recctic")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="recctic", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="flat JSON file of option defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic corpus with ground truth")
    common(p)
    p.add_argument("--regime", choices=REGIMES, default="arti1")
    p.add_argument("--nodes", type=int, default=100, help="user nodes (world node excluded)")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--prefix", default="", help="file name prefix inside --out")

    p = sub.add_parser("train", help="fit a model to an episode file")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="output model file")
    p.add_argument("--family", choices=FAMILIES, default="recctic")
    p.add_argument("--nodes", type=int, help="node count incl. world (default: inferred)")
    p.add_argument("--d", type=int, default=50)
    p.add_argument("--cell", default="gru")
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--samples", type=int, default=1, help="trajectories per episode")
    p.add_argument("--b-length", type=int, default=100)
    p.add_argument("--validation", type=Path)
    p.add_argument("--val-samples", type=int, default=20)
    p.add_argument("--trace", type=Path, help="JSONL trace (default: MODEL.trace.jsonl)")
    p.add_argument("--checkpoint", type=Path, help="checkpoint file (default: MODEL.ckpt)")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")

    p = sub.add_parser("eval", help="score a model on test episodes")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--truth", type=Path, help="ground-truth cascades (needed for inf)")
    p.add_argument("--metric", type=_str_list, default=["nll"])
    p.add_argument("--level", type=_int_list, default=[0])
    p.add_argument("--tau", type=float, help="censoring time overriding every level")
    p.add_argument("--max-t", type=float, help="horizon for levels 2 and 3 (default: data)")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--sims", type=int, default=1000)
    p.add_argument("--output", type=Path, help="JSONL report (default: stdout)")

    p = sub.add_parser("generate", help="simulate cascades from a model")
    common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--max-infected", type=int)
    p.add_argument("--data", type=Path, help="episodes whose prefixes are continued")
    p.add_argument("--tau", type=float, help="censoring time of the --data prefixes")
    p.add_argument("--output", type=Path, required=True)
    return parser


def _read_config(path: Path) -> dict:
    try:
        defaults = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(defaults, dict):
        raise UsageError("config file must hold a flat JSON object")
    return {k.replace("-", "_"): v for k, v in defaults.items()}


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    commands = parser._subparsers._group_actions[0].choices
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    found, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in commands), None)
    if found.config is not None and command is not None:
        defaults = _read_config(found.config)
        sub = commands[command]
        unknown = set(defaults) - {a.dest for a in sub._actions}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
                if isinstance(defaults[action.dest], str) and action.type is not None:
                    defaults[action.dest] = action.type(defaults[action.dest])
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _echo(args: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}


def _infer_node_count(path: Path) -> int:
    top = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                try:
                    events = json.loads(line)["events"]
                    top = max([top] + [int(e[0]) for e in events])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError):
                    continue  # reported with a line number by the loader
    return top + 1


def _write_jsonl(path: Path | None, rows) -> None:
    text = "".join(json.dumps(r) + "\n" for r in rows)
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text, encoding="utf-8")


# -- subcommands ---------------------------------------------------------------


def run_synth(args) -> int:
    spec = SyntheticSpec(
        regime=args.regime, node_count=args.nodes, n_episodes=args.episodes, seed=args.seed
    )
    graph = build_graph(spec)
    corpus = sample_corpus(graph, workers=args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    paths = [args.out / f"{args.prefix}{name}" for name in ("episodes.jsonl", "truth.jsonl", "graph.json")]
    write_corpus(corpus, graph, *paths)
    log.info("wrote %d episodes to %s", len(corpus.episodes), paths[0])
    return EXIT_OK


def run_train(args) -> int:
    node_count = args.nodes or _infer_node_count(args.data)
    episodes = load_episodes(args.data, node_count)
    validation = load_episodes(args.validation, node_count) if args.validation else None
    config = TrainConfig(
        d=args.d,
        batch_size=args.batch,
        samples=args.samples,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        cell=args.cell,
        b_length=args.b_length,
        val_samples=args.val_samples,
    )
    trace_path = args.trace or args.model.with_name(args.model.name + ".trace.jsonl")
    ckpt_path = args.checkpoint or args.model.with_name(args.model.name + ".ckpt")
    meta = {
        "args": _echo(args),
        "train_config": asdict(config),
        "normalization": {"first_infection_time": 1.0, "tie_epsilon": TIE_EPSILON},
    }

    start_epoch, opt_state = 0, None
    if args.resume:
        try:
            ckpt = torch.load(args.resume, weights_only=False)
            model = model_from_dict(ckpt["model"], args.family)
        except (OSError, KeyError, RuntimeError) as exc:
            raise UsageError(f"cannot resume from {args.resume}: {exc}") from None
        start_epoch, opt_state = ckpt["epoch"], ckpt["optimizer"]
        if model.n_nodes != node_count:
            raise UsageError("checkpoint node count does not match the data")
    else:
        model = build_model(args.family, node_count, args.d, args.cell, args.seed)

    mode = "a" if args.resume and trace_path.exists() else "w"
    with open(trace_path, mode, encoding="utf-8") as trace:
        trace.write(json.dumps({"config": meta, "start_epoch": start_epoch}) + "\n")

        def on_epoch(row):
            out = {k: v for k, v in row.items() if k not in ("model", "optimizer")}
            trace.write(json.dumps(out) + "\n")
            trace.flush()
            ckpt = {
                "model": model_to_dict(row["model"], meta),
                "optimizer": row["optimizer"],
                "epoch": row["epoch"] + 1,
            }
            torch.save(ckpt, ckpt_path)

        try:
            result = train(
                model,
                episodes,
                config,
                validation=validation,
                start_epoch=start_epoch,
                optimizer_state=opt_state,
                on_epoch=on_epoch,
            )
        except TrainingDiverged as exc:
            log.error("%s; last checkpoint kept at %s", exc, ckpt_path)
            return EXIT_NUMERIC

    meta.update(epochs_done=result.epoch, best_epoch=result.best_epoch, skipped_bins=result.skipped_bins)
    save_model(args.model, result.model, meta)
    log.info("saved %s model to %s", model.family, args.model)
    return EXIT_OK


def run_eval(args) -> int:
    model, _ = load_model(args.model, args.family)
    unknown = set(args.metric) - set(METRICS)
    if unknown:
        raise UsageError(f"unknown metric(s) {sorted(unknown)}; choose from {METRICS}")
    bad = [lv for lv in args.level if lv not in (0, 1, 2, 3)]
    if bad:
        raise UsageError(f"unknown level(s) {bad}")
    if "inf" in args.metric and args.truth is None:
        raise UsageError("the inf metric needs --truth")
    episodes = load_episodes(args.data, model.n_nodes)
    cascades = load_cascades(args.truth, model.n_nodes) if args.truth else None
    reports = evaluate(
        model,
        episodes,
        metrics=args.metric,
        levels=args.level,
        cascades=cascades,
        samples=args.samples,
        n_sims=args.sims,
        tau=args.tau,
        max_t=args.max_t,
        seed=args.seed,
    )
    _write_jsonl(args.output, [r.to_dict() for r in reports])
    return EXIT_OK


def run_generate(args) -> int:
    model, _ = load_model(args.model, args.family)
    rows = []
    if args.data is None:
        if args.tau is not None:
            raise UsageError("--tau needs --data prefixes")
        seeds = np.random.SeedSequence(args.seed).spawn(args.count)
        for s in seeds:
            c = generate(model, SimulationConfig(seed=s, max_infected=args.max_infected))
            rows.append(episode_record(c.episode, c.ancestors, truncated=c.truncated))
    else:
        if args.tau is None:
            raise UsageError("continuing --data prefixes needs --tau")
        episodes = load_episodes(args.data, model.n_nodes)
        for i, ep in enumerate(episodes):
            for j, s in enumerate(np.random.SeedSequence([args.seed, i]).spawn(args.count)):
                prefix = sample_prefix(model, censor(ep, args.tau), seed=int(s.generate_state(1)[0]))
                c = generate_conditioned(
                    model, prefix, args.tau, SimulationConfig(seed=s, max_infected=args.max_infected)
                )
                rows.append(
                    episode_record(c.episode, c.ancestors, source=i, truncated=c.truncated)
                )
    _write_jsonl(args.output, rows)
    return EXIT_OK


COMMANDS = {"synth": run_synth, "train": run_train, "eval": run_eval, "generate": run_generate}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"recctic: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)
    torch.set_num_threads(max(1, args.workers))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"recctic: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EpisodeError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"recctic: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DomainError, FloatingPointError) as exc:
        print(f"recctic: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"recctic: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
