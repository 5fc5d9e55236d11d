#!/usr/bin/env python3
"""
slotlog command line.

    python cli.py query --program P --params T --query "add(1)" [--grad]
    python cli.py oracle --program P --params T --query "add(1)"
    python cli.py circuit-stats --program P [--query Q]
    python cli.py gen-data --config C [--seed S] [--out DIR]
    python cli.py train --config C [--seed S] [--out DIR] [--data DIR]
    python cli.py eval --config C --checkpoint F [--seed S] [--out DIR] [--data DIR]
    python cli.py swap-eval --config C --checkpoint F --program P [--task T] [--seed S] [--out DIR]
    python cli.py experiments [--configs C ...] [--seeds 0 1 2] [--out DIR]

Results go to stdout, logs to stderr. Exit codes: 2 parse error, 3 invalid
program or configuration, 4 missing or bad parameter, 5 capacity exceeded,
6 divergence, 7 unsatisfiable split.
"""

import argparse
import os
import sys
import traceback
from typing import Callable, List, Optional

from circuit import (
    CircuitCache, FactParamTable, backprop, circuit_stats, compile, compile_family,
    evaluate, oracle_distribution, read_param_table,
)
from config import config
from datasets import generate_dataset, majority_baseline, read_dataset, relabel, write_dataset
from errors import SlotlogError
from grounder import GroundAtom, ground_query
from logger import get_logger
from logic_lang import ensure_valid, load_program, parse_atom
from perception import load_checkpoint, save_checkpoint
from reporting import (
    experiment_medians, print_experiment_medians, print_results_summary, save_summary,
    write_experiment_tables, write_metrics_csv, write_metrics_jsonl,
)
from training import (
    TrainConfig, eval_metrics, make_datasets, swap_program_eval, task_program_for, train,
)

CHECKPOINT_FILE = "checkpoint.txt"
CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")
EXPERIMENT_CONFIGS = tuple(
    os.path.join(CONFIG_DIR, f"mm_a_{split}.json")
    for split in ("iid", "compositional", "interpolation", "extrapolation")
)


def _format(p) -> str:
    return f"{float(p):.12f}"


def _log_resolved(args, **inputs):
    get_logger().info("Resolved configuration", command=args.command, engine=config.as_dict(),
                      **inputs)


def _load(args):
    _log_resolved(args, program=args.program, params=args.params, query=args.query)
    program = load_program(args.program)
    ensure_valid(program)
    params = read_param_table(args.params) if args.params else FactParamTable()
    query = parse_atom(args.query)
    ground = ground_query(program, query)
    return ground, params, query


def cmd_query(args) -> int:
    ground, params, query = _load(args)
    is_ground = not any(a.is_var for a in query.args)
    instances = [GroundAtom.from_atom(query)] if is_ground else list(ground.queries)
    if not instances:
        print(_format(0.0))
        return 0
    family = compile_family(ground)
    for instance in instances:
        circuit = family.circuit(instance)
        if args.grad:
            p, grads = backprop(circuit, params)
        else:
            p = evaluate(circuit, params)
        print(_format(p) if is_ground else f"{instance} {_format(p)}")
        if args.grad:
            for key in sorted(grads.keys()):
                print(f"{key} {_format(grads[key])}")
    return 0


def cmd_oracle(args) -> int:
    ground, params, query = _load(args)
    if not any(a.is_var for a in query.args):
        instance = GroundAtom.from_atom(query)
        print(_format(oracle_distribution(ground, params, [instance])[instance]))
        return 0
    if not ground.queries:
        print(_format(0.0))
    for instance, p in oracle_distribution(ground, params).items():
        print(f"{instance} {_format(p)}")
    return 0


def cmd_circuit_stats(args) -> int:
    _log_resolved(args, program=args.program, query=args.query)
    program = load_program(args.program)
    ensure_valid(program)
    query = parse_atom(args.query) if args.query else None
    ground = ground_query(program, query)
    if query is not None and not any(a.is_var for a in query.args):
        stats = circuit_stats(compile(ground, GroundAtom.from_atom(query)))
    else:
        stats = circuit_stats(compile_family(ground))
    stats["facts"] = len(ground.facts)
    stats["rules"] = len(ground.rules)
    stats["queries"] = len(ground.queries)
    for key, value in stats.items():
        print(f"{key}: {value}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    _log_resolved(args, config=cfg.to_dict())
    return cfg


def _out_dir(args) -> str:
    out = args.out or config.default_output_dir
    os.makedirs(out, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _train_config(args)
    out = _out_dir(args)
    for part, examples in make_datasets(cfg).items():
        write_dataset(examples, os.path.join(out, part), cfg.scene, cfg.split)
    print(f"💾 Datasets written to: {out}")
    return 0


def _datasets(args, cfg: TrainConfig):
    if args.data:
        return {part: read_dataset(os.path.join(args.data, part))
                for part in ("train", "val", "test")}
    return make_datasets(cfg)


def _test_setup(cfg: TrainConfig, model, cache: CircuitCache):
    capacity = cfg.test_capacity
    if capacity != model.cfg.n_slots:
        model = model.with_capacity(capacity, seed=cfg.seed)
    return model, task_program_for(cfg, capacity, cache)


def _train_and_test(cfg: TrainConfig, data, out: str):
    """Train, score the best model on the test part and write the run artifacts to `out`."""
    os.makedirs(out, exist_ok=True)
    cache = CircuitCache()
    result = train(cfg, data["train"], data["val"], cache)
    save_checkpoint(result.model, os.path.join(out, CHECKPOINT_FILE))

    model, task = _test_setup(cfg, result.model, cache)
    final = eval_metrics(model, data["test"], task)
    final.epoch = None
    write_metrics_jsonl(result.history + [final], out)
    write_metrics_csv(result.history + [final], out)
    save_summary(out, "train", final, {"best_epoch": result.best_epoch, "seed": cfg.seed,
                                       "config": cfg.to_dict()})
    return result, final


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = _out_dir(args)
    data = _datasets(args, cfg)
    _, final = _train_and_test(cfg, data, out)
    print_results_summary("Training finished", final, out, majority_baseline(data["test"]))
    return 0


def cmd_experiments(args) -> int:
    """Every configuration under every seed, then per-config medians."""
    out = _out_dir(args)
    _log_resolved(args, configs=args.configs, seeds=args.seeds, out=out)
    configs = [(os.path.splitext(os.path.basename(path))[0], TrainConfig.from_file(path))
               for path in args.configs]
    runs = []
    for name, base in configs:
        for seed in args.seeds:
            cfg = base.with_seed(seed)
            _log_resolved(args, experiment=name, config=cfg.to_dict())
            data = make_datasets(cfg)
            result, final = _train_and_test(cfg, data, os.path.join(out, name, f"seed{seed}"))
            runs.append({"config": name, "seed": seed, "task_acc": final.task_acc,
                         "balanced_acc": final.balanced_acc, "concept_acc": final.concept_acc,
                         "count_mae": final.count_mae, "baseline": majority_baseline(data["test"]),
                         "best_epoch": result.best_epoch})
    write_experiment_tables(runs, out)
    print_experiment_medians(experiment_medians(runs), out)
    return 0


def cmd_eval(args) -> int:
    cfg = _train_config(args)
    out = _out_dir(args)
    test = _datasets(args, cfg)["test"] if args.data else \
        generate_dataset(cfg.scene, cfg.n_test, cfg.split, "test")
    model, task = _test_setup(cfg, load_checkpoint(args.checkpoint), CircuitCache())
    metrics = eval_metrics(model, test, task)
    write_metrics_jsonl([metrics], out)
    write_metrics_csv([metrics], out)
    save_summary(out, "eval", metrics, {"checkpoint": args.checkpoint, "seed": cfg.seed})
    print_results_summary("Evaluation finished", metrics, out, majority_baseline(test))
    return 0


def cmd_swap_eval(args) -> int:
    cfg = _train_config(args)
    out = _out_dir(args)
    test = _datasets(args, cfg)["test"] if args.data else \
        generate_dataset(cfg.scene, cfg.n_test, cfg.split, "test")
    if args.task:
        test = relabel(test, args.task)
    model = load_checkpoint(args.checkpoint)
    program = load_program(args.program)
    if cfg.test_capacity != model.cfg.n_slots:
        model = model.with_capacity(cfg.test_capacity, seed=cfg.seed)
    metrics = swap_program_eval(model, program, test)
    write_metrics_jsonl([metrics], out)
    write_metrics_csv([metrics], out)
    save_summary(out, "swap-eval", metrics, {"program": args.program, "task": args.task,
                                             "seed": cfg.seed})
    print_results_summary("Swap evaluation finished", metrics, out, majority_baseline(test))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotlog", description="Exact probabilistic logic over learned object slots"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, help_text in (("query", cmd_query, "probability by compiled circuit"),
                                  ("oracle", cmd_oracle, "probability by world enumeration")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--program", required=True, help="logic program file")
        p.add_argument("--params", help="parameter table file")
        p.add_argument("--query", required=True, help="query atom, variables allowed")
        if name == "query":
            p.add_argument("--grad", action="store_true", help="also print dp/dparam per key")
        p.set_defaults(func=func)

    p = sub.add_parser("circuit-stats", help="size of the compiled circuit")
    p.add_argument("--program", required=True)
    p.add_argument("--query", help="query atom; defaults to the program's queries")
    p.set_defaults(func=cmd_circuit_stats)

    for name, func, help_text in (("gen-data", cmd_gen_data, "write train/val/test scenes"),
                                  ("train", cmd_train, "train the perception model"),
                                  ("eval", cmd_eval, "evaluate a checkpoint"),
                                  ("swap-eval", cmd_swap_eval, "evaluate under another program")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment configuration (JSON)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help=f"output directory (default {config.default_output_dir})")
        if name in ("train", "eval", "swap-eval"):
            p.add_argument("--data", help="read datasets written by gen-data from this directory")
        if name in ("eval", "swap-eval"):
            p.add_argument("--checkpoint", required=True)
        if name == "swap-eval":
            p.add_argument("--program", required=True, help="program replacing the training task")
            p.add_argument("--task", help="relabel scenes for this task (addition, count, pair)")
        p.set_defaults(func=func)

    p = sub.add_parser("experiments", help="train every config under several seeds, report medians")
    p.add_argument("--configs", nargs="+", default=list(EXPERIMENT_CONFIGS),
                   help="experiment configurations (default: the four MM-A splits)")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--out", help=f"output directory (default {config.default_output_dir})")
    p.set_defaults(func=cmd_experiments)
    return parser


def main_wrapper(command: Callable, args) -> int:
    """
    Run one command and map failures to exit codes.

    Returns:
        Exit code (0 = success, see module docstring otherwise)
    """
    try:
        return command(args)
    except SlotlogError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        print(f"❌ Unexpected Error: {e}", file=sys.stderr)
        traceback.print_exc()
        return 1


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return main_wrapper(args.func, args)


if __name__ == "__main__":
    sys.exit(main())
