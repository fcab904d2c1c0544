"""Command line entry point: run, coldstart, sweep, verify, synth-clients."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .coldstart import Channel, ServerState, cold_start, deploy_global
from .config import ConfigError, RunConfig, apply_override, config_from_dict, echo_config, load_raw, parse_config
from .correlation import dump_csv
from .data_synth import load_labeled_set, make_new_clients, save_labeled_set
from .expert_pool import load_pool, save_pool
from .gating import load_gate, save_gate
from .nn_core import load_params, save_params
from .orchestrator import FederationState, RoundMetrics, run_federation
from .verify import run_verify

logger = logging.getLogger("fedcoe")


def _threads(value: Optional[int]) -> int:
    return value if value else (os.cpu_count() or 1)


def save_run_checkpoints(state: FederationState, out_dir: Path) -> None:
    ckpt = out_dir / "checkpoints"
    (ckpt / "clients").mkdir(parents=True, exist_ok=True)
    for i, params in enumerate(state.clients):
        save_params(ckpt / "clients" / f"client_{i}.ckpt", params, state.spec, role="client", index=i)
    if state.pool is not None:
        save_pool(ckpt / "pool", state.pool)
        save_gate(ckpt / "gate.ckpt", state.gate)
    if state.global_model is not None:
        save_params(ckpt / "global.ckpt", state.global_model, state.spec, role="global")


def execute_run(cfg: RunConfig, out_dir: Path, threads: int = 1, dump_correlation: bool = False, plot: bool = True):
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    corr_dir = out_dir / "correlation"

    def on_round(state: FederationState, metrics: RoundMetrics) -> None:
        if dump_correlation and state.last_cm is not None:
            corr_dir.mkdir(exist_ok=True)
            dump_csv(corr_dir / f"round_{metrics.round:04d}.csv", state.last_cm)

    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        result = run_federation(cfg, threads=threads, metrics_stream=fh, on_round=on_round)
    save_run_checkpoints(result.state, out_dir)
    if plot:
        from .report import plot_metrics

        plot_metrics(out_dir / "metrics.csv", out_dir / "metrics.png", title=f"{cfg.method} seed={cfg.seed}")
    return result


def cmd_run(args) -> int:
    cfg = parse_config(args.config, args.set)
    last = execute_run(cfg, Path(args.out), _threads(args.threads), args.dump_correlation).metrics[-1]
    print(f"round {last.round}: global_acc={last.global_acc:.4f} mean_personalized_acc={last.mean_personalized_acc:.4f}")
    return 0


def coldstart_run(run_dir: Path, client_files: Sequence[str], out_dir: Path, test_fraction: float = 0.2):
    """Serve each client file against a finished run; returns result rows and traces."""
    cfg = config_from_dict(json.loads((run_dir / "config.json").read_text()))
    ckpt = run_dir / "checkpoints"
    rows, traces = [], []
    if (ckpt / "pool" / "manifest.json").exists():
        server = ServerState(load_pool(ckpt / "pool"), load_gate(ckpt / "gate.ckpt"))
        for k, path in enumerate(client_files):
            data = load_labeled_set(path)
            channel = Channel()
            _, acc = cold_start(server, data, test_fraction, seed=cfg.seed + k, channel=channel)
            rows.append({"client": str(path), "mode": "assembled", "samples": len(data), "accuracy": acc})
            traces.append({"client": str(path), "payloads": channel.trace.kinds()})
    else:
        model, spec, _ = load_params(ckpt / "global.ckpt")
        for k, path in enumerate(client_files):
            data = load_labeled_set(path)
            acc = deploy_global(model, spec, data, test_fraction, seed=cfg.seed + k)
            rows.append({"client": str(path), "mode": "global", "samples": len(data), "accuracy": acc})
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "coldstart.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["client", "mode", "samples", "accuracy"])
        for r in rows:
            writer.writerow([r["client"], r["mode"], r["samples"], f"{r['accuracy']:.6f}"])
    if traces:
        (out_dir / "protocol_trace.json").write_text(json.dumps(traces, indent=2) + "\n")
    return rows, traces


def cmd_coldstart(args) -> int:
    out_dir = Path(args.out)
    rows, _ = coldstart_run(Path(args.run), args.clients, out_dir, args.test_fraction)
    from .report import plot_coldstart

    plot_coldstart(out_dir / "coldstart.csv", out_dir / "coldstart.png")
    accs = np.array([r["accuracy"] for r in rows])
    print(f"{len(rows)} clients: mean={accs.mean():.4f} std={accs.std():.4f}")
    return 0


def parse_grid(items: Sequence[str]) -> Dict[str, List[str]]:
    grid: Dict[str, List[str]] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(item, "grid must look like key=v1,v2")
        key, raw = item.split("=", 1)
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(key, "grid needs at least one value")
        grid[key.strip()] = values
    return grid


def execute_sweep(config_path, overrides, grid: Dict[str, List[str]], out_dir: Path, threads: int = 1):
    keys = list(grid)
    base = load_raw(config_path)
    for assignment in overrides:
        apply_override(base, assignment)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    # resolve every combination first so a bad value fails before any run starts
    cfgs = []
    for combo in combos:
        values = json.loads(json.dumps(base))
        for k, v in zip(keys, combo):
            apply_override(values, f"{k}={v}")
        cfgs.append(config_from_dict(values))
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for combo, cfg in zip(combos, cfgs):
        name = "_".join(f"{k}={v}" for k, v in zip(keys, combo)).replace("/", "-")
        last = execute_run(cfg, out_dir / name, threads).metrics[-1]
        summary.append((combo, name, last))
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(keys + ["run_dir", "global_acc", "mean_personalized_acc"])
        for combo, name, last in summary:
            writer.writerow(list(combo) + [name, f"{last.global_acc:.6f}", f"{last.mean_personalized_acc:.6f}"])
    from .report import plot_sweep

    plot_sweep(out_dir / "summary.csv", keys, out_dir / "sweep.png")
    return summary


def cmd_sweep(args) -> int:
    summary = execute_sweep(args.config, args.set, parse_grid(args.grid), Path(args.out), _threads(args.threads))
    for _, name, last in summary:
        print(f"{name}: global_acc={last.global_acc:.4f} mean_personalized_acc={last.mean_personalized_acc:.4f}")
    return 0


def cmd_verify(args) -> int:
    results = run_verify(instances=args.instances, seed=args.seed, report=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return 1 if failed else 0


def cmd_synth_clients(args) -> int:
    cfg = parse_config(args.config, args.set)
    clients = make_new_clients(
        num_new=args.count,
        num_classes=cfg.num_classes,
        samples_per_class=args.samples_per_class,
        input_dim=cfg.input_dim,
        spread=cfg.spread,
        alpha=cfg.alpha_dirichlet,
        seed=cfg.seed + args.offset,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, data in enumerate(clients):
        path = out_dir / f"new_client_{k}.bin"
        save_labeled_set(path, data)
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcoe", description="FedCoE federated mixture-of-experts simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="pre-train and run federated rounds")
    p.add_argument("--config", required=True, help="JSON config file (may be empty)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--threads", type=int, default=None, help="client training threads (default: all cores)")
    p.add_argument("--dump-correlation", action="store_true", help="write the per-round correlation matrix")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("coldstart", help="zero-shot onboarding of new clients against a finished run")
    p.add_argument("--run", required=True, help="run directory produced by `run`")
    p.add_argument("--clients", required=True, nargs="+", help="dataset files, one per new client")
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_coldstart)

    p = sub.add_parser("sweep", help="cartesian grid of runs")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, action="append", metavar="KEY=V1,V2", help="repeatable")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="brute-force oracle suite")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth-clients", help="write new-client dataset files for coldstart")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--samples-per-class", type=int, default=100)
    p.add_argument("--offset", type=int, default=7777, help="seed offset so new clients differ from the federation")
    p.set_defaults(func=cmd_synth_clients)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
