"""Experiment runner: YAML config in, per-round CSV and summary JSON out.

Config layout (``schema_version: 1``)::

    schema_version: 1
    output_dir: results
    master_seed: 1
    architectures: [client-server, pow, pos, pofl, kfc, krum-cs, trimmedmean-cs]
    defaults:                      # merged under every experiment
      n_clients: 30
      n_pools: 3
      clients_per_round: 5
      rounds: 30
      train: {epochs: 5, learning_rate: 0.5, batch_size: 10}
      data: {source: synthetic, k: 3, p: 16, n_per_class: 500, spread: 0.25}
    experiments:
      - name: scenario_a_backdoor
        scenario: A
        attack:
          kind: backdoor
          pattern: {shape: cross, target_label: 0}
        architectures: [client-server, pofl, kfc]   # optional override
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import yaml

from .attack import AttackSpec
from .data import PatternKey, make_pattern
from .errors import ConfigError
from .mlcore import TrainSpec
from .sim import ARCHITECTURES, DataSpec, MetricsSeries, SimConfig, accuracy_10, run_simulation

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_HEADER = [
    "round",
    "architecture",
    "original_acc",
    "backdoor_acc",
    "validation_acc",
    "winner_miner",
    "acc10_running",
]

_SIM_KEYS = {f.name for f in fields(SimConfig)} - {"architecture", "attack", "train", "data"}


@dataclass
class Experiment:
    name: str
    architectures: list[str]
    base: SimConfig


@dataclass
class ExperimentFile:
    output_dir: Path
    experiments: list[Experiment] = field(default_factory=list)

    def names(self) -> list[str]:
        return [e.name for e in self.experiments]


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _pattern_from(raw: dict, p: int) -> PatternKey:
    if "overrides" in raw:
        return PatternKey(tuple(tuple(o) for o in raw["overrides"]), int(raw["target_label"]))
    center = raw.get("center", (1, 1))
    return make_pattern(
        raw.get("shape", "pixel"),
        p,
        int(raw.get("target_label", 0)),
        value=float(raw.get("value", 0.0)),
        width=raw.get("width"),
        center=tuple(center),
    )


def _sim_config(raw: dict, seed_override: int | None) -> SimConfig:
    unknown = set(raw) - _SIM_KEYS - {"attack", "train", "data", "name", "architectures"}
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    data = DataSpec(**raw.get("data", {}))
    train_raw = dict(raw.get("train", {}))
    train_raw.pop("seed", None)  # per-client seeds are derived from master_seed
    train = TrainSpec(**train_raw)
    attack_raw = dict(raw.get("attack", {}))
    if "pattern" in attack_raw and attack_raw["pattern"] is not None:
        attack_raw["pattern"] = _pattern_from(attack_raw["pattern"], data.p)
    attack = AttackSpec(**attack_raw)
    kwargs = {k: raw[k] for k in _SIM_KEYS if k in raw}
    if "stakes" in kwargs and kwargs["stakes"] is not None:
        kwargs["stakes"] = tuple(float(s) for s in kwargs["stakes"])
    if seed_override is not None:
        kwargs["master_seed"] = seed_override
    return SimConfig(attack=attack, train=train, data=data, **kwargs)


def load_experiment_file(path, seed: int | None = None, out: str | None = None) -> ExperimentFile:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    defaults = dict(doc.get("defaults") or {})
    if "master_seed" in doc:
        defaults.setdefault("master_seed", doc["master_seed"])
    archs_default = list(doc.get("architectures") or ARCHITECTURES)
    raw_exps = doc.get("experiments")
    if not raw_exps or not isinstance(raw_exps, list):
        raise ConfigError("config needs a non-empty 'experiments' list")

    result = ExperimentFile(Path(out or doc.get("output_dir") or "results"))
    seen = set()
    for raw in raw_exps:
        if not isinstance(raw, dict) or "name" not in raw:
            raise ConfigError("every experiment needs a name")
        name = str(raw["name"])
        if name in seen:
            raise ConfigError(f"duplicate experiment name {name!r}")
        seen.add(name)
        merged = _deep_merge(defaults, raw)
        archs = list(merged.get("architectures") or archs_default)
        for a in archs:
            if a not in ARCHITECTURES:
                raise ConfigError(f"{name}: unknown architecture {a!r}")
        try:
            base = _sim_config(merged, seed)
            if base.data.source == "csv" and not Path(base.data.path).exists():
                raise ConfigError(f"dataset {base.data.path} does not exist")
            # validate once per architecture so config errors surface before any run
            for a in archs:
                replace(base, architecture=a)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
        result.experiments.append(Experiment(name, archs, base))
    return result


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def emit_round_csv(series: MetricsSeries | Sequence[MetricsSeries], path) -> None:
    """One row per (architecture, round); floats use shortest round-trip repr."""
    if isinstance(series, MetricsSeries):
        series = [series]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in series:
            orig = s.original()
            for i, r in enumerate(s.rounds):
                writer.writerow(
                    [
                        r.round,
                        s.architecture,
                        _fmt(r.original_acc),
                        _fmt(r.backdoor_acc),
                        _fmt(r.validation_acc),
                        _fmt(r.winner_miner),
                        _fmt(accuracy_10(orig[: i + 1])),
                    ]
                )


def read_round_csv(path) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ConfigError(f"unexpected CSV header {reader.fieldnames}")
        for row in reader:
            rows.append(
                {
                    "round": int(row["round"]),
                    "architecture": row["architecture"],
                    "original_acc": float(row["original_acc"]),
                    "backdoor_acc": float(row["backdoor_acc"]) if row["backdoor_acc"] else None,
                    "validation_acc": float(row["validation_acc"]),
                    "winner_miner": int(row["winner_miner"]) if row["winner_miner"] else None,
                    "acc10_running": float(row["acc10_running"]),
                }
            )
    return rows


def summary_doc(name: str, config: SimConfig, results: Sequence[MetricsSeries]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": name,
        "master_seed": config.master_seed,
        "scenario": config.scenario,
        "attack": config.attack.kind,
        "rounds": config.rounds,
        "architectures": {s.architecture: s.summary() for s in results},
    }


def _threads() -> int:
    raw = os.environ.get("KFC_SIM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"KFC_SIM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("KFC_SIM_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def run_experiments(exp_file: ExperimentFile, names: Sequence[str] | None = None) -> list[Path]:
    selected = exp_file.experiments
    if names:
        missing = [n for n in names if n not in exp_file.names()]
        if missing:
            raise ConfigError(f"unknown experiments: {', '.join(missing)}")
        selected = [e for e in selected if e.name in names]
    jobs = [(e, a) for e in selected for a in e.architectures]

    def work(job):
        exp, arch = job
        logger.info("running %s / %s", exp.name, arch)
        return run_simulation(replace(exp.base, architecture=arch))

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(work, jobs))

    exp_file.output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    i = 0
    for exp in selected:
        chunk = results[i : i + len(exp.architectures)]
        i += len(exp.architectures)
        csv_path = exp_file.output_dir / f"{exp.name}.csv"
        json_path = exp_file.output_dir / f"{exp.name}.summary.json"
        emit_round_csv(chunk, csv_path)
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(summary_doc(exp.name, exp.base, chunk), fh, indent=2)
            fh.write("\n")
        written += [csv_path, json_path]
    return written


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kfcsim", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="YAML experiment file")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("--seed", type=int, help="master seed for every experiment")
    ap.add_argument("--experiments", help="comma-separated subset of experiment names")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        exp_file = load_experiment_file(args.config, seed=args.seed, out=args.out)
        names = [n.strip() for n in args.experiments.split(",")] if args.experiments else None
        if names:
            missing = [n for n in names if n not in exp_file.names()]
            if missing:
                raise ConfigError(f"unknown experiments: {', '.join(missing)}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        for path in run_experiments(exp_file, names):
            print(path)
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        logger.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())
