"""Config-driven experiment runner and report emitter.

Configs are INI files (`key = value` under `[section]` headers, parsed by
configparser); unknown sections or keys are rejected before any computation.
`run` executes one experiment per seed and writes, per seed, a CSV report
(one row per round per client, fixed column order) and a JSON summary, plus
one manifest for the whole run. Report and summary files are byte-identical
across re-runs of the same config; only the manifest carries wall-clock
timings. Seeds execute in parallel when FEDGATE_WORKERS is set above 1.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from csv import writer as csv_writer
from pathlib import Path

import numpy as np

from . import __version__, models
from .data import DataConfig, PartitionConfig, dump_dataset_csv, gen_synthetic, \
    partition_assignment, write_partition_manifest
from .federation import FederationConfig, run_experiment
from .gating import GateConfig
from .rng import derive_seed

SCHEMA_VERSION = 1

CSV_COLUMNS = (
    "schema_version", "strategy", "task", "seed", "round", "client",
    "n_train", "m_forward", "m_backward", "metric", "local_metric", "delta",
    "mean_gate_weight", "private_forwards", "private_backwards",
    "proxy_forwards", "proxy_backwards", "uploaded_params", "broadcast_params",
)

_REQUIRED = object()


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> list:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty size list")
    return [int(p) for p in parts]


# (section, key) -> (converter, default); _REQUIRED marks keys that must be set.
CONFIG_SCHEMA = {
    ("experiment", "output_dir"): (str, _REQUIRED),
    ("experiment", "num_seeds"): (int, 1),
    ("experiment", "seed"): (int, 0),
    ("experiment", "dump_params"): (_parse_bool, False),
    ("data", "task"): (str, _REQUIRED),
    ("data", "n"): (int, _REQUIRED),
    ("data", "d"): (int, _REQUIRED),
    ("data", "classes"): (int, 4),
    ("data", "noise"): (float, 0.1),
    ("data", "spread"): (float, 2.0),
    ("data", "latent_clusters"): (int, 5),
    ("partition", "clients"): (int, 6),
    ("partition", "alpha"): (float, 0.1),
    ("partition", "bins"): (int, 5),
    ("partition", "mode"): (str, ""),
    ("partition", "train_frac"): (float, 0.6),
    ("partition", "val_frac"): (float, 0.2),
    ("partition", "test_frac"): (float, 0.2),
    ("federation", "strategy"): (str, "fedekd"),
    ("federation", "rounds"): (int, 5),
    ("federation", "local_epochs"): (int, 2),
    ("federation", "batch_size"): (int, 64),
    ("federation", "learning_rate"): (float, 1e-4),
    ("federation", "aggregation"): (str, "uniform"),
    ("federation", "fedprox_mu"): (float, 0.01),
    ("federation", "private_hidden"): (_parse_int_list, [64, 64]),
    ("federation", "proxy_hidden"): (_parse_int_list, [16]),
    ("federation", "proxy_supervised"): (_parse_bool, False),
    ("gate", "energy"): (str, "auto"),
    ("gate", "beta"): (float, 1.0),
    ("gate", "lambda_kd"): (float, 1.0),
    ("gate", "eps_b"): (float, 1e-8),
    ("gate", "eps_h"): (float, 1e-8),
}


class ConfigError(Exception):
    pass


def _raw_from_ini(path: str) -> dict:
    import configparser

    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    raw: dict = {}
    for section in parser.sections():
        raw[section] = dict(parser.items(section))
    return raw


def _raw_from_manifest(path: str) -> dict | None:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None
    if isinstance(payload, dict) and "resolved_config" in payload:
        return {section: {k: str(v) if not isinstance(v, list)
                          else ",".join(str(x) for x in v)
                          for k, v in keys.items()}
                for section, keys in payload["resolved_config"].items()}
    raise ConfigError(f"{path} is JSON but not a run manifest")


def resolve_config(path: str, overrides: list[str] = ()) -> dict:
    """Load an INI config (or a manifest's embedded config), apply
    `section.key=value` overrides, validate against the schema, and return
    the fully resolved {section: {key: value}} mapping."""
    raw = _raw_from_manifest(path)
    if raw is None:
        raw = _raw_from_ini(path)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        raw.setdefault(section.strip(), {})[key.strip()] = value.strip()

    known_sections = {section for section, _ in CONFIG_SCHEMA}
    for section in raw:
        if section not in known_sections:
            raise ConfigError(f"unknown config section [{section}]")
        for key in raw[section]:
            if (section, key) not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {section}.{key}")

    resolved: dict = {}
    for (section, key), (convert, default) in CONFIG_SCHEMA.items():
        text = raw.get(section, {}).get(key)
        if text is None:
            if default is _REQUIRED:
                raise ConfigError(f"missing required config key {section}.{key}")
            value = default
        else:
            try:
                value = convert(text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc
        resolved.setdefault(section, {})[key] = value

    if resolved["data"]["task"] not in ("classification", "regression"):
        raise ConfigError("data.task must be classification or regression")
    if not resolved["partition"]["mode"]:
        resolved["partition"]["mode"] = (
            "label_skew" if resolved["data"]["task"] == "classification"
            else "covariate_shift")
    return resolved


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def build_configs(resolved: dict, seed: int
                  ) -> tuple[FederationConfig, PartitionConfig, DataConfig]:
    part = resolved["partition"]
    fed = resolved["federation"]
    gate = resolved["gate"]
    data = resolved["data"]
    gate_cfg = GateConfig(
        energy_kind=gate["energy"], beta=gate["beta"],
        lambda_kd=gate["lambda_kd"], eps_b=gate["eps_b"], eps_h=gate["eps_h"])
    fed_cfg = FederationConfig(
        strategy=fed["strategy"], rounds=fed["rounds"],
        local_epochs=fed["local_epochs"], batch_size=fed["batch_size"],
        gate=gate_cfg, fedprox_mu=fed["fedprox_mu"],
        aggregation=fed["aggregation"], seed=seed,
        learning_rate=fed["learning_rate"],
        private_hidden=tuple(fed["private_hidden"]),
        proxy_hidden=tuple(fed["proxy_hidden"]),
        proxy_supervised=fed["proxy_supervised"])
    part_cfg = PartitionConfig(
        num_clients=part["clients"], alpha=part["alpha"], bins=part["bins"],
        mode=part["mode"],
        split=(part["train_frac"], part["val_frac"], part["test_frac"]),
        seed=seed)
    data_cfg = DataConfig(
        task=data["task"], n=data["n"], d=data["d"], classes=data["classes"],
        noise=data["noise"], spread=data["spread"],
        latent_clusters=data["latent_clusters"])
    return fed_cfg, part_cfg, data_cfg


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _report_csv_text(result, seed: int) -> str:
    buf = io.StringIO()
    w = csv_writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for report in result.reports:
        c = report.counters
        for i in range(len(report.metrics)):
            w.writerow([_fmt(v) for v in (
                SCHEMA_VERSION, report.strategy, report.task, seed,
                report.round_idx, i, report.n_train[i], report.m_forward[i],
                report.m_backward[i], float(report.metrics[i]),
                float(report.local_metrics[i]),
                float(report.deltas[i]), report.mean_gate_weight[i],
                c.private_forwards, c.private_backwards, c.proxy_forwards,
                c.proxy_backwards, c.uploaded_params, c.broadcast_params,
            )])
    return buf.getvalue()


def _summary_text(result, resolved: dict, seed: int) -> str:
    weights = [w for r in result.reports for w in r.mean_gate_weight
               if w is not None]
    payload = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash(resolved),
        "task": result.task,
        "strategy": result.strategy,
        "seed": seed,
        "clients": len(result.final.delta),
        "rounds": len(result.reports),
        "final": result.final.as_dict(),
        "counters_total": result.counters_total.as_dict(),
        "mean_gate_weight": (float(np.mean(weights)) if weights else None),
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def run_one_seed(resolved: dict, seed: int) -> dict:
    """One full experiment; returns the file payloads for this seed."""
    fed_cfg, part_cfg, data_cfg = build_configs(resolved, seed)
    started = time.monotonic()
    result = run_experiment(fed_cfg, part_cfg, data_cfg)
    elapsed = time.monotonic() - started
    payload = {
        "seed": seed,
        "csv": _report_csv_text(result, seed),
        "summary": _summary_text(result, resolved, seed),
        "elapsed": elapsed,
        "params": {},
    }
    if resolved["experiment"]["dump_params"]:
        blobs = {}
        for client in result.final_clients:
            blobs[f"client{client.id}_private.bin"] = \
                models.params_bytes(client.private)
        if result.global_model is not None:
            blobs["global_model.bin"] = models.params_bytes(result.global_model)
        payload["params"] = blobs
    return payload


def _seed_worker(args: tuple) -> dict:
    resolved, seed = args
    return run_one_seed(resolved, seed)


def cmd_run(args) -> int:
    try:
        resolved = resolve_config(args.config, args.set or [])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(resolved["experiment"]["output_dir"])
    base_seed = resolved["experiment"]["seed"]
    seeds = [base_seed + i for i in range(resolved["experiment"]["num_seeds"])]
    workers = int(os.environ.get("FEDGATE_WORKERS", "1"))

    stage = "train"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                payloads = list(pool.map(
                    _seed_worker, [(resolved, s) for s in seeds]))
        else:
            payloads = [run_one_seed(resolved, s) for s in seeds]

        stage = "write"
        reports, summaries, timings = [], [], []
        for payload in payloads:
            seed = payload["seed"]
            report_name = f"report_seed{seed}.csv"
            summary_name = f"summary_seed{seed}.json"
            (out_dir / report_name).write_text(payload["csv"])
            (out_dir / summary_name).write_text(payload["summary"])
            for name, blob in payload["params"].items():
                pdir = out_dir / f"params_seed{seed}"
                pdir.mkdir(exist_ok=True)
                (pdir / name).write_bytes(blob)
            reports.append(report_name)
            summaries.append(summary_name)
            timings.append(payload["elapsed"])
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "tool": "fedgate",
            "tool_version": __version__,
            "config_hash": config_hash(resolved),
            "resolved_config": resolved,
            "seeds": seeds,
            "reports": reports,
            "summaries": summaries,
            "timings_sec": timings,
        }
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"error in stage {stage}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(reports)} report(s) to {out_dir}")
    return 0


def _load_summaries(manifest_path: Path) -> list[dict]:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    names = manifest.get("summaries", [])
    if not names:
        raise FileNotFoundError(f"manifest {manifest_path} lists no summaries")
    summaries = []
    for name in names:
        path = manifest_path.parent / name
        if not path.exists():
            raise FileNotFoundError(f"missing report file {path}")
        with open(path) as fh:
            summaries.append(json.load(fh))
    return summaries


def cmd_report(args) -> int:
    try:
        summaries = []
        for mpath in args.manifest:
            summaries.extend(_load_summaries(Path(mpath)))
    except (OSError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    groups: dict = {}
    for s in summaries:
        groups.setdefault((s["strategy"], s["task"]), []).append(s)

    def stat(values):
        arr = np.asarray(values, dtype=np.float64)
        return f"{arr.mean():+.4f} ± {arr.std():.4f}"

    header = (f"{'strategy':<16} {'task':<14} {'seeds':>5}  "
              f"{'avg_delta':>18} {'worst_delta':>18} {'tail_delta':>18} "
              f"{'avg_metric':>18} {'worst_metric':>18}")
    print(header)
    print("-" * len(header))
    for (strategy, task), rows in sorted(groups.items()):
        tail_key = "p10_delta" if task == "classification" else "p90_delta"
        finals = [r["final"] for r in rows]
        print(f"{strategy:<16} {task:<14} {len(rows):>5}  "
              f"{stat([f['avg_delta'] for f in finals]):>18} "
              f"{stat([f['worst_delta'] for f in finals]):>18} "
              f"{stat([f[tail_key] for f in finals]):>18} "
              f"{stat([f['avg_metric'] for f in finals]):>18} "
              f"{stat([f['worst_metric'] for f in finals]):>18}")
    return 0


def cmd_partition(args) -> int:
    try:
        resolved = resolve_config(args.config, args.set or [])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    stage = "data"
    try:
        seed = resolved["experiment"]["seed"]
        data = resolved["data"]
        ds = gen_synthetic(
            data["task"], data["n"], data["d"], classes=data["classes"],
            noise=data["noise"], seed=derive_seed(seed, "data"),
            spread=data["spread"], latent_clusters=data["latent_clusters"])
        stage = "partition"
        part = resolved["partition"]
        pcfg = PartitionConfig(
            num_clients=part["clients"], alpha=part["alpha"],
            bins=part["bins"], mode=part["mode"],
            split=(part["train_frac"], part["val_frac"], part["test_frac"]),
            seed=derive_seed(seed, "partition"))
        assignment = partition_assignment(ds, pcfg)
        stage = "write"
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        dump_dataset_csv(ds, out_dir / "dataset.csv")
        write_partition_manifest(ds, pcfg, assignment, "dataset.csv",
                                 out_dir / "partition_manifest.json")
    except Exception as exc:  # noqa: BLE001
        print(f"error in stage {stage}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote dataset.csv and partition_manifest.json to {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedgate",
        description="Energy-gated federated distillation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment per seed")
    p_run.add_argument("--config", required=True,
                       help="INI config file, or a manifest.json to re-run")
    p_run.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="summarize runs across seeds")
    p_rep.add_argument("--manifest", action="append", required=True,
                       help="manifest.json from a run (repeatable)")
    p_rep.set_defaults(func=cmd_report)

    p_part = sub.add_parser("partition", help="dump the partitioned dataset")
    p_part.add_argument("--config", required=True)
    p_part.add_argument("--out", required=True, help="output directory")
    p_part.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p_part.set_defaults(func=cmd_partition)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
