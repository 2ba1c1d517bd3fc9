"""Command-line front end: generate, train, sweep, evaluate, audit.

One JSON config document drives every command. Defaults are materialized,
`CALIBFIELD_*` environment variables override file values (nested keys join
with double underscores, values parse as JSON literals with a plain-string
fallback), and a handful of flags override both. Every command writes the
fully resolved config next to its outputs so a run can be reproduced exactly.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from calibfield import __version__, audit, geometry, recal, synth
from calibfield.dataio import (
    DataError,
    Dataset,
    SplitSpec,
    load_triples,
    sample_bank,
    save_triples,
    split,
)
from calibfield.field import (
    KernelConfig,
    LossConfig,
    NumericalError,
    TrainConfig,
    field_on,
    train,
)
from calibfield.metrics import ConvergenceError, binned_reliability, brier, smece
from calibfield.selection import HyperGrid, grid_search

ENV_PREFIX = "CALIBFIELD_"

DEFAULT_CONFIG = {
    "seed": 0,
    "format": "csv",
    "dataset": {
        "kind": "three_cluster",
        "n": 10000,
        "seed": None,
        # three_cluster knobs
        "cluster_std": 0.6,
        "shifts": [-1.0, 0.0, 1.0],
        # sinusoidal knobs
        "amplitude": 1.0,
        "frequency": 1,
        "direction": [1.0, 0.0],
        # shared logit model
        "logit_noise_std": 0.5,
        # file ingestion
        "path": None,
    },
    "split": {"train_frac": 0.8, "val_frac": 0.1, "test_frac": 0.1, "seed": None},
    "arch": {
        "hidden_width": 256,
        "hidden_layers": 2,
        "output_dim": 64,
        "dropout_rate": 0.1,
    },
    "kernel": {"bandwidth": 0.1},
    "loss": {"lam": 0.01, "m_min": 20.0},
    "train": {
        "learning_rate": 3e-5,
        "weight_decay": 7e-6,
        "batch_size": 1024,
        "grad_clip_norm": 1.0,
        "max_epochs": 100,
        "patience": 20,
        "seed": None,
    },
    "bank_cap": 20000,
    "grid": {"bandwidths": [0.05, 0.1, 0.3, 1.0], "lambdas": [0.0, 1e-3, 1e-2]},
    "regime": {"epsilon": 0.05, "sweep": [0.01, 0.05, 0.10, 0.15]},
    "correction": {"alpha_grid": [0.25, 0.5, 1.0, 2.0, 4.0, 8.0]},
    "resreg": {"hidden_width": 1024, "hidden_layers": 3, "max_epochs": 300},
}


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def env_overrides(environ=None) -> dict:
    """Collect CALIBFIELD_* variables into a nested override dict."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return out


def resolve_config(args) -> dict:
    """defaults <- config file <- environment <- command-line flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ValueError("config file must contain a JSON object")
        cfg = _deep_merge(cfg, loaded)
    cfg = _deep_merge(cfg, env_overrides())
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "format", None):
        cfg["format"] = args.format
    if getattr(args, "epsilon", None) is not None:
        cfg["regime"]["epsilon"] = args.epsilon
    for section in ("dataset", "split", "train"):
        if cfg[section].get("seed") is None:
            cfg[section]["seed"] = cfg["seed"]
    return cfg


def _dataset_from_config(cfg: dict) -> Dataset:
    d = cfg["dataset"]
    kind = d.get("kind")
    if kind == "three_cluster":
        spec = synth.ThreeClusterSpec(
            n=int(d["n"]),
            cluster_std=float(d["cluster_std"]),
            shifts=tuple(d["shifts"]),
            logit_noise_std=float(d["logit_noise_std"]),
            seed=int(d["seed"]),
        )
        return synth.gen_three_cluster(spec)
    if kind == "sinusoidal":
        spec = synth.SinusoidSpec(
            n=int(d["n"]),
            amplitude=float(d["amplitude"]),
            frequency=int(d["frequency"]),
            direction=tuple(d["direction"]),
            logit_noise_std=float(d["logit_noise_std"]),
            seed=int(d["seed"]),
        )
        return synth.gen_sinusoidal(spec)
    if kind == "file":
        if not d.get("path"):
            raise ValueError("dataset.kind is 'file' but dataset.path is not set")
        return load_triples(d["path"], d.get("format") or cfg["format"])
    raise ValueError(f"unknown dataset.kind {kind!r}")


def _splits(cfg: dict, ds: Dataset):
    s = cfg["split"]
    spec = SplitSpec(train_frac=s["train_frac"], val_frac=s["val_frac"],
                     test_frac=s["test_frac"], seed=int(s["seed"]))
    return split(ds, spec)


def _arch(cfg: dict, input_dim: int) -> geometry.NetArch:
    a = cfg["arch"]
    return geometry.NetArch(
        input_dim=input_dim,
        hidden_width=int(a["hidden_width"]),
        hidden_layers=int(a["hidden_layers"]),
        output_dim=int(a["output_dim"]),
        dropout_rate=float(a["dropout_rate"]),
    )


def _kcfg(cfg: dict) -> KernelConfig:
    return KernelConfig(bandwidth=float(cfg["kernel"]["bandwidth"]))


def _lcfg(cfg: dict) -> LossConfig:
    return LossConfig(lam=float(cfg["loss"]["lam"]), m_min=float(cfg["loss"]["m_min"]))


def _tcfg(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=float(t["learning_rate"]),
        weight_decay=float(t["weight_decay"]),
        batch_size=int(t["batch_size"]),
        grad_clip_norm=float(t["grad_clip_norm"]),
        max_epochs=int(t["max_epochs"]),
        patience=int(t["patience"]),
        seed=int(t["seed"]),
    )


def _regime(cfg: dict) -> audit.RegimeConfig:
    r = cfg["regime"]
    return audit.RegimeConfig(epsilon=float(r["epsilon"]), sweep=tuple(r["sweep"]))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for blob in iter(lambda: fh.read(1 << 20), b""):
            h.update(blob)
    return h.hexdigest()


def _write_outputs(out_dir: Path, cfg: dict, command: str, files: dict[str, str | bytes]):
    """Write text/bytes payloads plus the resolved config and a manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, payload in files.items():
        p = out_dir / name
        if isinstance(payload, bytes):
            p.write_bytes(payload)
        else:
            p.write_text(payload)
        written.append(p)
    resolved = out_dir / "resolved_config.json"
    resolved.write_text(json.dumps(cfg, indent=1, sort_keys=True))
    written.append(resolved)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "spec": cfg,
        "checksums": {p.name: _sha256(p) for p in sorted(written)},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    ds = _dataset_from_config(cfg)
    fmt = cfg["format"]
    ext = {"csv": "csv", "jsonl": "jsonl", "bin": "bin"}[fmt]
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = out_dir / f"dataset.{ext}"
    save_triples(ds, data_path, fmt)
    _write_outputs(out_dir, cfg, "generate", {})
    # fold the dataset file into the manifest checksums
    manifest = json.loads((out_dir / "manifest.json").read_text())
    manifest["checksums"][data_path.name] = _sha256(data_path)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"wrote {data_path} ({ds.n} rows, d={ds.d})")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    ds = _dataset_from_config(cfg)
    train_ds, val_ds, _ = _splits(cfg, ds)
    arch = _arch(cfg, ds.d)
    params, hist = train(train_ds, val_ds, arch, _kcfg(cfg), _lcfg(cfg), _tcfg(cfg),
                         bank_cap=int(cfg["bank_cap"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    geometry.save_params(params, out_dir / "checkpoint.cfnet", metadata={"config": cfg})
    _write_outputs(out_dir, cfg, "train", {"history.csv": hist.to_csv()})
    print(f"best proxy {min(hist.val_proxy):.6f} at epoch {hist.best_epoch}; "
          f"stopped after epoch {hist.stopped_epoch}")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    ds = _dataset_from_config(cfg)
    train_ds, val_ds, test_ds = _splits(cfg, ds)
    grid = HyperGrid(
        bandwidths=tuple(cfg["grid"]["bandwidths"]),
        lambdas=tuple(cfg["grid"]["lambdas"]),
        m_min=float(cfg["loss"]["m_min"]),
    )
    oracle = test_ds if test_ds.true_field is not None else None
    result = grid_search(train_ds, val_ds, _arch(cfg, ds.d), grid, _tcfg(cfg),
                         bank_cap=int(cfg["bank_cap"]), oracle_ds=oracle,
                         jobs=max(1, args.jobs))
    selection = {
        "chosen": {"sigma": result.chosen[0], "lambda": result.chosen[1]},
        "diagnostics": None if result.diagnostics is None else {
            "spearman": result.diagnostics.spearman,
            "spread": result.diagnostics.spread,
            "regret": result.diagnostics.regret,
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    geometry.save_params(result.best_params, out_dir / "checkpoint.cfnet",
                         metadata={"config": cfg, "chosen": selection["chosen"]})
    _write_outputs(out_dir, cfg, "sweep", {
        "grid.csv": result.to_csv(),
        "selection.json": json.dumps(selection, indent=1, sort_keys=True),
    })
    print(f"chosen sigma={result.chosen[0]}, lambda={result.chosen[1]}")
    return 0


def _load_or_train(cfg: dict, args, train_ds, val_ds, input_dim):
    ckpt = getattr(args, "checkpoint", None)
    if ckpt:
        params, _ = geometry.load_params(ckpt)
        return params
    params, _ = train(train_ds, val_ds, _arch(cfg, input_dim), _kcfg(cfg), _lcfg(cfg),
                      _tcfg(cfg), bank_cap=int(cfg["bank_cap"]))
    return params


def _condition_report(f: np.ndarray, y: np.ndarray, slices: audit.RegimeSlices) -> dict:
    rep: dict = {"global": smece(f, y).value, "brier": brier(f, y)}
    for lab in (audit.OVER, audit.GOOD, audit.UNDER):
        m = slices.mask(lab)
        rep[lab] = smece(f[m], y[m]).value if int(m.sum()) >= 2 else None
    return rep


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    ds = _dataset_from_config(cfg)
    train_ds, val_ds, test_ds = _splits(cfg, ds)
    params = _load_or_train(cfg, args, train_ds, val_ds, ds.d)
    kcfg = _kcfg(cfg)
    raw_bank = sample_bank(train_ds, cap=int(cfg["bank_cap"]), seed=int(cfg["train"]["seed"]))

    est_val = field_on(params, val_ds, raw_bank, kcfg)
    alpha = recal.select_alpha(val_ds, est_val, tuple(cfg["correction"]["alpha_grid"]))
    est_test = field_on(params, test_ds, raw_bank, kcfg)
    slices = audit.slice_regimes(est_test, _regime(cfg))

    f_test, y_test = test_ds.confidences, test_ds.outcomes
    corrected = recal.range_aware_correct(f_test, est_test.values, alpha)
    scaler = recal.fit_temperature(train_ds.confidences, train_ds.outcomes)
    iso = recal.fit_isotonic(train_ds.confidences, train_ds.outcomes)
    conditions = {
        "raw": f_test,
        "corrected": corrected,
        "isotonic": recal.apply_isotonic(iso, f_test),
        "temperature": recal.apply_temperature(f_test, scaler.temperature),
    }
    report = {
        "epsilon": cfg["regime"]["epsilon"],
        "alpha": alpha,
        "temperature": scaler.temperature,
        "slice_counts": slices.counts,
        "conditions": {name: _condition_report(fv, y_test, slices)
                       for name, fv in conditions.items()},
    }

    files = {"evaluate.json": json.dumps(report, indent=1, sort_keys=True)}
    for name, fv in conditions.items():
        files[f"reliability_{name}.csv"] = binned_reliability(fv, y_test).to_csv()
    field_rows = ["delta_hat,mass,starved,label"]
    for i in range(test_ds.n):
        field_rows.append(f"{est_test.values[i]!r},{est_test.masses[i]!r},"
                          f"{int(est_test.starved[i])},{slices.labels[i]}")
    files["field.csv"] = "\n".join(field_rows) + "\n"
    _write_outputs(out_dir, cfg, "evaluate", files)
    print(f"alpha={alpha}, T={scaler.temperature:.4f}; "
          f"global smECE raw={report['conditions']['raw']['global']:.4f} "
          f"corrected={report['conditions']['corrected']['global']:.4f}")
    return 0


def cmd_audit(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    ds = _dataset_from_config(cfg)
    train_ds, val_ds, test_ds = _splits(cfg, ds)
    kcfg = _kcfg(cfg)
    regime = _regime(cfg)
    params = _load_or_train(cfg, args, train_ds, val_ds, ds.d)
    raw_bank = sample_bank(train_ds, cap=int(cfg["bank_cap"]), seed=int(cfg["train"]["seed"]))
    est_test = field_on(params, test_ds, raw_bank, kcfg)
    report = audit.build_report(test_ds, est_test, regime, config_echo=cfg)

    pipeline = audit.PipelineConfig(
        arch=_arch(cfg, ds.d), kcfg=kcfg, lcfg=_lcfg(cfg), tcfg=_tcfg(cfg),
        regime=regime, bank_cap=int(cfg["bank_cap"]),
    )
    if args.bootstrap:
        slices = audit.slice_regimes(est_test, regime)
        report.bootstrap = audit.bootstrap_ci(test_ds, slices, "smece",
                                              B=args.bootstrap, seed=cfg["seed"])
    if args.permutation_null:
        report.null = audit.permutation_null_audit(train_ds, val_ds, test_ds, pipeline,
                                                   P=args.permutation_null, seed=cfg["seed"])
    if args.seeds:
        seeds = tuple(int(s) for s in args.seeds.split(","))
        report.stability = audit.seed_stability_audit(train_ds, val_ds, test_ds,
                                                      pipeline, seeds)
    _write_outputs(out_dir, cfg, "audit", {
        "audit.json": report.to_json(),
        "sweep.csv": audit.sweep_to_csv(report.sweep),
    })
    gap = report.worst_slice_gap
    print(f"worst-slice gap: {'absent' if gap is None else format(gap, '.4f')}; "
          f"field std {report.field_std:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calibfield",
        description="Discover, audit, and correct input-dependent miscalibration regimes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel worker bound for grid cells")
        p.add_argument("--format", choices=("csv", "jsonl", "bin"),
                       help="dataset file format")

    p_gen = sub.add_parser("generate", help="write a synthetic dataset + manifest")
    common(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train the representation, save checkpoint")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="grid-search bandwidth and regularization")
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_eval = sub.add_parser("evaluate", help="score raw/corrected/isotonic/temperature")
    common(p_eval)
    p_eval.add_argument("--checkpoint", help="reuse a trained checkpoint")
    p_eval.add_argument("--epsilon", type=float, help="regime threshold override")
    p_eval.set_defaults(func=cmd_evaluate)

    p_audit = sub.add_parser("audit", help="regime audits on the test split")
    common(p_audit)
    p_audit.add_argument("--checkpoint", help="reuse a trained checkpoint")
    p_audit.add_argument("--bootstrap", type=int, default=0, metavar="B",
                         help="bootstrap replicates for interval estimates")
    p_audit.add_argument("--permutation-null", type=int, default=0, metavar="P",
                         dest="permutation_null", help="label-permutation null runs")
    p_audit.add_argument("--seeds", help="comma-separated seeds for stability audit")
    p_audit.add_argument("--epsilon", type=float, help="regime threshold override")
    p_audit.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, ConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
