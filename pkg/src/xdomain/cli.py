"""Command-line driver: ``xdomain <command> [--config FILE] [--seed N] [--out DIR] [--set k=v ...]``.

All commands share one working directory (``--out``, default ``$XDOMAIN_OUT``
or ``./runs``).  Later stages read what earlier stages wrote there:

    gen-data     source.xdd, target.xdd
    pretrain     pretrain.ckpt, pretrain_metrics.{jsonl,csv}, baseline.json
    pseudolabel  pairs_<variant>.csv, pair_metrics.{jsonl,csv}, features_{source,target}.csv
    train        train.ckpt, train_metrics.{jsonl,csv}   (ablation: ablation.{jsonl,csv})
    noise-sweep  noise_sweep.{jsonl,csv}
    denoise      theorem1.json, theorem2.json, sweep_K.csv, sweep_lam.csv
    eval         eval.json, optional attention_heatmap.csv

Each command also writes ``config.<command>.json`` with the resolved settings.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import denoise_sim as ds
from .experiments import ABLATION_ROWS, VARIANTS, Prepared, feature_banks, noise_sweep, pair_table, run_ablation
from .numcore import Rng
from .pseudolabel import PairSet, two_way_center_aware
from .synthdata import DatasetError, ShiftSpec, generate_domain_pair, load_dataset, save_dataset
from .training import TrainConfig, accuracy_from_predictions, evaluate, pretrain_source, train_cdtrans
from .vitmodel import CheckpointError, ModelConfig, cross_attention_map, load_checkpoint, logits_of, save_checkpoint

log = logging.getLogger("xdomain")

ENV_OUT = "XDOMAIN_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_ASSERTION, EXIT_CONDITIONS = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


class AssertionFailed(RuntimeError):
    pass


class ConditionsUnmet(RuntimeError):
    pass


# ------------------------------------------------------------------ config


def default_config() -> dict:
    return {
        "seed": 0,
        "shift": asdict(ShiftSpec()),
        "model": asdict(ModelConfig(width=32, layers=2, heads=4)),
        "pretrain": asdict(TrainConfig(epochs=20, learning_rate=0.05)),
        "train": asdict(TrainConfig(epochs=5, learning_rate=0.01)),
        "pairing": {"metric": "cosine", "variant": "tw+ca"},
        "ablation": {"enabled": False},
        "noise_sweep": {"ratios": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6], "pair_fraction": 0.25, "epochs": 20},
        "denoise": {
            "trials": 400,
            "sweep_trials": 20,
            "theorem1": asdict(ds.GmmSpec(d=512, m=512, C=4, sigma=0.05, delta=0.05, K=84)),
            "theorem2": asdict(ds.GmmSpec(d=2 ** 24, m=128, C=2, sigma=0.1, delta=0.05, lam=13.0)),
            "K_values": [1, 8, 32, 84, 128],
            "lam_values": [0.0, 2.0, 5.0, 9.0, 13.0],
        },
        "eval": {"checkpoint": "train.ckpt", "heatmap_pair": None, "heatmap_layer": -1},
    }


def merge(base: dict, over: dict, where: str = "") -> dict:
    """Recursive update that rejects keys the base does not have."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        path = f"{where}.{k}" if where else k
        if k not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge(out[k], v, path)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = val
    return node


def resolve(config_path=None, overrides=(), seed=None) -> dict:
    cfg = default_config()
    if config_path:
        try:
            cfg = merge(cfg, json.loads(Path(config_path).read_text()))
        except FileNotFoundError:
            raise MissingInputError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}: invalid JSON ({e})")
    for o in overrides:
        cfg = merge(cfg, parse_override(o))
    if seed is not None:
        cfg["seed"] = seed
    build(cfg)
    return cfg


def _make(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}")


def build(cfg: dict) -> dict:
    """Typed objects for every section; raises ConfigError on any invalid value."""
    seed = cfg["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    shift = _make(ShiftSpec, cfg["shift"], "shift")
    try:
        shift.validate()
    except ValueError as e:
        raise ConfigError(f"shift: {e}")
    model = _make(ModelConfig, cfg["model"], "model")
    if (model.patch_count, model.patch_dim, model.classes) != (shift.tokens, shift.patch_dim, shift.class_count):
        raise ConfigError("model.patch_count/patch_dim/classes must equal shift.tokens/patch_dim/class_count")
    if cfg["pairing"]["metric"] not in ("cosine", "euclidean"):
        raise ConfigError("pairing.metric must be cosine or euclidean")
    if cfg["pairing"]["variant"] not in VARIANTS:
        raise ConfigError(f"pairing.variant must be one of {VARIANTS}")
    ratios = cfg["noise_sweep"]["ratios"]
    if not ratios or any(not 0 <= r <= 1 for r in ratios):
        raise ConfigError("noise_sweep.ratios must be a non-empty list in [0, 1]")
    sweep = cfg["noise_sweep"]
    if not isinstance(sweep["pair_fraction"], (int, float)) or not 0 < sweep["pair_fraction"] <= 1:
        raise ConfigError("noise_sweep.pair_fraction must be in (0, 1]")
    if not isinstance(sweep["epochs"], int) or sweep["epochs"] < 0:
        raise ConfigError("noise_sweep.epochs must be a non-negative integer")
    train = replace(_make(TrainConfig, cfg["train"], "train"), seed=seed)
    return {
        "seed": seed,
        "shift": shift,
        "model": model,
        "pretrain": replace(_make(TrainConfig, cfg["pretrain"], "pretrain"), seed=seed),
        "train": train,
        "sweep_train": replace(train, epochs=sweep["epochs"]),
        "pair_fraction": float(sweep["pair_fraction"]),
        "theorem1": _make(ds.GmmSpec, cfg["denoise"]["theorem1"], "denoise.theorem1"),
        "theorem2": _make(ds.GmmSpec, cfg["denoise"]["theorem2"], "denoise.theorem2"),
    }


# ------------------------------------------------------------------ output


def write_rows(out: Path, stem: str, rows: list[dict]) -> None:
    """Same rows as JSON lines and as CSV."""
    with open(out / f"{stem}.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    cols = list(rows[0]) if rows else []
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingInputError(f"required input missing: {path}")
    return path


def _datasets(out: Path):
    return load_dataset(_need(out / "source.xdd")), load_dataset(_need(out / "target.xdd"))


def _history_rows(hist) -> list[dict]:
    rows = []
    for h in hist:
        r = {"epoch": h.epoch, **h.losses, "target_accuracy": h.target_accuracy,
             "source_accuracy": h.source_accuracy}
        if h.pair_metrics:
            r.update(h.pair_metrics)
        rows.append(r)
    return rows


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict, out: Path) -> dict:
    b = build(cfg)
    src, tgt = generate_domain_pair(b["shift"], Rng(b["seed"], "data"))
    save_dataset(out / "source.xdd", src)
    save_dataset(out / "target.xdd", tgt)
    return {"source": len(src), "target": len(tgt)}


def cmd_pretrain(cfg: dict, out: Path) -> dict:
    b = build(cfg)
    src, tgt = _datasets(out)
    params, hist = pretrain_source(src, b["pretrain"], b["model"], target=tgt)
    save_checkpoint(out / "pretrain.ckpt", params)
    write_rows(out, "pretrain_metrics", _history_rows(hist))
    res = {"source_accuracy": evaluate(params, src).accuracy, "target_accuracy": evaluate(params, tgt).accuracy}
    write_json(out / "baseline.json", res)
    return res


def cmd_pseudolabel(cfg: dict, out: Path) -> dict:
    src, tgt = _datasets(out)
    params = load_checkpoint(_need(out / "pretrain.ckpt"))
    bank_s, bank_t = feature_banks(params, src, tgt)
    bank_s.to_csv(out / "features_source.csv")
    bank_t.to_csv(out / "features_target.csv")
    sets = two_way_center_aware(bank_s, bank_t, metric=cfg["pairing"]["metric"])
    for name, ps in sets.items():
        ps.to_csv(out / f"pairs_{name}.csv")
    rows = pair_table(sets, tgt.labels)
    write_rows(out, "pair_metrics", rows)
    return {r["variant"]: r["Prec"] for r in rows}


def cmd_train(cfg: dict, out: Path) -> dict:
    b = build(cfg)
    src, tgt = _datasets(out)
    init = load_checkpoint(_need(out / "pretrain.ckpt"))
    variant = cfg["pairing"]["variant"]
    pairs = PairSet.from_csv(_need(out / f"pairs_{variant}.csv"), len(src), len(tgt))
    if cfg["ablation"]["enabled"]:
        prep = Prepared(src, tgt, init, evaluate(init, tgt).accuracy, {variant: pairs}, [])
        rows = run_ablation(prep, b["train"], b["seed"], pair_variant=variant)
        write_rows(out, "ablation", rows)
        return {r["row"]: r["target_accuracy"] for r in rows}
    params, hist = train_cdtrans(pairs, src, tgt, init, b["train"], true_target_labels=tgt.labels)
    save_checkpoint(out / "train.ckpt", params)
    write_rows(out, "train_metrics", _history_rows(hist))
    return {"target_accuracy": hist[-1].target_accuracy if hist else evaluate(params, tgt).accuracy}


def cmd_noise_sweep(cfg: dict, out: Path) -> dict:
    b = build(cfg)
    src, tgt = _datasets(out)
    init = load_checkpoint(_need(out / "pretrain.ckpt"))
    prep = Prepared(src, tgt, init, evaluate(init, tgt).accuracy, {}, [])
    rows = noise_sweep(prep, b["sweep_train"], cfg["noise_sweep"]["ratios"], b["seed"], b["pair_fraction"])
    write_rows(out, "noise_sweep", rows)
    return {"rows": len(rows)}


def cmd_denoise(cfg: dict, out: Path) -> dict:
    b = build(cfg)
    d = cfg["denoise"]
    rng = Rng(b["seed"], "denoise")
    reports = {
        "theorem1": ds.verify_theorem1(b["theorem1"], d["trials"], rng.child("theorem1")),
        "theorem2": ds.verify_theorem2(b["theorem2"], d["trials"], rng.child("theorem2")),
    }
    for name, rep in reports.items():
        rep.to_json(out / f"{name}.json")
    ds.write_sweep_csv(out / "sweep_K.csv", ds.sweep(b["theorem1"], "K", d["K_values"], d["sweep_trials"],
                                                     rng.child("sweep_K")))
    ds.write_sweep_csv(out / "sweep_lam.csv", ds.sweep(b["theorem2"], "lam", d["lam_values"], d["sweep_trials"],
                                                       rng.child("sweep_lam")))
    status = {k: r.status for k, r in reports.items()}
    if any(s == "assertion failed" for s in status.values()):
        raise AssertionFailed(f"theorem check failed: {status}")
    if any(s == "conditions unmet" for s in status.values()):
        raise ConditionsUnmet(f"theorem conditions unmet: {status}")
    return status


def cmd_eval(cfg: dict, out: Path) -> dict:
    src, tgt = _datasets(out)
    params = load_checkpoint(_need(out / cfg["eval"]["checkpoint"]))
    res = {}
    for name, data in (("source", src), ("target", tgt)):
        pred = logits_of(data.samples, params).argmax(axis=-1)
        res[name] = accuracy_from_predictions(pred, data.labels, params.cfg.classes).as_dict()
    write_json(out / "eval.json", res)
    pair = cfg["eval"]["heatmap_pair"]
    if pair is not None:
        s, t = pair
        w = cross_attention_map(src.samples[s], tgt.samples[t], params, cfg["eval"]["heatmap_layer"])
        from .attention import write_weights_csv
        write_weights_csv(out / "attention_heatmap.csv", w)
    return {k: v["accuracy"] for k, v in res.items()}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "pseudolabel": cmd_pseudolabel,
    "train": cmd_train,
    "noise-sweep": cmd_noise_sweep,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
}


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xdomain", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON file with config overrides")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help=f"working directory (default ${ENV_OUT} or ./runs)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one config value; VALUE is parsed as JSON when possible")
    ap.add_argument("--ablation", action="store_true", help="train: run every loss-ablation row")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or os.environ.get(ENV_OUT, "runs"))
    try:
        overrides = list(args.overrides) + (["ablation.enabled=true"] if args.ablation else [])
        cfg = resolve(args.config, overrides, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / f"config.{args.command}.json", cfg)
        result = COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, DatasetError, CheckpointError) as e:
        print(f"missing or unreadable input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except AssertionFailed as e:
        print(str(e), file=sys.stderr)
        return EXIT_ASSERTION
    except ConditionsUnmet as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONDITIONS
    except ds.CentersInfeasibleError as e:
        print(f"conditions unmet: {e}", file=sys.stderr)
        return EXIT_CONDITIONS
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
