"""Command-line front-end: gen, train, gradcheck, minesim, sweep, eval.

Every run resolves its full config, validates it, then writes a JSON run
manifest before producing any output. Passing that manifest back through
``--config`` reproduces the run. Exit codes: 0 ok, 1 check failed, 2 config
error, 3 IO error. Verbosity comes from ``SPARSEPAIR_LOG`` (off/info/debug).

Seeds: one ``--seed`` per run; each stage derives its own stream as
``(seed + first 4 bytes of sha256(stage tag), little endian) mod 2**32``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, evalkit, miningsel, synthgen, trainer
from ._accel import backend_name
from .errors import FormatError, SparsePairError
from .numerics import l2_normalize
from .sploss import SPConfig, SPVariant, gradient_check

log = logging.getLogger("sparsepair")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

TAU_GRID = tuple(round(0.01 * k, 2) for k in range(1, 10))
LAMBDA_GRID = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
N_GRID = evalkit.NS_DEFAULT
GRADCHECK_TOL = 1e-5


class ConfigError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("SPARSEPAIR_LOG", "off").strip().lower()
    levels = {"off": None, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"SPARSEPAIR_LOG must be off, info or debug, got {level!r}")
    if levels[level] is None:
        logging.getLogger("sparsepair").setLevel(logging.CRITICAL + 1)
        return
    logging.basicConfig(stream=sys.stderr, level=levels[level], format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("sparsepair").setLevel(levels[level])


# ---------------------------------------------------------------------------
# config resolution


def _load_config_file(path, subcommand: str) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    if "subcommand" in obj:  # a run manifest
        if obj["subcommand"] != subcommand:
            raise ConfigError(f"manifest is for '{obj['subcommand']}', not '{subcommand}'")
        return dict(obj.get("config", {}))
    return obj


def _resolve(args, subcommand: str, defaults: dict) -> dict:
    """defaults < config file < explicitly given flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        loaded = _load_config_file(args.config, subcommand)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys for {subcommand}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _write_manifest(args, subcommand: str, cfg: dict, outputs: dict) -> None:
    path = args.manifest
    if path is None:
        primary = next((p for p in outputs.values() if p), None)
        if primary is None:
            return
        path = f"{primary}.manifest.json"
    manifest = {
        "subcommand": subcommand,
        "config": cfg,
        "seed": cfg.get("seed"),
        "version": __version__,
        "backend": backend_name(),
        "outputs": outputs,
    }
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("manifest written to %s", path)


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _load_dataset(path) -> synthgen.LabeledDataset:
    if path is None:
        raise ConfigError("--data is required")
    if str(path).endswith(".json"):
        try:
            return synthgen.import_json(path)
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return synthgen.load(path)


# ---------------------------------------------------------------------------
# subcommands

GEN_DEFAULTS = {
    "classes": 10, "per_class": 50, "dim": 16, "concentration": 100.0,
    "outlier_fraction": 0.0, "outlier_spread": 10.0, "seed": 0, "out": None,
}


def _gen_spec(cfg: dict) -> synthgen.SyntheticSpec:
    spec = synthgen.SyntheticSpec(
        num_classes=int(cfg["classes"]), per_class=int(cfg["per_class"]), dim=int(cfg["dim"]),
        concentration=float(cfg["concentration"]), outlier_fraction=float(cfg["outlier_fraction"]),
        outlier_spread=float(cfg["outlier_spread"]),
        rng_seed=trainer.derive_seed(int(cfg["seed"]), "data"),
    )
    spec.validate()
    return spec


def cmd_gen(args) -> int:
    cfg = _resolve(args, "gen", GEN_DEFAULTS)
    spec = _gen_spec(cfg)
    if not cfg["out"]:
        raise ConfigError("--out is required")
    _write_manifest(args, "gen", cfg, {"dataset": cfg["out"]})
    ds = synthgen.generate(spec)
    if str(cfg["out"]).endswith(".json"):
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        synthgen.export_json(ds, cfg["out"])
    else:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        synthgen.save(ds, cfg["out"])
    log.info("wrote %d rows to %s", ds.num_rows, cfg["out"])
    return EXIT_OK


TRAIN_DEFAULTS = {**trainer.TrainConfig().to_json(), "data": None, "eval_data": None,
                  "eval_every": 1, "checkpoint": None, "metrics": None}


def _train_config(cfg: dict) -> trainer.TrainConfig:
    keys = set(trainer.TrainConfig().to_json())
    try:
        tc = trainer.TrainConfig.from_json({k: v for k, v in cfg.items() if k in keys})
        tc.validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return tc


def cmd_train(args) -> int:
    cfg = _resolve(args, "train", TRAIN_DEFAULTS)
    tc = _train_config(cfg)
    if not cfg["metrics"] and not cfg["checkpoint"]:
        raise ConfigError("give --metrics and/or --checkpoint")
    ds = _load_dataset(cfg["data"])
    eval_ds = _load_dataset(cfg["eval_data"]) if cfg["eval_data"] else None
    if np.unique(ds.labels).size < tc.batch_K:
        raise ConfigError(f"dataset has fewer than batch_K={tc.batch_K} classes")
    _write_manifest(args, "train", cfg, {"metrics": cfg["metrics"], "checkpoint": cfg["checkpoint"]})
    ck, rows = trainer.train(ds, tc, eval_dataset=eval_ds, eval_every=int(cfg["eval_every"]))
    if cfg["metrics"]:
        _write_text(cfg["metrics"], trainer.metrics_csv(rows))
    if cfg["checkpoint"]:
        trainer.save_checkpoint(ck, cfg["checkpoint"])
    return EXIT_OK


GRADCHECK_DEFAULTS = {
    "K": 3, "N": 4, "dim": 8, "taus": [0.1, 0.04], "variants": [v.value for v in SPVariant],
    "trials": 5, "seed": 0, "tol": GRADCHECK_TOL, "input": None, "out": None,
}


def _gradcheck_inputs(cfg: dict):
    """Yield (z, labels) per trial: random unit rows, or one batch from --input."""
    if cfg["input"]:
        try:
            obj = json.loads(Path(cfg["input"]).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{cfg['input']}: {exc}") from exc
        z = np.asarray(obj["embeddings"], dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise ConfigError("input embeddings contain NaN or inf")
        return [(l2_normalize(z), np.asarray(obj["labels"]))]
    rng = np.random.default_rng(trainer.derive_seed(int(cfg["seed"]), "gradcheck"))
    K, N, d = int(cfg["K"]), int(cfg["N"]), int(cfg["dim"])
    labels = np.repeat(np.arange(K), N)
    return [(l2_normalize(rng.standard_normal((K * N, d))), labels) for _ in range(int(cfg["trials"]))]


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args, "gradcheck", GRADCHECK_DEFAULTS)
    if int(cfg["K"]) < 2 or int(cfg["N"]) < 2 or int(cfg["dim"]) < 2 or int(cfg["trials"]) < 1:
        raise ConfigError("gradcheck needs K >= 2, N >= 2, dim >= 2, trials >= 1")
    try:
        variants = [SPVariant(v) for v in cfg["variants"]]
        taus = [float(t) for t in cfg["taus"]]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if any(not t > 0 for t in taus):
        raise ConfigError("tau must be positive")
    inputs = _gradcheck_inputs(cfg)
    _write_manifest(args, "gradcheck", cfg, {"report": cfg["out"]})
    results = []
    for v in variants:
        for tau in taus:
            err = max(gradient_check(z, y, SPConfig(tau, v)) for z, y in inputs)
            results.append({"variant": v.value, "tau": tau, "max_rel_error": err,
                            "pass": bool(err < float(cfg["tol"]))})
    ok = all(r["pass"] for r in results)
    _write_text(cfg["out"], json.dumps({"pass": ok, "tol": float(cfg["tol"]), "results": results}, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_CHECK


MINESIM_DEFAULTS = {"num_ids": 16, "M": 4, "K_h": [2], "trials": 1000, "seed": 0, "workers": 1,
                    "records": False, "out": None}


def cmd_minesim(args) -> int:
    cfg = _resolve(args, "minesim", MINESIM_DEFAULTS)
    kh = [int(k) for k in cfg["K_h"]]
    sim_cfg = miningsel.HarmfulSimConfig(
        num_ids=int(cfg["num_ids"]), instances=int(cfg["M"]),
        harmful_per_id=kh[0] if len(kh) == 1 else tuple(kh), trials=int(cfg["trials"]),
        rng_seed=trainer.derive_seed(int(cfg["seed"]), "minesim"),
    )
    sim_cfg.validate()
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    _write_manifest(args, "minesim", cfg, {"result": cfg["out"]})
    res = miningsel.run_harmful_sim(sim_cfg, workers=int(cfg["workers"]))
    out = res.to_json()
    if not cfg["records"]:
        out.pop("trials")
    _write_text(cfg["out"], json.dumps(out, indent=2) + "\n")
    return EXIT_OK


SWEEP_DEFAULTS = {**TRAIN_DEFAULTS, "param": None, "values": None, "seeds": 1, "losses": None,
                  "batch_size": None, "workers": 1, "out": None}
SWEEP_DEFAULTS.pop("checkpoint")
SWEEP_DEFAULTS.pop("metrics")


def _sweep_one(ds, eval_ds, tc: trainer.TrainConfig):
    _, rows = trainer.train(ds, tc, eval_dataset=eval_ds, eval_every=0)
    return rows[-1]


def cmd_sweep(args) -> int:
    cfg = _resolve(args, "sweep", SWEEP_DEFAULTS)
    param = cfg["param"]
    if param not in ("tau", "lambda", "N"):
        raise ConfigError("--param must be tau, lambda or N")
    base = _train_config(cfg)
    grid = {"tau": TAU_GRID, "lambda": LAMBDA_GRID, "N": N_GRID}[param]
    values = list(cfg["values"]) if cfg["values"] else list(grid)
    seeds = [base.seed + i for i in range(int(cfg["seeds"]))]
    workers = int(cfg["workers"])
    if workers < 1 or not seeds:
        raise ConfigError("workers and seeds must be >= 1")
    ds = _load_dataset(cfg["data"])
    eval_ds = _load_dataset(cfg["eval_data"]) if cfg["eval_data"] else None
    if param == "N":
        losses = list(cfg["losses"] or ["sph", "splh", "adasp", "triplet"])
        for loss in losses:
            replace(base, loss_kind=loss).validate()
        Ns = [int(v) for v in values]
    else:
        runs = []
        for val in values:
            tc = replace(base, tau=float(val)) if param == "tau" else replace(base, lam=float(val))
            tc.validate()
            runs.extend(replace(tc, seed=s) for s in seeds)
    _write_manifest(args, "sweep", cfg, {"table": cfg["out"]})

    if param == "N":
        report = evalkit.robustness_sweep(ds, losses, Ns=Ns, seeds=seeds, base_cfg=base,
                                          eval_dataset=eval_ds, batch_size=cfg["batch_size"], workers=workers)
        _write_text(cfg["out"], report.to_csv())
        return EXIT_OK

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            finals = list(pool.map(lambda tc: _sweep_one(ds, eval_ds, tc), runs))
    else:
        finals = [_sweep_one(ds, eval_ds, tc) for tc in runs]
    lines = [f"{param},seed,loss_total,mAP,cmc1,cmc5"]
    for tc, r in zip(runs, finals):
        val = tc.tau if param == "tau" else tc.lam
        lines.append(",".join([repr(val), str(tc.seed)] + [repr(float(x)) for x in (r.loss_total, r.map, r.cmc1, r.cmc5)]))
    _write_text(cfg["out"], "\n".join(lines) + "\n")
    return EXIT_OK


EVAL_DEFAULTS = {"data": None, "checkpoint": None, "ks": [1, 5], "out": None}


def cmd_eval(args) -> int:
    cfg = _resolve(args, "eval", EVAL_DEFAULTS)
    ks = [int(k) for k in cfg["ks"]]
    if not ks or min(ks) < 1:
        raise ConfigError("ks must be positive")
    ds = _load_dataset(cfg["data"])
    params = trainer.load_checkpoint(cfg["checkpoint"]).params if cfg["checkpoint"] else None
    _write_manifest(args, "eval", cfg, {"metrics": cfg["out"]})
    z = trainer.embed(params, ds.points) if params is not None else l2_normalize(ds.points)
    met = evalkit.evaluate(z, z, ds.labels, ds.labels, ks=ks, same_set=True)
    out = {"mAP": met.map, **{f"cmc{k}": met.cmc_at(k) for k in ks},
           "num_queries": met.num_queries, "num_skipped": met.num_skipped}
    _write_text(cfg["out"], json.dumps(out, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _common(p) -> None:
    p.add_argument("--config", help="JSON config (TrainConfig-style keys) or a run manifest")
    p.add_argument("--manifest", help="where to write the run manifest (default: <output>.manifest.json)")
    p.add_argument("--seed", type=int)


def _train_flags(p) -> None:
    p.add_argument("--data")
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--loss", dest="loss_kind", choices=trainer.LOSS_KINDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-k", dest="batch_K", type=int)
    p.add_argument("--batch-n", dest="batch_N", type=int)
    p.add_argument("--lr", dest="lr_base", type=float)
    p.add_argument("--warmup-fraction", dest="warmup_fraction", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--no-identity", dest="use_identity", action="store_const", const=False)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--model", choices=("linear", "mlp"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparsepair", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({backend_name()})")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--concentration", type=float)
    p.add_argument("--outlier-fraction", dest="outlier_fraction", type=float)
    p.add_argument("--outlier-spread", dest="outlier_spread", type=float)
    p.add_argument("--out", help="dataset path (.spds binary, or .json)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an embedder, write checkpoint and metrics CSV")
    _common(p)
    _train_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="compare SP analytic gradients with finite differences")
    _common(p)
    p.add_argument("-K", dest="K", type=int)
    p.add_argument("-N", dest="N", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--taus", type=_csv_list(float))
    p.add_argument("--variants", type=_csv_list(str))
    p.add_argument("--trials", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--input", help='JSON {"embeddings": [[...]], "labels": [...]} to check instead')
    p.add_argument("--out", help="report path (default stdout)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("minesim", help="harmful-pair sampling simulation")
    _common(p)
    p.add_argument("--num-ids", dest="num_ids", type=int)
    p.add_argument("-M", dest="M", type=int)
    p.add_argument("--kh", dest="K_h", type=_csv_list(int), help="harmful pairs per id (one value or one per id)")
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--records", action="store_const", const=True, help="include per-trial records")
    p.add_argument("--out", help="result JSON path (default stdout)")
    p.set_defaults(func=cmd_minesim)

    p = sub.add_parser("sweep", help="train over a tau, lambda or N grid")
    _common(p)
    _train_flags(p)
    p.add_argument("--param", choices=("tau", "lambda", "N"))
    p.add_argument("--values", type=_csv_list(float), help="override the default grid")
    p.add_argument("--seeds", type=int, help="number of seeds (seed, seed+1, ...)")
    p.add_argument("--losses", type=_csv_list(str), help="losses for the N sweep")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="N sweep: fixed rows per batch")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="retrieval metrics of a dataset, optionally through a checkpoint")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--ks", type=_csv_list(int))
    p.add_argument("--out", help="metrics JSON path (default stdout)")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # unknown flags exit 2 with usage
    try:
        _setup_logging()
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, FormatError):
            print(f"sparsepair: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"sparsepair: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"sparsepair: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SparsePairError as exc:  # pragma: no cover - all current errors are ValueErrors
        print(f"sparsepair: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
