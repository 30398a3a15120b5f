"""Command line entry point: ``cherryq <subcommand>``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Every artifact gets a ``<name>.manifest.json`` sidecar; wall-clock lives only
there so the artifacts themselves are byte-reproducible.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .cherry import select_cherry_columns
from .config import cherry_fraction, load_corpus, model_config, qat_config, quant_config, resolve, train_config
from .data import corpus_hash, split_windows
from .errors import CherryQError, ConfigError, DataError, NumericError
from .impact import (activation_metric, estimate_impact, heterogeneity_report, overlap_ratio, weight_metric)
from .model import perplexity
from .qat import prepare_cherryq, train_base, train_prepared
from .quant import avg_bits, cherry_count


# -- helpers ----------------------------------------------------------------------

def _write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def _manifest(path, subcommand: str, cfg: dict, seed: int, corpus_sha: str | None, artifacts: dict,
              started: float) -> None:
    _write_json(path, {
        "subcommand": subcommand, "config": cfg, "seed": seed, "corpus_sha256": corpus_sha,
        "artifacts": artifacts, "tool_version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    })


def _windows(cfg: dict, corpus_spec: str | None = None):
    ids = load_corpus(corpus_spec or cfg["corpus"])
    ctx = cfg["model"]["context"]
    train, val = split_windows(ids, ctx + 1, cfg["val_fraction"])
    return ids, train, val


def _batches(windows: np.ndarray, size: int) -> list[np.ndarray]:
    return [windows[i:i + size] for i in range(0, len(windows), size)]


def _out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _finite(x: float) -> float | None:
    return x if math.isfinite(x) else None


def _load_impacts(path) -> dict[str, np.ndarray]:
    try:
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    except FileNotFoundError as exc:
        raise DataError(f"impact file not found: {path}") from exc


def _resolved(args) -> dict:
    flags = {"corpus": getattr(args, "corpus", None)}
    if getattr(args, "seed", None) is not None:
        flags.update({"model.seed": args.seed, "train.seed": args.seed, "qat.seed": args.seed,
                      "analyze.seed": args.seed})
    if getattr(args, "steps", None) is not None:
        flags["qat.steps" if args.command == "cherryq" else "train.steps"] = args.steps
    return resolve(args.config, args.set, flags)


# -- subcommands --------------------------------------------------------------------

def cmd_train_base(args) -> dict:
    started = time.time()
    cfg = _resolved(args)
    ids, train, _ = _windows(cfg)
    run = train_base(model_config(cfg), train, train_config(cfg))
    out = _out_dir(args.out)
    ckpt_path = os.path.join(out, "base.chrq")
    sha = corpus_hash(ids)
    save_checkpoint(run.checkpoint({"corpus_sha256": sha}), ckpt_path)
    log_path = os.path.join(out, "base.log.json")
    _write_json(log_path, run.log.to_dict())
    artifacts = {"checkpoint": ckpt_path, "log": log_path}
    _manifest(os.path.join(out, "base.manifest.json"), "train-base", cfg, cfg["train"]["seed"], sha,
              artifacts, started)
    return artifacts


def _calibration_splits(train: np.ndarray, n_splits: int, per_split: int, seed: int) -> list[np.ndarray]:
    need = n_splits * per_split
    if n_splits < 1 or per_split < 1:
        raise ConfigError("splits and calib_sequences must be >= 1")
    if need > len(train):
        raise DataError(f"corpus too small: {n_splits} splits of {per_split} sequences need {need} "
                        f"training windows, have {len(train)}")
    order = np.random.default_rng(seed).permutation(len(train))[:need]
    return [train[np.sort(order[i * per_split:(i + 1) * per_split])] for i in range(n_splits)]


def cmd_analyze(args) -> dict:
    started = time.time()
    cfg = _resolved(args)
    a = cfg["analyze"]
    n_splits = args.splits if args.splits is not None else a["splits"]
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    names = model.weight_matrix_names()
    fraction = cherry_fraction(cfg)

    corpora = [args.corpus or cfg["corpus"]] + ([args.corpus2] if args.corpus2 else [])
    hashes, split_maps = [], {}
    all_calib = []
    for ci, spec in enumerate(corpora):
        ids, train, _ = _windows(cfg, spec)
        hashes.append(corpus_hash(ids))
        splits = _calibration_splits(train, n_splits, a["calib_sequences"], a["seed"])
        for si, calib in enumerate(splits):
            split_maps[f"corpus{ci}/split{si}"] = {n: m.values for n, m in estimate_impact(model, [calib], names).items()}
        if ci == 0:
            all_calib = splits

    first = [k for k in split_maps if k.startswith("corpus0/")]
    impact = {n: np.mean([split_maps[k][n] for k in first], axis=0) for n in names}
    metrics = {
        "impact": impact,
        "weight": {n: weight_metric(model.params[n].data) for n in names},
        "activation": activation_metric(model, all_calib, names),
    }
    report = heterogeneity_report(metrics, "impact", a["scatter_samples"], a["seed"])

    out = _out_dir(args.out)
    scatter_dir = _out_dir(os.path.join(out, "scatter"))
    scatter_paths = {}
    for n in names:
        idx, _ = report.scatter[n]
        cols = model.params[n].shape[1]
        path = os.path.join(scatter_dir, f"{n}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "row", "col", "impact", "weight", "activation"])
            flat = {m: metrics[m][n].reshape(-1) for m in metrics}
            for i in idx:
                w.writerow([int(i), int(i) // cols, int(i) % cols] + [repr(float(flat[m][i])) for m in metrics])
        scatter_paths[n] = path

    het_path = os.path.join(out, "heterogeneity.csv")
    with open(het_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["matrix", "metric", "score", "top_mean", "bottom_max", "n_top"])
        for e in report.entries:
            w.writerow([e.matrix, e.metric, repr(e.score), repr(e.top_mean), repr(e.bottom_max), e.n_top])

    pairs = []
    keys = list(split_maps)
    for ka, kb in itertools.combinations(keys, 2):
        same = ka.split("/")[0] == kb.split("/")[0]
        per = {n: overlap_ratio(select_cherry_columns(split_maps[ka][n], fraction),
                                select_cherry_columns(split_maps[kb][n], fraction)) for n in names}
        pairs.append({"a": ka, "b": kb, "kind": "within" if same else "across",
                      "per_matrix": per, "mean": float(np.mean(list(per.values())))})
    cols = {n: model.params[n].shape[1] for n in names}
    baseline = float(np.mean([100.0 * cherry_count(c, fraction) / c for c in cols.values()]))
    overlap_path = os.path.join(out, "overlap.json")
    _write_json(overlap_path, {"fraction": fraction, "random_baseline_pct": baseline, "pairs": pairs})

    impacts_path = os.path.join(out, "impacts.npz")
    with open(impacts_path, "wb") as fh:
        np.savez(fh, **impact)

    summary_path = os.path.join(out, "summary.json")
    _write_json(summary_path, {
        "median_score": {m: _finite(report.median_score(m)) for m in metrics},
        "min_score": {m: _finite(min(report.scores(m).values())) for m in metrics},
    })
    artifacts = {"scatter": scatter_paths, "heterogeneity": het_path, "overlap": overlap_path,
                 "impacts": impacts_path, "summary": summary_path}
    _manifest(os.path.join(out, "analyze.manifest.json"), "analyze", cfg, a["seed"], hashes[0], artifacts,
              started)
    return artifacts


def cmd_cherryq(args) -> dict:
    started = time.time()
    cfg = _resolved(args)
    ckpt = load_checkpoint(args.base)
    base = ckpt.to_model()
    if base.config != model_config(cfg):
        cfg["model"] = base.config.to_dict()
    ids, train, _ = _windows(cfg)
    qcfg = qat_config(cfg)
    impacts = _load_impacts(args.impacts) if args.impacts else None
    run = prepare_cherryq(base, train, qcfg, impacts=impacts)
    out = _out_dir(args.out)
    step0 = None
    if args.save_step0:
        step0 = os.path.join(out, "cherryq.step0.chrq")
        save_checkpoint(run.checkpoint({"step": 0}), step0)
    train_prepared(run, train)
    sha = corpus_hash(ids)
    ckpt_path = os.path.join(out, "cherryq.chrq")
    save_checkpoint(run.checkpoint({"corpus_sha256": sha}), ckpt_path)
    bits = ({n: avg_bits(qcfg.quant, *base.params[n].shape) for n in run.cherry} if qcfg.quant else {})
    log_path = os.path.join(out, "cherryq.log.json")
    _write_json(log_path, {**run.log.to_dict(), "avg_bits": bits,
                           "avg_bits_mean": float(np.mean(list(bits.values()))) if bits else None,
                           "cherry_columns": {n: idx.tolist() for n, idx in run.cherry.items()},
                           "scale_search_alpha": {n: s.alpha for n, s in run.searches.items()}})
    artifacts = {"checkpoint": ckpt_path, "log": log_path}
    if step0:
        artifacts["step0_checkpoint"] = step0
    _manifest(os.path.join(out, "cherryq.manifest.json"), "cherryq", cfg, qcfg.seed, sha, artifacts, started)
    return artifacts


def cmd_eval(args) -> dict:
    cfg = _resolved(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    cfg["model"] = model.config.to_dict()
    ids, _, val = _windows(cfg)
    batches = _batches(val, cfg["eval"]["batch_size"])
    ppl = perplexity(model, batches)
    if not math.isfinite(ppl):
        raise NumericError("perplexity is not finite")
    result = {"perplexity": ppl, "tokens": int(val.shape[0] * (val.shape[1] - 1)),
              "config": {"model": model.config.to_dict(),
                         "quant": ckpt.quant_config.to_dict() if ckpt.quant_config else None,
                         "corpus_sha256": corpus_hash(ids), "val_fraction": cfg["val_fraction"]}}
    if args.out:
        _write_json(args.out, result)
    return result


def cmd_avgbits(args) -> float:
    cfg = _resolved(args)
    return avg_bits(quant_config(cfg), args.rows, args.cols)


def cmd_overlap(args) -> dict:
    cfg = _resolved(args)
    a, b = _load_impacts(args.impacts_a), _load_impacts(args.impacts_b)
    if set(a) != set(b):
        raise DataError("impact files cover different matrices")
    fraction = args.fraction if args.fraction is not None else cherry_fraction(cfg)
    per = {n: overlap_ratio(select_cherry_columns(a[n], fraction), select_cherry_columns(b[n], fraction))
           for n in sorted(a)}
    cols = [a[n].shape[1] for n in sorted(a)]
    return {"fraction": fraction, "per_matrix": per, "mean": float(np.mean(list(per.values()))),
            "random_baseline_pct": float(np.mean([100.0 * cherry_count(c, fraction) / c for c in cols]))}


# -- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cherryq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. qat.quant.bits=2 (repeatable)")
        sp.add_argument("--seed", type=int)
        if corpus:
            sp.add_argument("--corpus", help="corpus path or synthetic:<bytes>:<seed>")

    sp = sub.add_parser("train-base", help="train the full-precision toy LM")
    common(sp)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", default="runs/base")

    sp = sub.add_parser("analyze", help="impact maps, heterogeneity scores, scatter samples, overlaps")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus2", help="second corpus for across-corpus overlaps")
    sp.add_argument("--splits", type=int)
    sp.add_argument("--out", default="runs/analyze")

    sp = sub.add_parser("cherryq", help="mixed-precision QAT from a base checkpoint")
    common(sp)
    sp.add_argument("--base", required=True)
    sp.add_argument("--impacts", help="impacts.npz written by analyze")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--save-step0", action="store_true", help="also write the checkpoint before training")
    sp.add_argument("--out", default="runs/cherryq")

    sp = sub.add_parser("eval", help="held-out perplexity as JSON")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="also write the JSON here")

    sp = sub.add_parser("avgbits", help="storage bits per weight for a matrix shape")
    common(sp, corpus=False)
    sp.add_argument("--rows", type=int, default=4096)
    sp.add_argument("--cols", type=int, default=4096)

    sp = sub.add_parser("overlap", help="cherry-column overlap between two impact files")
    common(sp, corpus=False)
    sp.add_argument("--impacts-a", required=True)
    sp.add_argument("--impacts-b", required=True)
    sp.add_argument("--fraction", type=float)
    return p


COMMANDS = {"train-base": cmd_train_base, "analyze": cmd_analyze, "cherryq": cmd_cherryq,
            "eval": cmd_eval, "avgbits": cmd_avgbits, "overlap": cmd_overlap}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        # non-finite values are reported as NumericError (exit 4); numpy's own warnings add nothing
        with np.errstate(over="ignore", invalid="ignore"):
            result = COMMANDS[args.command](args)
    except CherryQError as exc:
        print(f"cherryq {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"cherryq {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    if isinstance(result, float):
        print(f"{result:.4f}")
    else:
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
