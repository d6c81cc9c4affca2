"""``mext`` command line: train, sweep, layerwise, histogram, compare, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint
mismatch. A failing ``gradcheck`` exits 1.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config, gradcheck, inference
from .data import (
    Dataset,
    Vocab,
    gen_synthetic,
    load_tsv,
    read_tsv,
    vocab_from_tsv,
)
from .errors import ConfigError, DataError, MextError
from .train import REGIMES, train

log = logging.getLogger("mext")

GRADCHECK_TOL = 1e-5


# ---------------------------------------------------------------------------
# task data
# ---------------------------------------------------------------------------

def _data_dir(res: config.Resolved) -> Path:
    d = res.raw["task"].get("data")
    if not d:
        raise DataError(f"task {res.task.name!r} needs a data directory (--data)")
    p = Path(d)
    if not p.is_dir():
        raise DataError(f"data directory not found: {p}")
    return p


def load_task(res: config.Resolved, vocab: Vocab | None = None):
    """(train, dev, vocab, input bytes for hashing, max_len)."""
    t = res.raw["task"]
    if res.synthetic is not None:
        train_ds, dev_ds = gen_synthetic(res.synthetic)
        return train_ds, dev_ds, None, config.canonical(res.synthetic.to_dict()).encode(), res.synthetic.seq_len
    d = _data_dir(res)
    train_path, dev_path = d / t["train_file"], d / t["dev_file"]
    for p in (train_path, dev_path):
        if not p.is_file():
            raise DataError(f"data file not found: {p}")
    max_len = int(t["max_len"])
    if vocab is None:
        vocab = vocab_from_tsv(train_path, res.task, int(t["vocab_size"]))
    train_ds = load_tsv(train_path, res.task, vocab, max_len)
    dev_ds = load_tsv(dev_path, res.task, vocab, max_len)
    if len(dev_ds) == 0:
        raise DataError(f"{dev_path}: no examples")
    return train_ds, dev_ds, vocab, train_path.read_bytes() + dev_path.read_bytes(), max_len


def _model_config(res, vocab, max_len):
    n_vocab = res.synthetic.vocab_size if res.synthetic is not None else len(vocab)
    return res.model_config(n_vocab, res.task.classes, max_len)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(out: Path, command: str, cfg: dict, input_bytes: bytes, outputs: list[str]) -> str:
    body = {
        "command": command,
        "config": cfg,
        "seed": cfg["regime"]["seed"],
        "input_hash": config.digest(config.canonical(cfg).encode(), input_bytes),
        "outputs": sorted(outputs),
    }
    body["id"] = config.digest(config.canonical(body).encode())[:16]
    (out / f"{command}.manifest.json").write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return body["id"]


# ---------------------------------------------------------------------------
# overrides
# ---------------------------------------------------------------------------

def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        o.setdefault(section, {})[key] = value

    if getattr(args, "regime", None):
        put("regime", "regime", args.regime)
    if getattr(args, "gr", None) is not None:
        current = o.get("regime", {}).get("regime")
        if args.gr == "off" and current in (None, "romebert"):
            put("regime", "regime", "sd_only")
        elif args.gr == "on" and current in (None, "sd_only"):
            put("regime", "regime", "romebert")
    if getattr(args, "epochs", None):
        put("regime", "epochs", [int(e) for e in args.epochs.split(",")])
    if getattr(args, "seed", None) is not None:
        put("regime", "seed", args.seed)
        put("model", "seed", args.seed)
        put("task", "synthetic", {"seed": args.seed})
    if getattr(args, "gamma", None) is not None:
        put("sd", "gamma", args.gamma)
    if getattr(args, "temperature", None) is not None:
        put("sd", "temperature", args.temperature)
    if getattr(args, "task", None):
        put("task", "name", args.task)
    if getattr(args, "data", None):
        put("task", "data", args.data)
    if getattr(args, "thresholds", None):
        o["thresholds"] = parse_thresholds(args.thresholds)
    return o


def parse_thresholds(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad threshold list {text!r}") from exc
    if not vals or any(v < 0 for v in vals):
        raise ConfigError("thresholds must be a nonempty list of non-negative numbers")
    return vals


def _gr_fixup(cfg: dict, args) -> dict:
    # --gr applies to whatever regime the config file named
    gr = getattr(args, "gr", None)
    if gr == "off" and cfg["regime"]["regime"] == "romebert":
        cfg["regime"]["regime"] = "sd_only"
    elif gr == "on" and cfg["regime"]["regime"] == "sd_only":
        cfg["regime"]["regime"] = "romebert"
    return cfg


def _load_cfg(args) -> dict:
    return _gr_fixup(config.load(args.config, _overrides(args)), args)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def run_training(cfg: dict, out: Path, grad_log: bool = False) -> dict:
    res = config.resolve(cfg)
    train_ds, dev_ds, vocab, input_bytes, max_len = load_task(res)
    mcfg = _model_config(res, vocab, max_len)
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["checkpoint.mext", "metrics.jsonl"] + (["grad_log.jsonl"] if grad_log else [])
    if grad_log:
        (out / "grad_log.jsonl").unlink(missing_ok=True)
    manifest_id = write_manifest(out, "train", cfg, input_bytes, outputs)
    result = train(res.regime, mcfg, train_ds, dev_ds, out / "metrics.jsonl",
                   grad_log_path=out / "grad_log.jsonl" if grad_log else None)
    meta = {"config": cfg, "manifest_id": manifest_id}
    if vocab is not None:
        meta["vocab"] = vocab.itos
    checkpoint.save(out / "checkpoint.mext", result.store, meta)
    return {"store": result.store, "metrics": result.metrics, "dev": dev_ds, "manifest_id": manifest_id}


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    run = run_training(cfg, out, grad_log=args.grad_log)
    last = run["metrics"][-1] if run["metrics"] else {}
    print(json.dumps({"checkpoint": str(out / "checkpoint.mext"), "per_layer_dev_acc": last.get("per_layer_dev_acc")}))
    return 0


def _eval_context(args):
    """Load checkpoint (+ optional config to verify against) and its dev split."""
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    _, peek_meta = None, None
    from . import container
    peek_meta, _, _ = container.read(ckpt)
    cfg = peek_meta.get("config")
    if cfg is None:
        raise ConfigError(f"{ckpt}: checkpoint has no run config")
    if args.config or args.data:
        cfg = config.deep_merge(cfg, config.load(args.config) if args.config else {})
        if args.data:
            cfg["task"]["data"] = args.data
    res = config.resolve(cfg)
    vocab = Vocab(peek_meta["vocab"]) if peek_meta.get("vocab") else None
    _, dev_ds, vocab, input_bytes, max_len = load_task(res, vocab)
    expect = _model_config(res, vocab, max_len)
    store, meta = checkpoint.load(ckpt, expect=expect)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return store, dev_ds, cfg, res, input_bytes + ckpt.read_bytes(), out


def cmd_sweep(args) -> int:
    store, dev, cfg, res, ib, out = _eval_context(args)
    thresholds = parse_thresholds(args.thresholds) if args.thresholds else cfg["thresholds"]
    recs = inference.sweep(store, dev, thresholds, res.task.metric)
    (out / "sweep.csv").write_text(inference.sweep_csv(recs, store.config.k), encoding="utf-8")
    write_manifest(out, "sweep", cfg, ib, ["sweep.csv"])
    return 0


def cmd_layerwise(args) -> int:
    store, dev, cfg, res, ib, out = _eval_context(args)
    vals = inference.eval_fixed_layers(store, dev, res.task.metric)
    (out / "layerwise.csv").write_text(inference.layerwise_csv(vals, res.task.metric), encoding="utf-8")
    write_manifest(out, "layerwise", cfg, ib, ["layerwise.csv"])
    return 0


def cmd_histogram(args) -> int:
    store, dev, cfg, res, ib, out = _eval_context(args)
    if args.threshold < 0:
        raise ConfigError("threshold must be >= 0")
    counts = inference.exit_histogram(store, dev, args.threshold)
    mid = write_manifest(out, "histogram", cfg, ib, ["histogram.json"])
    (out / "histogram.json").write_text(inference.histogram_json(counts, args.threshold, {"manifest_id": mid}), encoding="utf-8")
    return 0


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def cmd_compare(args) -> int:
    """Train several regimes over several seeds; emit layerwise and sweep tables."""
    base = _load_cfg(args)
    regimes = [r.strip() for r in args.regimes.split(",") if r.strip()]
    for r in regimes:
        if r not in REGIMES:
            raise ConfigError(f"unknown regime {r!r}")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    thresholds = base["thresholds"]
    lw_rows = [["regime", "seed", "layer", "metric"]]
    sw_rows = None
    summary: dict = {}
    input_parts = []
    for regime in regimes:
        for seed in seeds:
            cfg = config.deep_merge(base, {
                "regime": {"regime": regime, "seed": seed, "epochs": base["regime"]["epochs"] if regime not in ("deebert", "deebert_sd") or args.two_stage_epochs is None else [int(e) for e in args.two_stage_epochs.split(",")]},
                "model": {"seed": seed},
                "task": {"synthetic": {"seed": seed}},
            })
            if cfg["regime"]["epochs"] is not None and regime in ("deebert", "deebert_sd") and len(cfg["regime"]["epochs"]) == 1:
                cfg["regime"]["epochs"] = cfg["regime"]["epochs"] * 2
            if cfg["regime"]["epochs"] is not None and regime in ("sd_only", "romebert") and len(cfg["regime"]["epochs"]) == 2:
                cfg["regime"]["epochs"] = cfg["regime"]["epochs"][:1]
            log.info("compare: %s seed=%d", regime, seed)
            run = run_training(cfg, out / f"{regime}_seed{seed}")
            res = config.resolve(cfg)
            store, dev = run["store"], run["dev"]
            table = inference.ExitTable.build(store, dev.tokens)
            vals = [inference.score(p, dev.labels, res.task.metric) for p in table.predictions]
            for i, v in enumerate(vals, start=1):
                lw_rows.append([regime, seed, i, f"{v:.6f}"])
            recs = inference.sweep_table(table, dev.labels, thresholds, res.task.metric)
            k = store.config.k
            if sw_rows is None:
                sw_rows = [["regime", "seed", "threshold", "metric", "expected_time_pct"] + [f"count_layer_{i}" for i in range(1, k + 1)]]
            for r in recs:
                sw_rows.append([regime, seed, repr(r.threshold), f"{r.metric:.6f}", f"{r.expected_time_pct:.6f}"] + r.histogram)
            conflict = [m["conflict_rate"] for m in run["metrics"]]
            summary.setdefault(regime, []).append({"seed": seed, "layerwise": vals, "conflict_rate": conflict})
            input_parts.append(run["manifest_id"].encode())
    (out / "compare_layerwise.csv").write_text(_csv(lw_rows), encoding="utf-8")
    (out / "compare_sweep.csv").write_text(_csv(sw_rows or []), encoding="utf-8")
    means = {r: np.mean([s["layerwise"] for s in runs], axis=0).round(6).tolist() for r, runs in summary.items()}
    mid = write_manifest(out, "compare", base, b"".join(input_parts),
                         ["compare_layerwise.csv", "compare_sweep.csv", "compare_summary.json"])
    doc = {"manifest_id": mid, "runs": summary, "mean_layerwise": means}
    (out / "compare_summary.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(seed=args.seed or 0, max_coords=args.coords)
    ok = True
    for r in results:
        passed = r.passed(GRADCHECK_TOL)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {r.name:24s} max_rel_error={r.max_rel_error:.3e} coords={r.coords}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mext", description="Multi-exit transformer training and early-exit evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, training=True):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--out", metavar="DIR", default=".")
        sp.add_argument("--data", metavar="PATH", help="directory with the task's TSV files")
        if training:
            sp.add_argument("--regime", choices=REGIMES)
            sp.add_argument("--task")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--gr", choices=("on", "off"))
            sp.add_argument("--gamma", type=float)
            sp.add_argument("--temperature", type=float)
            sp.add_argument("--epochs", help="comma-separated epochs per stage")
            sp.add_argument("--thresholds", help="comma-separated entropy thresholds")

    sp = sub.add_parser("train", help="train one regime and write a checkpoint")
    common(sp)
    sp.add_argument("--grad-log", action="store_true", help="write per-step gradient-conflict diagnostics")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("sweep", cmd_sweep, "accuracy / expected-time over entropy thresholds"),
        ("layerwise", cmd_layerwise, "fixed-exit metric for every layer"),
        ("histogram", cmd_histogram, "exit-layer counts at one threshold"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("checkpoint")
        common(sp, training=False)
        if name == "sweep":
            sp.add_argument("--thresholds", help="comma-separated entropy thresholds")
        if name == "histogram":
            sp.add_argument("--threshold", type=float, required=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("compare", help="train several regimes over several seeds")
    common(sp)
    sp.add_argument("--regimes", default=",".join(REGIMES))
    sp.add_argument("--seeds", default="1,2,3")
    sp.add_argument("--two-stage-epochs", help="epochs per stage for two-stage regimes")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("gradcheck", help="float64 finite-difference gradient check")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--coords", type=int, default=6, help="sampled coordinates per parameter tensor")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except MextError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
