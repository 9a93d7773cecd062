"""Command-line driver: synth-init, analyze, compress-ffn, train-gates, prune-heads, report.

Exit codes: 0 success, 2 validation error, 3 I/O or file-format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, analyze, checkpoint, gatetrain, lowrank
from .errors import (
    CheckpointError,
    InfoPruneError,
    InvalidConfig,
    MissingGates,
    NumericalError,
    ShapeMismatch,
    ValidationError,
)
from .toymodel import (
    GATES_TENSOR,
    GateSet,
    ModelConfig,
    forward,
    init_model,
    make_synthetic_task,
    model_from_checkpoint,
    model_to_checkpoint,
)

log = logging.getLogger("infoprune")

SEED_ENV = "INFOPRUNE_SEED"
DEFAULT_SWEEP = (0.2, 0.3, 0.4, 0.5)
DEFAULT_EPSILON_SWEEP = (0.05, 0.01, 0.001)


# ---------------------------------------------------------------- file helpers


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _provenance(inputs, seed=None) -> dict:
    return {
        "tool_version": __version__,
        "seed": seed,
        "inputs": {Path(p).name: _sha256(p) for p in inputs},
    }


def _load_model(path):
    ckpt = checkpoint.load(path)
    model, gates = model_from_checkpoint(ckpt)
    return ckpt, model, gates


def _write_manifest(path, command, args, started, summary, seed=None, config_path=None, inp=None, out=None):
    manifest = {
        "command": command,
        "config_path": config_path,
        "input_checkpoint": inp,
        "output_checkpoint": out,
        "seed": seed,
        "tool_version": __version__,
        "wall_time_seconds": time.perf_counter() - started,
        "result_summary": summary,
    }
    _atomic_write(path, _dump_json(manifest))


def _manifest_path(args, default):
    return args.manifest if args.manifest else default


# ---------------------------------------------------------------- commands


def cmd_synth_init(args) -> dict:
    cfg = ModelConfig(
        layers=args.layers,
        heads=args.heads,
        model_dim=args.dim,
        ffn_hidden=args.ffn_hidden,
        seq_len=args.seq_len,
        seed=args.seed,
        activation=args.activation,
    )
    model = init_model(cfg)
    gates = GateSet.init(cfg, args.zeta_init)
    checkpoint.save(model_to_checkpoint(model, gates), args.out)
    summary = {"params": model.param_count(), "config": cfg.to_dict()}
    _write_manifest(_manifest_path(args, f"{args.out}.manifest.json"), "synth-init", args, args.started,
                    summary, seed=args.seed, out=args.out)
    return summary


def probe_inputs(config: ModelConfig, seed: int, batch: int = 8) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((batch, config.seq_len, config.model_dim))


def importance_for_model(model, gates, probe_seed: int, scope: str = "global", batch: int = 8):
    x = probe_inputs(model.config, probe_seed, batch)
    gate_vals = gates if gates is not None and all(len(lp.heads) == model.config.heads for lp in model.layers) else None
    _, trace = forward(model, x, gate_vals)
    return analyze.head_importance(
        trace, scope=scope, heads=[list(lp.heads) for lp in model.layers], num_heads=model.config.heads
    )


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def cmd_analyze(args) -> dict:
    _, model, gates = _load_model(args.input)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imp = importance_for_model(model, gates, args.probe_seed, args.scope, args.probe_batch)
    dens = analyze.density_report(model, args.threshold_fraction)
    flops = analyze.model_flops(model)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer"] + [f"head_{h}" for h in range(model.config.heads)])
    for l, row in enumerate(imp.scores):
        w.writerow([l] + [_fmt(v) for v in row])
    _atomic_write(out_dir / "importance.csv", buf.getvalue().encode())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "w1", "w2", "w1_x_w2"])
    for r in dens.rows():
        w.writerow([r["layer"], _fmt(r["w1"]), _fmt(r["w2"]), _fmt(r["w1_x_w2"])])
    _atomic_write(out_dir / "density.csv", buf.getvalue().encode())

    report = {"flops": flops.to_dict(), "provenance": _provenance([args.input], args.probe_seed)}
    _atomic_write(out_dir / "flops.json", _dump_json(report))
    summary = {"total_flops": flops.total_flops, "files": ["importance.csv", "density.csv", "flops.json"]}
    _write_manifest(_manifest_path(args, out_dir / "manifest.json"), "analyze", args, args.started, summary,
                    seed=args.probe_seed, inp=args.input)
    return summary


def _calibration_anchors(model, path):
    try:
        x = np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise ValidationError(f"calibration file is not a numeric .npy array: {exc}") from None
    cfg = model.config
    x = np.asarray(x, dtype=np.float64).reshape(-1, cfg.seq_len, cfg.model_dim)
    _, trace = forward(model, x)
    return [lt.h2.reshape(-1, cfg.model_dim).mean(axis=0) for lt in trace.layers]


def _epsilon_sweep(model, anchors, epsilons):
    rows = []
    for eps in epsilons:
        ks = [
            lowrank.compress(lowrank.FfnPair(lp.w1, lp.w2, activation=lp.activation), eps, anchors[l]).retained_rank
            for l, lp in enumerate(model.layers)
        ]
        flops = analyze.count_flops(model.config, [len(lp.heads) for lp in model.layers], ks)
        rows.append({"epsilon": eps, "ranks": ks, "mean_retained_dim": float(np.mean(ks)),
                     "ffn_flops": flops.ffn_flops, "total_flops": flops.total_flops})
    return rows


def cmd_compress_ffn(args) -> dict:
    _, model, gates = _load_model(args.input)
    anchors = _calibration_anchors(model, args.calibration) if args.calibration else [None] * len(model.layers)
    out_model = model.copy()
    layers = []
    for l, lp in enumerate(out_model.layers):
        pair = lowrank.FfnPair(lp.w1, lp.w2, activation=lp.activation)
        res = lowrank.compress(pair, args.epsilon, anchors[l])
        lp.w1, lp.w2, lp.activation = res.w1_hat, res.w2_hat, "identity"
        layers.append({"layer": l, **res.summary()})
    ranks = [r["retained_rank"] for r in layers]
    report = {
        "epsilon": args.epsilon,
        "layers": layers,
        "mean_retained_dim": float(np.mean(ranks)),
        "anchor": "calibration-mean" if args.calibration else "none",
        "provenance": _provenance([args.input] + ([args.calibration] if args.calibration else [])),
    }
    if args.sweep:
        report["sweep"] = _epsilon_sweep(model, anchors, args.sweep_values or list(DEFAULT_EPSILON_SWEEP))
    ckpt = model_to_checkpoint(out_model, gates, {"ffn_compression": {"epsilon": args.epsilon, "layers": layers}})
    checkpoint.save(ckpt, args.output)
    report_path = args.report or f"{args.output}.compress.json"
    _atomic_write(report_path, _dump_json(report))
    summary = {"ranks": ranks, "mean_retained_dim": report["mean_retained_dim"]}
    _write_manifest(_manifest_path(args, f"{args.output}.manifest.json"), "compress-ffn", args, args.started,
                    summary, inp=args.input, out=args.output)
    return summary


def load_train_config(path):
    """Parse and validate a train-gates config file; returns (TrainConfig, task dict)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from None
    schema = json.loads(resources.files("infoprune").joinpath("schemas/train_config.schema.json").read_text())
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise InvalidConfig([f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors])
    train = dict(doc.get("train", {}))
    if os.environ.get(SEED_ENV):
        try:
            train["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise InvalidConfig(f"{SEED_ENV} must be an integer") from None
    return gatetrain.TrainConfig(**train), doc["task"]


def cmd_train_gates(args) -> dict:
    cfg, task = load_train_config(args.config)
    _, model, gates = _load_model(args.input)
    if any(len(lp.heads) != model.config.heads for lp in model.layers):
        raise ShapeMismatch("train-gates needs an unpruned model")
    gates = gates if gates is not None else GateSet.init(model.config)
    dataset = make_synthetic_task(
        model.config,
        task["teacher_seed"],
        [tuple(h) for h in task.get("redundant_heads", [])],
        task.get("num_samples", 64),
    )
    result = gatetrain.train_gates(model, dataset, cfg, gates)
    ckpt = model_to_checkpoint(result.model, result.gates, {"train_config": gatetrain.config_to_dict(cfg)})
    checkpoint.save(ckpt, args.output)
    history_path = args.history or os.path.join(os.path.dirname(os.path.abspath(args.output)), "history.jsonl")
    lines = "".join(json.dumps(rec, allow_nan=False) + "\n" for rec in result.history)
    _atomic_write(history_path, lines.encode())
    summary = {
        "steps": len(result.history),
        "final_total": result.history[-1]["total"] if result.history else None,
        "gates": result.gates.values().tolist(),
    }
    _write_manifest(_manifest_path(args, f"{args.output}.manifest.json"), "train-gates", args, args.started,
                    summary, seed=cfg.seed, config_path=args.config, inp=args.input, out=args.output)
    return summary


def _prune_summary(decision, z, config):
    kept = gatetrain.effective_retained(decision)
    flops = analyze.count_flops(config, decision)
    return {
        "threshold": z,
        "pruned_ratio": decision.pruned_ratio,
        "per_layer_counts": list(decision.per_layer_counts),
        "retained": [[l, h] for l, hs in enumerate(kept) for h in hs],
        "attention_flops": flops.attention_flops,
        "total_flops": flops.total_flops,
    }


def cmd_prune_heads(args) -> dict:
    ckpt, model, gates = _load_model(args.input)
    if gates is None:
        raise MissingGates(f"{args.input} carries no {GATES_TENSOR} tensor")
    if args.sweep:
        values = args.sweep_values or list(DEFAULT_SWEEP)
        sweep = [_prune_summary(gatetrain.prune_heads(gates, z), z, model.config) for z in values]
        result = {"sweep": sweep, "provenance": _provenance([args.input])}
    else:
        decision = gatetrain.prune_heads(gates, args.threshold)
        result = {**_prune_summary(decision, args.threshold, model.config), "provenance": _provenance([args.input])}
    if args.output:
        decision = gatetrain.prune_heads(gates, args.threshold)
        pruned = gatetrain.apply_pruning(model, decision)
        meta = {k: v for k, v in ckpt.metadata.items() if k not in ("layers", "model_config", "weight_layout", "format_version")}
        meta.update({"gates_folded": True, "prune": decision.summary() | {"threshold": args.threshold}})
        checkpoint.save(model_to_checkpoint(pruned, None, meta), args.output)
    summary_path = args.summary or (f"{args.output}.prune.json" if args.output else None)
    if summary_path:
        _atomic_write(summary_path, _dump_json(result))
    else:
        sys.stdout.write(_dump_json(result).decode())
    manifest = _manifest_path(args, f"{args.output or summary_path or 'prune-heads'}.manifest.json")
    _write_manifest(manifest, "prune-heads", args, args.started, {k: v for k, v in result.items() if k != "provenance"},
                    inp=args.input, out=args.output)
    return result


def _param_classes(model) -> dict:
    attn = sum(getattr(lp, n).size for lp in model.layers for n in ("wq", "wk", "wv", "wo"))
    ffn = sum(getattr(lp, n).size for lp in model.layers for n in ("w1", "w2"))
    return {"attention": int(attn), "ffn": int(ffn), "total": int(model.param_count())}


def build_report(base_model, comp_model) -> dict:
    a, b = base_model.config, comp_model.config
    for key in ("layers", "heads", "model_dim", "ffn_hidden", "seq_len"):
        if getattr(a, key) != getattr(b, key):
            raise ShapeMismatch(f"configs differ in {key}: {getattr(a, key)} vs {getattr(b, key)}")
    fb, fc = analyze.model_flops(base_model), analyze.model_flops(comp_model)
    pb, pc = _param_classes(base_model), _param_classes(comp_model)
    ranks = [None if lp.w1.shape[1] == b.ffn_hidden else lp.w1.shape[1] for lp in comp_model.layers]
    check = analyze.count_flops(b, [len(lp.heads) for lp in comp_model.layers], ranks)
    if check.total_flops != fc.total_flops:
        raise NumericalError("FLOPs accounting disagrees with count_flops")
    rows = {}
    for cls, fl_b, fl_c in (
        ("attention", fb.attention_flops, fc.attention_flops),
        ("ffn", fb.ffn_flops, fc.ffn_flops),
        ("total", fb.total_flops, fc.total_flops),
    ):
        rows[cls] = {
            "baseline_flops": fl_b,
            "compressed_flops": fl_c,
            "baseline_params": pb[cls],
            "compressed_params": pc[cls],
            "param_compression_ratio": 1.0 - pc[cls] / pb[cls],
        }
    return {
        "modules": rows,
        "speedup_by_flops": fb.total_flops / fc.total_flops,
        "retained_heads": [list(lp.heads) for lp in comp_model.layers],
        "ffn_widths": comp_model.ffn_widths(),
        "note": analyze.FLOPS_NOTE,
    }


def format_report_table(report: dict) -> str:
    lines = [f"{'module':<10} {'base FLOPs':>12} {'new FLOPs':>12} {'base params':>12} {'new params':>12} {'ratio':>8}"]
    for cls, r in report["modules"].items():
        lines.append(
            f"{cls:<10} {r['baseline_flops']:>12} {r['compressed_flops']:>12} {r['baseline_params']:>12} "
            f"{r['compressed_params']:>12} {100 * r['param_compression_ratio']:>7.2f}%"
        )
    lines.append(f"speed-up (by FLOPs): {report['speedup_by_flops']:.4f}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> dict:
    _, base, _ = _load_model(args.baseline)
    _, comp, _ = _load_model(args.compressed)
    report = build_report(base, comp)
    report["provenance"] = _provenance([args.baseline, args.compressed])
    if args.out:
        _atomic_write(args.out, _dump_json(report))
    sys.stdout.write(format_report_table(report))
    manifest = _manifest_path(args, f"{args.out}.manifest.json" if args.out else None)
    if manifest:
        _write_manifest(manifest, "report", args, args.started, {"speedup_by_flops": report["speedup_by_flops"]},
                        inp=args.baseline)
    return report


# ---------------------------------------------------------------- parser


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infoprune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--manifest", help="where to write the run manifest")
        return sp

    sp = add("synth-init", cmd_synth_init, "create a seeded toy checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--dim", type=int, default=16)
    sp.add_argument("--ffn-hidden", type=int, default=32)
    sp.add_argument("--seq-len", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--activation", choices=["relu", "silu"], default="relu")
    sp.add_argument("--zeta-init", type=float, default=4.0)

    sp = add("analyze", cmd_analyze, "head importance, FFN row density and FLOPs")
    sp.add_argument("input")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--probe-seed", type=int, default=0)
    sp.add_argument("--probe-batch", type=int, default=8)
    sp.add_argument("--scope", choices=["global", "per_layer"], default="global")
    sp.add_argument("--threshold-fraction", type=float, default=0.05)

    sp = add("compress-ffn", cmd_compress_ffn, "adaptive low-rank FFN compression")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--calibration", help=".npy array of model inputs, shape (N, seq_len, dim)")
    sp.add_argument("--report")
    sp.add_argument("--sweep", action="store_true", help="also tabulate ranks and FLOPs over an epsilon grid")
    sp.add_argument("--sweep-values", type=_float_list)

    sp = add("train-gates", cmd_train_gates, "train head gates on the synthetic task")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--config", required=True)
    sp.add_argument("--history")

    sp = add("prune-heads", cmd_prune_heads, "threshold gates and physically remove heads")
    sp.add_argument("input")
    sp.add_argument("output", nargs="?")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--sweep", action="store_true")
    sp.add_argument("--sweep-values", type=_float_list)
    sp.add_argument("--summary")

    sp = add("report", cmd_report, "FLOPs and parameter comparison of two checkpoints")
    sp.add_argument("baseline")
    sp.add_argument("compressed")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.started = time.perf_counter()
    try:
        args.func(args)
    except InvalidConfig as exc:
        for v in exc.violations:
            print(f"error: {v}", file=sys.stderr)
        return exc.exit_code
    except (ValidationError, NumericalError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except InfoPruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
