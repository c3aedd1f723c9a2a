"""Command-line entry point: ``binarynas <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import DataError, load_dataset, split
from .derive import (
    ArchFormatError,
    arch_features,
    derive,
    export_arch,
    import_arch,
    load_checkpoint,
    predict_latency,
    save_checkpoint,
    train_compact,
)
from .latency import (
    DEVICE_PROFILES,
    LatencyError,
    LatencyModel,
    fit_latency_model,
    profile_latency,
    profile_table,
    read_table_csv,
    synthetic_samples,
    table_model,
    write_table_csv,
)
from .reinforce import ReinforceState, RewardError, RewardSpec
from .search import LossSpec, ScheduleError, TrainSchedule, run_search, stream
from .space import SearchSpaceSpec, SpaceError, build_supernet

log = logging.getLogger("binarynas")

CONFIG_KEYS = """\
config keys (JSON):
  seed                      run seed (required); every random stream derives from it
  space                     search-space JSON path or inline object
    .ops                    "cifar7" | "mobile" | list of {kind, kernel, expand}
    .stages[].blocks        blocks per stage (B)
    .channels.final         final head channels (F)
  dataset                   {"kind": "separable-patches" | "two-moons-images" | "tensor-file", ...}
    .n                      sample count for the generated sets (default 512)
    .x | .y                 tensor files for "tensor-file"
  algo                      "gradient" | "reinforce"
  mode                      "binary" | "darts" | "one-shot"
  schedule.*                epochs, batch_size, weight_steps, arch_steps, weight_lr,
                            momentum, arch_lr, arch_batch_size, val_fraction,
                            arch_update ("two-path" | "full"), cache_policy
  loss.lambda1              weight decay (λ1)
  loss.lambda2              latency loss scale (λ2); > 0 needs a latency model
  loss.latency              enable the expected-latency term
  reward.target_ms          target latency (T)
  reward.w                  latency exponent (w), usually <= 0
  reward.kind               "acc-latency" | "acc-only"
  reinforce.samples         architectures sampled per update (M)
  reinforce.decay           moving-average baseline decay
  latency.table | .model | .profile
                            CSV table, fitted model JSON, or synthetic device profile
  train_schedule.*          schedule for the train command (defaults to schedule)
  out                       output directory
"""


class ConfigError(ValueError):
    pass


def _resolve(base: Path, value):
    return value if value is None or Path(value).is_absolute() else str(base / value)


def load_config(path, overrides: argparse.Namespace | None = None) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at byte {exc.pos}: {exc.msg}") from None
    base = path.parent
    o = overrides
    if o is not None:
        if getattr(o, "seed", None) is not None:
            cfg["seed"] = o.seed
        if getattr(o, "out", None) is not None:
            cfg["out"] = o.out
        if getattr(o, "algo", None) is not None:
            cfg["algo"] = o.algo
        if getattr(o, "mode", None) is not None:
            cfg["mode"] = o.mode
        if getattr(o, "lambda2", None) is not None:
            cfg.setdefault("loss", {})["lambda2"] = o.lambda2
        if getattr(o, "latency_table", None) is not None:
            cfg["latency"] = {"table": os.path.abspath(o.latency_table)}
        if getattr(o, "device_profile", None) is not None:
            cfg["latency"] = {"profile": o.device_profile}
    if "seed" not in cfg:
        raise ConfigError("config key 'seed' is required")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("config key 'seed' must be an integer")
    if "space" not in cfg:
        raise ConfigError("config key 'space' is required")
    if isinstance(cfg["space"], str):
        p = Path(_resolve(base, cfg["space"]))
        if not p.exists():
            raise ConfigError(f"config key 'space': file {p} does not exist")
        cfg["space"] = json.loads(p.read_text())
    lat = cfg.get("latency") or {}
    for key in ("table", "model"):
        if lat.get(key) is not None:
            lat[key] = _resolve(base, lat[key])
            if not Path(lat[key]).exists():
                raise ConfigError(f"config key 'latency.{key}': file {lat[key]} does not exist")
    if lat.get("profile") is not None and lat["profile"] not in DEVICE_PROFILES:
        raise ConfigError(f"config key 'latency.profile' must be one of {DEVICE_PROFILES}")
    ds = cfg.get("dataset") or {"kind": "separable-patches"}
    for key in ("x", "y"):
        if key in ds:
            ds[key] = _resolve(base, ds[key])
            if not Path(ds[key]).exists():
                raise ConfigError(f"config key 'dataset.{key}': file {ds[key]} does not exist")
    cfg["dataset"] = ds
    cfg["latency"] = lat
    if cfg.get("algo", "gradient") not in ("gradient", "reinforce"):
        raise ConfigError("config key 'algo' must be 'gradient' or 'reinforce'")
    if cfg.get("mode", "binary") not in ("binary", "darts", "one-shot"):
        raise ConfigError("config key 'mode' must be 'binary', 'darts' or 'one-shot'")
    return cfg


def _build(cls, doc: dict | None, key: str):
    try:
        return cls(**(doc or {}))
    except TypeError as exc:
        raise ConfigError(f"config key '{key}': {exc}") from None


def _latency_model(cfg: dict, net=None) -> LatencyModel | None:
    lat = cfg.get("latency") or {}
    if lat.get("model"):
        return LatencyModel.load(lat["model"])
    if lat.get("table"):
        return table_model(read_table_csv(lat["table"]))
    if lat.get("profile"):
        return profile_table(net, lat["profile"])
    return None


def _datasets(cfg: dict, schedule: TrainSchedule):
    seed = cfg["seed"]
    ds = load_dataset(dict(cfg["dataset"]), stream(seed, "data"))
    return split(ds, schedule.val_fraction, stream(seed, "split"))


def cmd_search(args) -> int:
    cfg = load_config(args.config, args)
    seed = cfg["seed"]
    out = Path(cfg.get("out") or "runs/search")
    schedule = _build(TrainSchedule, cfg.get("schedule"), "schedule")
    loss_doc = dict(cfg.get("loss") or {})
    loss_doc.setdefault("latency", float(loss_doc.get("lambda2", 0.0)) > 0)
    loss = _build(LossSpec, loss_doc, "loss")
    algo = cfg.get("algo", "gradient")
    reward = _build(RewardSpec, cfg.get("reward"), "reward") if algo == "reinforce" else None
    state = _build(ReinforceState, cfg.get("reinforce"), "reinforce") if algo == "reinforce" else None

    net = build_supernet(SearchSpaceSpec.from_dict(cfg["space"]), stream(seed, "weights"))
    model = _latency_model(cfg, net)
    if loss.active and model is None:
        raise ConfigError("latency model required: loss.lambda2 > 0 but no latency table, model or profile given")
    if algo == "reinforce" and reward.kind == "acc-latency" and model is None:
        raise ConfigError("latency model required: reward.kind 'acc-latency' needs a latency table, model or profile")
    train, val = _datasets(cfg, schedule)

    report = run_search(net, train, val, schedule, loss, algo, seed, model, reward, state, cfg.get("mode", "binary"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.metrics_csv())
    save_checkpoint(net, out, seed, cfg)
    summary = {
        "alpha": report.alphas,
        "probs": report.probs,
        "chosen": report.chosen,
        "ops": [[op.label for op in e.ops] for e in net.edges],
        "final_val_acc": report.final_val_acc,
        "best_val_acc": report.best_val_acc,
        "expected_latency_ms": report.expected_latency_ms,
    }
    (out / "alpha.json").write_text(json.dumps(summary, indent=1) + "\n")
    for i, (e, k) in enumerate(zip(net.edges, report.chosen)):
        print(f"block {i}: {e.ops[k].label}  p={e.probs[k]:.3f}")
    print(f"best val acc {report.best_val_acc:.4f}  final val acc {report.final_val_acc:.4f}")
    if report.expected_latency_ms is not None:
        print(f"expected latency {report.expected_latency_ms:.3f} ms")
    print(f"wrote {out}/checkpoint.json, weights.bin, metrics.csv, alpha.json")
    return 0


def cmd_derive(args) -> int:
    net = load_checkpoint(args.checkpoint)
    arch = derive(net, {k: v for k, v in net.provenance.items() if v is not None})
    export_arch(arch, args.output)
    print(f"derived {arch.depth} blocks -> {args.output}")
    return 0


def cmd_train(args) -> int:
    arch = import_arch(args.arch)
    cfg = load_config(args.config, args)
    seed = cfg["seed"]
    schedule = _build(TrainSchedule, cfg.get("train_schedule") or cfg.get("schedule"), "schedule")
    train, val = _datasets(cfg, schedule)
    lat = cfg.get("latency") or {}
    model = None
    if lat.get("model") or lat.get("table"):
        model = _latency_model(cfg)
    lambda1 = float((cfg.get("loss") or {}).get("lambda1", 0.0))
    res = train_compact(arch, train, val, schedule, seed, model, lambda1)
    predicted = res.predicted_latency_ms
    if predicted is None and lat.get("profile"):
        predicted = _profile_arch_latency(arch, lat["profile"])
    result = {"val_acc": res.val_acc, "final_loss": res.losses[-1], "predicted_latency_ms": predicted}
    out = Path(cfg.get("out") or "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_result.json").write_text(json.dumps(result, indent=1) + "\n")
    print(f"val acc {res.val_acc:.4f}")
    if predicted is not None:
        print(f"predicted latency {predicted:.3f} ms")
    return 0


def cmd_fit_latency(args) -> int:
    samples = read_table_csv(args.table)
    rng = np.random.default_rng(args.seed)
    model, report = fit_latency_model(samples, args.holdout, args.mode, rng)
    if args.output:
        model.save(args.output)
    print(f"mode {report.mode}  train {report.n_train}  holdout {report.n_holdout}")
    print(f"rmse_train {report.rmse_train!r}")
    print(f"rmse_holdout {report.rmse_holdout!r}")
    print(f"correlation {report.correlation!r}")
    for w in report.warnings:
        print(f"warning: {w}")
    return 0


def _profile_arch_latency(arch, profile: str) -> float:
    stem, head, blocks = arch_features(arch)
    return float(sum(profile_latency(f, profile) for f in [stem, head] + blocks))


def cmd_predict(args) -> int:
    arch = import_arch(args.arch)
    src = args.latency_model
    if src is None and args.device_profile is None:
        raise ConfigError("predict needs --latency-model or --device-profile")
    if src is not None:
        model = table_model(read_table_csv(src)) if src.endswith(".csv") else LatencyModel.load(src)
        ms = predict_latency(arch, model)
    else:
        ms = _profile_arch_latency(arch, args.device_profile)
    print(f"{ms!r}")
    return 0


def _svg(series: dict[str, list[float]], title: str) -> str:
    w, h, pad = 480, 300, 40
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<text x="{pad}" y="20" font-size="14">{title}</text>']
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    for i, (name, ys) in enumerate(series.items()):
        ys = [y for y in ys if y == y]
        if not ys:
            continue
        lo, hi = min(ys), max(ys)
        span = hi - lo or 1.0
        n = max(len(ys) - 1, 1)
        pts = " ".join(f"{pad + (w - 2 * pad) * j / n:.1f},{h - pad - (h - 2 * pad) * (y - lo) / span:.1f}"
                       for j, y in enumerate(ys))
        c = colors[i % len(colors)]
        lines.append(f'<polyline fill="none" stroke="{c}" points="{pts}"/>')
        lines.append(f'<text x="{w - pad - 120}" y="{40 + 16 * i}" font-size="11" fill="{c}">{name} [{lo:.3g}, {hi:.3g}]</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    with open(args.metrics, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["phase"] == "arch"]

    def col(name):
        return [float(r[name]) if r[name] != "" else float("nan") for r in rows]

    series = {"val_acc": col("val_acc"), "mean_edge_entropy": col("mean_edge_entropy"),
              "expected_latency_ms": col("expected_latency_ms")}
    if args.svg:
        Path(args.svg).write_text(_svg(series, "search curves"))
        print(f"wrote {args.svg}")
    else:
        print("epoch val_acc mean_edge_entropy expected_latency_ms")
        for r, a, e, lat in zip(rows, *series.values()):
            print(f"{r['epoch']} {a:.4f} {e:.4f} {lat:.4f}")
    return 0


def cmd_synth_table(args) -> int:
    rng = np.random.default_rng(args.seed)
    samples, _ = synthetic_samples(args.n, rng, noise_ms=args.noise)
    write_table_csv(args.output, samples)
    print(f"wrote {len(samples)} rows -> {args.output}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="binarynas",
        description="Hardware-aware architecture search with binarized path gates.",
        epilog=CONFIG_KEYS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--algo", choices=["gradient", "reinforce"])
        sp.add_argument("--mode", choices=["one-shot", "darts", "binary"])
        sp.add_argument("--lambda2", type=float, help="latency loss scale (λ2)")
        sp.add_argument("--latency-table", help="latency table CSV")
        sp.add_argument("--device-profile", choices=DEVICE_PROFILES)

    sp = sub.add_parser("search", help="run the architecture search", epilog=CONFIG_KEYS,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    sp.add_argument("config")
    run_flags(sp)
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("derive", help="keep the highest-weight path of every edge")
    sp.add_argument("checkpoint")
    sp.add_argument("-o", "--output", default="arch.json")
    sp.set_defaults(func=cmd_derive)

    sp = sub.add_parser("train", help="train a derived architecture from scratch", epilog=CONFIG_KEYS,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    sp.add_argument("arch")
    sp.add_argument("config")
    run_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("fit-latency", help="fit a latency model to a measurement table")
    sp.add_argument("table")
    sp.add_argument("-o", "--output")
    sp.add_argument("--holdout", type=float, default=0.2)
    sp.add_argument("--mode", choices=["linear", "table"], default="linear")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_fit_latency)

    sp = sub.add_parser("predict", help="predicted latency of an architecture")
    sp.add_argument("arch")
    sp.add_argument("--latency-model", help="model JSON or table CSV")
    sp.add_argument("--device-profile", choices=DEVICE_PROFILES)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("report", help="summarize a metrics CSV")
    sp.add_argument("metrics")
    sp.add_argument("--svg")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("synth-table", help="write a synthetic latency table")
    sp.add_argument("-o", "--output", default="latency.csv")
    sp.add_argument("-n", type=int, default=5000)
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth_table)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("SF_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (ConfigError, SpaceError, ScheduleError, LatencyError, RewardError, ArchFormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
