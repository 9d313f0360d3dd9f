"""Command-line entry point: ``layerwise {train,eval,probe,prune,theory}``.

Exit codes: 0 success, 1 a requested check failed, 2 configuration error,
3 data error, 4 numerical failure, 5 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, parse_overrides
from .errors import CheckpointError, ConfigError, DataError, NumericError

log = logging.getLogger("layerwise")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = range(6)
CHECKPOINT_NAME = "checkpoint.lw"


class CheckFailed(Exception):
    pass


# -- helpers -------------------------------------------------------------------------------------------


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(summary, out=None, name="summary.json"):
    text = json.dumps(summary, sort_keys=True, default=_json_default)
    print(text)
    if out is not None:
        (Path(out) / name).write_text(text + "\n")


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"not serializable: {type(value).__name__}")


def _resolve_data_dir(cfg, explicit=None):
    return explicit or cfg.data_dir or os.environ.get("LAYERWISE_DATA", "")


def _load_data(cfg, data_dir=None):
    from .data import load_dataset

    return load_dataset(cfg.dataset, _resolve_data_dir(cfg, data_dir), cfg.max_train, cfg.max_test)


def _checkpoint_path(path):
    path = Path(path)
    return path / CHECKPOINT_NAME if path.is_dir() else path


def build_config(args):
    overrides = parse_overrides(args.set)
    direct = {
        "seed": args.seed, "k": args.k, "layers": args.layers, "epochs_per_layer": args.epochs_per_layer,
        "downsample_kind": args.downsample, "cache": args.cache, "data_dir": args.data,
    }
    for key, value in direct.items():
        if value is not None:
            overrides[key] = str(value)
    text = Path(args.config).read_text() if args.config else None
    return load_config(args.preset, text, overrides)


# -- subcommands -----------------------------------------------------------------------------------------


def cmd_train(args):
    from .data import MetricsWriter
    from .theory import check_progressive_improvement
    from .trainer import ensemble_predict, train_greedy

    cfg = build_config(args)
    out = _out_dir(args.out)
    metrics, timings = out / "metrics.jsonl", out / "timings.jsonl"
    if metrics.exists():
        if not args.force:
            raise FileExistsError(f"{out} already holds a run; pass --force to overwrite it")
        for f in (metrics, timings, out / CHECKPOINT_NAME):
            f.unlink(missing_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    train, test = _load_data(cfg)
    writer = MetricsWriter(metrics, timings)
    run_id = f"{cfg.preset}-s{cfg.seed}"
    net, results = train_greedy(train, cfg, test=test, writer=writer, checkpoint_path=out / CHECKPOINT_NAME,
                                run_id=run_id)
    ensemble = ensemble_predict(net, test.images)
    ens_acc = 100.0 * float((ensemble.argmax(axis=1) == test.labels).mean())
    progress = check_progressive_improvement(net)
    summary = {
        "command": "train",
        "run_id": run_id,
        "layers": [r.summary() for r in results],
        "ensemble_test_acc": ens_acc,
        "progressive_improvement": progress.passed,
    }
    _emit(summary, out)
    return EXIT_OK


def cmd_eval(args):
    from .trainer import ensemble_predict, evaluate

    net = load_checkpoint(_checkpoint_path(args.checkpoint))
    _, test = _load_data(net.config, args.data)
    layers = [args.layer] if args.layer is not None else list(range(net.depth))
    rows = []
    for j in layers:
        top1, top5 = evaluate(net, test.images, test.labels, j)
        rows.append({"layer": j, "top1": top1, "top5": top5})
    summary = {"command": "eval", "layers": rows}
    if net.depth == net.config.layers:
        z = ensemble_predict(net, test.images)
        summary["ensemble_top1"] = 100.0 * float((z.argmax(axis=1) == test.labels).mean())
    out = _out_dir(args.out) if args.out else None
    _emit(summary, out, "eval.json")
    return EXIT_OK


def cmd_probe(args):
    from .data import MetricsWriter
    from .probes import cnn_p_probe, linear_probe
    from .trainer import compute_cache

    ckpt = _checkpoint_path(args.checkpoint)
    net = load_checkpoint(ckpt)
    if not 0 <= args.layer < net.depth:
        raise ConfigError(f"layer {args.layer} outside 0..{net.depth - 1}")
    train, test = _load_data(net.config, args.data)
    if args.max_train:
        train = train.subset(args.max_train)
    tr = compute_cache(train.images, net, args.layer + 1)
    te = compute_cache(test.images, net, args.layer + 1)
    if args.kind == "linear":
        report = linear_probe(tr, train.labels, te, test.labels, layer=args.layer, seed=args.seed)
    else:
        report = cnn_p_probe(tr, train.labels, te, test.labels, p=args.p, width=args.width, layer=args.layer,
                             seed=args.seed, epochs=args.epochs)
    out = _out_dir(args.out) if args.out else ckpt.parent
    MetricsWriter(out / "metrics.jsonl").write(report.record())
    _emit({"command": "probe", **report.to_dict()})
    return EXIT_CHECK if report.failed else EXIT_OK


def cmd_prune(args):
    from .compression import prune_and_finetune, prune_block_input
    from .trainer import compute_cache

    net = load_checkpoint(_checkpoint_path(args.checkpoint))
    j = args.layer
    if not 0 <= j < net.depth:
        raise ConfigError(f"layer {j} outside 0..{net.depth - 1}")
    train, test = _load_data(net.config, args.data)
    cfg = net.config
    rng = np.random.default_rng(args.seed if args.seed is not None else cfg.seed)
    cache = compute_cache(train.images, net, j)
    test_cache = compute_cache(test.images, net, j)
    block, head, record = prune_and_finetune(
        net.blocks[j], net.heads[j], cache, train.labels, args.target_width, args.finetune_epochs, cfg, rng,
        test_cache=test_cache, test_labels=test.labels, layer=j,
    )
    keep = [i for i in range(record.width_before) if i not in set(record.removed)]
    net.blocks[j], net.heads[j] = block, head
    if j + 1 < net.depth:
        net.blocks[j + 1] = prune_block_input(net.blocks[j + 1], keep)
    net.history[j] = {**net.history[j], "prune": record.to_dict()}
    out = _out_dir(args.out)
    save_checkpoint(net, out / CHECKPOINT_NAME)
    _emit({"command": "prune", **record.to_dict()}, out, "prune.json")
    return EXIT_OK


def cmd_theory(args):
    from .theory import check_progressive_improvement, depth_sweep

    out = _out_dir(args.out) if args.out else None
    if args.which == "prop1":
        net = load_checkpoint(_checkpoint_path(args.checkpoint))
        report = check_progressive_improvement(net)
        for line in report.lines():
            print(line, file=sys.stderr)
        _emit({"command": "theory prop1", "passed": report.passed, "strictly_decreasing": report.strictly_decreasing,
               "layers": report.layers}, out, "prop1.json")
        return EXIT_OK if report.passed else EXIT_CHECK
    results, exponent = depth_sweep(args.J, args.eps, args.width, args.B, args.trials, args.seed, args.mode,
                                    args.operators)
    rows = []
    for J, res in results.items():
        rows.append({
            "J": J, "mean_deviation": res.mean_deviation(J), "max_deviation": float(res.deviations[:, J].max()),
            "violations": res.violations, "max_bound_ratio": res.max_ratio,
        })
        print(f"J={J}: mean {rows[-1]['mean_deviation']:.3e} max {rows[-1]['max_deviation']:.3e} "
              f"violations {res.violations}", file=sys.stderr)
    violations = sum(r["violations"] for r in rows)
    _emit({"command": "theory prop2", "eps": args.eps, "rows": rows, "violations": violations,
           "growth_exponent": exponent}, out, "prop2.json")
    return EXIT_OK if violations == 0 else EXIT_CHECK


# -- parser -------------------------------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="layerwise", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="greedy layerwise training")
    train.add_argument("--preset")
    train.add_argument("--config", help="INI config file")
    train.add_argument("--data", help="dataset directory")
    train.add_argument("--out", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--k", type=int)
    train.add_argument("--layers", type=int)
    train.add_argument("--epochs-per-layer", type=int)
    train.add_argument("--downsample", choices=("invertible", "stride", "avg", "max"))
    train.add_argument("--cache", choices=("mem", "disk"))
    train.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
    train.add_argument("--force", action="store_true", help="overwrite an existing run in --out")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="per-layer and ensemble test accuracy")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data")
    ev.add_argument("--layer", type=int)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    probe = sub.add_parser("probe", help="separability probe of a layer's representation")
    probe.add_argument("--checkpoint", required=True)
    probe.add_argument("--data")
    probe.add_argument("--layer", type=int, required=True)
    probe.add_argument("--kind", choices=("linear", "cnn"), default="linear")
    probe.add_argument("--p", type=int, choices=(1, 2), default=1)
    probe.add_argument("--width", type=int, default=256)
    probe.add_argument("--epochs", type=int, default=30)
    probe.add_argument("--max-train", type=int)
    probe.add_argument("--seed", type=int, default=0)
    probe.add_argument("--out")
    probe.set_defaults(func=cmd_probe)

    prune = sub.add_parser("prune", help="prune a trained layer and fine-tune its head")
    prune.add_argument("--checkpoint", required=True)
    prune.add_argument("--data")
    prune.add_argument("--layer", type=int, required=True)
    prune.add_argument("--target-width", type=int, required=True)
    prune.add_argument("--finetune-epochs", type=int, default=10)
    prune.add_argument("--seed", type=int)
    prune.add_argument("--out", required=True)
    prune.set_defaults(func=cmd_prune)

    theory = sub.add_parser("theory", help="progressive-improvement and error-cascade checks")
    tsub = theory.add_subparsers(dest="which", required=True)
    p1 = tsub.add_parser("prop1", help="non-increasing training risks of a trained net")
    p1.add_argument("--checkpoint", required=True)
    p1.add_argument("--out")
    p2 = tsub.add_parser("prop2", help="simulate per-layer approximation errors through a cascade")
    p2.add_argument("--J", type=int, nargs="+", default=[2, 4, 8, 16, 32])
    p2.add_argument("--eps", type=float, default=1e-3)
    p2.add_argument("--B", type=float, default=1.0)
    p2.add_argument("--width", type=int, default=16)
    p2.add_argument("--trials", type=int, default=100)
    p2.add_argument("--seed", type=int, default=0)
    p2.add_argument("--mode", choices=("random", "aligned"), default="random")
    p2.add_argument("--operators", choices=("gaussian", "orthogonal", "adversarial"), default="gaussian")
    p2.add_argument("--out")
    theory.set_defaults(func=cmd_theory)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckFailed as exc:
        log.error("check failed: %s", exc)
        return EXIT_CHECK
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        log.error("io error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
