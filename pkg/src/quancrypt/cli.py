"""Command line: ``quancrypt {train,attack,bench,keygen}``.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, attack, ckks
from .config import ConfigError, attack_config, federation_config, load_config, set_value, validate
from .data import append_metrics, downsample_images, load_mnist, write_metrics, write_pgm
from .experiment import bench_encryption, prepare_training
from .federation import run_training, worker_count
from .nn import Checkpoint, load_checkpoint, save_checkpoint

log = logging.getLogger("quancrypt")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _rates(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# (flag dest, section, key)
TRAIN_FLAGS = [
    ("mode", "federation", "mode"),
    ("rounds", "federation", "rounds"),
    ("clients", "federation", "clients"),
    ("lam", "federation", "smoothing"),
    ("range_mode", "federation", "range_mode"),
    ("headroom", "federation", "headroom"),
    ("dataset", "federation", "dataset"),
    ("data_dir", "federation", "data_dir"),
    ("model", "federation", "model"),
    ("partition", "federation", "partition"),
    ("test_size", "federation", "test_size"),
    ("bits", "quantization", "bits"),
    ("alpha", "clipping", "alpha"),
    ("lr", "training", "learning_rate"),
    ("batch_size", "training", "batch_size"),
    ("local_epochs", "training", "local_epochs"),
    ("degree", "he", "degree"),
]
ATTACK_FLAGS = [
    ("prune_rates", "attack", "prune_rates"),
    ("seeds", "attack", "seeds"),
    ("init", "attack", "init"),
    ("tv_weight", "attack", "tv_weight"),
    ("steps", "attack", "steps"),
    ("step_size", "attack", "step_size"),
]
KEYGEN_FLAGS = [("degree", "he", "degree"), ("moduli_bits", "he", "moduli_bits"), ("scale_bits", "he", "scale_bits")]
COMMON_FLAGS = [("seed", "federation", "seed")]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quancrypt", description="Quantized, pruned, CKKS-encrypted federated learning.")
    p.add_argument("--version", action="version", version=f"quancrypt {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, default_out):
        sp.add_argument("--config", type=Path, help="TOML config file")
        sp.add_argument("--out", type=Path, default=Path(default_out), help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("train", help="run federated training")
    common(t, "runs/train")
    t.add_argument("--mode", choices=["quancrypt", "plain-quant", "vanilla"])
    t.add_argument("--rounds", type=int)
    t.add_argument("--clients", type=int)
    t.add_argument("--lambda", dest="lam", type=float, help="smoothing weight")
    t.add_argument("--range-mode", choices=["shared", "per-client"])
    t.add_argument("--headroom", type=float)
    t.add_argument("--dataset", choices=["mnist", "synthetic"])
    t.add_argument("--data-dir", help="directory with MNIST IDX files")
    t.add_argument("--model", choices=["mlp", "tiny-conv"])
    t.add_argument("--partition", choices=["iid", "label-shards"])
    t.add_argument("--test-size", type=int)
    t.add_argument("--bits", type=int, choices=[8, 16, 32])
    t.add_argument("--alpha", type=float, help="clip factor")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--local-epochs", type=int)
    t.add_argument("--degree", type=int)
    t.add_argument("--full-he", action="store_true", help="ring degree 16384 with 60/40/40/40/60-bit moduli")

    a = sub.add_parser("attack", help="gradient inversion sweep over prune rates")
    common(a, "runs/attack")
    a.add_argument("--checkpoint", type=Path, help="victim checkpoint (default: the fixed tiny conv victim)")
    a.add_argument("--prune-rates", type=_rates)
    a.add_argument("--seeds", type=int, help="number of seeds per rate")
    a.add_argument("--init", choices=list(attack.INITS))
    a.add_argument("--tv-weight", type=float)
    a.add_argument("--steps", type=int)
    a.add_argument("--step-size", type=float)
    a.add_argument("--no-images", action="store_true", help="skip PGM output")

    b = sub.add_parser("bench", help="batched vs per-element encryption timings")
    common(b, "runs/bench")
    b.add_argument("--degree", type=int)
    b.add_argument("--full-he", action="store_true", help="ring degree 16384 with 60/40/40/40/60-bit moduli")
    b.add_argument("--sample", type=int, default=200, help="values timed for per-element encryption")
    b.add_argument("--updates", type=int, default=10, help="encrypted updates to aggregate")

    k = sub.add_parser("keygen", help="write a CKKS key pair")
    common(k, "keys")
    k.add_argument("--degree", type=int)
    k.add_argument("--full-he", action="store_true", help="ring degree 16384 with 60/40/40/40/60-bit moduli")
    k.add_argument("--moduli-bits", type=_ints)
    k.add_argument("--scale-bits", type=int)
    return p


def resolve_config(args, flags) -> dict:
    cfg = load_config(args.config)
    if getattr(args, "full_he", False):
        set_value(cfg, "he", "degree", ckks.FULL_DEGREE, "--full-he")
        set_value(cfg, "he", "moduli_bits", list(ckks.FULL_MODULI_BITS), "--full-he")
    for dest, section, key in flags + COMMON_FLAGS:
        value = getattr(args, dest, None)
        if value is not None:
            flag = "--lambda" if dest == "lam" else "--" + dest.replace("_", "-")
            set_value(cfg, section, key, value, flag)
    validate(cfg, "command line")
    return cfg


def write_manifest(out: Path, command: str, cfg: dict, argv, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["federation"]["seed"],
        "argv": list(argv),
        "config": cfg,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def cmd_train(args, argv) -> int:
    cfg = resolve_config(args, TRAIN_FLAGS)
    fcfg = federation_config(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    write_manifest(args.out, "train", cfg, argv)
    data, model = prepare_training(cfg["federation"])
    metrics = args.out / "metrics.csv"
    write_metrics([], metrics)
    result = run_training(
        fcfg, data, model,
        checkpoint_path=args.out / "best.qcfl",
        on_round=lambda rec: append_metrics(rec, metrics),
    )
    last = result.records[-1]
    save_checkpoint(args.out / "final.qcfl", Checkpoint(result.model, last.round, last.val_acc))
    print(f"final test_acc={last.test_acc:.4f} val_acc={last.val_acc:.4f} rounds={len(result.records)}")
    return EXIT_OK


def _attack_images(model, mnist):
    shape = tuple(model.schema.input_shape)
    if shape == (1, attack.BENCH_SIDE, attack.BENCH_SIDE):
        return attack.benchmark_images(mnist)
    if len(shape) == 3 and shape[0] == 1 and shape[1] == shape[2]:
        small = downsample_images(mnist, shape[1])
        return small.inputs.reshape((-1,) + shape), small.labels
    if len(shape) == 1 and shape[0] == mnist.inputs.shape[1]:
        return mnist.inputs, mnist.labels
    raise UsageError(f"no MNIST view matches victim input shape {shape}")


def _fmt(v) -> str:
    if v is None:
        return ""
    return "inf" if v == attack.PSNR_INF else repr(float(v))


def cmd_attack(args, argv) -> int:
    cfg = resolve_config(args, ATTACK_FLAGS)
    acfg = cfg["attack"]
    if args.checkpoint is not None:
        if not args.checkpoint.is_file():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        victim = load_checkpoint(args.checkpoint).model
    else:
        victim = attack.benchmark_victim()
    images, labels = _attack_images(victim, load_mnist())
    args.out.mkdir(parents=True, exist_ok=True)
    write_manifest(args.out, "attack", cfg, argv, {"victim": str(args.checkpoint or "benchmark")})
    base = attack_config(cfg)
    seeds = range(cfg["federation"]["seed"], cfg["federation"]["seed"] + acfg["seeds"])
    rows = attack.prune_sweep(victim, images, labels, acfg["prune_rates"], seeds, base, worker_count())
    with open(args.out / "attack.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prune_rate", "seed", "psnr", "mse", "steps_used", "error"])
        for r in rows:
            w.writerow([repr(r.prune_rate), r.seed, _fmt(r.psnr), _fmt(r.mse), r.steps_used, r.error])
    if not args.no_images and len(victim.schema.input_shape) == 3:
        for r in rows:
            side = victim.schema.input_shape[-1]
            if r.x_hat is not None:
                write_pgm(args.out / f"recon_p{r.prune_rate:g}_s{r.seed}.pgm", r.x_hat.reshape(side, side))
            if r.x_star is not None:
                write_pgm(args.out / f"truth_s{r.seed}.pgm", r.x_star.reshape(side, side))
    for rate, med in sorted(attack.median_psnr(rows).items()):
        print(f"prune_rate={rate:g} median_psnr={med:.2f}")
    failed = sum(1 for r in rows if r.error)
    if failed:
        print(f"warning: {failed} run(s) had a fully pruned gradient", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    cfg = resolve_config(args, [("degree", "he", "degree")])
    h = cfg["he"]
    args.out.mkdir(parents=True, exist_ok=True)
    write_manifest(args.out, "bench", cfg, argv, {"sample": args.sample, "updates": args.updates})
    rows = bench_encryption(
        h["degree"], tuple(h["moduli_bits"]), float(2 ** h["scale_bits"]),
        per_element_sample=args.sample, updates=args.updates, seed=cfg["federation"]["seed"],
    )
    with open(args.out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "unit", "note"])
        for r in rows:
            w.writerow([r.metric, repr(r.value), r.unit, r.note])
            print(f"{r.metric:>20} {r.value:12.4f} {r.unit} {r.note}")
    return EXIT_OK


def cmd_keygen(args, argv) -> int:
    cfg = resolve_config(args, KEYGEN_FLAGS)
    h = cfg["he"]
    ctx = ckks.create_context(h["degree"], tuple(h["moduli_bits"]), float(2 ** h["scale_bits"]))
    if ctx.insecure:
        log.warning("degree %d is below %d: fine for tests, not secure", ctx.degree, ckks.INSECURE_BELOW)
    sk, pk = ckks.keygen(ctx, cfg["federation"]["seed"])
    args.out.mkdir(parents=True, exist_ok=True)
    ckks.save(pk, args.out / "public.key")
    ckks.save(sk, args.out / "secret.key")
    write_manifest(args.out, "keygen", cfg, argv, {"primes": [str(p) for p in ctx.primes]})
    print(f"wrote {args.out / 'public.key'} and {args.out / 'secret.key'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "bench": cmd_bench, "keygen": cmd_keygen}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - reported, mapped to the runtime exit code
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
