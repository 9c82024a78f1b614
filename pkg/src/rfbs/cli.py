"""Command-line front end: generate / train / eval / bench / analyze / infer /
gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure. Flags may also come from a `key = value` config file (# comments);
explicit command-line flags win, unknown keys are rejected, and the effective
configuration is echoed as `# key = value` lines before any other output.
"""

import os
import sys

# Pin BLAS pools to one thread so results are bit-identical regardless of the
# machine's core count; must happen before numpy is first imported. The
# RFBS_THREADS worker count parallelizes only across independent images.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
from concurrent.futures import ThreadPoolExecutor

from . import analysis, bench, data, gradsuite, metrics, model, training
from .errors import FormatError, NumericsError, ShapeError, UnsupportedConfigError
from .tensor import write_rft1

KNOWN_ARCHS = ("rfbsnet-desk",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_threads():
    raw = os.environ.get("RFBS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"RFBS_THREADS must be an integer, got {raw!r}") from None


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise UsageError(f"expected a boolean, got {raw!r}")


# name -> (type, default, help); default None marks a required value,
# _THREADS defers to the RFBS_THREADS environment variable.
_THREADS = object()

_COMMANDS = {
    "generate": {
        "out": (str, None, "output dataset directory"),
        "count": (int, 250, "number of phantoms"),
        "size": (int, 256, "image size (even, >= 64)"),
        "seed": (int, 0, "generation/split seed"),
        "train-fraction": (float, 0.8, "train split fraction"),
        "threads": (int, _THREADS, "worker count"),
    },
    "train": {
        "data": (str, None, "dataset directory"),
        "out": (str, None, "checkpoint output path"),
        "epochs": (int, 15, "training epochs"),
        "batch": (int, 8, "batch size"),
        "lr": (float, 1e-4, "initial learning rate"),
        "seed": (int, 0, "init/shuffle seed"),
        "log": (str, "", "train log path (default: <out>.log)"),
        "threads": (int, _THREADS, "worker count"),
    },
    "eval": {
        "data": (str, None, "dataset directory"),
        "ckpt": (str, None, "checkpoint path"),
        "split": (str, "val", "split to evaluate: train|val|all"),
        "tsv": (str, "", "also write the records to this file"),
        "threads": (int, _THREADS, "worker count"),
    },
    "bench": {
        "ckpt": (str, None, "checkpoint path"),
        "iters": (int, 100, "timed iterations"),
        "warmup": (int, 10, "untimed warmup iterations"),
        "size": (int, 256, "input H = W"),
        "tsv": (str, "", "also write per-iteration rows to this file"),
        "threads": (int, _THREADS, "worker count"),
    },
    "analyze": {
        "arch": (str, "rfbsnet-desk", "architecture id"),
        "size": (int, 256, "input H = W"),
        "tsv": (str, "", "also write the rows to this file"),
        "threads": (int, _THREADS, "worker count"),
    },
    "infer": {
        "ckpt": (str, None, "checkpoint path"),
        "in": (str, None, "input PGM image"),
        "out": (str, None, "output mask PGM"),
        "prob-out": (str, "", "optional RFT1 probability map output"),
        "threads": (int, _THREADS, "worker count"),
    },
    "gradcheck": {
        "scale": (str, "small", "coordinate sampling: small|full"),
        "tol": (float, 1e-5, "whole-network tolerance"),
        "self-test-corrupt": (_parse_bool, False, "inject a broken gradient "
                              "(negative control; must fail)"),
        "threads": (int, _THREADS, "worker count"),
    },
}


def _build_parser():
    parser = _Parser(prog="rfbs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in _COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=argparse.SUPPRESS,
                       help="key = value config file")
        for name, (typ, default, helptext) in options.items():
            if typ is _parse_bool:
                p.add_argument(f"--{name}", nargs="?", const="true",
                               default=argparse.SUPPRESS, help=helptext)
            else:
                p.add_argument(f"--{name}", type=str, default=argparse.SUPPRESS,
                               help=helptext)
    return parser


def _read_config_file(path, options):
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise FormatError(f"cannot read config file {path}: {e}") from e
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected `key = value`")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in options:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def _resolve(args, command):
    """defaults <- config file <- explicit flags, with type conversion."""
    options = _COMMANDS[command]
    explicit = {k.replace("_", "-"): v for k, v in vars(args).items()
                if k not in ("command", "config")}
    raw = {}
    if hasattr(args, "config"):
        raw.update(_read_config_file(args.config, options))
    raw.update(explicit)
    cfg = {}
    for name, (typ, default, _help) in options.items():
        if name in raw:
            try:
                cfg[name] = typ(raw[name])
            except (ValueError, UsageError) as e:
                raise UsageError(f"--{name}: {e}") from None
        elif default is None:
            raise UsageError(f"missing required option --{name}")
        elif default is _THREADS:
            cfg[name] = _default_threads()
        else:
            cfg[name] = default
    return cfg


def _echo_config(command, cfg):
    print(f"# command = {command}")
    for key in sorted(cfg):
        print(f"# {key} = {cfg[key]}")


def _load_model(ckpt_path):
    spec = model.build_rfbsnet_desk()
    _, params = model.load_checkpoint(ckpt_path, expected_spec=spec)
    return spec, params


def _write_or_print(path, text):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text, end="")


def cmd_generate(cfg):
    if cfg["size"] % 2 or cfg["size"] < 64:
        raise UsageError(f"--size must be even and >= 64, got {cfg['size']}")
    if cfg["count"] < 2:
        raise UsageError("--count must be >= 2 so both splits are populated")
    dataset = data.generate_phantoms(cfg["count"], cfg["size"], cfg["seed"])
    dataset = data.split(dataset, cfg["train-fraction"], cfg["seed"])
    data.save_dataset(cfg["out"], dataset)
    n_train = dataset.splits.count("train")
    print(f"wrote {len(dataset)} samples ({n_train} train, "
          f"{len(dataset) - n_train} val) to {cfg['out']}")
    return 0


def cmd_train(cfg):
    dataset = data.load_dataset(cfg["data"])
    spec = model.build_rfbsnet_desk()
    train_cfg = training.TrainConfig(
        batch_size=cfg["batch"],
        initial_lr=cfg["lr"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
    )

    def progress(epoch, train_loss, val_dice, seconds):
        print(f"epoch {epoch}: train_loss {train_loss:.4f} "
              f"val_dice {val_dice:.4f} ({seconds:.1f}s)")

    params, log = training.train(spec, dataset, train_cfg, progress=progress)
    model.save_checkpoint(cfg["out"], spec, params)
    log_path = cfg["log"] or cfg["out"] + ".log"
    log.write(log_path)
    best = max(e[2] for e in log.epochs)
    print(f"best val dice {best:.4f}; checkpoint {cfg['out']}, log {log_path}")
    return 0


def _eval_one(spec, params, sample):
    prob, _ = model.forward(spec, params, sample.image[None, :, :, :])
    pred = metrics.argmax_mask(prob, foreground_class=1)[0]
    return metrics.evaluate_image(sample.id, pred, sample.mask)


def cmd_eval(cfg):
    if cfg["split"] not in ("train", "val", "all"):
        raise UsageError(f"--split must be train, val, or all, got {cfg['split']!r}")
    dataset = data.load_dataset(cfg["data"])
    part = dataset.part(cfg["split"])
    if not part:
        raise FormatError(f"split {cfg['split']!r} has no samples")
    spec, params = _load_model(cfg["ckpt"])
    if cfg["threads"] > 1:
        with ThreadPoolExecutor(max_workers=cfg["threads"]) as pool:
            results = list(pool.map(lambda s: _eval_one(spec, params, s), part))
    else:
        results = [_eval_one(spec, params, s) for s in part]
    report = metrics.aggregate(results)
    records = metrics.format_records(report)
    print(records, end="")
    if cfg["tsv"]:
        _write_or_print(cfg["tsv"], records)
    return 0


def cmd_bench(cfg):
    spec, params = _load_model(cfg["ckpt"])
    if cfg["size"] % spec.total_downsampling_factor:
        raise UsageError(
            f"--size must be a multiple of {spec.total_downsampling_factor}"
        )
    report = bench.bench_forward(
        spec, params, (1, spec.in_channels, cfg["size"], cfg["size"]),
        iters=cfg["iters"], warmup=cfg["warmup"], workers=cfg["threads"],
    )
    print(bench.format_text(report), end="")
    if cfg["tsv"]:
        _write_or_print(cfg["tsv"], bench.format_tsv(report))
    return 0


def cmd_analyze(cfg):
    if cfg["arch"] not in KNOWN_ARCHS:
        raise UsageError(
            f"unknown architecture {cfg['arch']!r}; known: {', '.join(KNOWN_ARCHS)}"
        )
    spec = model.build_rfbsnet_desk()
    report = analysis.count_flops(spec, (1, spec.in_channels, cfg["size"], cfg["size"]))
    print(analysis.format_table(report), end="")
    if cfg["tsv"]:
        _write_or_print(cfg["tsv"], analysis.format_tsv(report))
    return 0


def cmd_infer(cfg):
    spec, params = _load_model(cfg["ckpt"])
    image = data.read_pgm(cfg["in"])
    m = spec.total_downsampling_factor
    if image.shape[0] % m or image.shape[1] % m:
        raise FormatError(
            f"input is {image.shape[1]}x{image.shape[0]}; H and W must be "
            f"multiples of {m}"
        )
    prob, _ = model.forward(spec, params, image[None, None, :, :])
    mask = metrics.argmax_mask(prob, foreground_class=1)[0]
    data.write_pgm(cfg["out"], mask)
    if cfg["prob-out"]:
        write_rft1(cfg["prob-out"], prob)
    print(f"wrote mask {cfg['out']}")
    return 0


def cmd_gradcheck(cfg):
    if cfg["scale"] not in ("small", "full"):
        raise UsageError(f"--scale must be small or full, got {cfg['scale']!r}")
    reports = gradsuite.run_suite(
        scale=cfg["scale"], net_tol=cfg["tol"], corrupt=cfg["self-test-corrupt"]
    )
    failed = 0
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.op}: max rel error {r.max_rel_error:.3e} "
              f"(tol {r.tolerance:.1e}, {r.coords_checked} coords)")
        failed += 0 if r.passed else 1
    if failed:
        raise NumericsError(f"{failed} gradient check(s) failed")
    return 0


_DISPATCH = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        cfg = _resolve(args, args.command)
        _echo_config(args.command, cfg)
        return _DISPATCH[args.command](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (FormatError, ShapeError, UnsupportedConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
