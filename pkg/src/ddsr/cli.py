"""Command-line entry point.

Every subcommand takes ``--config``, ``--seed`` and ``--out``. Exit status
is 0 on success, 1 when inputs fail validation (bad arguments, config,
checkpoint or spec files) and 2 when the run itself fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from ddsr.config import TrainConfig, parse_kernels
from ddsr.data import load_image_dir, write_png
from ddsr.degradation import DegradationSpec, degrade

log = logging.getLogger("ddsr")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
ABLATIONS = {"no_wavelet": "use_wavelet", "no_constraints": "use_constraints",
             "no_ncrp": "use_ncrp", "no_reg": "use_reg"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")


def _ablations(p: argparse.ArgumentParser) -> None:
    for flag in ABLATIONS:
        p.add_argument("--" + flag.replace("_", "-"), action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddsr", description="Dual degradation representation super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("degrade", help="HR PNG directory + degradation -> LR PNG directory")
    _common(p)
    p.add_argument("--hr-dir", type=Path, required=True)
    p.add_argument("--spec", type=Path, help="degradation record file (key=value lines)")
    p.add_argument("--kernel", help="lambda1/lambda2/theta_deg, used when --spec is absent")
    p.add_argument("--sigma", type=float, default=0.0)

    p = sub.add_parser("train-extractor", help="stage 1: contrastive extractor training")
    _common(p)
    _ablations(p)

    p = sub.add_parser("train-sr", help="stage 2: SR training with the extractor frozen")
    _common(p)
    _ablations(p)
    p.add_argument("--extractor", type=Path, required=True)

    p = sub.add_parser("finetune", help="stage 3: joint fine-tuning")
    _common(p)
    _ablations(p)
    p.add_argument("--extractor", type=Path, required=True)
    p.add_argument("--sr", type=Path, required=True)

    p = sub.add_parser("eval-grid", help="kernel x noise benchmark with predicted embeddings")
    _common(p)
    p.add_argument("--model", required=True, help="SR or final checkpoint, or 'bicubic'")
    p.add_argument("--extractor", type=Path, help="extractor checkpoint (defaults to --model)")
    p.add_argument("--dataset-dir", type=Path)

    p = sub.add_parser("upper-bound", help="benchmark with ground-truth spec conditioning")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset-dir", type=Path)
    p.add_argument("--shuffle", action="store_true", help="condition each cell on another cell's spec")

    p = sub.add_parser("embed", help="dataset -> embedding CSV")
    _common(p)
    p.add_argument("--extractor", type=Path, required=True)
    p.add_argument("--dataset-dir", type=Path)
    p.add_argument("--per-class", type=int, default=1)

    p = sub.add_parser("separability", help="embedding CSV -> separability report")
    _common(p)
    p.add_argument("--csv", type=Path, required=True)
    return parser


def load_config(args) -> TrainConfig:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if overrides:
        merged = config.to_meta()
        merged.update(overrides)
        config = TrainConfig.from_mapping(merged)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    for flag, key in ABLATIONS.items():
        if getattr(args, flag, False):
            changes[key] = False
    return config.with_overrides(**changes) if changes else config


def _require_file(path: Path | None, what: str) -> None:
    if path is not None and not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _require_dir(path: Path | None, what: str) -> None:
    if path is not None and not Path(path).is_dir():
        raise UsageError(f"{what} not found: {path}")


# ---------------------------------------------------------------- commands
def cmd_degrade(args, config: TrainConfig):
    _require_dir(args.hr_dir, "HR directory")
    if args.spec:
        _require_file(args.spec, "spec file")
        spec = DegradationSpec.from_record(args.spec.read_text())
    elif args.kernel:
        (l1, l2, theta), = parse_kernels(args.kernel)
        spec = DegradationSpec(l1, l2, theta, args.sigma, config.scale)
    else:
        raise UsageError("degrade needs --spec or --kernel")
    stems, images = load_image_dir(args.hr_dir)

    def run():
        for i, (stem, hr) in enumerate(zip(stems, images)):
            h, w = hr.shape[:2]
            hr = hr[: h - h % spec.scale, : w - w % spec.scale]
            pair = degrade(hr, spec, config.seed + i, config.kernel_size)
            write_png(args.out / f"{stem}.png", pair.lr)
        (args.out / "spec.txt").write_text(spec.to_record())
        return f"wrote {len(stems)} LR images to {args.out}"
    return run


def cmd_train_extractor(args, config):
    from ddsr.training import run_stage1

    def run():
        res = run_stage1(config, args.out)
        return f"extractor checkpoint: {res.checkpoint}"
    return run


def cmd_train_sr(args, config):
    from ddsr.training import load_extractor, run_stage2
    _require_file(args.extractor, "extractor checkpoint")
    load_extractor(args.extractor)

    def run():
        res = run_stage2(config, args.extractor, args.out)
        return f"SR checkpoint: {res.checkpoint}"
    return run


def cmd_finetune(args, config):
    from ddsr.training import load_extractor, load_sr, run_stage3
    _require_file(args.extractor, "extractor checkpoint")
    _require_file(args.sr, "SR checkpoint")
    load_extractor(args.extractor)
    load_sr(args.sr)

    def run():
        res = run_stage3(config, args.extractor, args.sr, args.out)
        return f"final checkpoint: {res.checkpoint}"
    return run


def _emit_grid(grid, out: Path, name: str) -> str:
    out.mkdir(parents=True, exist_ok=True)
    grid.to_csv(out / f"{name}.csv")
    table = grid.to_table()
    (out / f"{name}.txt").write_text(table)
    return table


def cmd_eval_grid(args, config):
    from ddsr.evaluation import run_benchmark
    if args.model != "bicubic":
        _require_file(Path(args.model), "model checkpoint")
    _require_file(args.extractor, "extractor checkpoint")
    _require_dir(args.dataset_dir, "dataset directory")

    def run():
        grid = run_benchmark(args.model, args.extractor, config, args.dataset_dir)
        return _emit_grid(grid, args.out, "grid")
    return run


def cmd_upper_bound(args, config):
    from ddsr.evaluation import run_upper_bound
    _require_file(args.model, "model checkpoint")
    _require_dir(args.dataset_dir, "dataset directory")

    def run():
        grid = run_upper_bound(args.model, config, args.dataset_dir, shuffle=args.shuffle)
        return _emit_grid(grid, args.out, "upper_bound_shuffled" if args.shuffle else "upper_bound")
    return run


def cmd_embed(args, config):
    from ddsr.evaluation import embed_dataset, eval_images, write_embedding_csv
    from ddsr.training import load_extractor
    _require_file(args.extractor, "extractor checkpoint")
    _require_dir(args.dataset_dir, "dataset directory")
    if args.per_class < 1:
        raise UsageError("--per-class must be at least 1")
    state, _ = load_extractor(args.extractor)
    kernels = config.toy_kernel_list or config.grid_kernel_list
    noise = config.toy_noise_list or config.grid_noise_list

    def run():
        _, images = eval_images(config, args.dataset_dir)
        rows = embed_dataset(state.online, images, kernels, noise, config.scale, config.seed,
                             args.per_class, config.kernel_size)
        path = write_embedding_csv(args.out / "embeddings.csv", rows)
        return f"wrote {len(rows)} embeddings to {path}"
    return run


def cmd_separability(args, config):
    from ddsr.evaluation import read_embedding_csv, separability_score
    _require_file(args.csv, "embedding CSV")
    rows = read_embedding_csv(args.csv)
    reports = separability_score(rows)

    def run():
        text = "".join(r.to_text() + "\n" for r in reports.values())
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "separability.txt").write_text(text)
        return text.rstrip()
    return run


COMMANDS = {
    "degrade": cmd_degrade,
    "train-extractor": cmd_train_extractor,
    "train-sr": cmd_train_sr,
    "finetune": cmd_finetune,
    "eval-grid": cmd_eval_grid,
    "upper-bound": cmd_upper_bound,
    "embed": cmd_embed,
    "separability": cmd_separability,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        run = COMMANDS[args.command](args, config)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        # ConfigError, CheckpointError and malformed spec records are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        message = run()
        log.debug("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if message:
        print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
