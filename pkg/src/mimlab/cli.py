"""Command-line entry point: ``mimlab <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import warnings

import numpy as np

from . import config as config_mod
from .config import ConfigError, SweepConfig, TrainConfig
from .evaluation import finetune, linear_probe, results_csv, train_test_split
from .imaging import Image, PPMError, center_view, load_ppm, synth_image, write_ppm
from .masking import STRATEGIES, MaskConfig, MaskError, MaskGrid, generate, mask_from_rgb, mask_sweep, sweep_csv
from .model import reconstruct_image
from .numerics.tape import NonFiniteError
from .targets import decode_predictions
from .trainer import (
    CheckpointError,
    Pretrainer,
    build_model,
    build_target_spec,
    load_checkpoint,
    load_dataset,
    state_from_checkpoint,
)

log = logging.getLogger("mimlab")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
RANDOM_INIT = "random-init"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _threads() -> int:
    raw = os.environ.get("MIMLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MIMLAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("MIMLAB_THREADS must be >= 1")
    return n


def _write_text(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
        return
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _train_config(args, required: bool = True) -> TrainConfig | None:
    if args.config is None:
        if required:
            raise UsageError("--config is required")
        return None
    cfg = config_mod.load(args.config, TrainConfig, partial=args.partial)
    return cfg if args.seed is None else dataclasses.replace(cfg, seed=args.seed)


# -- commands ------------------------------------------------------------------

def cmd_init_config(args) -> int:
    cls = SweepConfig if args.kind == "sweep" else TrainConfig
    _write_text(args.out, config_mod.render(cls()))
    return EXIT_OK


def cmd_mask_sweep(args) -> int:
    cfg = config_mod.load(args.config, SweepConfig, partial=True) if args.config else SweepConfig()
    unknown = [s for s in cfg.strategies if s not in STRATEGIES]
    if unknown:
        raise UsageError(f"unknown strategies {unknown}; choose from {STRATEGIES}")
    start = args.seed or 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = mask_sweep(cfg.strategies, cfg.patch_sizes, cfg.ratios, range(start, start + cfg.num_seeds),
                          cfg.image_size, skip_invalid=True, workers=_threads())
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _write_text(args.out, sweep_csv(rows))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _train_config(args)
    dataset = load_dataset(cfg.data, root=os.path.dirname(args.config) or ".")
    if args.resume:
        tr = Pretrainer.from_checkpoint(load_checkpoint(args.resume, cfg, force=args.force), dataset)
    else:
        tr = Pretrainer(cfg, dataset)
    os.makedirs(args.out, exist_ok=True)
    tr.run(args.out)
    loss = tr.metrics[-1][2] if tr.metrics else float("nan")
    print(f"pretrained {tr.step_count} steps, final loss {loss:.6f}; wrote {args.out}")
    return EXIT_OK


def _eval_setup(args):
    """Config, encoder and train/test split for probe and fine-tune commands."""
    cfg = _train_config(args, required=args.ckpt == RANDOM_INIT)
    ck = None if args.ckpt == RANDOM_INIT else load_checkpoint(args.ckpt)
    cfg = cfg or ck.config
    root = os.path.dirname(args.config) if args.config else ""
    dataset = load_dataset(cfg.data, root=root or ".")
    if ck is None:
        state = build_model(cfg, build_target_spec(cfg, dataset))
    else:
        state, _ = state_from_checkpoint(ck)
    seed = cfg.seed if args.seed is None else args.seed
    train, test = train_test_split(dataset, cfg.eval.test_fraction, seed)
    return cfg, state, train, test, seed


def cmd_probe(args) -> int:
    cfg, state, train, test, seed = _eval_setup(args)
    r = linear_probe(state, train, test, cfg.eval, seed)
    rows = [("probe", seed, layer, acc) for layer, acc in enumerate(r.per_layer)]
    rows.append(("probe-best", seed, r.feature_source, r.accuracy))
    _write_text(args.out, results_csv(rows))
    print(f"probe accuracy {r.accuracy:.4f} (layer {r.feature_source})", file=sys.stderr)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, state, train, test, seed = _eval_setup(args)
    r = finetune(state, train, test, cfg.eval, seed)
    _write_text(args.out, results_csv([("finetune", seed, state.config.depth, r.accuracy)]))
    print(f"fine-tune accuracy {r.accuracy:.4f}", file=sys.stderr)
    return EXIT_OK


def _load_image(spec: str) -> Image:
    if spec.startswith("synth:"):
        _, seed, index, size, classes = spec.split(":")
        return synth_image(int(seed), int(index), int(size), int(classes))[0]
    return load_ppm(spec)


def _parse_mask(spec: str, res: int, token_patch: int, seed: int) -> MaskGrid:
    """``strategy:ratio:patch`` or a PPM path (non-black = masked); returns a token-level grid."""
    head = spec.split(":", 1)[0]
    if head in STRATEGIES:
        parts = spec.split(":")
        if len(parts) != 3:
            raise UsageError(f"mask spec must look like 'random:0.6:32', got {spec!r}")
        try:
            mcfg = MaskConfig(parts[0], int(parts[2]), float(parts[1]))
        except ValueError as e:
            raise UsageError(f"bad mask spec {spec!r}: {e}") from None
        if mcfg.masked_patch_size % token_patch:
            raise UsageError(f"mask patch {mcfg.masked_patch_size} is not a multiple of token patch {token_patch}")
        m = generate(mcfg, res, np.random.default_rng([seed, 9]))
        split = mcfg.masked_patch_size // token_patch
        return m.upsample(split) if split > 1 else m
    img = load_ppm(spec)
    if img.height != res or img.width != res:
        raise UsageError(f"mask image is {img.height}x{img.width}, expected {res}x{res}")
    return mask_from_rgb(img.rgb, token_patch)


def cmd_visualize(args) -> int:
    ck = load_checkpoint(args.ckpt)
    state, spec = state_from_checkpoint(ck)
    if not spec.is_regression and not args.decode:
        raise UsageError(f"checkpoint predicts {spec.kind!r} classes; pass --decode to map them to colors")
    enc = state.config
    res = enc.input_resolution
    seed = ck.config.seed if args.seed is None else args.seed
    mask = _parse_mask(args.mask, res, enc.patch_size, seed)
    if mask.shape != (enc.grid, enc.grid):
        raise UsageError(f"mask grid {mask.shape} does not match token grid {enc.grid}x{enc.grid}")
    mean = tuple(ck.buffers.get("data.mean", (0.0, 0.0, 0.0)))
    std = tuple(ck.buffers.get("data.std", (1.0, 1.0, 1.0)))
    view = center_view(_load_image(args.image), res, mean, std)
    _, pred = state.forward(view.normalized[None], [mask])
    values = decode_predictions(pred.data[0], spec)
    recovered = reconstruct_image(values, mask, view.crop)
    masked_input = np.where(mask.pixels()[None], 0.0, view.crop.rgb)
    write_ppm(args.out, np.concatenate([view.crop.rgb, masked_input, recovered.rgb], axis=2))
    print(f"wrote {args.out} ({mask.count} of {mask.grid.size} tokens masked)", file=sys.stderr)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mimlab", description="Masked image modeling experiments at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="experiment file (key = value lines)")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                        help="bit-reproducible execution (always on; accepted for compatibility)")
        sp.add_argument("--partial", action="store_true", help="fill missing config keys with defaults")

    sp = sub.add_parser("init-config", help="write a default experiment file")
    sp.add_argument("--kind", choices=("train", "sweep"), default="train")
    sp.add_argument("--out", default="-")
    sp.set_defaults(fn=cmd_init_config)

    sp = sub.add_parser("mask-sweep", help="AvgDist over strategies x patch sizes x ratios")
    common(sp, "CSV path ('-' for stdout)")
    sp.set_defaults(fn=cmd_mask_sweep)

    sp = sub.add_parser("pretrain", help="masked image modeling pretraining")
    common(sp, "output directory for checkpoints and metrics.csv")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--force", action="store_true", help="resume even if the config digest differs")
    sp.set_defaults(fn=cmd_pretrain)

    for name, fn, what in (("probe", cmd_probe, "linear probe"), ("finetune", cmd_finetune, "fine-tune")):
        sp = sub.add_parser(name, help=f"{what} a checkpoint on the labeled corpus")
        common(sp, "results CSV path")
        sp.add_argument("--ckpt", required=True, help=f"checkpoint path or '{RANDOM_INIT}'")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("visualize", help="original | masked input | recovery triptych")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True, help="PPM path or synth:<seed>:<index>:<size>:<classes>")
    sp.add_argument("--mask", required=True, help="strategy:ratio:patch (e.g. random:0.6:32) or a mask PPM")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--decode", action="store_true", help="decode class predictions to colors")
    sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    sp.set_defaults(fn=cmd_visualize)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, PPMError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (MaskError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
