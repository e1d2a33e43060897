"""``silt`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Config values can be overridden with ``--section.key value`` flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import re
import sys
import time
from pathlib import Path

from . import config as config_mod
from .config import ConfigError, TrainConfig
from .data import (
    DatasetError,
    ToySceneSpec,
    generate_toy_dataset,
    scan_multiillum_layout,
    scan_vidit_layout,
)
from .imaging import IMAGE_SUFFIXES, ImageIOError, check_network_size, load_image, resize, save_image
from .networks import CheckpointError, count_params, estimate_gflops, load_checkpoint, ModelBundle

log = logging.getLogger("silt")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
RUN_ROOT_ENV = "SILT_RUN_ROOT"
_OVERRIDE = re.compile(r"^--([A-Za-z_]\w*\.[A-Za-z_]\w*)(?:=(.*))?$")


class UsageError(Exception):
    pass


def split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(extra):
        m = _OVERRIDE.match(extra[i])
        if m is None:
            raise UsageError(f"unrecognized argument {extra[i]!r}")
        if m.group(2) is not None:
            out.append((m.group(1), m.group(2)))
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"override {extra[i]} needs a value")
            out.append((m.group(1), extra[i + 1]))
            i += 2
    return out


def resolve_config(path, overrides, base: TrainConfig | None = None) -> TrainConfig:
    if path is None:
        cfg = config_mod.from_dict(config_mod.apply_overrides({}, overrides), base=base)
        cfg.validate()
        return cfg
    return config_mod.load_config(path, overrides, base=base)


def layout_from(cfg: TrainConfig, root=None, split="train"):
    d = cfg.data
    root = root or d.root
    if root is None:
        raise ConfigError("data.root: no dataset root configured")
    if d.layout == "vidit":
        return scan_vidit_layout(root, d.vidit_regime, split)
    return scan_multiillum_layout(root, d.input_tags, d.style_tag, split)


def parse_resolution(text: str):
    m = re.fullmatch(r"(\d+)[xX](\d+)", text.strip())
    if m is None:
        raise UsageError(f"resolution must look like HxW, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _run_dir(args, name):
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    root = Path(args.run_root or os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{time.strftime('%Y%m%d-%H%M%S')}-{name}"


def _collect_images(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        else:
            files.append(p)
    return files


# -- commands ---------------------------------------------------------------

def cmd_make_toy_data(args, overrides):
    if overrides:
        raise UsageError("make-toy-data takes no config overrides")
    spec = ToySceneSpec(seed=args.seed, size=(args.size, args.size))
    out = Path(args.out)
    train, test = generate_toy_dataset(out, spec, args.n_train, args.n_test, args.n_dirs)
    cfg = config_mod.toy_config(image_size=(args.size, args.size))
    cfg = dataclasses.replace(cfg, data=dataclasses.replace(
        cfg.data, root=str(out / "train"), test_root=str(out / "test"),
        input_tags=list(train.input_tags), style_tag=train.style_tag))
    config_mod.save_config(cfg, out / "config.yaml")
    print(f"wrote {len(train.scenes)} train / {len(test.scenes)} test scenes to {out}")
    print(f"config: {out / 'config.yaml'}")
    return EXIT_OK


def cmd_train(args, overrides):
    cfg = resolve_config(args.config, overrides)
    layout = layout_from(cfg)
    run_dir = _run_dir(args, args.name)
    print(f"run directory: {run_dir}")

    def progress(it, rep):
        print(f"iter {it}: " + " ".join(f"{k}={v:.4f}" for k, v in rep.as_dict().items()), flush=True)

    from .training import train_loop
    result = train_loop(cfg, layout, run_dir, resume=args.resume, progress=progress if args.verbose else None)
    print(f"final checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def _load_bundle(path):
    from .training import load_model
    return load_model(path)


def cmd_infer(args, overrides):
    if overrides:
        raise UsageError("infer takes no config overrides")
    from .training import infer
    bundle = _load_bundle(args.checkpoint)
    files = _collect_images(args.inputs)
    if not files:
        raise UsageError("no input images found")
    out_dir = Path(args.out)
    ok = 0
    for f in files:
        try:
            img = load_image(f)
            save_image(infer(bundle, img), out_dir / f.name)
            ok += 1
        except (ImageIOError, ValueError) as exc:
            log.warning("skipping %s: %s", f, exc)
    print(f"relit {ok}/{len(files)} images into {out_dir}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_eval(args, overrides):
    from .evaluation import evaluate
    from .training import build_extractor_from
    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_mod.from_dict(config_mod.apply_overrides(ckpt["config"], overrides))
    root = args.data or cfg.data.test_root
    layout = layout_from(cfg, root, split="test")
    size = tuple(cfg.image_size) if args.resize else None
    report = evaluate(ckpt, layout, build_extractor_from(cfg), size=size)
    json_path, txt_path = report.write(args.out)
    print(txt_path.read_text(), end="")
    print(f"report: {json_path}")
    return EXIT_OK


def cmd_ablate(args, overrides):
    from .evaluation import GRIDS, ablation_json, ablation_table, run_ablation
    cfg = resolve_config(args.config, overrides)
    builder, columns = GRIDS[args.grid]
    grid = builder(cfg)
    train = layout_from(cfg)
    test = layout_from(cfg, cfg.data.test_root, split="test")
    run_root = _run_dir(args, f"ablate-{args.grid}")
    rows = run_ablation(grid, train, test, run_root, progress=lambda r: print(f"finished {r.name}", flush=True))
    table = ablation_table(rows, columns)
    (run_root / "ablation.txt").write_text(table + "\n")
    (run_root / "ablation.json").write_text(ablation_json(rows))
    print(table)
    return EXIT_OK if all(r.error is None for r in rows) else EXIT_RUNTIME


def cmd_decompose_dump(args, overrides):
    if overrides:
        raise UsageError("decompose-dump takes no config overrides")
    from .evaluation import dump_decomposition
    bundle = _load_bundle(args.checkpoint)
    files = _collect_images(args.inputs)
    if not files:
        raise UsageError("no input images found")
    written = dump_decomposition(bundle, files, args.out)
    print(f"wrote {len(written)} maps for {len(files)} inputs into {args.out}")
    return EXIT_OK


def cmd_sweep_resolution(args, overrides):
    if overrides:
        raise UsageError("sweep-resolution takes no config overrides")
    from .training import infer
    bundle = _load_bundle(args.checkpoint)
    img = load_image(args.image)
    h, w = img.shape[:2]
    stem = Path(args.image).stem
    out_dir = Path(args.out)
    written = 0
    for scale in args.scales:
        th, tw = int(round(h * scale)), int(round(w * scale))
        if scale <= 0 or th < 1 or tw < 1:
            log.warning("skipping degenerate scale %s", scale)
            continue
        out = infer(bundle, resize(img, th, tw))
        path = save_image(out, out_dir / f"{stem}_{tw}x{th}.png")
        print(f"{scale:g}: {path}")
        written += 1
    return EXIT_OK if written else EXIT_RUNTIME


def cmd_report_complexity(args, overrides):
    from .losses import vgg19_extractor, random_pyramid_extractor
    cfg = resolve_config(args.config, overrides)
    resolutions = [parse_resolution(r) for r in args.resolution] or [tuple(cfg.image_size)]
    for h, w in resolutions:
        try:
            check_network_size(h, w)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if cfg.extractor.kind == "vgg19":
        extractor = vgg19_extractor(pretrained=False)
    else:
        extractor = random_pyramid_extractor(tuple(cfg.extractor.widths), seed=cfg.extractor.seed)
    bundle = ModelBundle(cfg.model_config(), extractor)
    total, trainable = count_params(bundle)
    print(format_complexity(total, trainable, {(h, w): estimate_gflops(bundle, h, w) for h, w in resolutions}))
    return EXIT_OK


def format_complexity(total: int, trainable: int, gflops: dict) -> str:
    lines = [f"total_params: {total}", f"trainable_params: {trainable}"]
    lines += [f"gflops[{h}x{w}]: {g:.3f}" for (h, w), g in gflops.items()]
    return "\n".join(lines)


def parse_complexity(text: str):
    """Inverse of :func:`format_complexity`."""
    total = trainable = None
    gflops = {}
    for line in text.strip().splitlines():
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if key == "total_params":
            total = int(value)
        elif key == "trainable_params":
            trainable = int(value)
        else:
            m = re.fullmatch(r"gflops\[(\d+)x(\d+)\]", key)
            if m:
                gflops[(int(m.group(1)), int(m.group(2)))] = float(value)
    return total, trainable, gflops


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="silt", description="Self-supervised implicit lighting transfer")
    p.add_argument("-v", "--verbose", action="store_true")
    # also accepted after the subcommand; SUPPRESS keeps it from resetting the top-level flag
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    s = command("make-toy-data", help="generate the procedural multi-illumination dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-train", type=int, default=16)
    s.add_argument("--n-test", type=int, default=4)
    s.add_argument("--n-dirs", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_make_toy_data)

    def add_config(sp):
        sp.add_argument("config_pos", nargs="?", metavar="CONFIG")
        sp.add_argument("--config", dest="config_opt")

    s = command("train", help="train a model")
    add_config(s)
    s.add_argument("--name", default="train")
    s.add_argument("--run-dir")
    s.add_argument("--run-root")
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = command("infer", help="relight images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = command("eval", help="score a checkpoint on a test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="test split root (defaults to data.test_root)")
    s.add_argument("--out", required=True, help="report .json path")
    s.add_argument("--resize", action="store_true", help="resize to the training image size first")
    s.set_defaults(func=cmd_eval)

    s = command("ablate", help="train and evaluate an ablation grid")
    add_config(s)
    s.add_argument("--grid", choices=["losses", "output-similarity", "decomposition"], default="losses")
    s.add_argument("--run-dir")
    s.add_argument("--run-root")
    s.set_defaults(func=cmd_ablate)

    s = command("decompose-dump", help="write R, S and S_hat maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decompose_dump)

    s = command("sweep-resolution", help="relight one image at several scales")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("image")
    s.add_argument("--scales", type=float, nargs="+", default=[1.0, 0.5, 0.25])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_resolution)

    s = command("report-complexity", help="print parameter counts and GFLOPs")
    add_config(s)
    s.add_argument("--resolution", action="append", default=[], help="HxW, repeatable")
    s.set_defaults(func=cmd_report_complexity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "config_pos"):
        if args.config_pos and args.config_opt:
            print("error: give the config either positionally or with --config", file=sys.stderr)
            return EXIT_USAGE
        args.config = args.config_pos or args.config_opt
    try:
        overrides = split_overrides(extra)
        return args.func(args, overrides)
    except (UsageError, ConfigError, CheckpointError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
