"""Command-line entry point: synth, ingest, train, translate, eval.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import figures
from .config import (
    ConfigError,
    RunConfig,
    format_run_config,
    load_run_config,
    write_train_config,
)
from .evaluation import composite, evaluate, select_checkpoint, translate, write_report
from .ingest import (
    RGridError,
    dataset_range,
    list_images,
    read_png,
    read_rgrid,
    to_grayscale,
    write_png,
)
from .model import TrainingDiverged
from .training import (
    CheckpointError,
    apply_checkpoint,
    build_from_config,
    infer_config,
    read_checkpoint,
    train,
)
from .wedge import inject_strip_noise, sample_spec, synthesize

log = logging.getLogger("rescycle")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _crop(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None


def _add_common(p):
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--seed", type=int, help="master random seed (u64)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _add_train_overrides(p):
    g = p.add_argument_group("training overrides (beat the config file)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float, dest="learning_rate", help="learning rate")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--crop", type=_crop, help="random crop size as WxH, e.g. 400x100")
    g.add_argument("--checkpoint-every", type=int, help="checkpoint period in epochs")
    g.add_argument("--res-blocks", type=int, dest="n_res_blocks", help="residual blocks per generator")
    g.add_argument("--base-filters", type=int)
    g.add_argument("--max-steps", type=int, help="stop after this many iterations (0 = no cap)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rescycle", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate clean wedge and stripe-noised corpora")
    _add_common(p)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--n-clean", type=int, default=16)
    p.add_argument("--n-noisy", type=int, default=16)

    p = sub.add_parser("ingest", help="convert RG1 radar grids to grayscale PNGs")
    _add_common(p)
    p.add_argument("out_dir", type=Path)
    p.add_argument("rgrids", nargs="*", type=Path)
    p.add_argument("--mode", choices=("linear", "log"), help="amplitude scaling before the 0-255 map")

    p = sub.add_parser("train", help="train the CycleGAN on two image directories")
    _add_common(p)
    p.add_argument("clean_dir", type=Path)
    p.add_argument("noisy_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    _add_train_overrides(p)

    p = sub.add_parser("translate", help="translate images with a checkpoint")
    _add_common(p)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("images", nargs="*", type=Path)
    p.add_argument("--direction", choices=("to_clean", "to_noisy"), default="to_clean")
    p.add_argument("--res-blocks", type=int, dest="n_res_blocks")
    p.add_argument("--base-filters", type=int)

    p = sub.add_parser("eval", help="full-cycle MSE/PSNR report for noisy images")
    _add_common(p)
    p.add_argument("checkpoint", type=Path, help="checkpoint file, or a directory of *.ckpt files")
    p.add_argument("noisy_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--enforce-band", action="store_true",
                   help="exit nonzero if any image's MSE falls outside (0.01, 0.1)")
    p.add_argument("--res-blocks", type=int, dest="n_res_blocks")
    p.add_argument("--base-filters", type=int)
    return parser


def _overrides(args) -> dict:
    out = {"seed": getattr(args, "seed", None)}
    for key in ("epochs", "learning_rate", "batch_size", "checkpoint_every", "n_res_blocks",
                "base_filters", "max_steps", "mode"):
        out[key] = getattr(args, key, None)
    crop = getattr(args, "crop", None)
    if crop is not None:
        out["crop_w"], out["crop_h"] = crop
    return out


def _mkdir(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from None


# subcommands -------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, n_clean: int, n_noisy: int, out_dir: Path) -> list[str]:
    if n_clean < 0 or n_noisy < 0:
        raise UsageError("--n-clean and --n-noisy must be >= 0")
    _mkdir(out_dir)
    manifest = []
    thumbs = []
    for k, (domain, n) in enumerate((("clean", n_clean), ("noisy", n_noisy))):
        if n:
            _mkdir(out_dir / domain)
        for i in range(n):
            seed = int(np.random.SeedSequence([cfg.seed, k, i]).generate_state(1)[0])
            rng = np.random.default_rng(seed)
            img = synthesize(sample_spec(cfg.ranges, rng))
            if domain == "noisy":
                for spec in cfg.noise.sample(rng):
                    img = inject_strip_noise(img, spec)
            name = f"{domain}/{domain}_{i:04d}.png"
            try:
                write_png(img, out_dir / name)
            except OSError as exc:
                raise DataError(f"cannot write {out_dir / name}: {exc}") from None
            manifest.append(f"{name}\t{domain}\t{seed}")
            if len(thumbs) < 8 and (domain == "clean" or i < 4):
                thumbs.append(img)
    (out_dir / "manifest.tsv").write_text("".join(line + "\n" for line in manifest))
    if thumbs:
        figures.plot_corpus(thumbs, out_dir / "corpus.png", title="synthetic corpus sample")
    log.info("wrote %d clean and %d noisy images to %s", n_clean, n_noisy, out_dir)
    return manifest


def cmd_ingest(cfg: RunConfig, rgrid_paths, out_dir: Path) -> int:
    """Returns the number of files that failed."""
    if not rgrid_paths:
        return 0
    _mkdir(out_dir)
    opts = cfg.ingest
    grids, failures = {}, []
    for path in rgrid_paths:
        try:
            grids[path] = read_rgrid(path)
        except (RGridError, OSError) as exc:
            failures.append(f"{path}: {exc}")
    vmin = vmax = None
    try:
        if opts.scaling == "dataset" and grids:
            vmin, vmax = dataset_range(grids.values(), opts.mode, opts.offset)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    for path, grid in grids.items():
        try:
            img = to_grayscale(grid, opts.mode, opts.offset, vmin, vmax)
            write_png(img, out_dir / f"{path.stem}.png")
        except (ValueError, OSError) as exc:
            failures.append(f"{path}: {exc}")
    for line in failures:
        print(line, file=sys.stderr)
    return len(failures)


def _load_dir(directory: Path):
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    paths = list_images(directory)
    try:
        return [(p.stem, read_png(p)) for p in paths]
    except OSError as exc:
        raise DataError(f"cannot read image: {exc}") from None


def cmd_train(cfg: RunConfig, clean_dir: Path, noisy_dir: Path, out_dir: Path, resume=None):
    clean = [img for _, img in _load_dir(clean_dir)]
    noisy = [img for _, img in _load_dir(noisy_dir)]
    _mkdir(out_dir)
    log.info("effective configuration:\n%s", format_run_config(cfg).rstrip())
    try:
        result = train(cfg.train, clean, noisy, out_dir, resume=resume, write_config=write_train_config)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    except TrainingDiverged:
        raise
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if result.log.rows:
        figures.plot_losses(result.log, out_dir / "losses.png")
    return result


def _model_for(checkpoint: Path, cfg: RunConfig, explicit: dict):
    """Build a model matching the checkpoint, honoring explicit architecture settings."""
    try:
        ck = read_checkpoint(checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {checkpoint}: {exc}") from None
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    sidecar = checkpoint.parent.parent / "train_config.txt"
    if explicit:
        tcfg = cfg.train
    elif sidecar.exists():
        tcfg = load_run_config(sidecar).train
    else:
        tcfg = infer_config(ck.tensors, cfg.train)
    model = build_from_config(tcfg)
    try:
        apply_checkpoint(ck, model)
    except CheckpointError as exc:
        raise DataError(f"checkpoint {checkpoint} does not match the configured architecture "
                        f"(base_filters={tcfg.base_filters}, n_res_blocks={tcfg.n_res_blocks}, "
                        f"norm_kind={tcfg.norm_kind}): {exc}") from None
    return model


def cmd_translate(cfg: RunConfig, checkpoint: Path, images, direction: str, out_dir: Path, explicit=None):
    if not images:
        return []
    model = _model_for(checkpoint, cfg, explicit or {})
    model.eval()
    gen = model.F if direction == "to_clean" else model.G
    _mkdir(out_dir)
    written, panels = [], []
    for path in images:
        try:
            img = read_png(path)
        except OSError as exc:
            raise DataError(f"cannot read image {path}: {exc}") from None
        out = translate(gen, img)
        target = out_dir / f"{path.stem}_{direction}.png"
        write_png(out, target)
        write_png(composite(img, out), out_dir / f"{path.stem}_composite.png")
        written.append(target)
        if len(panels) < 8:
            panels.append((path.stem, [img, out]))
    figures.plot_translations(panels, out_dir / "translations.png", titles=("original", direction))
    return written


def _eval_one(model, corpus, out_dir: Path, composites=True):
    panels = []
    comp_dir = out_dir / "composites"

    def on_image(record, image, res):
        if composites:
            _mkdir(comp_dir)
            write_png(composite(image, res.clean_translation), comp_dir / f"{record}_composite.png")
        if len(panels) < 8:
            panels.append((record, [image, res.clean_translation, res.reconstruction]))

    report = evaluate(model, corpus, on_image)
    write_report(report, out_dir)
    figures.plot_metrics(report, out_dir / "metrics.png")
    figures.plot_translations(panels, out_dir / "translations.png")
    return report


def cmd_eval(cfg: RunConfig, checkpoint: Path, noisy_dir: Path, out_dir: Path, explicit=None):
    corpus = _load_dir(noisy_dir)
    if not corpus:
        raise DataError(f"no PNG images in {noisy_dir}")
    _mkdir(out_dir)
    if checkpoint.is_dir():
        ckpts = sorted(checkpoint.glob("*.ckpt"))
        if not ckpts:
            raise DataError(f"no .ckpt files in {checkpoint}")
        reports = {}
        for ck in ckpts:
            reports[ck.stem] = _eval_one(_model_for(ck, cfg, explicit or {}), corpus, out_dir / ck.stem,
                                         composites=False)
        best, in_band = select_checkpoint(reports)
        lines = [f"{k}\t{r.average_mse!r}\t{r.average_psnr!r}" for k, r in reports.items()]
        note = "" if in_band else " (no checkpoint inside the band; lowest MSE chosen)"
        (out_dir / "selection.txt").write_text(
            "checkpoint\tavg_mse\tavg_psnr\n" + "\n".join(lines) + f"\nselected\t{best}{note}\n")
        report = _eval_one(_model_for(checkpoint / f"{best}.ckpt", cfg, explicit or {}), corpus, out_dir)
    else:
        report = _eval_one(_model_for(checkpoint, cfg, explicit or {}), corpus, out_dir)
    sys.stdout.write(report.to_text())
    return report


# entry point -------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"rescycle: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    explicit = {k: getattr(args, k) for k in ("n_res_blocks", "base_filters") if getattr(args, k, None)}
    if args.config is not None:
        explicit["config"] = True
    try:
        if args.command == "synth":
            cmd_synth(cfg, args.n_clean, args.n_noisy, args.out_dir)
        elif args.command == "ingest":
            return EXIT_DATA if cmd_ingest(cfg, args.rgrids, args.out_dir) else EXIT_OK
        elif args.command == "train":
            cmd_train(cfg, args.clean_dir, args.noisy_dir, args.out_dir, args.resume)
        elif args.command == "translate":
            cmd_translate(cfg, args.checkpoint, args.images, args.direction, args.out_dir, explicit)
        elif args.command == "eval":
            report = cmd_eval(cfg, args.checkpoint, args.noisy_dir, args.out_dir, explicit)
            if args.enforce_band and not report.all_within_band:
                print("rescycle: some images fall outside the (0.01, 0.1) MSE band", file=sys.stderr)
                return EXIT_DATA
    except UsageError as exc:
        print(f"rescycle: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"rescycle: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"rescycle: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
