"""Command-line entry point: generate / train / predict / evaluate.

Exit codes: 0 success, 1 fatal error, 2 partial failure (some samples skipped
during generation). Every subcommand is reproducible under --seed. The
PROFACT_CACHE environment variable provides the default dataset output
directory for `generate` when --out is omitted.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import augment, metrics
from .checkpoint import load_model
from .data import load_image, load_mask, save_mask, save_prob_map
from .errors import ProfactError
from .synth import GeneratorConfig, generate_dataset
from .train import StageConfig, build_model, train_stage, two_stage_train

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text()
    if path.endswith(".toml"):
        try:
            import tomllib as toml_reader  # Python >= 3.11
        except ImportError:
            import tomli as toml_reader
        return toml_reader.loads(text)
    return json.loads(text)


def _load_stage_config(path: str) -> StageConfig:
    return StageConfig.from_dict(_load_config_file(path))


def cmd_generate(args) -> int:
    out = args.out or os.environ.get("PROFACT_CACHE")
    if not out:
        print("error: --out not given and PROFACT_CACHE is not set", file=sys.stderr)
        return 1
    cfg = GeneratorConfig(
        trimap_radius=args.trimap_radius,
        radius_reference_diag=args.radius_reference_diag,
        radius_max=args.radius_max,
        manipulation_prob=args.p_op,
        harmonize_prob=args.p_harmonize,
        min_area=args.min_area,
        max_area=args.max_area,
        offset_tries=args.offset_tries,
        max_rescales=args.max_rescales,
        rescale_factor=args.rescale_factor,
        matte_dir=args.matte_dir,
        max_attempts=args.max_attempts,
    )
    result = generate_dataset(
        args.manifest, out, args.n, mode_mix=args.mode_mix, seed=args.seed,
        cfg=cfg, images_root=args.images_root, workers=args.workers,
    )
    print(result.index_path)
    if result.skipped:
        print(f"warning: skipped {len(result.skipped)} sample(s): {result.skipped}",
              file=sys.stderr)
        return 2
    return 0


def cmd_train(args) -> int:
    cfg1 = _load_stage_config(args.stage1)
    if args.seed is not None:
        cfg1.seed = args.seed
    if args.stage2:
        cfg2 = _load_stage_config(args.stage2)
        if args.seed is not None:
            cfg2.seed = args.seed
        _, report2 = two_stage_train(cfg1, cfg2)
        print(report2.best_checkpoint)
    else:
        report = train_stage(build_model(cfg1), cfg1)
        print(report.best_checkpoint)
    return 0


def _iter_images(path: Path):
    if path.is_dir():
        for child in sorted(path.iterdir()):
            if child.suffix.lower() in IMAGE_SUFFIXES:
                yield child
            elif child.is_file():
                print(f"warning: skipping non-image file {child}", file=sys.stderr)
    else:
        yield path


def cmd_predict(args) -> int:
    model, _ = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_path in _iter_images(Path(args.input)):
        image = load_image(image_path)
        coarse, refined = model.predict(image)
        stem = image_path.stem
        save_prob_map(out / f"{stem}_coarse.png", coarse)
        save_prob_map(out / f"{stem}_refined.png", refined)
        save_mask(out / f"{stem}_mask.png", metrics.binarize(refined, args.threshold))
    return 0


def _collect_pairs(images_dir: Path, masks_dir: Path) -> list[tuple[str, Path, Path]]:
    pairs = []
    for image_path in _iter_images(images_dir):
        mask_path = masks_dir / f"{image_path.stem}.png"
        if not mask_path.exists():
            raise FileNotFoundError(f"no mask for {image_path.name}: expected {mask_path}")
        pairs.append((image_path.stem, image_path, mask_path))
    if not pairs:
        raise FileNotFoundError(f"no images found under {images_dir}")
    return pairs


def cmd_evaluate(args) -> int:
    model, _ = load_model(args.checkpoint)
    pairs = _collect_pairs(Path(args.images), Path(args.masks))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    threshold = args.threshold
    grids = dict(augment.PERTURB_GRIDS)
    if args.config:
        payload = _load_config_file(args.config)
        unknown = sorted(set(payload) - {"threshold", "grids"})
        if unknown:
            raise ValueError(f"unknown evaluation config key(s): {', '.join(unknown)}")
        threshold = float(payload.get("threshold", threshold))
        for kind, levels in payload.get("grids", {}).items():
            if kind not in grids:
                raise ValueError(f"unknown perturbation kind in config: {kind}")
            grids[kind] = tuple(levels)

    def run_one(perturb_kind=None, level=None, tag="clean"):
        def samples():
            for idx, (stem, image_path, mask_path) in enumerate(pairs):
                image = load_image(image_path)
                if perturb_kind is not None:
                    image = augment.perturb(image, perturb_kind, level,
                                            seed=args.seed + idx)
                yield stem, image, load_mask(mask_path)

        report = metrics.evaluate_dataset(
            lambda image: model.predict(image)[1], samples(),
            threshold=threshold, workers=args.workers,
        )
        metrics.write_csv(report, out / f"report_{tag}.csv")
        metrics.write_summary(report, out / f"summary_{tag}.json")
        print(f"{tag}: n={report.count} mean_f1={report.mean_f1:.4f} "
              f"mean_iou={report.mean_iou:.4f}")
        return report

    if args.perturb:
        grid = grids[args.perturb]
        for position, level in enumerate(grid):
            run_one(args.perturb, level, tag=f"{args.perturb}_{position:02d}_{level}")
    else:
        run_one()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="profact",
                                     description="Image forgery localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a forged-sample dataset")
    gen.add_argument("--manifest", required=True, help="COCO-style annotation JSON")
    gen.add_argument("--images-root", default=None, help="root for manifest file names")
    gen.add_argument("--out", default=None, help="output directory (default: $PROFACT_CACHE)")
    gen.add_argument("--n", type=int, required=True, help="number of samples")
    gen.add_argument("--mode-mix", type=float, default=0.5, help="splice fraction")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--trimap-radius", type=int, default=5)
    gen.add_argument("--radius-reference-diag", type=float, default=860.0)
    gen.add_argument("--radius-max", type=int, default=25)
    gen.add_argument("--p-op", type=float, default=0.5,
                     help="probability of each manipulation-chain operation")
    gen.add_argument("--p-harmonize", type=float, default=0.5)
    gen.add_argument("--min-area", type=float, default=0.005)
    gen.add_argument("--max-area", type=float, default=0.5)
    gen.add_argument("--offset-tries", type=int, default=10)
    gen.add_argument("--max-rescales", type=int, default=5)
    gen.add_argument("--rescale-factor", type=float, default=0.8)
    gen.add_argument("--matte-dir", default=None, help="directory of precomputed mattes")
    gen.add_argument("--max-attempts", type=int, default=8)
    gen.add_argument("--workers", type=int, default=0)
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train one or two stages")
    tr.add_argument("--stage1", required=True, help="stage-1 config file (TOML or JSON)")
    tr.add_argument("--stage2", default=None, help="stage-2 config file (TOML or JSON)")
    tr.add_argument("--seed", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write coarse/refined maps for images")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help="an image file or a directory")
    pr.add_argument("--out", required=True)
    pr.add_argument("--threshold", type=float, default=0.5)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="pixel-level F1/IoU over a directory")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--images", required=True)
    ev.add_argument("--masks", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--config", default=None,
                    help="evaluation config file (threshold, perturbation grids)")
    ev.add_argument("--perturb", choices=sorted(augment.PERTURB_GRIDS), default=None,
                    help="sweep one perturbation grid instead of a clean pass")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--workers", type=int, default=0)
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ProfactError, FileNotFoundError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
