"""
BUPM — Command-line surface

    python -m src.cli.main <subcommand> [--config FILE] [--seed S] [--threads N] [-v]

Subcommands: synth, ingest, train, verify, localize, evaluate, gradcheck.

Exit codes:
    0  success
    2  usage / invalid argument
    3  I/O, decode, manifest or checkpoint error
    4  numerical divergence during training
    5  gradient check failure

Flags are applied over the defaults, then the config file (when given) over
the flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from src.cli.schemas import IngestOutput, LocalizeOutput, SynthOutput, TrainOutput, VerifyOutput
from src.config import (
    THREADS_ENV,
    BUPMConfig,
    apply_overrides,
    default_threads,
    read_config_overrides,
)
from src.data_io import (
    ImageDecodeError,
    ManifestError,
    as_rgb,
    fit_to_multiple,
    ingest_pairs,
    load_image,
    read_manifest,
    save_image,
    save_mask,
    write_manifest,
)
from src.evaluator import evaluate_manifest
from src.gradcheck import SIZES, SUITES, run_gradcheck
from src.localizer import localize, overlay_mask, render_box
from src.model_io import CheckpointError, apply_checkpoint, load_checkpoint, load_model, save_checkpoint
from src.models import DEFAULT_THRESHOLD, build_model, count_parameters, verify
from src.synth_gen import write_synthetic_dataset
from src.tensor_core import configure_determinism
from src.trainer import (
    TrainingDivergedError,
    fixed_negatives,
    load_mask_samples,
    load_pair_samples,
    split_records,
    train_phase1,
    train_phase2,
)

logger = logging.getLogger("src.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5


# Setup


def configure_logging(verbosity: int, seed: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format=f"%(asctime)s %(levelname)s [seed={seed}] %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def resolve_config(args: argparse.Namespace) -> BUPMConfig:
    config = BUPMConfig()
    overrides: dict = {"threads": args.threads if args.threads is not None else default_threads()}
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = apply_overrides(config, overrides)

    if args.config is not None:
        config = apply_overrides(config, read_config_overrides(args.config))

    seed = config.seed if config.seed is not None else 0
    return apply_overrides(config, {"seed": seed, "train": {"seed": seed}})


def _progress(args: argparse.Namespace) -> bool:
    return args.verbose > 0


def _print(record) -> None:
    print(record.model_dump_json())


def _load_for_model(path: Path, d: int, name: str) -> np.ndarray:
    image = as_rgb(load_image(path))
    fitted, resized = fit_to_multiple(image, d)
    if resized:
        logger.warning(
            "%s %s resized from %dx%d to %dx%d (multiple of %d)",
            name, path, image.shape[0], image.shape[1], fitted.shape[0], fitted.shape[1], d,
        )
    return fitted


# Subcommands


def cmd_synth(args: argparse.Namespace, config: BUPMConfig) -> int:
    synth = config.synth
    if args.region_source is not None:
        synth = synth.model_copy(update={"region_source": args.region_source})
    if tuple(synth.panorama_size) != tuple(config.model.reference_size):
        logger.warning(
            "panorama_size %s differs from the model reference_size %s",
            synth.panorama_size, config.model.reference_size,
        )

    manifest = write_synthetic_dataset(
        args.out,
        args.panoramas,
        args.samples,
        seed=config.seed,
        config=synth,
        d=config.model.backbone.downsample_factor,
        n_jobs=config.threads,
        progress=_progress(args),
    )
    _print(SynthOutput(manifest=str(manifest), panoramas=args.panoramas, samples=args.samples))
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace, config: BUPMConfig) -> int:
    records = ingest_pairs(
        args.index,
        args.out,
        np.random.default_rng(config.seed),
        val_fraction=args.val_fraction if args.val_fraction is not None else config.synth.val_fraction,
        test_fraction=args.test_fraction if args.test_fraction is not None else config.synth.test_fraction,
        min_km=args.min_km,
    )
    write_manifest(records, args.out)
    negatives = sum(1 for r in records if r.label == 0)
    _print(IngestOutput(manifest=str(args.out), positives=len(records) - negatives, negatives=negatives))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: BUPMConfig) -> int:
    ckpt_path = Path(args.ckpt)
    log_path = Path(args.log) if args.log else ckpt_path.with_suffix(".log.jsonl")

    resume = None
    if args.resume:
        resume = load_checkpoint(ckpt_path)
        model = build_model(resume.model_config)
        apply_checkpoint(resume, model)
        logger.info("Resuming from %s (phase=%s, epoch=%d)", ckpt_path, resume.phase, resume.epoch)
    elif args.init is not None:
        init = load_checkpoint(args.init)
        model = build_model(init.model_config)
        apply_checkpoint(init, model)
        logger.info("Starting from %s (phase=%s, epoch=%d)", args.init, init.phase, init.epoch)
    else:
        model = build_model(config.model)
        if args.phase == "2":
            logger.warning("phase 2 from freshly initialised weights (no --init or --resume)")

    if not args.resume and log_path.exists():
        log_path.unlink()

    counts = count_parameters(model)
    logger.info("Model parameters: %s", counts)

    data = Path(args.data)
    records = read_manifest(data)
    base_dir = data.parent
    d = model.downsample_factor
    checkpoint = resume

    run_phase1 = args.phase in ("1", "all") and not (resume is not None and resume.phase.startswith("phase2"))
    if run_phase1:
        train = load_mask_samples(split_records(records, "train"), base_dir, d, config.synth, config.threads)
        val = load_mask_samples(split_records(records, "val"), base_dir, d, config.synth, config.threads)
        checkpoint = train_phase1(
            model, train, config.train, val=val, ckpt_path=ckpt_path, log_path=log_path,
            resume=resume if resume is not None and resume.phase == "phase1" else None,
            progress=_progress(args),
        )

    if args.phase in ("2", "all"):
        train = load_pair_samples(
            [r for r in split_records(records, "train") if r.label == 1], base_dir, config.threads
        )
        val_records = split_records(records, "val")
        val = load_pair_samples(val_records, base_dir, config.threads)
        if val and all(p.label == 1 for p in val):
            val = val + fixed_negatives(val, config.train.seed)
        checkpoint = train_phase2(
            model, train, config.train, val=val, ckpt_path=ckpt_path, log_path=log_path,
            resume=resume if resume is not None and resume.phase.startswith("phase2") else None,
            progress=_progress(args),
        )

    if checkpoint is None:
        raise ValueError(f"nothing to train for --phase {args.phase}")
    save_checkpoint(checkpoint, ckpt_path)
    _print(
        TrainOutput(
            checkpoint=str(ckpt_path),
            phase=checkpoint.phase,
            epoch=checkpoint.epoch,
            train_loss=checkpoint.metrics.get("train_loss"),
            val_loss=checkpoint.metrics.get("val_loss"),
        )
    )
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, config: BUPMConfig) -> int:
    model, _ = load_model(args.ckpt)
    d = model.downsample_factor
    query = _load_for_model(Path(args.query), d, "query")
    reference = _load_for_model(Path(args.ref), d, "reference")

    result = verify(query, reference, model, args.threshold)
    _print(
        VerifyOutput(
            query_path=str(args.query),
            ref_path=str(args.ref),
            score=result.score,
            label=result.label,
            threshold=args.threshold,
        )
    )

    if args.emit_masks is not None:
        out = Path(args.emit_masks)
        save_mask(result.m_r, out / "m_r.pgm")
        save_mask(result.m_q, out / "m_q.pgm")
        save_image(overlay_mask(reference, result.m_r), out / "overlay.png")
        logger.info("Wrote masks to %s", out)
    return EXIT_OK


def cmd_localize(args: argparse.Namespace, config: BUPMConfig) -> int:
    model, _ = load_model(args.ckpt)
    d = model.downsample_factor
    query = _load_for_model(Path(args.query), d, "query")
    reference = _load_for_model(Path(args.ref), d, "reference")

    result = verify(query, reference, model, args.threshold)
    box = localize(result.m_r, reference.shape[:2], t=DEFAULT_THRESHOLD, wrap_horizontal=model.config.reference_wrap)

    if box is None:
        _print(LocalizeOutput(status="no-localization", score=result.score))
        return EXIT_OK

    _print(LocalizeOutput(status="ok", score=result.score, box=box, wraparound=box.wrap))
    if args.out is not None:
        save_image(render_box(reference, box), args.out)
        logger.info("Wrote annotated panorama to %s", args.out)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, config: BUPMConfig) -> int:
    report = evaluate_manifest(
        args.ckpt,
        args.data,
        args.out,
        split=args.split,
        threshold=args.threshold,
        n_jobs=config.threads,
        progress=_progress(args),
    )
    _print(report)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: BUPMConfig) -> int:
    table = run_gradcheck(
        size=args.size,
        seeds=args.seeds,
        step=args.step,
        tolerance=args.tolerance,
        ops=args.ops,
        broken=args.inject_broken or (),
    )
    print(table.to_string(index=False))
    return EXIT_OK if bool(table["passed"].all()) else EXIT_GRADCHECK


# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON config bundle, applied last")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help=f"defaults to ${THREADS_ENV} or 1")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="bupm", description="Image-to-GPS verification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a procedural dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--panoramas", type=int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--region-source", choices=["random", "buildings"], default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="manifest from a local index of co-located pairs")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--min-km", type=float, default=1.609)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="two-phase training")
    p.add_argument("--phase", choices=["1", "2", "all"], default="all")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--init", type=Path, default=None, help="start from this checkpoint's weights")
    p.add_argument("--resume", action="store_true", help="continue from --ckpt")
    p.add_argument("--log", type=Path, default=None, help="JSONL epoch log (default: next to --ckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", parents=[common], help="score one query against one panorama")
    p.add_argument("--query", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--emit-masks", type=Path, default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("localize", parents=[common], help="box the matched region in the panorama")
    p.add_argument("--query", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", type=Path, default=None, help="annotated panorama image")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", parents=[common], help="AUC / AP report for a manifest")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default=None)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    p.add_argument("--size", choices=sorted(SIZES), default="toy")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--ops", nargs="+", choices=sorted(SUITES), default=None)
    p.add_argument(
        "--inject-broken", nargs="+", choices=sorted(SUITES), default=None,
        help="negative control: halve the backward of these suites",
    )
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.seed if args.seed is not None else 0)

    try:
        config = resolve_config(args)
        if config.seed != args.seed:
            configure_logging(args.verbose, config.seed)
        configure_determinism(config.threads)
        return args.func(args, config)
    except TrainingDivergedError as exc:
        logger.error("Training diverged: %s", exc)
        return EXIT_DIVERGED
    except (OSError, ImageDecodeError, ManifestError, CheckpointError) as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except ValueError as exc:
        logger.error("Invalid argument: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
