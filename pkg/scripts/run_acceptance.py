"""
Scaled synthetic experiment, end to end:

    synth -> phase 1 -> phase 2 -> evaluate (AUC / AP / localization IoU)

Writes <out>/acceptance.json with the measured values and pass flags.

    python -m scripts.run_acceptance --out runs/acceptance [--seed 0] [--threads 1]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from src.config import DEFAULT_CONFIG_PATH, apply_overrides, load_config
from src.data_io import read_manifest
from src.evaluator import evaluate_manifest
from src.model_io import save_checkpoint
from src.models import build_model, count_parameters
from src.synth_gen import write_synthetic_dataset
from src.tensor_core import configure_determinism
from src.trainer import (
    fixed_negatives,
    load_mask_samples,
    load_pair_samples,
    split_records,
    train_phase1,
    train_phase2,
)

logger = logging.getLogger("scripts.run_acceptance")

N_PANORAMAS = 50
N_TRAIN = 400
N_TEST = 100

AUC_TARGET = 0.90
AP_TARGET = 0.90
IOU_PASS_RATE = 0.70
MAX_PARAMETERS = 100_000
MAX_RUNTIME_S = 30 * 60


def main() -> None:
    parser = argparse.ArgumentParser(description="scaled synthetic acceptance run")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG_PATH)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.INFO,
        format=f"%(asctime)s %(levelname)s [seed={args.seed}] %(name)s: %(message)s",
    )
    configure_determinism(args.threads)
    started = time.perf_counter()
    timings = {}

    def lap(stage: str) -> None:
        timings[stage] = round(time.perf_counter() - started - sum(timings.values()), 1)
        logger.info("%s finished in %.1fs", stage, timings[stage])

    n_samples = N_TRAIN + 2 * N_TEST
    config = apply_overrides(
        load_config(args.config),
        {
            "seed": args.seed,
            "threads": args.threads,
            "train": {"seed": args.seed},
            "synth": {"val_fraction": N_TEST / n_samples, "test_fraction": N_TEST / n_samples},
        },
    )

    # Data
    data_dir = args.out / "data"
    manifest = write_synthetic_dataset(
        data_dir, N_PANORAMAS, n_samples, seed=args.seed, config=config.synth,
        d=config.model.backbone.downsample_factor, n_jobs=args.threads, progress=True,
    )
    records = read_manifest(manifest)
    lap("synth")

    # Training
    model = build_model(config.model)
    params = count_parameters(model)
    logger.info("Model parameters: %s", params)

    d = model.downsample_factor
    ckpt = args.out / "model.ckpt"
    log = args.out / "train.log.jsonl"
    if log.exists():
        log.unlink()

    train_phase1(
        model,
        load_mask_samples(split_records(records, "train"), data_dir, d, config.synth, args.threads),
        config.train,
        val=load_mask_samples(split_records(records, "val"), data_dir, d, config.synth, args.threads),
        ckpt_path=ckpt, log_path=log, progress=True,
    )
    lap("phase1")

    train_pairs = load_pair_samples(
        [r for r in split_records(records, "train") if r.label == 1], data_dir, args.threads
    )
    val_pairs = load_pair_samples(split_records(records, "val"), data_dir, args.threads)
    if all(p.label == 1 for p in val_pairs):
        val_pairs = val_pairs + fixed_negatives(val_pairs, config.train.seed)

    final = train_phase2(
        model, train_pairs, config.train, val=val_pairs, ckpt_path=ckpt, log_path=log, progress=True,
    )
    save_checkpoint(final, ckpt)
    lap("phase2")

    # Evaluation
    report = evaluate_manifest(ckpt, manifest, args.out / "eval", split="test", n_jobs=args.threads, progress=True)
    elapsed = time.perf_counter() - started
    lap("evaluate")

    iou_rate = report.localization.iou_pass_rate if report.localization else None
    result = {
        "seed": args.seed,
        "parameters": params["total"],
        "auc": report.auc,
        "average_precision": report.average_precision,
        "iou_pass_rate": iou_rate,
        "n_pos": report.n_pos,
        "n_neg": report.n_neg,
        "runtime_s": round(elapsed, 1),
        "stage_runtime_s": timings,
        "passed": {
            "parameters": params["total"] <= MAX_PARAMETERS,
            "auc": report.auc is not None and report.auc >= AUC_TARGET,
            "average_precision": report.average_precision is not None and report.average_precision >= AP_TARGET,
            "localization": iou_rate is not None and iou_rate >= IOU_PASS_RATE,
            "runtime": elapsed <= MAX_RUNTIME_S,
        },
    }

    with open(args.out / "acceptance.json", "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)

    print(json.dumps(result, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
