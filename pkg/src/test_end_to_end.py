import math

import pytest

from src.config import DEFAULT_CONFIG_PATH, apply_overrides, load_config
from src.data_io import read_manifest
from src.evaluator import evaluate_manifest
from src.model_io import save_checkpoint
from src.models import build_model
from src.synth_gen import write_synthetic_dataset
from src.trainer import (
    fixed_negatives,
    load_mask_samples,
    load_pair_samples,
    prior_loss,
    read_log,
    split_records,
    train_phase1,
    train_phase2,
)


@pytest.mark.slow
def test_reduced_desk_run_learns(tmp_path):
    config = apply_overrides(
        load_config(DEFAULT_CONFIG_PATH),
        {"synth": {"val_fraction": 0.2, "test_fraction": 0.2}},
    )
    d = config.model.backbone.downsample_factor
    manifest = write_synthetic_dataset(tmp_path / "data", 12, 120, seed=0, config=config.synth, d=d)
    records = read_manifest(manifest)
    base = manifest.parent
    model = build_model(config.model)
    log = tmp_path / "log.jsonl"

    mask_val = load_mask_samples(split_records(records, "val"), base, d, config.synth)
    train_phase1(
        model,
        load_mask_samples(split_records(records, "train"), base, d, config.synth),
        config.train,
        val=mask_val,
        log_path=log,
    )
    phase1 = read_log(log)
    assert phase1["val_loss"].iloc[-1] < prior_loss([s.target for s in mask_val])
    assert phase1["train_loss"].iloc[-1] < phase1["train_loss"].iloc[0]

    val = load_pair_samples(split_records(records, "val"), base)
    if all(p.label == 1 for p in val):
        val = val + fixed_negatives(val, config.train.seed)
    final = train_phase2(
        model,
        load_pair_samples([r for r in split_records(records, "train") if r.label == 1], base),
        config.train,
        val=val,
        log_path=log,
    )
    save_checkpoint(final, tmp_path / "m.ckpt")
    assert all(math.isfinite(v) for v in read_log(log)["train_loss"])

    report = evaluate_manifest(tmp_path / "m.ckpt", manifest, tmp_path / "eval", split="test")
    assert report.n_neg > 0
    assert report.auc is not None and report.auc >= 0.7
    assert report.localization is not None
