"""
One verify + localize on a freshly initialised desk model and a procedural
panorama. Smoke check only: the score of an untrained model means nothing.

    python -m scripts.dry_run
"""

import logging

from src.config import load_config, DEFAULT_CONFIG_PATH
from src.localizer import localize
from src.models import build_model, count_parameters, verify
from src.synth_gen import make_positive, procedural_scene

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

config = load_config(DEFAULT_CONFIG_PATH)
model = build_model(config.model)
d = model.downsample_factor

print("parameters:", count_parameters(model))

panorama, buildings = procedural_scene(0, config.model.reference_size, d=d)
sample = make_positive(panorama, 0, seed=1, d=d, config=config.synth, candidates=buildings)

result = verify(sample.query, panorama, model)
print("score:", result.score, "label:", result.label)
print("m_r:", result.m_r.shape, "m_q:", result.m_q.shape)
print("source box:", sample.box)
print("localized:", localize(result.m_r, panorama.shape[:2], wrap_horizontal=config.model.reference_wrap))
