import numpy as np
import pytest

from mvreport.config import RunConfig
from mvreport.data import Study
from mvreport.rng import Rng
from mvreport.text import fallback_serialize


def tiny_config(**overrides):
    """Small dims that keep forward passes and gradient checks fast."""
    values = dict(
        seed=0,
        image_size=8,
        d1=8,
        d2=8,
        d=4,
        n_b=2,
        memory_rows=2,
        bridge_blocks=1,
        text_layers=1,
        dec_layers=1,
        ffn_mult=1,
        k_t=8,
        max_tokens=10,
        batch_size=4,
        epochs=1,
    )
    values.update(overrides)
    config = RunConfig(**values)
    config.validate()
    return config


def make_study(study_id, num_views, rng, image_size=8, report="patchy opacity seen",
               indication=None, anchor_index=0):
    views = [np.asarray(rng.normal((image_size, image_size)), dtype=np.float32)
             for _ in range(num_views)]
    return Study(
        study_id=study_id,
        views=views,
        anchor_index=anchor_index,
        indication=indication,
        report=report,
        factual_serialization=fallback_serialize(report),
    )


@pytest.fixture
def rng():
    return Rng(1234)
