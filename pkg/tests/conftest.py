import os

import pytest
import torch

from blendtts import acoustic as ac

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def toy_acoustic_config(**overrides) -> ac.AcousticConfig:
    base = dict(
        inventory_size=12,
        speaker_count=2,
        encoder_dim=16,
        attention_dim=12,
        decoder_dim=20,
        speaker_embedding_dim=4,
        location_filters=4,
        location_kernel=5,
        max_decoder_blocks=8,
    )
    base.update(overrides)
    return ac.AcousticConfig(**base)


def toy_acoustic_model(seed: int = 0, dtype=torch.float32, **overrides) -> ac.AcousticModel:
    torch.manual_seed(seed)
    model = ac.AcousticModel(toy_acoustic_config(**overrides), ac.SpeakerTable(("spk0", "spk1")))
    return model.to(dtype)


@pytest.fixture
def table2_csv() -> str:
    return os.path.join(DATA_DIR, "table2_sd25000_scores.csv")
