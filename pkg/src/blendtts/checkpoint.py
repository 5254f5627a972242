"""Versioned checkpoint container shared by the acoustic model and vocoder."""

from __future__ import annotations

import torch

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model_type: str, config: dict, state_dict: dict, extra: dict | None = None) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "model_type": model_type,
            "config": config,
            "state_dict": state_dict,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path, expect_type: str | None = None) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if expect_type is not None and payload.get("model_type") != expect_type:
        raise CheckpointError(
            f"{path}: checkpoint holds a {payload.get('model_type')!r} model, expected {expect_type!r}"
        )
    return payload
