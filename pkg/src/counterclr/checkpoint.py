"""Versioned JSON checkpoints for trained models.

Parameter arrays are stored as flat decimal lists plus shape metadata.
Serialization goes through Python's shortest-round-trip float repr, so
save -> load -> save is byte-identical and values survive exactly.
Deterministic layout (sorted keys, fixed indentation) makes checkpoint
bytes a fingerprint of the training run; anything nondeterministic like
wall-clock time belongs in the report CSV instead.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import caunet as cn
from .data import RatingScale
from .errors import CheckpointError
from .train import BaselineModel

__all__ = ["FORMAT_VERSION", "save_checkpoint", "load_checkpoint", "checkpoint_bytes"]

FORMAT_VERSION = 1


def _encoder_dict(encoder):
    if encoder is None:
        return None
    return {
        "mode": encoder.mode,
        "k": encoder.k,
        "hidden_dims": list(encoder.hidden_dims),
        "z_dim": encoder.z_dim,
    }


def _encoder_from(data):
    if data is None:
        return None
    return bb.EncoderConfig(
        mode=data["mode"], k=data["k"],
        hidden_dims=tuple(data["hidden_dims"]), z_dim=data["z_dim"],
    )


def _blocks_payload(params):
    return [
        {
            "name": block.name,
            "shape": list(block.values.shape),
            "trainable": block.trainable,
            "values": [float(v) for v in block.values.ravel()],
        }
        for block in params
    ]


def _params_from(payload):
    blocks = []
    for entry in payload:
        values = np.asarray(entry["values"], dtype=np.float64).reshape(
            entry["shape"]
        )
        blocks.append(ad.ParamBlock(entry["name"], values, entry["trainable"]))
    return ad.ParamSet(blocks)


def checkpoint_bytes(model, training=None, config=None):
    """Serialize a model to the canonical checkpoint byte string."""
    if isinstance(model, cn.CauNetModel):
        payload_model = {
            "type": "counterclr",
            "alpha": model.alpha,
            "momentum": model.momentum,
            "propensity_clip": model.propensity_clip,
        }
        encoder = model.encoder
    elif isinstance(model, BaselineModel):
        payload_model = {"type": "baseline", "method": model.method}
        encoder = model.encoder
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(model)}")
    payload = {
        "format_version": FORMAT_VERSION,
        "model": payload_model,
        "universe": {
            "n_users": model.n_users,
            "n_items": model.n_items,
            "r_min": model.scale.r_min,
            "r_max": model.scale.r_max,
        },
        "encoder": _encoder_dict(encoder),
        "blocks": _blocks_payload(model.params),
        "training": training,
        "config": config,
    }
    return (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8")


def save_checkpoint(path, model, training=None, config=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, training=training, config=config))


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, payload)."""
    with open(path, "rb") as fh:
        try:
            payload = json.loads(fh.read().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"not a checkpoint file: {exc}") from None
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} is not the supported "
            f"version {FORMAT_VERSION}"
        )
    universe = payload["universe"]
    scale = RatingScale(universe["r_min"], universe["r_max"])
    params = _params_from(payload["blocks"])
    info = payload["model"]
    if info["type"] == "counterclr":
        model = cn.CauNetModel(
            n_users=universe["n_users"],
            n_items=universe["n_items"],
            scale=scale,
            encoder=_encoder_from(payload["encoder"]),
            params=params,
            alpha=info["alpha"],
            momentum=info["momentum"],
            propensity_clip=info["propensity_clip"],
        )
    elif info["type"] == "baseline":
        model = BaselineModel(
            n_users=universe["n_users"],
            n_items=universe["n_items"],
            scale=scale,
            encoder=_encoder_from(payload["encoder"]),
            params=params,
            method=info["method"],
        )
    else:
        raise CheckpointError(f"unknown model type {info['type']!r}")
    return model, payload
