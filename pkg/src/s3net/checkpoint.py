"""Checkpoint archives: one torch-serialised dict per file.

Layout::

    {"format_version": 1, "kind": "model" | "train" | "extractor",
     "model_config": {...}, "params": {name: tensor}, ...extra}
"""
import torch

from .errors import ConfigError, ShapeError
from .model import ModelConfig, build_model

FORMAT_VERSION = 1


def save_archive(path, kind, params, model_config=None, **extra):
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "model_config": model_config.to_dict() if model_config is not None else None,
        "params": {k: v.detach().cpu().clone() for k, v in params.items()},
    }
    payload.update(extra)
    torch.save(payload, path)


def load_archive(path, kind=None):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ConfigError(f"{path} is not an s3net checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise ConfigError(
            f"{path}: unsupported checkpoint format {payload['format_version']} (expected {FORMAT_VERSION})"
        )
    if kind is not None and payload["kind"] not in (kind if isinstance(kind, tuple) else (kind,)):
        raise ConfigError(f"{path}: expected a {kind} checkpoint, found {payload['kind']}")
    return payload


def load_params_into(module, params):
    own = module.state_dict()
    missing = set(own) - set(params)
    unexpected = set(params) - set(own)
    if missing or unexpected:
        raise ShapeError(f"parameter keys differ: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    for k, v in params.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise ShapeError(f"{k}: checkpoint shape {tuple(v.shape)} != model shape {tuple(own[k].shape)}")
    module.load_state_dict(params)
    return module


def save_model(path, model):
    save_archive(path, "model", model.state_dict(), model.cfg)


def load_model(path):
    """Rebuild a network from a model or training checkpoint."""
    payload = load_archive(path, kind=("model", "train"))
    cfg = ModelConfig.from_dict(payload["model_config"])
    model = build_model(cfg)
    load_params_into(model, payload["params"])
    model.eval()
    return model
