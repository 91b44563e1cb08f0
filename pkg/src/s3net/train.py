import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_archive, load_params_into, save_archive
from .data import collate, draw_pair, make_sample
from .errors import ConfigError, TrainingError
from .losses import LossWeights, SsimConfig, WSsimConfig, default_extractor, total_loss
from .model import ModelConfig, build_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 3
    epochs: int = 100
    lr: float = 1e-4
    lr_drop_factor: float = 10.0
    lr_drop_every: float = 20
    lr_schedule: str = "step"  # "step": every lr_drop_every epochs; "once": a single drop
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 1e-2
    grad_clip: float = None
    epsilon: float = 1e-6
    weights: LossWeights = field(default_factory=LossWeights)
    wssim: WSsimConfig = field(default_factory=WSsimConfig)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    seed: int = 0
    checkpoint_every: int = 1
    steps_per_epoch: int = None  # default: ceil(indexed images / batch_size)
    extractor_seed: int = 0
    extractor_path: str = None
    use_depth: bool = True  # False zeroes both depth channels (image-only ablation)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.wssim, dict):
            self.wssim = WSsimConfig(**self.wssim)
        if isinstance(self.ssim, dict):
            self.ssim = SsimConfig(**self.ssim)
        for name in ("batch_size", "lr", "lr_drop_factor", "lr_drop_every", "checkpoint_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if self.lr_schedule not in ("step", "once"):
            raise ConfigError(f"lr_schedule must be 'step' or 'once', got {self.lr_schedule!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1 when set")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def lr_at(epoch, cfg):
    if cfg.lr_schedule == "once":
        drops = 1 if epoch >= cfg.lr_drop_every else 0
    else:
        drops = math.floor(epoch / cfg.lr_drop_every)
    return cfg.lr / cfg.lr_drop_factor ** drops


def zero_depth(inputs):
    out = inputs.clone()
    out[:, 3] = 0.0
    out[:, 7] = 0.0
    return out


def make_optimizer(params, cfg):
    return torch.optim.AdamW(
        params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def init_state(cfg, model_cfg=None):
    model = build_model(model_cfg or ModelConfig(), seed=cfg.seed)
    model.train()
    return TrainState(
        model=model,
        optimizer=make_optimizer(model.parameters(), cfg),
        rng=np.random.default_rng(cfg.seed),
    )


def train_step(state, batch, extractor, cfg):
    """One optimisation step on a list of RelightSample. Returns (state, breakdown)."""
    inputs, targets = collate(batch)
    if not cfg.use_depth:
        inputs = zero_depth(inputs)
    lr = lr_at(state.epoch, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    state.optimizer.zero_grad(set_to_none=False)
    pred = state.model(inputs)
    loss, breakdown = total_loss(
        pred, targets, cfg.weights, cfg.wssim, cfg.ssim, extractor, cfg.epsilon
    )
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss at step {state.step} (epoch {state.epoch})",
            snapshot={"step": state.step, "epoch": state.epoch, "lr": lr, **asdict(breakdown)},
        )
    loss.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    record = {"step": state.step, "epoch": state.epoch, "lr": lr, **asdict(breakdown)}
    state.history.append(record)
    return state, breakdown


def save_state(path, state, cfg):
    save_archive(
        path,
        "train",
        state.model.state_dict(),
        state.model.cfg,
        train_config=cfg.to_dict(),
        optimizer=state.optimizer.state_dict(),
        rng_state=state.rng.bit_generator.state,
        epoch=state.epoch,
        step=state.step,
        history=list(state.history),
    )


def load_state(path, cfg=None):
    payload = load_archive(path, kind="train")
    cfg = cfg or TrainConfig.from_dict(payload["train_config"])
    state = init_state(cfg, ModelConfig.from_dict(payload["model_config"]))
    load_params_into(state.model, payload["params"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.rng.bit_generator.state = payload["rng_state"]
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.history = list(payload["history"])
    return state


def build_extractor(cfg):
    if cfg.weights.lambda3 == 0:
        return None
    if cfg.extractor_path:
        from .losses import VGG19Extractor

        payload = load_archive(cfg.extractor_path, kind="extractor")
        return VGG19Extractor(payload["params"])
    return default_extractor(cfg.extractor_seed)


def steps_per_epoch(cfg, index):
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    return max(1, math.ceil(len(index) / cfg.batch_size))


def _write_log(path, rows):
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def fit(cfg, index, out_dir, model_cfg=None, extractor=None, resume=None):
    """Train over `index`, checkpointing into `out_dir`. Returns the final TrainState."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if extractor is None:
        extractor = build_extractor(cfg)
    log_path = out / "train_log.jsonl"

    if resume is not None:
        state = load_state(resume, cfg)
    else:
        state = init_state(cfg, model_cfg)
        save_state(out / "ckpt_epoch000.pt", state, cfg)
        _write_log(log_path, [])
    if cfg.epochs > state.epoch and len(index) == 0:
        raise ConfigError("cannot train on an empty dataset")

    n_steps = steps_per_epoch(cfg, index)
    n_samples = n_steps * cfg.batch_size if cfg.steps_per_epoch else len(index)
    trained = False
    while state.epoch < cfg.epochs:
        trained = True
        remaining = n_samples
        for _ in range(n_steps):
            size = min(cfg.batch_size, remaining)
            remaining -= size
            batch = [make_sample(index, *draw_pair(index, state.rng)) for _ in range(size)]
            try:
                _, b = train_step(state, batch, extractor, cfg)
            except TrainingError:
                save_state(out / "failed_step.pt", state, cfg)
                raise
        log.info("epoch %d done: step %d total %.5f", state.epoch, state.step, b.total)
        state.epoch += 1
        if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
            try:
                save_state(out / f"ckpt_epoch{state.epoch:03d}.pt", state, cfg)
                _write_log(log_path, state.history)
            except OSError as e:
                raise OSError(f"writing checkpoint at step {state.step} failed: {e}") from e
    if trained:
        save_state(out / "last.pt", state, cfg)
        _write_log(log_path, state.history)
    return state
