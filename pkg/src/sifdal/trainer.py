"""Alternating max/min adversarial training of the detector with SIFD losses."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping

import numpy as np

from . import ops, stz
from .detector import detection_loss, encode_targets
from .errors import ConfigurationError, ContractError, NumericError
from .model import META_KEY, ModelConfig, init_params, model_forward
from .sifd import disentangling_loss_raw, scale_related_loss
from .tape import Node, Tape, backward

log = logging.getLogger(__name__)

PARAM_GROUPS = ("det.", "sifd.w_h", "sifd.w_rel", "sifd.w_inv")


class Phase(str, enum.Enum):
    MAX = "Max"
    MIN = "Min"


@dataclass(frozen=True)
class AdversarialSchedule:
    cycle_length: int = 80
    max_phase_length: int = 30

    def __post_init__(self):
        if not 0 < self.max_phase_length < self.cycle_length:
            raise ConfigurationError("need 0 < max_phase_length < cycle_length")

    def phase_of(self, iteration: int) -> Phase:
        return Phase.MAX if iteration % self.cycle_length < self.max_phase_length else Phase.MIN


def phase_of(iteration: int, schedule: AdversarialSchedule = AdversarialSchedule()) -> Phase:
    return schedule.phase_of(iteration)


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.3
    lambda2: float = 0.3
    base_lr: float = 0.001
    beta1: float = 0.937
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sifd_weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 16
    seed: int = 18
    k_levels: int = 3
    grl_scale: float = 1.0
    cycle_length: int = 80
    max_phase_length: int = 30

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be non-negative")
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr must be positive")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.batch_size < 1 or (self.lambda2 > 0 and self.batch_size < 2):
            raise ConfigurationError("batch_size must be >= 2 when lambda2 > 0 (correlation needs a batch)")
        if not self.grl_scale > 0:
            raise ConfigurationError("grl_scale must be positive")
        if self.k_levels < 2:
            raise ConfigurationError("k_levels must be at least 2")

    @property
    def schedule(self) -> AdversarialSchedule:
        return AdversarialSchedule(self.cycle_length, self.max_phase_length)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class LossBreakdown:
    l_det: float
    l_rel: float
    l_rho: float
    total: float
    phase: Phase
    node: Node | None = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {"phase": self.phase.value, "l_det": self.l_det, "l_rel": self.l_rel,
                "l_rho": self.l_rho, "total": self.total}


def _group(name: str) -> str:
    for prefix in PARAM_GROUPS:
        if name.startswith(prefix):
            return prefix
    raise ConfigurationError(f"parameter {name!r} has no known group prefix {PARAM_GROUPS}")


def parameter_policy(phase: Phase, names: Iterable[str]) -> dict[str, bool]:
    """Trainable mask: Max moves only the projections, Min moves everything else."""
    mask = {}
    for name in names:
        adversary = _group(name) in ("sifd.w_rel", "sifd.w_inv")
        mask[name] = adversary if phase is Phase.MAX else not adversary
    return mask


def apply_parameter_policy(phase: Phase, tape: Tape) -> None:
    mask = parameter_policy(phase, tape.params)
    tape.set_trainable([k for k, v in mask.items() if v], True)
    tape.set_trainable([k for k, v in mask.items() if not v], False)


def total_loss(l_det, l_rel, l_rho, config: TrainConfig, phase: Phase) -> LossBreakdown:
    """``l_det + lambda1 l_rel + lambda2 l_rho``; the last term is gradient-reversed in Max phase.

    Accepts tape nodes (the result carries ``node`` for backward) or plain floats.
    """
    vals = {}
    for name, x in (("l_det", l_det), ("l_rel", l_rel), ("l_rho", l_rho)):
        v = float(x.value) if isinstance(x, Node) else float(x)
        if not math.isfinite(v):
            raise NumericError(f"{name} is not finite: {v}")
        vals[name] = v
    total = vals["l_det"] + config.lambda1 * vals["l_rel"] + config.lambda2 * vals["l_rho"]
    node = None
    if any(isinstance(x, Node) for x in (l_det, l_rel, l_rho)):
        rho = l_rho
        if phase is Phase.MAX and isinstance(rho, Node):
            rho = ops.grad_reverse(rho, config.grl_scale)
        node = l_det + config.lambda1 * l_rel + config.lambda2 * rho
        total = float(node.value)
    return LossBreakdown(vals["l_det"], vals["l_rel"], vals["l_rho"], total, phase, node)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param):
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_update(param, grad, state: AdamState, lr: float, beta1: float = 0.937, beta2: float = 0.999,
                eps: float = 1e-8, weight_decay: float = 0.0) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step; ``weight_decay`` is decoupled (AdamW) and scaled by lr."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise ContractError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        new = new - lr * weight_decay * param
    return new, AdamState(m, v, t)


def cosine_lr(epoch: float, total_epochs: float, base_lr: float) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs}]")
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs)))


@dataclass
class Batch:
    images: np.ndarray  # (N,3,H,W)
    boxes: list  # per image, sequence of (x0,y0,x1,y1,cls)
    levels: np.ndarray  # (N,) height levels


def compute_losses(tape: Tape, batch: Batch, mcfg: ModelConfig, zero_rel: bool = False):
    """Forward pass: (model output, l_det, l_rel, l_rho) as tape nodes."""
    out = model_forward(tape, batch.images, mcfg, zero_rel=zero_rel)
    size = batch.images.shape[-2:]
    targets = encode_targets(batch.boxes, size, mcfg.n_classes)
    l_det = detection_loss(out.preds, targets)
    if out.sifd:
        rels, rhos = [], []
        for level in mcfg.sifd_levels:
            s = out.sifd[level]
            rels.append(scale_related_loss(s.rel_logits, batch.levels))
            if batch.images.shape[0] >= 2:
                rhos.append(disentangling_loss_raw(s.rel_proj, s.inv_proj))
        l_rel = rels[0] if len(rels) == 1 else ops.mean_of(rels)
        l_rho = (rhos[0] if len(rhos) == 1 else ops.mean_of(rhos)) if rhos else tape.const(0.0)
    else:
        l_rel = tape.const(0.0)
        l_rho = tape.const(0.0)
    return out, l_det, l_rel, l_rho


class Trainer:
    """Mutable parameter set plus per-parameter optimiser state."""

    def __init__(self, model_cfg: ModelConfig, config: TrainConfig, params: Mapping[str, np.ndarray] | None = None):
        if model_cfg.sifd_location == "NONE" and (config.lambda1 or config.lambda2):
            config = TrainConfig(**{**asdict(config), "lambda1": 0.0, "lambda2": 0.0})
        if model_cfg.k_levels != config.k_levels and model_cfg.sifd_location != "NONE":
            raise ConfigurationError(f"model k_levels {model_cfg.k_levels} != train k_levels {config.k_levels}")
        self.model_cfg = model_cfg
        self.config = config
        self.params = {k: np.array(v, dtype=np.float64) for k, v in
                       (params if params is not None else init_params(model_cfg, config.seed)).items()}
        for name in self.params:
            _group(name)
        self.state = {k: AdamState.like(v) for k, v in self.params.items()}

    @property
    def adversarial(self) -> bool:
        return self.config.lambda2 > 0 and bool(self.model_cfg.sifd_levels)

    def phase(self, iteration: int) -> Phase:
        # without a correlation term there is nothing for the adversary to do
        return self.config.schedule.phase_of(iteration) if self.adversarial else Phase.MIN

    def step(self, batch: Batch, iteration: int, lr: float) -> LossBreakdown:
        phase = self.phase(iteration)
        tape = Tape(self.params, parameter_policy(phase, self.params))
        _, l_det, l_rel, l_rho = compute_losses(tape, batch, self.model_cfg)
        result = total_loss(l_det, l_rel, l_rho, self.config, phase)
        grads = backward(tape, result.node)
        c = self.config
        for name, g in grads.items():
            wd = c.sifd_weight_decay if name.startswith("sifd.") else 0.0
            self.params[name], self.state[name] = adam_update(
                self.params[name], g, self.state[name], lr, c.beta1, c.beta2, c.adam_eps, wd)
        return result

    def checkpoint(self) -> dict[str, np.ndarray]:
        out = {META_KEY: self.model_cfg.encode()}
        out.update({k: self.params[k] for k in sorted(self.params)})
        return out


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled full batches for one epoch; the remainder is dropped."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def train(dataset, config: TrainConfig, model_cfg: ModelConfig, log_path=None, checkpoint_path=None,
          params=None, callback=None):
    """Run the full schedule; returns the trainer and the per-iteration log rows.

    ``dataset`` needs ``images`` (N,3,H,W), ``boxes`` (list) and ``levels`` (N,).
    """
    n = len(dataset.images)
    if n == 0:
        raise ConfigurationError("empty dataset")
    if n < config.batch_size:
        raise ConfigurationError(f"dataset of {n} images smaller than batch_size {config.batch_size}")
    trainer = Trainer(model_cfg, config, params)
    rows = []
    iteration = 0
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            lr = cosine_lr(epoch, config.epochs, config.base_lr)
            for idx in batch_order(n, config.batch_size, config.seed, epoch):
                batch = Batch(dataset.images[idx], [dataset.boxes[i] for i in idx], dataset.levels[idx])
                res = trainer.step(batch, iteration, lr)
                row = {"iter": iteration, "epoch": epoch, **res.row(), "lr": lr}
                rows.append(row)
                if fh:
                    fh.write(json.dumps(row) + "\n")
                iteration += 1
            log.info("epoch %d: l_det %.4f l_rel %.4f l_rho %.4f", epoch, rows[-1]["l_det"],
                     rows[-1]["l_rel"], rows[-1]["l_rho"])
            if callback is not None:
                callback(epoch, trainer)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        stz.save(checkpoint_path, trainer.checkpoint())
    return trainer, rows
