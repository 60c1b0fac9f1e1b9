"""A width-4 model on 32x32 inputs: small enough for exhaustive gradient checks."""

import numpy as np

from sifdal.model import ModelConfig, init_params
from sifdal.tape import Tape, backward
from sifdal.trainer import AdamState, Batch, TrainConfig, adam_update, compute_losses, parameter_policy, total_loss


def toy_config(**kw):
    base = dict(width=4, fpn_channels=4, n_classes=3, k_levels=3, image_size=32)
    return ModelConfig(**{**base, **kw})


def toy_batch(seed=0, n=4, size=32):
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, size - 12, size=2)
        w, h = rng.uniform(3, 12, size=2)
        boxes.append([(x0, y0, x0 + w, y0 + h, int(rng.integers(3)))])
    return Batch(rng.normal(size=(n, 3, size, size)), boxes, np.arange(n) % 3)


def toy_params(cfg, seed=3, bias_scale=0.1):
    """Initial parameters with non-zero biases so no ReLU sits exactly at a kink."""
    rng = np.random.default_rng(seed + 1000)
    params = init_params(cfg, seed)
    for k, v in params.items():
        if k.endswith(".b") and ".head." not in k:
            params[k] = rng.normal(scale=bias_scale, size=v.shape)
    return params


def rho_only_step(params, batch, mcfg, phase, lr):
    """L_rho before and after one Adam step on the rho term alone, active group only."""
    cfg = TrainConfig(lambda1=0.0, k_levels=mcfg.k_levels)
    t = Tape(params, parameter_policy(phase, params))
    _, _, l_rel, l_rho = compute_losses(t, batch, mcfg)
    grads = backward(t, total_loss(0.0, l_rel, l_rho, cfg, phase).node)
    new = dict(params)
    for k, g in grads.items():
        new[k], _ = adam_update(params[k], g, AdamState.like(params[k]), lr)
    after = float(compute_losses(Tape(new), batch, mcfg)[3].value)
    return float(l_rho.value), after
