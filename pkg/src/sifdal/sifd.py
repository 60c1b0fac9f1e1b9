"""Scale-invariant feature disentangling.

A pyramid map is divided into a scale-related half, trained to classify the
flight-height level from its pooled descriptor, and a scale-invariant half
that alone feeds the detection head.  Scalar projections of both pooled
halves are pushed apart by the squared Pearson correlation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError, ContractError, DataError
from .tape import Node, Tape

EPS = 1e-8


@dataclass
class FeatureSplit:
    x_ori: Node
    x_rel: Node
    x_inv: Node


@dataclass
class SIFDOutput:
    split: FeatureSplit
    head_input: Node
    rel_logits: Node  # (N, k_levels)
    rel_proj: Node  # (N, d)
    inv_proj: Node  # (N, d)


def param_names(suffix: str = "") -> tuple[str, str, str]:
    return f"sifd.w_h{suffix}", f"sifd.w_rel{suffix}", f"sifd.w_inv{suffix}"


def init_sifd(rng: np.random.Generator, half: int, k_levels: int, proj_dim: int = 1, suffix: str = "") -> dict:
    if k_levels < 2:
        raise ConfigurationError(f"k_levels must be at least 2, got {k_levels}")
    if proj_dim < 1:
        raise ConfigurationError(f"projection dimension must be positive, got {proj_dim}")
    std = np.sqrt(1.0 / half)
    w_h, w_rel, w_inv = param_names(suffix)
    return {
        w_h: rng.normal(0.0, std, size=(half, k_levels)),
        w_rel: rng.normal(0.0, std, size=(half, proj_dim)),
        w_inv: rng.normal(0.0, std, size=(half, proj_dim)),
    }


def disentangle(tape: Tape, x_ori: Node, mode: str = "split", conv_prefix: str = "det.disent") -> FeatureSplit:
    """Channel split (default) or the two-1x1-convolution ablation."""
    if mode == "split":
        x_rel, x_inv = ops.split_channels(x_ori)
    elif mode == "conv":
        x_rel = ops.conv1x1(x_ori, tape.param(f"{conv_prefix}.rel.w"))
        x_inv = ops.conv1x1(x_ori, tape.param(f"{conv_prefix}.inv.w"))
    else:
        raise ConfigurationError(f"unknown disentangle mode {mode!r}")
    return FeatureSplit(x_ori, x_rel, x_inv)


def _pooled(x: Node) -> Node:
    v = ops.global_avg_pool(x)
    return ops.reshape(v, (1, v.shape[0])) if v.ndim == 1 else v


def sifd_forward(tape: Tape, x_ori: Node, suffix: str = "", mode: str = "split",
                 conv_prefix: str = "det.disent") -> SIFDOutput:
    """Split ``x_ori`` and compute height logits and both projections.

    The head input is ``x_inv``; ``x_rel`` only reaches the height classifier
    and the correlation penalty.
    """
    if x_ori.ndim not in (3, 4):
        raise ContractError(f"expected a (C,H,W) or (N,C,H,W) map, got {x_ori.shape}")
    split = disentangle(tape, x_ori, mode, conv_prefix)
    w_h, w_rel, w_inv = (tape.param(n) for n in param_names(suffix))
    pr = _pooled(split.x_rel)
    pi = _pooled(split.x_inv)
    return SIFDOutput(
        split=split,
        head_input=split.x_inv,
        rel_logits=ops.matmul(pr, w_h),
        rel_proj=ops.matmul(pr, w_rel),
        inv_proj=ops.matmul(pi, w_inv),
    )


def scale_related_loss(rel_logits: Node, levels) -> Node:
    """Mean cross-entropy of the height-level classifier."""
    levels = np.asarray(levels, dtype=np.int64).reshape(-1)
    n, k = rel_logits.shape
    if levels.shape[0] != n:
        raise ContractError(f"{levels.shape[0]} height levels for a batch of {n}")
    if n < 1:
        raise ContractError("batch must contain at least one sample")
    if levels.min() < 0 or levels.max() >= k:
        raise DataError(f"height level outside [0, {k}): {levels.tolist()}")
    onehot = np.eye(k)[levels]
    return ops.neg(ops.mean(ops.sum(ops.log_softmax(rel_logits, axis=1) * onehot, axis=1)))


def pearson_correlation(a: Node, b: Node, eps: float = EPS) -> Node:
    """Population Pearson correlation of two length-N vectors.

    The denominator is ``sqrt(D(a) D(b) + eps**2)``, so a zero-variance input
    gives 0 while the value stays exactly affine-invariant at ordinary scales.
    """
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"expected two equal-length vectors, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise ContractError("correlation needs at least 2 samples")
    da = a - ops.mean(a)
    db = b - ops.mean(b)
    cov = ops.mean(da * db)
    var_prod = ops.mean(ops.square(da)) * ops.mean(ops.square(db))
    # Cauchy-Schwarz can fail by an ulp in floating point
    return ops.clip(cov / ops.sqrt(var_prod + eps * eps), -1.0, 1.0)


def disentangling_loss_raw(rel_proj: Node, inv_proj: Node) -> Node:
    """Squared correlation of the projections, averaged over projection dimensions."""
    if rel_proj.ndim == 1:
        rel_proj = ops.reshape(rel_proj, (-1, 1))
        inv_proj = ops.reshape(inv_proj, (-1, 1))
    if rel_proj.shape != inv_proj.shape:
        raise ContractError(f"projection shapes differ: {rel_proj.shape} vs {inv_proj.shape}")
    n, d = rel_proj.shape
    if n < 2:
        raise ContractError(f"disentangling loss needs a batch of at least 2, got {n}")
    total = None
    for j in range(d):
        cols = [ops.reshape(ops.matmul(p, rel_proj.tape.const(np.eye(d)[:, j:j + 1])), (n,))
                for p in (rel_proj, inv_proj)]
        r2 = ops.square(pearson_correlation(*cols))
        total = r2 if total is None else total + r2
    return total / float(d)
