"""Central finite-difference checking of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, NumericError
from .tape import Node, Tape, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    checked: int
    worst: tuple[str, tuple] | None = None
    # coordinates whose +-h interval crosses a relu/max breakpoint
    excluded: list[tuple[str, tuple]] = field(default_factory=list)


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _evaluate(f, params, trainable=None):
    tape = Tape(params, trainable)
    loss = f(tape)
    if not isinstance(loss, Node):
        raise ContractError("gradient-checked program must return a tape node")
    return tape, loss


def _same_pattern(k1, k2):
    return len(k1) == len(k2) and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(k1, k2))


def check_gradients(f: Callable[[Tape], Node], params: Mapping[str, np.ndarray], h: float = 1e-5,
                    tol: float = 1e-4, names=None) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` receives a fresh tape holding ``params`` and returns a scalar node.
    Coordinates where the activation pattern of any piecewise op differs between
    ``p - h``, ``p`` and ``p + h`` sit within the 2h dead-zone of a kink and are
    reported in ``excluded`` rather than compared.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step h must lie in [1e-7, 1e-3], got {h}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    names = list(base) if names is None else list(names)

    tape, loss = _evaluate(f, base)
    if not np.isfinite(loss.value):
        raise NumericError(f"program value is not finite at the base point: {loss.value}")
    analytic = backward(tape, loss)
    base_kinks = tape.kinks

    worst_err, worst, checked, excluded = 0.0, None, 0, []
    for name in names:
        p = base[name]
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            tp, lp = _evaluate(f, base)
            p[idx] = orig - h
            tm, lm = _evaluate(f, base)
            p[idx] = orig
            fp, fm = float(lp.value), float(lm.value)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite program value perturbing {name}{list(idx)}")
            if not (_same_pattern(tp.kinks, base_kinks) and _same_pattern(tm.kinks, base_kinks)):
                excluded.append((name, idx))
                continue
            numeric = (fp - fm) / (2.0 * h)
            err = float(relative_error(analytic[name][idx], numeric))
            checked += 1
            if err > worst_err or worst is None:
                worst_err, worst = max(err, worst_err), (name, idx)
    return GradCheckReport(worst_err, worst_err <= tol, tol, checked, worst, excluded)
