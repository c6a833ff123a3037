"""Finite-difference verification of the hand-written backward passes."""
from __future__ import annotations

from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .detector.loss import multibox_loss
from .numkit import max_relative_error
from .sct import ContextualFields, SctParams, sct_backward, sct_forward


class Shapes(NamedTuple):
    d_p: int = 24
    d_q: int = 6
    d_f: int = 8
    c_s: int = 5
    c_t: int = 3


SMALL_SHAPES = Shapes()
# desk detector: 255 priors, 66 contextual fields, 4 scales x 16 channels
DESK_SHAPES = Shapes(255, 66, 64, 9, 3)


class BlockReport(NamedTuple):
    error: float
    skipped: int   # coordinates whose perturbation changed the sparsity pattern


def _block_errors(arrays: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray],
                  loss: Callable[[], Tuple[float, bytes]], epsilon: float) -> Dict[str, BlockReport]:
    """Central differences per coordinate, skipping coordinates that leave the current piece.

    ``loss`` returns the value and a signature of its active piece (the
    relation support). The map is only piecewise smooth, so a difference
    quotient that straddles a support change does not estimate the gradient.
    Skipped coordinates are compared as zero error and counted.
    """
    _, base = loss()
    out = {}
    for name, arr in arrays.items():
        numeric = np.array(analytic[name], dtype=np.float64, copy=True)
        flat, num = arr.reshape(-1), numeric.reshape(-1)
        skipped = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi, sig_hi = loss()
            flat[i] = orig - epsilon
            lo, sig_lo = loss()
            flat[i] = orig
            if sig_hi != base or sig_lo != base:
                skipped += 1
                continue
            num[i] = (hi - lo) / (2.0 * epsilon)
        out[name] = BlockReport(max_relative_error(analytic[name], numeric), skipped)
    return out


def check_sct(seed: int, shapes: Shapes = SMALL_SHAPES, focus: str = "attention",
              tau: Optional[float] = None, epsilon: float = 1e-4) -> Dict[str, BlockReport]:
    """Max relative error per parameter block for a random linear functional of ``Y_hat``.

    ``psi_xi`` gets random weights so that every upstream block receives a
    nonzero gradient.
    """
    rng = np.random.default_rng(seed)
    d_p, d_q, d_f, c_s, c_t = shapes
    params = SctParams.init(d_f, c_s, c_t, rng, tau=tau, focus=focus)
    params.psi_xi.weight[...] = rng.normal(scale=0.3, size=(c_s, c_s))
    params.psi_xi.bias[...] = rng.normal(scale=0.1, size=c_s)
    p = rng.normal(size=(d_p, c_s))
    q = rng.normal(size=(d_q, c_s))
    m = rng.normal(scale=0.3, size=(d_q, d_f))
    weights = rng.normal(size=(d_p, c_t))

    def loss():
        y, trace = sct_forward(p, ContextualFields(q=q, m=m), params)
        return float(np.sum(weights * y)), np.packbits(trace.r > 0).tobytes()

    _, trace = sct_forward(p, ContextualFields(q=q, m=m), params)
    analytic = sct_backward(trace, weights, params)
    arrays = dict(params.arrays())
    arrays.update(p=p, q=q, m=m)
    return _block_errors(arrays, analytic, loss, epsilon)


def check_multibox(seed: int, d_p: int = 24, n_classes: int = 5, batch: int = 2,
                   epsilon: float = 1e-4) -> Dict[str, BlockReport]:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(batch, d_p, n_classes + 1))
    deltas = rng.normal(size=(batch, d_p, 4))
    labels = np.where(rng.random((batch, d_p)) < 0.2, rng.integers(0, n_classes, (batch, d_p)), -1)
    targets = rng.normal(size=(batch, d_p, 4))
    res = multibox_loss(logits, deltas, labels, targets)

    def loss():
        return multibox_loss(logits, deltas, labels, targets).loss, b""

    return _block_errors({"logits": logits, "deltas": deltas},
                         {"logits": res.dlogits, "deltas": res.ddeltas}, loss, epsilon)


def run_suite(seeds: Sequence[int], shapes: Shapes = SMALL_SHAPES,
              focus_modes: Sequence[str] = ("attention", "gap"), epsilon: float = 1e-4) -> Dict[str, BlockReport]:
    """Worst error and total skips per block over all seeds.

    Keys are ``"sct/<focus>/<block>"`` and ``"multibox/<block>"``.
    """
    worst: Dict[str, BlockReport] = {}

    def update(prefix, errs):
        for name, rep in errs.items():
            key = f"{prefix}/{name}"
            old = worst.get(key, BlockReport(0.0, 0))
            worst[key] = BlockReport(max(old.error, rep.error), old.skipped + rep.skipped)

    for seed in seeds:
        for focus in focus_modes:
            update(f"sct/{focus}", check_sct(seed, shapes, focus, epsilon=epsilon))
        update("multibox", check_multibox(seed, shapes.d_p, shapes.c_s, epsilon=epsilon))
    return worst
