"""Sparse context transformer: contextual fields, attention focus, sparse
relations, gated aggregation and the shared target classifier.

Shapes used throughout:

* ``P``  prior-box scores, ``D_p x C_s``
* ``Q``  pooled prior-box scores, ``D_q x C_s``
* ``M``  multi-scale features aligned with ``Q``, ``D_q x D_f``
* ``A``, ``R``, gate: ``D_p x D_q``
* ``Y_hat`` target-class probabilities, ``D_p x C_t``
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numkit import (
    LinearMap,
    as_matrix,
    global_average_pool,
    grid_max_pool,
    linear_backward,
    linear_forward,
    masked_row_softmax,
    matmul,
    row_softmax,
    scalar_scale_add,
    soft_threshold,
)

FOCUS_MODES = ("attention", "gap")
EMBEDDINGS = ("psi_alpha", "psi_beta", "psi_gamma", "psi_rho", "psi_eta", "psi_xi")


@dataclass
class PriorScores:
    """Scores for every prior box plus the ``(k, m, h, w) -> row`` layout.

    Rows are ordered scale-major, then aspect ratio, then grid row, then
    grid column.
    """

    scores: np.ndarray
    grid_sizes: Tuple[int, ...]
    n_ratios: int

    def __post_init__(self):
        self.scores = as_matrix(self.scores, "scores")
        self.grid_sizes = tuple(int(g) for g in self.grid_sizes)
        if self.scores.shape[0] != prior_count(self.grid_sizes, self.n_ratios):
            raise ValueError(
                f"{self.scores.shape[0]} score rows but layout implies "
                f"{prior_count(self.grid_sizes, self.n_ratios)}")

    @property
    def offsets(self) -> List[int]:
        out, acc = [], 0
        for g in self.grid_sizes:
            out.append(acc)
            acc += self.n_ratios * g * g
        return out

    def row(self, k: int, m: int, h: int, w: int) -> int:
        g = self.grid_sizes[k]
        if not (0 <= m < self.n_ratios and 0 <= h < g and 0 <= w < g):
            raise IndexError((k, m, h, w))
        return self.offsets[k] + (m * g + h) * g + w

    def unravel(self, row: int) -> Tuple[int, int, int, int]:
        for k, (off, g) in enumerate(zip(self.offsets, self.grid_sizes)):
            size = self.n_ratios * g * g
            if off <= row < off + size:
                m, rem = divmod(row - off, g * g)
                h, w = divmod(rem, g)
                return k, m, h, w
        raise IndexError(row)

    def scale_grid(self, k: int) -> np.ndarray:
        """Scores of scale ``k`` as a ``(g, g, n_ratios * C_s)`` grid."""
        g = self.grid_sizes[k]
        block = self.scores[self.offsets[k]: self.offsets[k] + self.n_ratios * g * g]
        c = self.scores.shape[1]
        return block.reshape(self.n_ratios, g, g, c).transpose(1, 2, 0, 3).reshape(g, g, -1)


def prior_count(grid_sizes: Sequence[int], n_ratios: int) -> int:
    return int(n_ratios * sum(int(g) ** 2 for g in grid_sizes))


@dataclass
class ContextualFields:
    q: np.ndarray
    m: np.ndarray
    c: Optional[np.ndarray] = None
    # (kernel, scale, ratio, h, w) for every row, shared by q and m
    cells: List[Tuple[int, int, int, int, int]] = field(default_factory=list)

    @property
    def d_q(self) -> int:
        return self.q.shape[0]

    @property
    def d_f(self) -> int:
        return self.m.shape[1]


def _resample_weights(src: int, dst: int) -> np.ndarray:
    """Row-stochastic ``dst x src`` averaging matrix along one axis."""
    w = np.zeros((dst, src))
    if src >= dst:
        owner = np.floor((np.arange(src) + 0.5) * dst / src).astype(int)
        w[owner, np.arange(src)] = 1.0
    else:
        w[np.arange(dst), np.floor((np.arange(dst) + 0.5) * src / dst).astype(int)] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def resample_average(grid: np.ndarray, size: int) -> np.ndarray:
    """Average-resample a square ``(g, g, c)`` grid onto ``(size, size, c)``."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape[0] == size and grid.shape[1] == size:
        return grid.copy()
    wh = _resample_weights(grid.shape[0], size)
    ww = _resample_weights(grid.shape[1], size)
    return np.einsum("ia,abc,jb->ijc", wh, grid, ww)


def build_contextual_fields(prior: PriorScores, features: Sequence[np.ndarray],
                            kernels: Sequence[int] = (2,),
                            feature_scales: Optional[Sequence[int]] = None) -> ContextualFields:
    """Pool prior scores into ``Q`` and align multi-scale features into ``M``.

    For every pooling kernel and every scale, the score grid of each aspect
    ratio is max-pooled (scales smaller than the kernel pass through
    unpooled). The selected feature grids are average-resampled onto that
    pooled grid and channel-concatenated, so row ``i`` of ``Q`` and ``M``
    describe the same spatial cell.
    """
    if not features:
        raise ValueError("features must be a nonempty list of grids")
    if len(features) != len(prior.grid_sizes):
        raise ValueError("need one feature grid per prior-box scale")
    if feature_scales is None:
        feature_scales = tuple(range(min(4, len(features))))
    feats = [np.asarray(features[j], dtype=np.float64) for j in feature_scales]
    c_s = prior.scores.shape[1]
    q_rows, m_rows, cells = [], [], []
    for kernel in kernels:
        for k, g in enumerate(prior.grid_sizes):
            grid = prior.scale_grid(k)
            pooled = grid if g < kernel else grid_max_pool(grid, kernel)
            t = pooled.shape[0]
            pooled = pooled.reshape(t, t, prior.n_ratios, c_s)
            mgrid = np.concatenate([resample_average(f, t) for f in feats], axis=2)
            for m in range(prior.n_ratios):
                q_rows.append(pooled[:, :, m, :].reshape(t * t, c_s))
                m_rows.append(mgrid.reshape(t * t, -1))
                cells.extend((kernel, k, m, h, w) for h in range(t) for w in range(t))
    q = np.concatenate(q_rows, axis=0)
    m = np.concatenate(m_rows, axis=0)
    return ContextualFields(q=q, m=m, cells=cells)


@dataclass
class SctParams:
    psi_alpha: LinearMap
    psi_beta: LinearMap
    psi_gamma: LinearMap
    psi_rho: LinearMap
    psi_eta: LinearMap
    psi_xi: LinearMap
    theta: np.ndarray
    lam: float = 0.6
    tau: Optional[float] = None  # None means 1 / D_q
    focus: str = "attention"
    kernels: Tuple[int, ...] = (2,)
    feature_scales: Optional[Tuple[int, ...]] = None
    # average instead of sum inside the attention focus products
    focus_norm: bool = True

    def __post_init__(self):
        self.theta = as_matrix(self.theta, "theta")
        self.kernels = tuple(int(k) for k in self.kernels)
        if self.feature_scales is not None:
            self.feature_scales = tuple(int(k) for k in self.feature_scales)
        if not self.kernels or any(k < 1 for k in self.kernels):
            raise ValueError("pooling kernels must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.tau is not None and self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.focus not in FOCUS_MODES:
            raise ValueError(f"focus must be one of {FOCUS_MODES}")
        d_f, c_s = self.psi_alpha.in_dim, self.psi_beta.out_dim
        expected = {
            "psi_alpha": (d_f, d_f), "psi_beta": (d_f, c_s), "psi_gamma": (c_s, c_s),
            "psi_rho": (c_s, c_s), "psi_eta": (c_s, c_s), "psi_xi": (c_s, c_s),
        }
        for name, shape in expected.items():
            layer = getattr(self, name)
            if (layer.in_dim, layer.out_dim) != shape:
                raise ValueError(f"{name} has shape {(layer.in_dim, layer.out_dim)}, expected {shape}")
        if self.theta.shape[0] != c_s:
            raise ValueError("theta must have C_s rows")

    @classmethod
    def init(cls, d_f: int, c_s: int, c_t: int, rng: np.random.Generator,
             lam: float = 0.6, tau: Optional[float] = None, focus: str = "attention",
             kernels: Sequence[int] = (2,), feature_scales: Optional[Sequence[int]] = None,
             focus_norm: bool = True) -> "SctParams":
        bound = 1.0 / np.sqrt(c_s)
        return cls(
            psi_alpha=LinearMap.init(d_f, d_f, rng),
            psi_beta=LinearMap.init(d_f, c_s, rng, residual=False),
            psi_gamma=LinearMap.init(c_s, c_s, rng),
            psi_rho=LinearMap.init(c_s, c_s, rng),
            psi_eta=LinearMap.init(c_s, c_s, rng),
            psi_xi=LinearMap.init(c_s, c_s, rng, residual=False, zero=True),
            theta=rng.uniform(-bound, bound, size=(c_s, c_t)),
            lam=lam, tau=tau, focus=focus, kernels=tuple(kernels),
            feature_scales=None if feature_scales is None else tuple(feature_scales),
            focus_norm=focus_norm,
        )

    @property
    def d_f(self) -> int:
        return self.psi_alpha.in_dim

    @property
    def c_s(self) -> int:
        return self.theta.shape[0]

    @property
    def c_t(self) -> int:
        return self.theta.shape[1]

    def effective_tau(self, d_q: int) -> float:
        return 1.0 / d_q if self.tau is None else float(self.tau)

    def arrays(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name; these are the live objects, not copies."""
        out = {}
        for name in EMBEDDINGS:
            layer = getattr(self, name)
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        out["theta"] = self.theta
        return out

    def copy(self) -> "SctParams":
        return SctParams(*(getattr(self, n).copy() for n in EMBEDDINGS), self.theta.copy(),
                         lam=self.lam, tau=self.tau, focus=self.focus, kernels=self.kernels,
                         feature_scales=self.feature_scales, focus_norm=self.focus_norm)

    def hyperparams(self) -> dict:
        return {"lam": self.lam, "tau": self.tau, "focus": self.focus,
                "kernels": list(self.kernels),
                "feature_scales": None if self.feature_scales is None else list(self.feature_scales),
                "focus_norm": self.focus_norm}


@dataclass
class SctTrace:
    p: np.ndarray
    q: np.ndarray
    m: np.ndarray
    focus_in: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    a_m: np.ndarray
    m_star: np.ndarray
    c: np.ndarray
    g: np.ndarray
    rho: np.ndarray
    a: np.ndarray
    r: np.ndarray
    gate: np.ndarray
    e: np.ndarray
    w: np.ndarray
    p_hat: np.ndarray
    y_hat: np.ndarray
    tau: float
    lam: float
    focus: str
    n_fallback_rows: int


def attention_focus(m, params: SctParams):
    """Return ``(M*, A_M)`` with ``A_M = psi_alpha(X)^T psi_beta(X)``, ``M* = M A_M``.

    ``X`` is ``M`` itself, or its global average (a ``1 x D_f`` row) when
    ``params.focus == "gap"``. With ``params.focus_norm`` the first product
    is divided by the row count of ``X`` and the second by ``D_f``, which
    keeps ``M*`` on the scale of ``Q`` regardless of ``D_q`` and ``D_f``.
    """
    m_star, a_m, _, _, _ = _attention_focus(as_matrix(m), params)
    return m_star, a_m


def _attention_focus(m, params):
    if m.shape[1] != params.d_f:
        raise ValueError(f"M has {m.shape[1]} columns, expected D_f={params.d_f}")
    x = global_average_pool(m) if params.focus == "gap" else m
    alpha = linear_forward(params.psi_alpha, x)
    beta = linear_forward(params.psi_beta, x)
    s_a, s_m = _focus_scales(x, params)
    a_m = matmul(alpha.T, beta) * s_a
    return matmul(m, a_m) * s_m, a_m, x, alpha, beta


def _focus_scales(x, params):
    if not params.focus_norm:
        return 1.0, 1.0
    return 1.0 / x.shape[0], 1.0 / params.d_f


def fuse_context(fields: ContextualFields, m_star, lam: float) -> np.ndarray:
    """``C = lam * M* + Q``; also stored on ``fields``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    fields.c = scalar_scale_add(lam, m_star, fields.q)
    return fields.c


def relation_matrix(p, c, params: SctParams) -> np.ndarray:
    return _relation(as_matrix(p), as_matrix(c), params)[0]


def _relation(p, c, params):
    if p.shape[1] != c.shape[1]:
        raise ValueError("P and C need the same number of columns")
    g = linear_forward(params.psi_gamma, p)
    rho = linear_forward(params.psi_rho, c)
    a = row_softmax(matmul(g, rho.T) / np.sqrt(p.shape[1]))
    return a, g, rho


def sparsify(a, tau: float) -> np.ndarray:
    """Soft-threshold the relation matrix; weak relations become exactly 0."""
    return soft_threshold(a, tau)


def aggregate(r, c, params: SctParams):
    """Return ``(W, gate)``: masked softmax over surviving relations, mixed with ``psi_eta(C)``."""
    r = as_matrix(r)
    c = as_matrix(c)
    if r.shape[1] != c.shape[0]:
        raise ValueError("R columns must match C rows")
    gate = masked_row_softmax(r, r > 0)
    e = linear_forward(params.psi_eta, c)
    return matmul(gate, e), gate


def enhance(p, w, params: SctParams) -> np.ndarray:
    p = as_matrix(p)
    w = as_matrix(w)
    if p.shape != w.shape:
        raise ValueError("P and W shapes differ")
    return p + linear_forward(params.psi_xi, w)


def classify(p_hat, theta) -> np.ndarray:
    return row_softmax(matmul(p_hat, theta))


def sct_forward(p, fields: ContextualFields, params: SctParams) -> Tuple[np.ndarray, SctTrace]:
    """Run the full transformer on one image; returns ``(Y_hat, trace)``."""
    p = as_matrix(p, "P")
    q = as_matrix(fields.q, "Q")
    m = as_matrix(fields.m, "M")
    if q.shape[0] != m.shape[0]:
        raise ValueError("Q and M row counts differ")
    if p.shape[1] != params.c_s or q.shape[1] != params.c_s:
        raise ValueError("P and Q need C_s columns")
    m_star, a_m, x, alpha, beta = _attention_focus(m, params)
    c = fuse_context(fields, m_star, params.lam)
    a, g, rho = _relation(p, c, params)
    tau = params.effective_tau(q.shape[0])
    r = sparsify(a, tau)
    gate = masked_row_softmax(r, r > 0)
    n_fallback = int(np.sum(~(r > 0).any(axis=1)))
    e = linear_forward(params.psi_eta, c)
    w = matmul(gate, e)
    p_hat = enhance(p, w, params)
    y_hat = classify(p_hat, params.theta)
    trace = SctTrace(p=p, q=q, m=m, focus_in=x, alpha=alpha, beta=beta, a_m=a_m, m_star=m_star,
                     c=c, g=g, rho=rho, a=a, r=r, gate=gate, e=e, w=w, p_hat=p_hat, y_hat=y_hat,
                     tau=tau, lam=params.lam, focus=params.focus, n_fallback_rows=n_fallback)
    return y_hat, trace


def _softmax_backward(y, dy):
    return y * (dy - np.sum(dy * y, axis=1, keepdims=True))


def sct_backward(trace: SctTrace, upstream, params: SctParams,
                 wrt: str = "probs") -> Dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. ``Y_hat``.

    With ``wrt="logits"`` the upstream gradient is taken w.r.t. ``P_hat Theta``
    instead (useful when the loss is cross-entropy). Returns gradients for
    every entry of :meth:`SctParams.arrays` plus ``"p"``, ``"q"`` and ``"m"``.
    ``lam`` and ``tau`` are hyperparameters and get no gradient.
    """
    up = as_matrix(upstream, "upstream")
    if up.shape != trace.y_hat.shape:
        raise ValueError(f"upstream shape {up.shape} does not match trace {trace.y_hat.shape}")
    grads: Dict[str, np.ndarray] = {}
    dz = _softmax_backward(trace.y_hat, up) if wrt == "probs" else up

    grads["theta"] = trace.p_hat.T @ dz
    dp_hat = dz @ params.theta.T
    dp = dp_hat.copy()
    dw, grads["psi_xi.weight"], grads["psi_xi.bias"] = linear_backward(params.psi_xi, trace.w, dp_hat)

    dgate = dw @ trace.e.T
    de = trace.gate.T @ dw
    mask = trace.r > 0
    dr = np.where(mask, _softmax_backward(trace.gate, np.where(mask, dgate, 0.0)), 0.0)
    da = dr  # subgradient of the soft threshold: 1 on the surviving support, 0 elsewhere
    dlogits = _softmax_backward(trace.a, da) / np.sqrt(trace.p.shape[1])
    dg = dlogits @ trace.rho
    drho = dlogits.T @ trace.g

    dp_g, grads["psi_gamma.weight"], grads["psi_gamma.bias"] = linear_backward(params.psi_gamma, trace.p, dg)
    dp += dp_g
    dc_rho, grads["psi_rho.weight"], grads["psi_rho.bias"] = linear_backward(params.psi_rho, trace.c, drho)
    dc_eta, grads["psi_eta.weight"], grads["psi_eta.bias"] = linear_backward(params.psi_eta, trace.c, de)
    dc = dc_rho + dc_eta

    s_a, s_m = _focus_scales(trace.focus_in, params)
    dm_star = trace.lam * s_m * dc
    da_m = trace.m.T @ dm_star
    dm = dm_star @ trace.a_m.T
    dalpha = s_a * (trace.beta @ da_m.T)
    dbeta = s_a * (trace.alpha @ da_m)
    dx_a, grads["psi_alpha.weight"], grads["psi_alpha.bias"] = linear_backward(params.psi_alpha, trace.focus_in, dalpha)
    dx_b, grads["psi_beta.weight"], grads["psi_beta.bias"] = linear_backward(params.psi_beta, trace.focus_in, dbeta)
    dx = dx_a + dx_b
    if trace.focus == "gap":
        dm = dm + np.repeat(dx / trace.m.shape[0], trace.m.shape[0], axis=0)
    else:
        dm = dm + dx

    grads["p"] = dp
    grads["q"] = dc
    grads["m"] = dm
    return grads
