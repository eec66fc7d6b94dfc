"""Fuzzy-aware loss, its components, and the comparison losses.

Every loss takes softmax outputs ``p`` (shape (K,) or (N, K)) and hard labels
``y`` (int or shape (N,)) and returns a :class:`LossEval` holding the loss
value and its gradient with respect to the *logits* that produced ``p``.
Single-vector inputs give a float value and a (K,) gradient; batched inputs
give per-sample values (N,) and gradients (N, K).

Gradients are obtained from dL/dp through the softmax Jacobian,
dL/dz_k = p_k * (g_k - sum_j p_j g_j). Cross entropy uses the p - q shortcut.

Losses that contain the coefficient lambda_i = p_i accept ``mode``:
``"through"`` differentiates through that coefficient (the true gradient of
the value), ``"constant"`` treats it as a stop-gradient constant.
"""

from dataclasses import dataclass

import numpy as np

from fuzzyadapt.errors import InvalidInputError
from fuzzyadapt.mathcore import EPS, as_logits, check_probs, one_hot, softmax

MODES = ("through", "constant")

DEFAULT_GAMMA = 1.0
DEFAULT_A = -4.0
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 1.0
DEFAULT_Q = 0.7


@dataclass(frozen=True)
class LossEval:
    value: object
    grad_logits: np.ndarray


def _prepare(p, y):
    p = check_probs(p)
    single = p.ndim == 1
    P = np.atleast_2d(p)
    if P.ndim != 2:
        raise InvalidInputError(f"expected (K,) or (N, K) probabilities, got {p.shape}")
    Y = np.atleast_1d(np.asarray(y))
    if not np.issubdtype(Y.dtype, np.integer):
        if not np.all(np.mod(Y, 1) == 0):
            raise InvalidInputError("labels must be integer class ids")
        Y = Y.astype(np.int64)
    if Y.shape != (P.shape[0],):
        raise InvalidInputError(f"{Y.shape[0]} labels for {P.shape[0]} probability vectors")
    K = P.shape[1]
    if np.any(Y < 0) or np.any(Y >= K):
        raise InvalidInputError(f"labels must lie in [0, {K})")
    return P, Y.astype(np.int64), single


def _log(P):
    return np.log(np.maximum(P, EPS))


def _chain(P, g):
    return P * (g - np.sum(P * g, axis=1, keepdims=True))


def _pack(value, grad, single):
    if single:
        return LossEval(float(value[0]), grad[0])
    return LossEval(value, grad)


def _check_mode(mode):
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")


def _check_weights(w, K):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (K,):
        raise InvalidInputError(f"need {K} class weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0.0):
        raise InvalidInputError("class weights must be finite and positive")
    return w


def _rows(Y):
    return np.arange(Y.shape[0]), Y


def ce_loss(p, y):
    P, Y, single = _prepare(p, y)
    rows = _rows(Y)
    value = -_log(P)[rows]
    grad = P - one_hot(Y, P.shape[1])
    return _pack(value, grad, single)


def weighted_fal_loss(p, y, w, mode="through"):
    """-sum_i w_i [(1 - p_i) q_i + p_i] log p_i."""
    _check_mode(mode)
    P, Y, single = _prepare(p, y)
    K = P.shape[1]
    w = _check_weights(w, K)
    logP = _log(P)
    Q = one_hot(Y, K)
    off = 1.0 - Q
    value = -np.sum(w * ((1.0 - P) * Q + P) * logP, axis=1)
    # the label coefficient (1 - p_y) + p_y is identically 1
    if mode == "through":
        g_off = -(logP + 1.0)
    else:
        g_off = -np.ones_like(P)
    g = w * (Q * (-1.0 / np.maximum(P, EPS)) + off * g_off)
    return _pack(value, _chain(P, g), single)


def fal_loss(p, y, mode="through"):
    """Fuzzy-aware loss -log p_y - sum_{i != y} p_i log p_i."""
    P, _, _ = _prepare(p, y)
    return weighted_fal_loss(p, y, np.ones(P.shape[1]), mode=mode)


def fuzzy_term(p, y, mode="through"):
    """Off-label entropy -sum_{i != y} p_i log p_i, bounded by (K - 1)/e."""
    _check_mode(mode)
    P, Y, single = _prepare(p, y)
    off = 1.0 - one_hot(Y, P.shape[1])
    logP = _log(P)
    value = -np.sum(off * P * logP, axis=1)
    g = off * (-(logP + 1.0) if mode == "through" else -1.0)
    return _pack(value, _chain(P, g), single)


def fal_term1(p, y, mode="through"):
    """-sum_i (1 - p_i) q_i log p_i; focal loss with gamma = 1."""
    _check_mode(mode)
    P, Y, single = _prepare(p, y)
    rows = _rows(Y)
    py = P[rows]
    log_py = _log(py)
    value = -(1.0 - py) * log_py
    g = np.zeros_like(P)
    if mode == "through":
        g[rows] = log_py - (1.0 - py) / np.maximum(py, EPS)
    else:
        g[rows] = -(1.0 - py) / np.maximum(py, EPS)
    return _pack(value, _chain(P, g), single)


def fal_term2(p, y, mode="through"):
    """Shannon entropy of p in nats. ``y`` is validated but does not enter."""
    _check_mode(mode)
    P, _, single = _prepare(p, y)
    logP = _log(P)
    value = -np.sum(P * logP, axis=1)
    # constant-lambda mode leaves sum_i p_i * (-1), whose logit gradient is zero
    g = -(logP + 1.0) if mode == "through" else -np.ones_like(P)
    return _pack(value, _chain(P, g), single)


def focal_loss(p, y, gamma=DEFAULT_GAMMA):
    if not np.isfinite(gamma) or gamma < 0:
        raise InvalidInputError(f"gamma must be >= 0, got {gamma}")
    P, Y, single = _prepare(p, y)
    rows = _rows(Y)
    py = P[rows]
    log_py = _log(py)
    mod = (1.0 - py) ** gamma
    value = -mod * log_py
    g = np.zeros_like(P)
    if gamma == 0:
        g[rows] = -1.0 / np.maximum(py, EPS)
    else:
        g[rows] = gamma * (1.0 - py) ** (gamma - 1.0) * log_py - mod / np.maximum(py, EPS)
    return _pack(value, _chain(P, g), single)


def rce_loss(p, y, A=DEFAULT_A):
    """Reverse cross entropy with log(0) replaced by ``A``: -A (1 - p_y)."""
    if not np.isfinite(A) or A >= 0:
        raise InvalidInputError(f"A must be negative, got {A}")
    P, Y, single = _prepare(p, y)
    off = 1.0 - one_hot(Y, P.shape[1])
    value = -A * np.sum(off * P, axis=1)
    g = -A * off
    return _pack(value, _chain(P, g), single)


def sce_loss(p, y, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA, A=DEFAULT_A):
    # alpha = 0 or beta = 0 degenerates to one of the parts; both are allowed
    if not (np.isfinite(alpha) and np.isfinite(beta)) or alpha < 0 or beta < 0 or alpha + beta == 0:
        raise InvalidInputError(f"alpha, beta must be nonnegative and not both 0, got {alpha}, {beta}")
    ce = ce_loss(p, y)
    rce = rce_loss(p, y, A)
    return LossEval(alpha * ce.value + beta * rce.value, alpha * ce.grad_logits + beta * rce.grad_logits)


def gce_loss(p, y, q=DEFAULT_Q):
    """Generalized cross entropy (1 - p_y^q) / q."""
    if not np.isfinite(q) or not 0 < q <= 1:
        raise InvalidInputError(f"q must lie in (0, 1], got {q}")
    P, Y, single = _prepare(p, y)
    rows = _rows(Y)
    py = P[rows]
    value = (1.0 - py**q) / q
    g = np.zeros_like(P)
    g[rows] = -(np.maximum(py, EPS) ** (q - 1.0))
    return _pack(value, _chain(P, g), single)


LOSSES = {
    "ce": ce_loss,
    "fal": fal_loss,
    "fal_term1": fal_term1,
    "fal_term2": fal_term2,
    "fuzzy_term": fuzzy_term,
    "weighted_fal": weighted_fal_loss,
    "focal": focal_loss,
    "rce": rce_loss,
    "sce": sce_loss,
    "gce": gce_loss,
}


def get_loss(name):
    try:
        return LOSSES[name]
    except KeyError:
        raise InvalidInputError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}") from None


def evaluate_loss(name, p, y, **params):
    return get_loss(name)(p, y, **params)


def grad_check(loss_id, logits, y, params=None, h=1e-5, floor=1e-3):
    """Worst relative error between analytic and central-difference logit gradients.

    Per coordinate the error is |analytic - numeric| / max(|analytic|, |numeric|, floor);
    ``floor`` keeps coordinates with near-zero gradient from amplifying round-off.
    Only meaningful for ``mode="through"`` (the default), since the constant
    mode is deliberately not the gradient of the value.
    """
    if not 0 < h <= 1e-2:
        raise InvalidInputError(f"step h must lie in (0, 1e-2], got {h}")
    params = dict(params or {})
    fn = get_loss(loss_id)
    z = as_logits(logits)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    Y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    analytic = np.atleast_2d(fn(softmax(Z), Y, **params).grad_logits)
    numeric = np.empty_like(Z)
    for k in range(Z.shape[1]):
        step = np.zeros_like(Z)
        step[:, k] = h
        plus = np.atleast_1d(fn(softmax(Z + step), Y, **params).value)
        minus = np.atleast_1d(fn(softmax(Z - step), Y, **params).value)
        numeric[:, k] = (plus - minus) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if single else err.max(axis=1)
