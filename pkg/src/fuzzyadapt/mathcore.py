"""Numerically stable primitives: softmax, guarded log, simplex sampling, RNG.

Probability vectors are plain float64 arrays whose last axis runs over the
K classes. Batched inputs of shape (N, K) are accepted everywhere a single
vector of shape (K,) is.
"""

import numpy as np

from fuzzyadapt.errors import InvalidInputError

# Floor applied to every probability before a logarithm is taken.
EPS = 1e-12

# Tolerance on the simplex-sum invariant of a probability vector.
SUM_TOL = 1e-9


def make_rng(seed):
    """Seeded PCG64 stream; use ``rng.spawn`` to hand out independent children."""
    return np.random.Generator(np.random.PCG64(seed))


def as_logits(logits):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError(f"logits need at least 2 classes, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain NaN or Inf")
    return z


def check_probs(p, tol=SUM_TOL):
    """Validate and return ``p`` as a float64 array on the K-simplex."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 2:
        raise InvalidInputError(f"probability vector needs K >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("probabilities contain NaN or Inf")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise InvalidInputError("probabilities must sum to 1")
    return p


def floor_probs(p):
    """Clamp to the EPS floor and renormalise onto the simplex."""
    p = np.maximum(p, EPS)
    return p / p.sum(axis=-1, keepdims=True)


def logsumexp(z, axis=-1, keepdims=False):
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(logits):
    z = as_logits(logits)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return floor_probs(e / e.sum(axis=-1, keepdims=True))


def safe_log(p):
    """ln(max(p, EPS)) for p in [0, 1]."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(np.isnan(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise InvalidInputError("safe_log expects values in [0, 1]")
    out = np.log(np.maximum(arr, EPS))
    return float(out) if out.ndim == 0 else out


def sample_simplex(k, rng, size=None):
    """Uniform draw(s) from the (k-1)-simplex, i.e. Dirichlet(1, ..., 1).

    Samples are floored like model outputs, so they are valid probability
    vectors for the loss functions.
    """
    if int(k) != k or k < 2:
        raise InvalidInputError(f"k must be an integer >= 2, got {k}")
    shape = (int(k),) if size is None else (size, int(k))
    e = rng.standard_exponential(shape)
    return floor_probs(e / e.sum(axis=-1, keepdims=True))


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (k,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out
