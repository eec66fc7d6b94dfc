"""Class-dependent label noise and brute-force checks of the noisy-risk bound.

A noise matrix ``eta`` is K x K and row-stochastic: ``eta[y, i]`` is the
probability that a sample of true class ``y`` carries label ``i``; the
diagonal holds ``1 - eta_y``.

The risk of the fuzzy term decouples over samples when the classifier may
output any point of the simplex for each sample, so the global minimisers of
the clean and the noisy risk are found exactly (up to grid resolution) by a
per-sample search over a regular simplex grid.
"""

import itertools
import logging
from dataclasses import asdict, dataclass

import numpy as np

from fuzzyadapt.errors import AssumptionViolatedError, InvalidInputError, ResolutionError
from fuzzyadapt.losses import get_loss
from fuzzyadapt.mathcore import check_probs, floor_probs

log = logging.getLogger(__name__)

CERTIFY_TOL = 1e-3


def check_noise_matrix(eta):
    eta = np.asarray(eta, dtype=np.float64)
    if eta.ndim != 2 or eta.shape[0] != eta.shape[1] or eta.shape[0] < 2:
        raise InvalidInputError(f"noise matrix must be K x K with K >= 2, got shape {eta.shape}")
    if np.any(~np.isfinite(eta)) or np.any(eta < 0) or np.any(eta > 1):
        raise InvalidInputError("noise matrix entries must lie in [0, 1]")
    if np.any(np.abs(eta.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidInputError("noise matrix rows must sum to 1")
    return eta


def symmetric_noise(k, rate):
    """Flip to each other class with probability rate / (k - 1)."""
    eta = np.full((k, k), rate / (k - 1))
    np.fill_diagonal(eta, 1.0 - rate)
    return eta


def noise_rates(eta):
    """Per-class total flip probability eta_y = 1 - eta[y, y]."""
    return 1.0 - np.diag(check_noise_matrix(eta))


def check_clean_dominant(eta):
    """True iff eta[y, i] < 1 - eta_y for every y and every i != y."""
    eta = check_noise_matrix(eta)
    diag = np.diag(eta)
    off = eta.copy()
    np.fill_diagonal(off, -np.inf)
    return bool(np.all(off < diag[:, None]))


def random_clean_dominant(k, rng, max_rate=0.6):
    """Random clean-labels-dominant noise matrix with per-class flip rates up to ``max_rate``."""
    while True:
        rates = rng.uniform(0.0, max_rate, size=k)
        eta = np.zeros((k, k))
        for y in range(k):
            split = rng.dirichlet(np.ones(k - 1))
            eta[y, np.arange(k) != y] = rates[y] * split
            eta[y, y] = 1.0 - rates[y]
        if check_clean_dominant(eta):
            return eta


def corrupt_labels(labels, eta, rng):
    """Draw a noisy label for each true label from row ``eta[y]``."""
    eta = check_noise_matrix(eta)
    labels = np.asarray(labels, dtype=np.int64)
    k = eta.shape[0]
    if np.any(labels < 0) or np.any(labels >= k):
        raise InvalidInputError(f"labels must lie in [0, {k})")
    cdf = np.cumsum(eta, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(labels.shape[0])
    noisy = (u[:, None] >= cdf[labels]).sum(axis=1)
    return noisy.astype(np.int64)


def risk_gap_bound(eta, class_prior, k=None, strict=True):
    """C_K = K (K - 1) / e * sum_y prior_y (1 - eta_y).

    With ``strict`` a non-clean-dominant matrix raises; otherwise the value is
    returned together with a warning flag as ``(value, clean_dominant)``.
    """
    eta = check_noise_matrix(eta)
    k = eta.shape[0] if k is None else k
    if k != eta.shape[0]:
        raise InvalidInputError(f"k={k} does not match a {eta.shape[0]}-class noise matrix")
    prior = check_probs(class_prior)
    if prior.shape != (k,):
        raise InvalidInputError("class prior length must equal K")
    value = float(k * (k - 1) * np.exp(-1.0) * np.dot(prior, np.diag(eta)))
    dominant = check_clean_dominant(eta)
    if strict:
        if not dominant:
            raise AssumptionViolatedError("noise matrix is not clean-labels-dominant")
        return value
    if not dominant:
        log.warning("bound computed for a noise matrix that is not clean-labels-dominant")
    return value, dominant


def simplex_grid(k, resolution):
    """All points of the K-simplex with coordinates in {0, 1/(r-1), ..., 1}."""
    if resolution < 2:
        raise InvalidInputError("resolution must be at least 2")
    n = resolution - 1
    # stars and bars: choose k-1 bar positions among n + k - 1 slots
    pts = []
    for bars in itertools.combinations(range(n + k - 1), k - 1):
        edges = (-1, *bars, n + k - 1)
        pts.append([edges[j + 1] - edges[j] - 1 for j in range(k)])
    return np.asarray(pts, dtype=np.float64) / n


def _loss_table(grid, loss_id, loss_params):
    """L[g, i] = loss(grid point g, label i), evaluated on floored outputs."""
    fn = get_loss(loss_id)
    P = floor_probs(grid)
    k = grid.shape[1]
    return np.stack([np.asarray(fn(P, np.full(len(P), i), **loss_params).value) for i in range(k)], axis=1)


def empirical_risk(outputs, labels, eta=None, loss_id="fuzzy_term", loss_params=None):
    """Mean loss of a table of outputs; with ``eta`` the label is averaged analytically.

    The noisy version is sum_i eta[y, i] * loss(f(x), i) per sample.
    """
    P = check_probs(np.atleast_2d(outputs))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (P.shape[0],):
        raise InvalidInputError("need one label per output row")
    fn = get_loss(loss_id)
    params = dict(loss_params or {})
    if eta is None:
        return float(np.mean(fn(P, labels, **params).value))
    eta = check_noise_matrix(eta)
    if eta.shape[0] != P.shape[1]:
        raise InvalidInputError("noise matrix size does not match the class count")
    per = np.zeros(P.shape[0])
    for i in range(P.shape[1]):
        per += eta[labels, i] * np.asarray(fn(P, np.full(P.shape[0], i), **params).value)
    return float(np.mean(per))


@dataclass
class RiskGapReport:
    k: int
    n_samples: int
    loss_id: str
    resolution: int
    risk_noisy_at_clean_opt: float
    risk_noisy_at_noisy_opt: float
    gap: float
    bound: float
    within_bound: bool
    clean_dominant: bool

    def as_dict(self):
        return asdict(self)


def _minimisers(grid, table, labels, eta):
    """Per-class clean and noisy minimising grid indices.

    Ties in the clean risk go to the point putting the most mass on the true
    class, so the clean optimum predicts the true label whenever it can.
    """
    k = grid.shape[1]
    clean_idx = np.empty(k, dtype=np.int64)
    noisy_idx = np.empty(k, dtype=np.int64)
    noisy_table = table @ eta.T  # [g, y] = sum_i eta[y, i] L[g, i]
    for y in range(k):
        col = table[:, y]
        ties = np.flatnonzero(col <= col.min() + 1e-12)
        clean_idx[y] = ties[np.argmax(grid[ties, y])]
        noisy_idx[y] = int(np.argmin(noisy_table[:, y]))
    return clean_idx, noisy_idx, noisy_table


def _risks(grid, table, labels, eta):
    clean_idx, noisy_idx, noisy_table = _minimisers(grid, table, labels, eta)
    r_clean_opt = float(np.mean(noisy_table[clean_idx[labels], labels]))
    r_noisy_opt = float(np.mean(noisy_table[noisy_idx[labels], labels]))
    return clean_idx, noisy_idx, r_clean_opt, r_noisy_opt


def bruteforce_risk_minimizer(
    labels, eta, loss_id="fuzzy_term", grid_resolution=21, class_prior=None, certify=True, loss_params=None
):
    """Exact global minimisers of the clean and noisy risk over a simplex grid.

    Returns ``(f_star, f_tilde, report)`` where the first two are (N, K)
    output tables (floored grid points). With ``certify`` the search is
    repeated at resolution 2r - 1 (a refinement of the same grid) and a
    ResolutionError is raised if either risk moves by more than 1e-3.
    """
    eta = check_noise_matrix(eta)
    k = eta.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise InvalidInputError("need a nonempty 1-D label array")
    if labels.size > 200 or k > 4:
        raise InvalidInputError("brute force is limited to 200 samples and K <= 4")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InvalidInputError(f"labels must lie in [0, {k})")
    if grid_resolution < 21:
        raise InvalidInputError("grid_resolution must be at least 21")
    params = dict(loss_params or {})

    grid = simplex_grid(k, grid_resolution)
    table = _loss_table(grid, loss_id, params)
    clean_idx, noisy_idx, r_clean, r_noisy = _risks(grid, table, labels, eta)

    if certify:
        fine = simplex_grid(k, 2 * grid_resolution - 1)
        _, _, r_clean2, r_noisy2 = _risks(fine, _loss_table(fine, loss_id, params), labels, eta)
        moved = max(abs(r_clean2 - r_clean), abs(r_noisy2 - r_noisy))
        if moved >= CERTIFY_TOL:
            raise ResolutionError(f"risks moved by {moved:.3g} on grid refinement; increase grid_resolution")

    if class_prior is None:
        class_prior = np.bincount(labels, minlength=k) / labels.size
    bound, dominant = risk_gap_bound(eta, class_prior, k, strict=False)
    gap = r_clean - r_noisy
    report = RiskGapReport(
        k=k,
        n_samples=int(labels.size),
        loss_id=loss_id,
        resolution=grid_resolution,
        risk_noisy_at_clean_opt=r_clean,
        risk_noisy_at_noisy_opt=r_noisy,
        gap=gap,
        bound=bound,
        within_bound=bool(-1e-9 <= gap <= bound),
        clean_dominant=dominant,
    )
    f_star = floor_probs(grid[clean_idx[labels]])
    f_tilde = floor_probs(grid[noisy_idx[labels]])
    return f_star, f_tilde, report


def risk_gap_sweep(n_matrices, ks, rng, n_samples=100, grid_resolution=21, loss_id="fuzzy_term", max_rate=0.6):
    """Risk-gap bound check over random clean-dominant matrices, cycling through ``ks``."""
    reports = []
    for m in range(n_matrices):
        k = ks[m % len(ks)]
        eta = random_clean_dominant(k, rng, max_rate=max_rate)
        labels = rng.integers(0, k, size=n_samples)
        _, _, rep = bruteforce_risk_minimizer(labels, eta, loss_id, grid_resolution)
        reports.append((eta, rep))
    return reports


def diagonal_dominance(confusion):
    """Row-wise check that the diagonal entry beats every off-diagonal entry.

    Returns a boolean per row; rows without samples count as not dominant.
    """
    C = np.asarray(confusion, dtype=np.float64)
    off = C.copy()
    np.fill_diagonal(off, -np.inf)
    return (np.diag(C) > off.max(axis=1)) & (C.sum(axis=1) > 0)
