"""Root-finding for estimating equations.

Damped Newton iteration on ``g(beta) = 0`` with a residual-norm line
search, plus the explicit weighted least-squares solution available for
the identity link with fixed proxy correlations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import linalg
from .estimating import EstimatingFunction, corr_trajectory, eval_g, jacobian
from .exceptions import (
    InvalidInputError,
    SingularDesignError,
    SingularJacobianError,
)
from .model import Dataset, Parameter, as_beta, get_link


@dataclass(frozen=True)
class SolverConfig:
    """Newton solver knobs; defaults suit the simulated scenarios."""

    tol_g: float = 1e-10
    tol_x: float = 1e-12
    max_iter: int = 100
    max_halvings: int = 30
    jacobian_method: Optional[str] = None  # None picks analytic when available
    outer_stages: int = 2  # proxy refresh passes for data-dependent proxies

    def __post_init__(self):
        if self.tol_g <= 0 or self.tol_x <= 0:
            raise InvalidInputError("tolerances must be positive")
        if self.max_iter < 1 or self.max_halvings < 0 or self.outer_stages < 1:
            raise InvalidInputError("iteration limits must be positive")


@dataclass(frozen=True)
class GeeFit:
    """Solver output: the root estimate and its convergence record."""

    beta_hat: np.ndarray
    converged: bool
    iterations: int
    final_residual_norm: float
    trace: tuple  # (beta, ||g||_inf, step norm) per accepted iterate


def default_init(dataset: Dataset, link) -> np.ndarray:
    """Least squares on link-inverted responses, else the zero vector.

    Rows whose response lies outside the link range are dropped; if fewer
    than p usable rows remain (or the reduced design is rank deficient)
    the zero vector is returned.
    """
    lk = get_link(link)
    ys = np.concatenate([c.response for c in dataset.clusters])
    xs = np.vstack([c.regressors for c in dataset.clusters])
    z = lk.inverse(ys)
    ok = np.isfinite(z)
    p = dataset.p
    if ok.sum() < p:
        return np.zeros(p)
    xs_ok, z_ok = xs[ok], z[ok]
    sol, _, rank, _ = np.linalg.lstsq(xs_ok, z_ok, rcond=None)
    if rank < p or not np.all(np.isfinite(sol)):
        return np.zeros(p)
    return sol


def _newton(dataset, kind, link, config, init, frozen_corr, region):
    beta = init.copy()
    g = eval_g(kind, dataset, beta, link, frozen_corr=frozen_corr)
    gnorm = float(np.max(np.abs(g)))
    last_step = 0.0
    trace = [(beta.copy(), gnorm, 0.0)]
    iterations = 0
    converged = False
    for _ in range(config.max_iter):
        if gnorm < config.tol_g and last_step < config.tol_x:
            converged = True
            break
        d = _newton_direction(kind, dataset, beta, link, config, frozen_corr, g)
        if gnorm < config.tol_g and float(np.linalg.norm(d)) < config.tol_x:
            converged = True
            break
        t = 1.0
        accepted = None
        for _ in range(config.max_halvings + 1):
            candidate = beta + t * d
            if region is not None:
                candidate = _clip_to_region(candidate, region)
            g_try = eval_g(kind, dataset, candidate, link, frozen_corr=frozen_corr)
            gn_try = float(np.max(np.abs(g_try)))
            if gn_try < gnorm:
                accepted = (candidate, g_try, gn_try)
                break
            t *= 0.5
        if accepted is None:
            break  # stalled: no step decreases the residual
        new_beta, g, gnorm = accepted
        last_step = float(np.linalg.norm(new_beta - beta))
        beta = new_beta
        iterations += 1
        trace.append((beta.copy(), gnorm, last_step))
    if not converged and gnorm < config.tol_g and last_step < config.tol_x:
        converged = True
    return GeeFit(
        beta_hat=beta,
        converged=converged,
        iterations=iterations,
        final_residual_norm=gnorm,
        trace=tuple(trace),
    )


def _newton_direction(kind, dataset, beta, link, config, frozen_corr, g):
    d_mat = jacobian(
        kind,
        dataset,
        beta,
        link,
        frozen_corr=frozen_corr,
        method=config.jacobian_method,
    )
    try:
        return np.linalg.solve(d_mat, g)
    except np.linalg.LinAlgError:
        pass
    # finite-sample information can be singular early; one ridge retry
    p = d_mat.shape[0]
    ridge = 1e-8 * max(abs(np.trace(d_mat)) / p, 1.0)
    try:
        return np.linalg.solve(d_mat + ridge * np.eye(p), g)
    except np.linalg.LinAlgError:
        raise SingularJacobianError(
            "Jacobian is singular even after ridge regularization"
        ) from None


def _clip_to_region(beta, region: Parameter):
    out = beta
    if region.lower is not None:
        out = np.maximum(out, region.lower)
    if region.upper is not None:
        out = np.minimum(out, region.upper)
    return out


def solve_gee(
    dataset: Dataset,
    kind: EstimatingFunction,
    link,
    config: Optional[SolverConfig] = None,
    init=None,
    region: Optional[Parameter] = None,
) -> GeeFit:
    """Solve ``g(beta) = 0`` by damped Newton iteration.

    Data-dependent proxy correlations are frozen during each Newton solve
    and refreshed between outer stages: an independence fit seeds the
    proxy, which is then refolded at the current estimate before each
    refit (``config.outer_stages`` passes in total).
    """
    config = config or SolverConfig()
    lk = get_link(link)
    if init is None:
        beta0 = default_init(dataset, lk)
    else:
        beta0 = as_beta(init)
    if region is not None and not region.contains(beta0):
        raise InvalidInputError("initial point lies outside the declared region")
    needs_stages = (
        kind.variant == "gee_star"
        and kind.spec is not None
        and kind.spec.depends_on_data
    )
    if not needs_stages:
        frozen = None
        if kind.variant == "gee_star" and not kind.spec.depends_on_beta:
            frozen = corr_trajectory(dataset, beta0, lk, kind.spec)
        return _newton(dataset, kind, lk, config, beta0, frozen, region)
    # staged fit: independence first, then refit under the refolded proxy
    stage_fit = _newton(
        dataset, EstimatingFunction.independence(), lk, config, beta0, None, region
    )
    for _ in range(config.outer_stages - 1):
        frozen = corr_trajectory(dataset, stage_fit.beta_hat, lk, kind.spec)
        stage_fit = _newton(
            dataset, kind, lk, config, stage_fit.beta_hat, frozen, region
        )
    return stage_fit


def linear_closed_form(dataset: Dataset, r_sequence) -> np.ndarray:
    """Explicit weighted least-squares root for the identity link.

    ``r_sequence`` is either one SPD template (its leading principal
    submatrix weights each cluster) or a sequence of per-cluster SPD
    matrices.
    """
    if isinstance(r_sequence, np.ndarray) and r_sequence.ndim == 2:
        template = r_sequence
        mats = None
    else:
        template = None
        mats = list(r_sequence)
        if len(mats) != dataset.n:
            raise InvalidInputError(
                f"{len(mats)} weight matrices supplied for {dataset.n} clusters"
            )
    inv_cache: dict = {}
    p = dataset.p
    normal = np.zeros((p, p))
    rhs = np.zeros(p)
    for pos, c in enumerate(dataset.clusters):
        if template is not None:
            key = c.size
            rinv = inv_cache.get(key)
            if rinv is None:
                rinv = linalg.spd_inverse(template[: c.size, : c.size])
                inv_cache[key] = rinv
        else:
            rinv = linalg.spd_inverse(mats[pos])
        xtr = c.regressors.T @ rinv
        normal += xtr @ c.regressors
        rhs += xtr @ c.response
    normal = 0.5 * (normal + normal.T)
    lam_min = float(linalg.sym_eigenvalues(normal)[0])
    if lam_min <= 1e-12:
        raise SingularDesignError(
            f"normal matrix is singular (lambda_min={lam_min:.3e})",
            lambda_min=lam_min,
        )
    return linalg.spd_solve(normal, rhs)
