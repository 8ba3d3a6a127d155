"""Working-correlation proxies and the true conditional correlation.

A proxy is kept as an ``m_max x m_max`` template that is measurable with
respect to the history through the previous cluster; the leading
``m_i x m_i`` principal submatrix is what multiplies cluster ``i``. This
resolves the dimension bookkeeping for variable cluster sizes while
keeping the proxy predictable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import linalg
from .exceptions import (
    InconsistentMomentsError,
    InvalidInputError,
    InvalidVarianceError,
    NotPositiveDefiniteError,
)
from .linalg import EigenExtremes, sym_eigen_extremes, sym_eigenvalues
from .model import Cluster, as_beta, conditional_moments, get_link

#: hard lower bound enforced on every emitted working correlation
MIN_EIGENVALUE = 1e-6

#: identity pseudo-observations per template dimension blended into the
#: residual-moment average (see _template)
SHRINK_PRIOR_FACTOR = 4

_KINDS = ("identity", "exchangeable", "ar1", "pseudo_likelihood", "fixed")


@dataclass(frozen=True)
class WorkingCorrelationSpec:
    """Tagged choice of working-correlation family.

    Use the classmethod constructors; they validate parameter ranges at
    construction time.
    """

    kind: str
    template_dim: int
    rho: Optional[float] = None
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidInputError(f"unknown working-correlation kind {self.kind!r}")
        if self.template_dim < 1:
            raise InvalidInputError("template_dim must be >= 1")

    @classmethod
    def identity(cls, m_max: int) -> "WorkingCorrelationSpec":
        return cls("identity", m_max)

    @classmethod
    def exchangeable(cls, rho: float, m_max: int) -> "WorkingCorrelationSpec":
        lo = -1.0 / (m_max - 1) if m_max > 1 else -1.0
        if not lo < rho < 1.0:
            raise InvalidInputError(
                f"exchangeable rho must lie in ({lo:.4g}, 1), got {rho}"
            )
        return cls("exchangeable", m_max, rho=float(rho))

    @classmethod
    def ar1(cls, rho: float, m_max: int) -> "WorkingCorrelationSpec":
        if not -1.0 < rho < 1.0:
            raise InvalidInputError(f"ar1 rho must lie in (-1, 1), got {rho}")
        return cls("ar1", m_max, rho=float(rho))

    @classmethod
    def pseudo_likelihood(cls, m_max: int) -> "WorkingCorrelationSpec":
        return cls("pseudo_likelihood", m_max)

    @classmethod
    def fixed(cls, matrix) -> "WorkingCorrelationSpec":
        m = linalg.symmetrize_checked(matrix)
        lam_min = float(sym_eigenvalues(m)[0])
        if lam_min <= 1e-10:
            raise NotPositiveDefiniteError(
                f"fixed working correlation is not PD (lambda_min={lam_min:.3e})",
                lambda_min=lam_min,
            )
        m = m.copy()
        m.setflags(write=False)
        return cls("fixed", m.shape[0], matrix=m)

    @property
    def depends_on_beta(self) -> bool:
        return self.kind == "pseudo_likelihood"

    @property
    def depends_on_data(self) -> bool:
        return self.kind == "pseudo_likelihood"


@dataclass(frozen=True)
class PseudoLikelihoodState:
    """Accumulated standardized-residual outer products.

    Clusters smaller than the template contribute to their leading block
    only; per-entry counts keep the averaging unbiased.
    """

    count: int
    running_sum: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        rs = np.asarray(self.running_sum, dtype=float).copy()
        ct = np.asarray(self.counts, dtype=np.int64).copy()
        if rs.shape != ct.shape or rs.ndim != 2 or rs.shape[0] != rs.shape[1]:
            raise InvalidInputError("state arrays must be square and congruent")
        if np.max(np.abs(rs - rs.T)) > 1e-12 * max(1.0, np.abs(rs).max(initial=1.0)):
            raise InvalidInputError("running_sum must be symmetric")
        if ct.max(initial=0) > self.count:
            raise InvalidInputError("per-entry count exceeds cluster count")
        rs.setflags(write=False)
        ct.setflags(write=False)
        object.__setattr__(self, "running_sum", rs)
        object.__setattr__(self, "counts", ct)

    @classmethod
    def empty(cls, m_max: int) -> "PseudoLikelihoodState":
        return cls(0, np.zeros((m_max, m_max)), np.zeros((m_max, m_max), dtype=np.int64))

    @property
    def dim(self) -> int:
        return self.running_sum.shape[0]

    def mean_matrix(self) -> np.ndarray:
        """Per-entry average; never-observed entries default to identity."""
        out = np.eye(self.dim)
        seen = self.counts > 0
        out[seen] = self.running_sum[seen] / self.counts[seen]
        return out


def pseudo_likelihood_update(
    state: PseudoLikelihoodState, cluster: Cluster, beta, link
) -> PseudoLikelihoodState:
    """Fold one cluster's standardized residual outer product into the state."""
    moments = conditional_moments(cluster, beta, get_link(link))
    scale = np.sqrt(moments.variance_diag)
    resid = (cluster.response - moments.mean) / scale
    if not np.all(np.isfinite(resid)):
        raise InvalidVarianceError(
            f"cluster {cluster.index}: residual standardization overflowed"
        )
    m = cluster.size
    rs = state.running_sum.copy()
    ct = state.counts.copy()
    rs[:m, :m] += np.outer(resid, resid)
    ct[:m, :m] += 1
    return PseudoLikelihoodState(state.count + 1, rs, ct)


def _template(spec: WorkingCorrelationSpec, state: Optional[PseudoLikelihoodState]):
    d = spec.template_dim
    if spec.kind == "identity":
        return np.eye(d)
    if spec.kind == "exchangeable":
        t = np.full((d, d), spec.rho)
        np.fill_diagonal(t, 1.0)
        return t
    if spec.kind == "ar1":
        idx = np.arange(d)
        return spec.rho ** np.abs(idx[:, None] - idx[None, :])
    if spec.kind == "fixed":
        return spec.matrix.copy()
    # pseudo-likelihood
    if state is None or state.count < 1:
        return np.eye(d)
    raw = state.mean_matrix()
    # Count-based shrinkage toward the identity. The raw residual-moment
    # average is rank-deficient for small counts and its inverse is
    # heavy-tailed (no finite mean near count = dim), so the early
    # clusters would dominate every information-matrix sum they enter;
    # the prior weight of 4*dim identity pseudo-observations tempers the
    # inverse while vanishing at rate O(1/count).
    prior = SHRINK_PRIOR_FACTOR * d
    eps = prior / (state.count + prior)
    return (1.0 - eps) * raw + eps * np.eye(d)


def _floor_eigenvalues(t: np.ndarray, guaranteed: bool = False) -> np.ndarray:
    """Blend in just enough identity to guarantee the eigenvalue floor.

    ``guaranteed`` marks matrices of the form (1-eps) PSD + eps I with
    eps >= MIN_EIGENVALUE, which need no eigenvalue computation.
    """
    if guaranteed:
        return t
    lam_min = float(np.linalg.eigvalsh(t)[0])
    if lam_min >= MIN_EIGENVALUE:
        return t
    nu = (MIN_EIGENVALUE - lam_min) / max(1.0 - lam_min, MIN_EIGENVALUE)
    return (1.0 - nu) * t + nu * np.eye(t.shape[0])


def working_corr(
    spec: WorkingCorrelationSpec,
    state: Optional[PseudoLikelihoodState],
    target_size: int,
    beta=None,
) -> np.ndarray:
    """The m_i x m_i working correlation applied to a cluster of that size.

    Always the leading principal submatrix of the template; positive
    definiteness is enforced by the shrinkage/floor regularization.
    """
    if target_size < 1 or target_size > spec.template_dim:
        raise InvalidInputError(
            f"target size {target_size} outside 1..{spec.template_dim}"
        )
    t = _template(spec, state)
    if spec.kind == "pseudo_likelihood" and state is not None and state.count >= 1:
        # a homogeneous count matrix means the running sum is a true
        # average of PSD outer products, so the shrinkage alone already
        # guarantees the floor
        homogeneous = (
            int(state.counts.min()) == int(state.counts.max()) == state.count
            and state.count <= 1_000_000
        )
        t = _floor_eigenvalues(t, guaranteed=homogeneous)
    return t[:target_size, :target_size].copy()


class PseudoAccumulator:
    """Mutable residual-moment fold for hot loops.

    Mirrors the arithmetic of PseudoLikelihoodState/working_corr without
    per-update validation or copies; a unit test pins the two paths to
    identical trajectories.
    """

    __slots__ = ("dim", "total", "counts", "count", "homogeneous")

    def __init__(self, dim: int):
        self.dim = dim
        self.total = np.zeros((dim, dim))
        self.counts = np.zeros((dim, dim), dtype=np.int64)
        self.count = 0
        self.homogeneous = True

    def update_residuals(self, resid_std: np.ndarray) -> None:
        m = resid_std.shape[0]
        self.total[:m, :m] += np.outer(resid_std, resid_std)
        self.counts[:m, :m] += 1
        self.count += 1
        if m != self.dim:
            self.homogeneous = False

    def template(self) -> np.ndarray:
        d = self.dim
        if self.count < 1:
            return np.eye(d)
        if self.homogeneous:
            raw = self.total / self.count
        else:
            raw = np.eye(d)
            seen = self.counts > 0
            raw[seen] = self.total[seen] / self.counts[seen]
        prior = SHRINK_PRIOR_FACTOR * d
        eps = prior / (self.count + prior)
        out = (1.0 - eps) * raw + eps * np.eye(d)
        return _floor_eigenvalues(
            out, guaranteed=self.homogeneous and self.count <= 1_000_000
        )

    def working(self, size: int) -> np.ndarray:
        return self.template()[:size, :size].copy()


@dataclass(frozen=True)
class TrueCorrelation:
    sigma: np.ndarray
    rbar: np.ndarray
    extremes: EigenExtremes


def true_correlation(sigma, variance_diag) -> TrueCorrelation:
    """Standardize a conditional covariance to its correlation matrix.

    The covariance diagonal must agree with the supplied conditional
    variances (relative 1e-8); the output has an exactly unit diagonal.
    """
    sigma = linalg.symmetrize_checked(np.asarray(sigma, dtype=float))
    var = np.asarray(variance_diag, dtype=float)
    if var.ndim != 1 or var.shape[0] != sigma.shape[0]:
        raise InvalidInputError("variance_diag shape mismatch")
    if np.any(var <= 0):
        raise InvalidVarianceError("variance_diag must be strictly positive")
    d = np.diag(sigma)
    if np.any(np.abs(d - var) > 1e-8 * np.maximum(np.abs(var), 1e-300)):
        raise InconsistentMomentsError(
            "covariance diagonal disagrees with variance_diag beyond rel tol 1e-8"
        )
    inv_sd = 1.0 / np.sqrt(d)
    rbar = sigma * np.outer(inv_sd, inv_sd)
    np.fill_diagonal(rbar, 1.0)
    return TrueCorrelation(sigma=sigma, rbar=rbar, extremes=sym_eigen_extremes(rbar))


def corr_beta_derivative(
    spec: WorkingCorrelationSpec,
    state_fn: Optional[Callable[[np.ndarray], Optional[PseudoLikelihoodState]]],
    size: int,
    beta,
    coord: int,
    step: Optional[float] = None,
) -> np.ndarray:
    """d R*(beta) / d beta_l by central differences, symmetrized.

    Only the pseudo-likelihood proxy actually depends on beta (through the
    refolded state); every template family returns an exact zero matrix.
    ``state_fn`` maps a parameter vector to the folded state at that
    parameter; passing None treats the state as frozen.
    """
    beta = as_beta(beta)
    if not 0 <= coord < beta.shape[0]:
        raise InvalidInputError(f"coordinate {coord} outside 0..{beta.shape[0]-1}")
    if spec.kind != "pseudo_likelihood" or state_fn is None:
        return np.zeros((size, size))
    if step is None:
        step = float(np.cbrt(np.finfo(float).eps)) * max(1.0, abs(beta[coord]))
    bp = beta.copy()
    bm = beta.copy()
    bp[coord] += step
    bm[coord] -= step
    rp = working_corr(spec, state_fn(bp), size, bp)
    rm = working_corr(spec, state_fn(bm), size, bm)
    d = (rp - rm) / (2.0 * step)
    return 0.5 * (d + d.T)
