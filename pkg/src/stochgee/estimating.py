"""Estimating functions, Jacobians, information matrices, perturbations.

The central object is the cluster-summed estimating function
``g(beta) = sum_i C_i(beta) (y_i - mu_i(beta))`` whose coefficient
matrices are measurable with respect to the history before cluster
``i``. The working-correlation variant standardizes residuals, applies
the inverse proxy correlation, and rescales:
``C_i = X_i' A_i^{1/2} R_{i-1}^{-1} A_i^{-1/2}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import linalg
from .correlation import (
    PseudoAccumulator,
    PseudoLikelihoodState,
    WorkingCorrelationSpec,
    pseudo_likelihood_update,
    working_corr,
)
from .exceptions import (
    InvalidInputError,
    InvalidVarianceError,
    NotPositiveDefiniteError,
    SingularDenominatorError,
    UnsupportedMethodError,
)
from .model import Dataset, as_beta, conditional_moments, get_link

_FD_STEP = float(np.cbrt(np.finfo(float).eps))


# ---------------------------------------------------------------------------
# true-correlation sources


@dataclass(frozen=True)
class CorrelationTruth:
    """Supplier of the true conditional correlation for simulated data.

    Holds an ``m_max x m_max`` unit-diagonal SPD template; cluster ``i``
    of size ``m_i`` uses the leading principal submatrix. ``is_estimate``
    marks templates recovered by sampling rather than known exactly;
    ``is_plugin`` marks the working approximation that substitutes the
    model variances for the unknown covariance.
    """

    template: np.ndarray
    is_estimate: bool = False
    is_plugin: bool = False

    def __post_init__(self):
        t = linalg.symmetrize_checked(self.template)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "template", t)

    @classmethod
    def from_kind(cls, kind: str, rho: float, m_max: int) -> "CorrelationTruth":
        if kind == "independence":
            return cls(np.eye(m_max))
        if kind == "exchangeable":
            lo = -1.0 / (m_max - 1) if m_max > 1 else -1.0
            if not lo < rho < 1.0:
                raise InvalidInputError(
                    f"exchangeable correlation needs rho in ({lo:.4g}, 1), got {rho}"
                )
            t = np.full((m_max, m_max), rho)
            np.fill_diagonal(t, 1.0)
            return cls(t)
        if kind == "ar1":
            if not -1.0 < rho < 1.0:
                raise InvalidInputError(f"ar1 correlation needs |rho| < 1, got {rho}")
            idx = np.arange(m_max)
            return cls(rho ** np.abs(idx[:, None] - idx[None, :]))
        raise InvalidInputError(f"unknown truth-correlation kind {kind!r}")

    @classmethod
    def plugin(cls, m_max: int) -> "CorrelationTruth":
        return cls(np.eye(m_max), is_plugin=True)

    def rbar(self, size: int) -> np.ndarray:
        return self.template[:size, :size].copy()

    def sigma(self, variance_diag: np.ndarray) -> np.ndarray:
        sd = np.sqrt(np.asarray(variance_diag, dtype=float))
        size = sd.shape[0]
        return self.rbar(size) * np.outer(sd, sd)


# ---------------------------------------------------------------------------
# estimating-function variants


@dataclass(frozen=True)
class EstimatingFunction:
    """Tagged choice of estimating-function family.

    ``general`` takes a coefficient callback invoked as
    ``fn(history, x_i, beta) -> (p, m_i)`` where ``history`` is the tuple
    of clusters strictly before ``i``; the interface only ever hands the
    callback past clusters, which enforces the measurability requirement
    structurally.
    """

    variant: str
    spec: Optional[WorkingCorrelationSpec] = None
    truth: Optional[CorrelationTruth] = None
    coefficients: Optional[Callable] = None

    def __post_init__(self):
        if self.variant not in ("independence", "gee_star", "quasi_score", "general"):
            raise InvalidInputError(f"unknown estimating variant {self.variant!r}")
        if self.variant == "gee_star" and self.spec is None:
            raise InvalidInputError("gee_star requires a working-correlation spec")
        if self.variant == "quasi_score" and self.truth is None:
            raise InvalidInputError("quasi_score requires a true-correlation source")
        if self.variant == "general" and self.coefficients is None:
            raise InvalidInputError("general requires a coefficient callback")

    @classmethod
    def independence(cls) -> "EstimatingFunction":
        return cls("independence")

    @classmethod
    def gee_star(cls, spec: WorkingCorrelationSpec) -> "EstimatingFunction":
        return cls("gee_star", spec=spec)

    @classmethod
    def quasi_score(cls, truth: CorrelationTruth) -> "EstimatingFunction":
        return cls("quasi_score", truth=truth)

    @classmethod
    def general(cls, coefficients: Callable) -> "EstimatingFunction":
        return cls("general", coefficients=coefficients)

    @property
    def reduces_to_independence(self) -> bool:
        # A^{1/2} I A^{-1/2} is exactly the identity, so the identity
        # working correlation shares the independence code path.
        return self.variant == "independence" or (
            self.variant == "gee_star" and self.spec.kind == "identity"
        )


def resolve_estimator(
    name: str, m_max: int, truth: Optional[CorrelationTruth] = None
) -> EstimatingFunction:
    """Build an estimating function from its command-line name.

    Recognized names: ``independence``, ``identity``, ``exchangeable:RHO``,
    ``ar1:RHO``, ``pseudo`` / ``pseudo_likelihood``, ``truth`` (fixed proxy
    equal to the scenario's true correlation) and ``quasi`` /
    ``quasi_score``; the last two need a true-correlation source.
    """
    base, _, arg = name.partition(":")
    base = base.strip().lower()
    if base == "independence":
        return EstimatingFunction.independence()
    if base == "identity":
        return EstimatingFunction.gee_star(WorkingCorrelationSpec.identity(m_max))
    if base in ("pseudo", "pseudo_likelihood"):
        return EstimatingFunction.gee_star(
            WorkingCorrelationSpec.pseudo_likelihood(m_max)
        )
    if base in ("exchangeable", "ar1"):
        try:
            rho = float(arg)
        except ValueError:
            raise InvalidInputError(
                f"estimator {name!r} needs a numeric parameter, e.g. {base}:0.4"
            ) from None
        ctor = getattr(WorkingCorrelationSpec, base)
        return EstimatingFunction.gee_star(ctor(rho, m_max))
    if base == "truth":
        if truth is None:
            raise InvalidInputError("estimator 'truth' needs a true-correlation source")
        return EstimatingFunction.gee_star(WorkingCorrelationSpec.fixed(truth.template))
    if base in ("quasi", "quasi_score"):
        if truth is None:
            raise InvalidInputError("estimator 'quasi' needs a true-correlation source")
        return EstimatingFunction.quasi_score(truth)
    raise InvalidInputError(f"unknown estimator name {name!r}")


# ---------------------------------------------------------------------------
# working-correlation trajectories (the predictable proxy sequence)


def fold_pseudo_state(
    dataset: Dataset,
    beta,
    link,
    init_state: Optional[PseudoLikelihoodState] = None,
    upto: Optional[int] = None,
) -> PseudoLikelihoodState:
    """Fold the residual-moment state over the first ``upto`` clusters."""
    state = init_state or PseudoLikelihoodState.empty(dataset.m_max)
    link = get_link(link)
    beta = as_beta(beta)
    stop = dataset.n if upto is None else upto
    for c in dataset.clusters[:stop]:
        state = pseudo_likelihood_update(state, c, beta, link)
    return state


def _standardized_residuals(cluster, beta, lk):
    eta = cluster.regressors @ beta
    mean = lk.eval(0, eta)
    var = lk.eval(1, eta)
    if np.any(var <= 0.0) or not np.all(np.isfinite(var)):
        raise InvalidVarianceError(
            f"cluster {cluster.index}: nonpositive conditional variance"
        )
    resid = (cluster.response - mean) / np.sqrt(var)
    if not np.all(np.isfinite(resid)):
        raise InvalidVarianceError(
            f"cluster {cluster.index}: residual standardization overflowed"
        )
    return resid


def _seed_accumulator(dataset, init_state):
    acc = PseudoAccumulator(dataset.m_max)
    if init_state is not None and init_state.count > 0:
        acc.total += init_state.running_sum
        acc.counts += init_state.counts
        acc.count = init_state.count
        acc.homogeneous = bool(
            int(init_state.counts.min())
            == int(init_state.counts.max())
            == init_state.count
        )
    return acc


def corr_trajectory(
    dataset: Dataset,
    beta,
    link,
    spec: WorkingCorrelationSpec,
    init_state: Optional[PseudoLikelihoodState] = None,
) -> list:
    """Per-cluster proxy correlations R_{i-1}, truncated to each m_i.

    The proxy for cluster ``i`` only sees data through cluster ``i-1``;
    for data-independent templates the same per-size matrix object is
    reused so downstream factorization caches hit.
    """
    beta = as_beta(beta)
    link = get_link(link)
    out = []
    if not spec.depends_on_data:
        by_size: dict = {}
        for c in dataset.clusters:
            m = by_size.get(c.size)
            if m is None:
                m = working_corr(spec, None, c.size, beta)
                by_size[c.size] = m
            out.append(m)
        return out
    acc = _seed_accumulator(dataset, init_state)
    for c in dataset.clusters:
        out.append(acc.working(c.size))
        acc.update_residuals(_standardized_residuals(c, beta, link))
    return out


def _truth_trajectory(dataset: Dataset, truth: CorrelationTruth) -> list:
    by_size: dict = {}
    out = []
    for c in dataset.clusters:
        m = by_size.get(c.size)
        if m is None:
            m = truth.rbar(c.size)
            by_size[c.size] = m
        out.append(m)
    return out


def _fast_spd_inverse(m: np.ndarray, cluster_index: int) -> np.ndarray:
    # Cholesky both validates positive definiteness and feeds the inverse;
    # these are tiny well-conditioned matrices, so no refinement pass
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        lam_min = float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])
        raise NotPositiveDefiniteError(
            f"working correlation for cluster {cluster_index} is not PD "
            f"(lambda_min={lam_min:.3e})",
            lambda_min=lam_min,
            cluster_index=cluster_index,
        ) from None
    return np.linalg.inv(m)


class _InverseCache:
    """id-keyed cache of SPD inverses for reused correlation objects.

    The matrix object is retained alongside its inverse so a cached id
    can never be recycled by the allocator while the entry lives.
    """

    def __init__(self):
        self._cache: dict = {}

    def inverse(self, m: np.ndarray, cluster_index: int) -> np.ndarray:
        key = id(m)
        hit = self._cache.get(key)
        if hit is None:
            hit = (m, _fast_spd_inverse(m, cluster_index))
            self._cache[key] = hit
        return hit[1]


def _stacked(dataset: Dataset):
    ys = np.concatenate([c.response for c in dataset.clusters])
    xs = np.vstack([c.regressors for c in dataset.clusters])
    return ys, xs


# ---------------------------------------------------------------------------
# estimating-function evaluation


def eval_g(
    kind: EstimatingFunction,
    dataset: Dataset,
    beta,
    link,
    corr_state: Optional[PseudoLikelihoodState] = None,
    frozen_corr: Optional[Sequence[np.ndarray]] = None,
) -> np.ndarray:
    """Evaluate the estimating function as an exact finite sum over clusters.

    ``corr_state`` seeds the residual-moment fold of a pseudo-likelihood
    proxy; ``frozen_corr`` bypasses the fold entirely and uses the given
    per-cluster proxy matrices (the solver freezes proxies this way).
    """
    beta = as_beta(beta)
    lk = get_link(link)
    if kind.reduces_to_independence:
        ys, xs = _stacked(dataset)
        mu = lk.eval(0, xs @ beta)
        return xs.T @ (ys - mu)
    if kind.variant == "general":
        g = np.zeros(beta.shape[0])
        for i, c in enumerate(dataset.clusters):
            coeff = np.asarray(
                kind.coefficients(dataset.clusters[:i], c.regressors, beta),
                dtype=float,
            )
            if coeff.shape != (beta.shape[0], c.size):
                raise InvalidInputError(
                    f"coefficient callback returned shape {coeff.shape} for "
                    f"cluster {c.index}, expected {(beta.shape[0], c.size)}"
                )
            mom = conditional_moments(c, beta, lk)
            g += coeff @ (c.response - mom.mean)
        return g
    if kind.variant == "quasi_score":
        corr_seq = _truth_trajectory(dataset, kind.truth)
    else:
        corr_seq = (
            list(frozen_corr)
            if frozen_corr is not None
            else corr_trajectory(dataset, beta, link, kind.spec, corr_state)
        )
    if len(corr_seq) != dataset.n:
        raise InvalidInputError(
            f"frozen correlation sequence has {len(corr_seq)} entries for "
            f"{dataset.n} clusters"
        )
    cache = _InverseCache()
    g = np.zeros(beta.shape[0])
    for c, r in zip(dataset.clusters, corr_seq):
        mom = conditional_moments(c, beta, lk)
        sd = np.sqrt(mom.variance_diag)
        rinv = cache.inverse(r, c.index)
        u = (c.response - mom.mean) / sd
        g += c.regressors.T @ (sd * (rinv @ u))
    return g


def eval_g_perturbed(
    dataset: Dataset,
    beta,
    perturbation: "Perturbation",
    link,
    spec: WorkingCorrelationSpec,
    corr_state: Optional[PseudoLikelihoodState] = None,
) -> np.ndarray:
    """Working-correlation estimating function with misspecified regressors.

    Regressor rows, the variance factors, and any data-dependent proxy are
    recomputed at ``X_i + delta_i^T``; the residuals keep the unperturbed
    means.
    """
    beta = as_beta(beta)
    lk = get_link(link)
    deltas = perturbation.deltas
    if len(deltas) != dataset.n:
        raise InvalidInputError(
            f"perturbation has {len(deltas)} matrices for {dataset.n} clusters"
        )
    if not any(d.any() for d in deltas):
        # exact zero perturbation: reproduce the plain evaluation bitwise
        return eval_g(
            EstimatingFunction.gee_star(spec), dataset, beta, lk, corr_state
        )
    if spec.depends_on_data:
        corr_seq = _perturbed_pseudo_trajectory(
            dataset, beta, lk, spec, deltas, corr_state
        )
    else:
        corr_seq = corr_trajectory(dataset, beta, lk, spec)
    cache = _InverseCache()
    g = np.zeros(beta.shape[0])
    identity_spec = spec.kind == "identity"
    for c, r, delta in zip(dataset.clusters, corr_seq, deltas):
        if delta.shape != (beta.shape[0], c.size):
            raise InvalidInputError(
                f"delta for cluster {c.index} has shape {delta.shape}, "
                f"expected {(beta.shape[0], c.size)}"
            )
        mom = conditional_moments(c, beta, lk)
        resid = c.response - mom.mean
        xp = c.regressors + delta.T if delta.any() else c.regressors
        if identity_spec:
            g += xp.T @ resid
            continue
        var_p = lk.eval(1, xp @ beta)
        if np.any(var_p <= 0) or not np.all(np.isfinite(var_p)):
            raise InvalidInputError(
                f"perturbed regressors of cluster {c.index} leave the link domain"
            )
        sd = np.sqrt(var_p)
        rinv = cache.inverse(r, c.index)
        g += xp.T @ (sd * (rinv @ (resid / sd)))
    return g


def _perturbed_residuals(cluster, xp, beta, lk):
    eta = xp @ beta
    mean = lk.eval(0, eta)
    var = lk.eval(1, eta)
    if np.any(var <= 0.0) or not np.all(np.isfinite(var)):
        raise InvalidInputError(
            f"perturbed regressors of cluster {cluster.index} leave the link domain"
        )
    return (cluster.response - mean) / np.sqrt(var)


def _perturbed_pseudo_trajectory(dataset, beta, lk, spec, deltas, init_state):
    acc = _seed_accumulator(dataset, init_state)
    out = []
    for c, delta in zip(dataset.clusters, deltas):
        out.append(acc.working(c.size))
        xp = c.regressors + delta.T if delta.any() else c.regressors
        acc.update_residuals(_perturbed_residuals(c, xp, beta, lk))
    return out


# ---------------------------------------------------------------------------
# Jacobians


def _analytic_available(kind: EstimatingFunction, link) -> bool:
    lk = get_link(link)
    if lk.kind not in ("identity", "log"):
        return False
    if kind.reduces_to_independence:
        return True
    if kind.variant == "quasi_score":
        return True
    if kind.variant == "gee_star":
        return not kind.spec.depends_on_beta
    return False


def jacobian(
    kind: EstimatingFunction,
    dataset: Dataset,
    beta,
    link,
    corr_state: Optional[PseudoLikelihoodState] = None,
    frozen_corr: Optional[Sequence[np.ndarray]] = None,
    method: Optional[str] = None,
) -> np.ndarray:
    """Negative derivative of the estimating function, -d g / d beta'.

    Analytic evaluation is implemented for identity/log links with
    beta-independent proxies; anything else uses central differences with
    per-coordinate steps ``cbrt(eps) * max(1, |beta_l|)``.
    """
    beta = as_beta(beta)
    lk = get_link(link)
    if method is None:
        method = "analytic" if _analytic_available(kind, lk) else "finite_difference"
    if method == "analytic":
        if not _analytic_available(kind, lk):
            raise UnsupportedMethodError(
                "analytic Jacobian is only available for identity/log links "
                "with beta-independent working correlations"
            )
        return _analytic_jacobian(kind, dataset, beta, lk, corr_state, frozen_corr)
    if method != "finite_difference":
        raise InvalidInputError(f"unknown jacobian method {method!r}")
    p = beta.shape[0]
    jac = np.empty((p, p))
    for l in range(p):
        h = _FD_STEP * max(1.0, abs(beta[l]))
        bp, bm = beta.copy(), beta.copy()
        bp[l] += h
        bm[l] -= h
        gp = eval_g(kind, dataset, bp, lk, corr_state, frozen_corr)
        gm = eval_g(kind, dataset, bm, lk, corr_state, frozen_corr)
        jac[:, l] = (gp - gm) / (2.0 * h)
    return -jac


def _analytic_jacobian(kind, dataset, beta, lk, corr_state, frozen_corr):
    if kind.reduces_to_independence:
        ys, xs = _stacked(dataset)
        w = lk.eval(1, xs @ beta)
        return xs.T @ (xs * w[:, None])
    if kind.variant == "quasi_score":
        corr_seq = _truth_trajectory(dataset, kind.truth)
    else:
        corr_seq = (
            list(frozen_corr)
            if frozen_corr is not None
            else corr_trajectory(dataset, beta, lk, kind.spec, corr_state)
        )
    cache = _InverseCache()
    p = beta.shape[0]
    total = np.zeros((p, p))
    log_link = lk.kind == "log"
    for c, r in zip(dataset.clusters, corr_seq):
        mom = conditional_moments(c, beta, lk)
        sd = np.sqrt(mom.variance_diag)
        rinv = cache.inverse(r, c.index)
        # B = A^{1/2} R^{-1} A^{-1/2}; main term is X' B A X
        b = rinv * np.outer(sd, 1.0 / sd)
        total += c.regressors.T @ (b @ (c.regressors * mom.variance_diag[:, None]))
        if log_link:
            # d b_jk / d beta_l = b_jk (x_jl - x_kl) / 2 for the log link;
            # contracted with the residual this is
            # (x_l o (B r) - B (x_l o r)) / 2
            resid = c.response - mom.mean
            br = b @ resid
            for l in range(p):
                col = c.regressors[:, l]
                corr_term = 0.5 * (col * br - b @ (col * resid))
                total[:, l] -= c.regressors.T @ corr_term
    return total


# ---------------------------------------------------------------------------
# information / covariance matrices of the section-4 comparison


@dataclass(frozen=True)
class OptimalityMatrices:
    """Ensemble estimates of the four comparison matrices.

    ``h_ind`` is the expected independence information, ``h_star`` the
    expected working information, ``m_bar`` the quasi-score covariance and
    ``m_star`` the working-score covariance. Expectations are ensemble
    means of per-path cluster sums; per-path totals are retained for
    single-replication diagnostics. ``*_increments`` hold the
    ensemble-mean per-cluster summands so partial sums over any cluster
    window are available.
    """

    h_ind: np.ndarray
    h_star: np.ndarray
    m_bar: np.ndarray
    m_star: np.ndarray
    h_ind_increments: np.ndarray
    k_star_increments: np.ndarray
    l_bar_increments: np.ndarray
    m_star_increments: np.ndarray
    per_path: tuple

    @property
    def n(self) -> int:
        return self.k_star_increments.shape[0]

    def partial(self, n0: int, n: int, which: str = "h_star") -> np.ndarray:
        """Sum of increments over clusters n0..n (1-based, inclusive)."""
        arrays = {
            "h_ind": self.h_ind_increments,
            "h_star": self.k_star_increments,
            "m_bar": self.l_bar_increments,
            "m_star": self.m_star_increments,
        }
        try:
            arr = arrays[which]
        except KeyError:
            raise InvalidInputError(f"unknown matrix family {which!r}") from None
        if not 1 <= n0 <= n <= self.n:
            raise InvalidInputError(f"window {n0}..{n} outside 1..{self.n}")
        return arr[n0 - 1 : n].sum(axis=0)

    def totals_at(self, n: int) -> dict:
        return {k: self.partial(1, n, k) for k in ("h_ind", "h_star", "m_bar", "m_star")}

    def det_ratios_at(self, n: int) -> tuple:
        t = self.totals_at(n)
        return (
            det_ratio(t["h_star"], t["m_bar"]),
            det_ratio(t["m_star"], t["m_bar"]),
        )


def path_information_increments(
    dataset: Dataset,
    beta,
    link,
    spec: WorkingCorrelationSpec,
    truth: CorrelationTruth,
    perturbation: Optional["Perturbation"] = None,
) -> dict:
    """Per-cluster summands of the four comparison matrices on one path.

    With a perturbation, the variance factors and any data-dependent proxy
    are evaluated at the misspecified regressors while the true
    correlation is untouched. Returns (n, p, p) arrays keyed by family.
    """
    beta = as_beta(beta)
    lk = get_link(link)
    n, p = dataset.n, beta.shape[0]
    deltas = None
    if perturbation is not None:
        deltas = perturbation.deltas
        if len(deltas) != n:
            raise InvalidInputError("perturbation length mismatch")
        corr_seq = _perturbed_pseudo_trajectory(
            dataset, beta, lk, spec, deltas, None
        ) if spec.depends_on_data else corr_trajectory(dataset, beta, lk, spec)
    else:
        corr_seq = corr_trajectory(dataset, beta, lk, spec)
    cache = _InverseCache()
    out = {
        "h_ind": np.empty((n, p, p)),
        "h_star": np.empty((n, p, p)),
        "m_bar": np.empty((n, p, p)),
        "m_star": np.empty((n, p, p)),
    }
    truth_by_size: dict = {}
    for pos, (c, r) in enumerate(zip(dataset.clusters, corr_seq)):
        x = c.regressors
        if deltas is not None and deltas[pos].any():
            x = x + deltas[pos].T
        var = lk.eval(1, x @ beta)
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise InvalidInputError(
                f"regressors of cluster {c.index} leave the link domain"
            )
        z = x * np.sqrt(var)[:, None]
        rbar = truth_by_size.get(c.size)
        if rbar is None:
            rbar = truth.rbar(c.size)
            truth_by_size[c.size] = rbar
        rbar_inv = cache.inverse(rbar, c.index)
        rinv = cache.inverse(r, c.index)
        v = rinv @ z
        out["h_ind"][pos] = z.T @ z
        out["h_star"][pos] = z.T @ v
        out["m_bar"][pos] = z.T @ (rbar_inv @ z)
        out["m_star"][pos] = v.T @ (rbar @ v)
    return out


def optimality_matrices(
    ensemble: Sequence[Dataset],
    beta,
    link,
    spec: WorkingCorrelationSpec,
    truth: CorrelationTruth,
) -> OptimalityMatrices:
    """Ensemble-mean comparison matrices over dataset replications."""
    ensemble = list(ensemble)
    if not ensemble:
        raise InvalidInputError("ensemble must contain at least one dataset")
    n = ensemble[0].n
    if any(ds.n != n for ds in ensemble):
        raise InvalidInputError("all replications must have the same cluster count")
    beta = as_beta(beta)
    p = beta.shape[0]
    sums = {k: np.zeros((n, p, p)) for k in ("h_ind", "h_star", "m_bar", "m_star")}
    per_path = []
    for ds in ensemble:
        inc = path_information_increments(ds, beta, link, spec, truth)
        per_path.append({k: v.sum(axis=0) for k, v in inc.items()})
        for k in sums:
            sums[k] += inc[k]
    r = float(len(ensemble))
    means = {k: v / r for k, v in sums.items()}

    def _sym(a):
        return 0.5 * (a + np.swapaxes(a, -1, -2))

    means = {k: _sym(v) for k, v in means.items()}
    totals = {k: v.sum(axis=0) for k, v in means.items()}
    return OptimalityMatrices(
        h_ind=totals["h_ind"],
        h_star=totals["h_star"],
        m_bar=totals["m_bar"],
        m_star=totals["m_star"],
        h_ind_increments=means["h_ind"],
        k_star_increments=means["h_star"],
        l_bar_increments=means["m_bar"],
        m_star_increments=means["m_star"],
        per_path=tuple(per_path),
    )


# ---------------------------------------------------------------------------
# conditional variance of the estimating function


@dataclass(frozen=True)
class ConditionalVariance:
    v_n: np.ndarray
    increments: np.ndarray  # (n, p, p), each PSD

    def at(self, n: int) -> np.ndarray:
        return self.increments[:n].sum(axis=0)


def conditional_variance(
    kind: EstimatingFunction,
    dataset: Dataset,
    beta,
    link,
    truth: CorrelationTruth,
) -> ConditionalVariance:
    """Cumulative predictable covariation of the estimating function.

    Each increment is ``C_i Sigma_i C_i'`` with the true conditional
    covariance from ``truth`` (or its plug-in approximation).
    """
    beta = as_beta(beta)
    lk = get_link(link)
    n, p = dataset.n, beta.shape[0]
    if kind.variant == "general":
        coeff_fn = lambda i, c: np.asarray(
            kind.coefficients(dataset.clusters[:i], c.regressors, beta), dtype=float
        )
        corr_seq = None
    elif kind.reduces_to_independence:
        coeff_fn = None
        corr_seq = None
    elif kind.variant == "quasi_score":
        coeff_fn = None
        corr_seq = _truth_trajectory(dataset, kind.truth)
    else:
        coeff_fn = None
        corr_seq = corr_trajectory(dataset, beta, lk, kind.spec)
    cache = _InverseCache()
    increments = np.empty((n, p, p))
    for pos, c in enumerate(dataset.clusters):
        mom = conditional_moments(c, beta, lk)
        sigma = truth.sigma(mom.variance_diag)
        if kind.variant == "general":
            coeff = coeff_fn(pos, c)
        elif kind.reduces_to_independence:
            coeff = c.regressors.T
        else:
            sd = np.sqrt(mom.variance_diag)
            rinv = cache.inverse(corr_seq[pos], c.index)
            # C = X' A^{1/2} R^{-1} A^{-1/2}
            coeff = (c.regressors * sd[:, None]).T @ (rinv / sd[None, :])
        inc = coeff @ sigma @ coeff.T
        increments[pos] = 0.5 * (inc + inc.T)
    return ConditionalVariance(v_n=increments.sum(axis=0), increments=increments)


# ---------------------------------------------------------------------------
# determinant ratios


def det_ratio(numerator: np.ndarray, denominator: np.ndarray) -> float:
    """det(numerator) / det(denominator) via LU-based determinants."""
    num = np.asarray(numerator, dtype=float)
    den = np.asarray(denominator, dtype=float)
    if num.shape != den.shape or num.ndim != 2 or num.shape[0] != num.shape[1]:
        raise InvalidInputError("det_ratio needs two square matrices of equal shape")
    dd = float(np.linalg.det(den))
    if abs(dd) <= 1e-300:
        raise SingularDenominatorError(
            f"denominator determinant {dd:.3e} is numerically singular"
        )
    return float(np.linalg.det(num)) / dd


# ---------------------------------------------------------------------------
# regressor perturbations


@dataclass(frozen=True)
class Perturbation:
    """Per-cluster regressor misspecifications ``delta_i`` (p x m_i)."""

    deltas: tuple
    bound: float

    def __post_init__(self):
        deltas = tuple(np.asarray(d, dtype=float) for d in self.deltas)
        if self.bound <= 0:
            raise InvalidInputError("perturbation bound must be positive")
        for i, d in enumerate(deltas, start=1):
            if d.ndim != 2:
                raise InvalidInputError(f"delta {i} must be a matrix")
            if np.linalg.norm(d, 2) > self.bound * (1.0 + 1e-9) and d.any():
                raise InvalidInputError(
                    f"delta {i} exceeds the declared spectral-norm bound"
                )
        object.__setattr__(self, "deltas", deltas)

    @classmethod
    def zero(cls, dataset: Dataset) -> "Perturbation":
        return cls(
            tuple(np.zeros((dataset.p, c.size)) for c in dataset.clusters), bound=1.0
        )


def a2_schedule(
    dataset: Dataset,
    beta,
    link,
    spec: WorkingCorrelationSpec,
    seed: int,
    max_halvings: int = 40,
) -> tuple:
    """Construct the geometric perturbation schedule with norms <= 2^{-i}.

    Each delta is drawn with uniform(-1, 1) entries, rescaled to spectral
    norm 2^{-i}, then halved until both induced-difference inequalities
    (on the transformed regressor factor and on the inverse proxy) hold.
    For data-dependent proxies the inverse-proxy difference at step ``i``
    is fixed by the earlier deltas, so halving the current delta cannot
    always repair it; residual violations are reported, not raised.

    Returns (Perturbation, report) where the report carries per-cluster
    halving counts and any remaining inequality violations.
    """
    beta = as_beta(beta)
    lk = get_link(link)
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**128 - 1)))
    p = beta.shape[0]
    deltas = []
    halvings = []
    violations = []
    acc = acc_p = None
    if spec.depends_on_data:
        acc = _seed_accumulator(dataset, None)
        acc_p = _seed_accumulator(dataset, None)

    def transform_gap(cluster, delta, y0):
        xp = cluster.regressors + delta.T
        var_p = lk.eval(1, xp @ beta)
        if np.all(var_p > 0) and np.all(np.isfinite(var_p)):
            yp = xp * np.sqrt(var_p)[:, None]
            return float(np.linalg.norm(yp - y0, 2)), xp
        return np.inf, xp

    for c in dataset.clusters:
        target = math.ldexp(1.0, -c.index)
        draw = rng.uniform(-1.0, 1.0, size=(p, c.size))
        nrm = float(np.linalg.norm(draw, 2))
        if target == 0.0 or nrm == 0.0:
            delta = np.zeros((p, c.size))
        else:
            delta = draw * (target * (1.0 - 1e-12) / nrm)
        var0 = lk.eval(1, c.regressors @ beta)
        y0 = c.regressors * np.sqrt(var0)[:, None]
        if spec.depends_on_data:
            # fixed by the earlier deltas: halving the current one cannot
            # move this gap
            gap_r = float(
                np.linalg.norm(
                    np.linalg.inv(acc_p.working(c.size))
                    - np.linalg.inv(acc.working(c.size)),
                    2,
                )
            )
        else:
            gap_r = 0.0
        used = 0
        gap_y, xp = transform_gap(c, delta, y0)
        while used < max_halvings and gap_y > target:
            delta = 0.5 * delta
            used += 1
            gap_y, xp = transform_gap(c, delta, y0)
        if gap_y <= target < gap_r and used < max_halvings:
            # the transform inequality is monotone in the scale, so the
            # exhausted halving loop collapses deterministically
            delta = delta * math.ldexp(1.0, -(max_halvings - used))
            used = max_halvings
            gap_y, xp = transform_gap(c, delta, y0)
        if gap_y > target or gap_r > target:
            violations.append(
                {"cluster": c.index, "gap_y": gap_y, "gap_r": gap_r, "target": target}
            )
        halvings.append(used)
        deltas.append(delta)
        if spec.depends_on_data:
            acc.update_residuals(_standardized_residuals(c, beta, lk))
            acc_p.update_residuals(_perturbed_residuals(c, xp, beta, lk))
    report = {
        "halvings": halvings,
        "violations": violations,
        "max_halvings": max_halvings,
    }
    return Perturbation(tuple(deltas), bound=0.5), report


# ---------------------------------------------------------------------------
# integrability certification (finite-sample surrogate)


def integrability_summary(
    kind: EstimatingFunction,
    ensemble: Sequence[Dataset],
    beta,
    link,
    truth: Optional[CorrelationTruth] = None,
) -> dict:
    """Empirical means certifying the square-integrability requirements.

    Returns the ensemble means of |c^{jk}|, |dc^{jk}/dbeta_l * resid_j|
    and |c^{jk} c^{rl} sigma^{kr}|; divergence of these means across
    growing ensembles flags an inadmissible coefficient choice.
    """
    ensemble = list(ensemble)
    if not ensemble:
        raise InvalidInputError("ensemble must contain at least one dataset")
    beta = as_beta(beta)
    lk = get_link(link)
    p = beta.shape[0]
    if truth is None:
        truth = CorrelationTruth.plugin(ensemble[0].m_max)

    def coeffs(ds, b):
        out = []
        if kind.variant == "general":
            for i, c in enumerate(ds.clusters):
                out.append(
                    np.asarray(kind.coefficients(ds.clusters[:i], c.regressors, b))
                )
            return out
        if kind.reduces_to_independence:
            return [c.regressors.T.copy() for c in ds.clusters]
        if kind.variant == "quasi_score":
            seq = _truth_trajectory(ds, kind.truth)
        else:
            seq = corr_trajectory(ds, b, lk, kind.spec)
        cache = _InverseCache()
        for c, r in zip(ds.clusters, seq):
            mom = conditional_moments(c, b, lk)
            sd = np.sqrt(mom.variance_diag)
            rinv = cache.inverse(r, c.index)
            out.append((c.regressors * sd[:, None]).T @ (rinv / sd[None, :]))
        return out

    abs_c = []
    abs_dc_resid = []
    abs_ccv = []
    for ds in ensemble:
        base = coeffs(ds, beta)
        grads = []
        for l in range(p):
            h = _FD_STEP * max(1.0, abs(beta[l]))
            bp, bm = beta.copy(), beta.copy()
            bp[l] += h
            bm[l] -= h
            cp = coeffs(ds, bp)
            cm = coeffs(ds, bm)
            grads.append([(a - b) / (2.0 * h) for a, b in zip(cp, cm)])
        for pos, c in enumerate(ds.clusters):
            mom = conditional_moments(c, beta, lk)
            resid = c.response - mom.mean
            sigma = truth.sigma(mom.variance_diag)
            ci = base[pos]
            abs_c.append(np.abs(ci).mean())
            for l in range(p):
                abs_dc_resid.append(np.abs(grads[l][pos] * resid[None, :]).mean())
            # |c^{jk} c^{lr} sigma^{kr}| averaged over all index combinations
            cross = np.einsum("jk,lr,kr->jlkr", ci, ci, sigma)
            abs_ccv.append(np.abs(cross).mean())
    return {
        "mean_abs_coefficient": float(np.mean(abs_c)),
        "mean_abs_gradient_residual": float(np.mean(abs_dc_resid)),
        "mean_abs_cross_moment": float(np.mean(abs_ccv)),
    }
