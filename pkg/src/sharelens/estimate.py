"""Linear estimators for the inverted-share equation.

Fixed effects are absorbed by alternating projections before any fit.  All
estimators return an :class:`EstimateReport`; standard errors are
heteroskedasticity-robust (HC1) unless a cluster key is supplied.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats

from ._groups import Groups
from .errors import ConfigError, ConvergenceError, DomainError, IdentificationError, RankDeficiencyError
from .panel import NEST_LABEL

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
STARS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


# -- fixed effects -------------------------------------------------------------


@dataclass
class Absorbed:
    y: np.ndarray
    X: np.ndarray
    sweeps: int
    max_group_mean: float
    levels: dict  # dim -> number of groups
    singletons: dict  # dim -> number of single-observation groups
    dof: int  # parameters absorbed

    def report(self):
        return {"sweeps": self.sweeps, "max_group_mean": self.max_group_mean, "levels": dict(self.levels),
                "singletons": dict(self.singletons), "absorbed_dof": self.dof}


def _as_codes(fe):
    if fe is None:
        return {}
    if isinstance(fe, dict):
        return {k: pd.factorize(np.asarray(v), sort=True)[0] for k, v in fe.items()}
    return {f"fe{i}": pd.factorize(np.asarray(v), sort=True)[0] for i, v in enumerate(fe)}


def absorb_fixed_effects(y, X, fe, tol=1e-10, max_iter=10_000) -> Absorbed:
    """Demean ``y`` and the columns of ``X`` along every fixed-effect dimension.

    Sweeps subtract group means dimension by dimension until the largest
    absolute group mean left in any dimension is below ``tol`` times the
    column scale (``max(1, max |column|)``).  One dimension is exact after a
    single sweep.  ``fe`` maps dimension names to per-observation labels.
    """
    codes = _as_codes(fe)
    y = np.asarray(y, float)
    X = np.asarray(X, float)
    X2 = X.reshape(len(X), -1)
    M = np.column_stack([y, X2]) if X2.size else y[:, None].copy()
    if not codes:
        return Absorbed(M[:, 0], M[:, 1:].reshape(X.shape), 0, 0.0, {}, {}, 0)
    scale = np.maximum(1.0, np.abs(M).max(axis=0)) if len(M) else np.ones(M.shape[1])
    counts = {k: np.bincount(c) for k, c in codes.items()}

    def group_means(c, n):
        out = np.empty((len(n), M.shape[1]))
        for j in range(M.shape[1]):
            out[:, j] = np.bincount(c, weights=M[:, j], minlength=len(n))
        return out / n[:, None]

    worst = np.inf
    sweeps = 0
    while sweeps < max_iter:
        for k, c in codes.items():
            M -= group_means(c, counts[k])[c]
        sweeps += 1
        worst = max(float(np.max(np.abs(group_means(c, counts[k])) / scale)) for k, c in codes.items())
        if worst < tol:
            break
    else:
        raise ConvergenceError(f"fixed-effect absorption did not converge in {max_iter} sweeps "
                               f"(max group mean {worst:.3g})", worst)
    levels = {k: int(len(n)) for k, n in counts.items()}
    singletons = {k: int(np.sum(n == 1)) for k, n in counts.items()}
    if any(singletons.values()):
        logger.info("singleton fixed-effect groups: %s", singletons)
    # one level per extra dimension is redundant with the first (connected design assumed)
    dof = sum(levels.values()) - (len(levels) - 1)
    return Absorbed(M[:, 0], M[:, 1:].reshape(X.shape), sweeps, worst, levels, singletons, dof)


def recover_fixed_effects(resid, fe, tol=1e-12, max_iter=10_000):
    """Group effects ``a_d`` with ``resid ~ sum_d a_d[code_d]``.

    Returns ``{dim: effects indexed by code}``; the normalization puts the
    overall level in the first dimension.
    """
    codes = _as_codes(fe)
    r = np.asarray(resid, float).copy()
    effects = {k: np.zeros(c.max() + 1) for k, c in codes.items()}
    counts = {k: np.bincount(c) for k, c in codes.items()}
    for _ in range(max_iter):
        change = 0.0
        for k, c in codes.items():
            step = np.bincount(c, weights=r, minlength=len(counts[k])) / counts[k]
            effects[k] += step
            r -= step[c]
            change = max(change, float(np.abs(step).max()))
        if change < tol:
            return effects
    raise ConvergenceError("fixed-effect recovery did not converge", change)


# -- report --------------------------------------------------------------------


def stars(p):
    if p is None or not np.isfinite(p):
        return ""
    for cut, mark in STARS:
        if p < cut:
            return mark
    return ""


@dataclass
class EstimateReport:
    """Coefficients, inference and metadata of one fit."""

    labels: list
    params: np.ndarray
    cov: np.ndarray
    resid: np.ndarray
    n: int
    estimator: str
    fit: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    first_stage: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    price: str = "price"

    @property
    def se(self):
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))

    @property
    def tstat(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.params / self.se

    @property
    def pvalue(self):
        return 2 * stats.norm.sf(np.abs(self.tstat))

    @property
    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"estimate": self.params, "se": self.se, "t": self.tstat, "p": self.pvalue},
                            index=pd.Index(self.labels, name="term"))

    def coef(self, label):
        return float(self.params[self.labels.index(label)])

    def stderr(self, label):
        return float(self.se[self.labels.index(label)])

    def conf_int(self, label, level=0.95):
        z = stats.norm.ppf(0.5 + level / 2)
        b, s = self.coef(label), self.stderr(label)
        return b - z * s, b + z * s

    @property
    def alpha(self):
        """Price sensitivity: minus the fitted price coefficient."""
        return -self.coef(self.price) if self.price in self.labels else None

    @property
    def sigma(self):
        return self.coef(NEST_LABEL) if NEST_LABEL in self.labels else None

    @property
    def sigma_out_of_range(self):
        s = self.sigma
        return s is not None and not 0 <= s < 1

    @property
    def beta(self):
        return {k: float(v) for k, v in zip(self.labels, self.params) if k not in (self.price, NEST_LABEL)}

    def to_dict(self):
        t = self.table
        z = stats.norm.ppf(0.975)
        coefs = {
            k: {"estimate": _num(r.estimate), "se": _num(r.se), "t": _num(r.t), "p": _num(r.p),
                "ci_low": _num(r.estimate - z * r.se), "ci_high": _num(r.estimate + z * r.se)}
            for k, r in t.iterrows()
        }
        out = {
            "estimator": self.estimator,
            "n": int(self.n),
            "coefficients": coefs,
            "alpha": _num(self.alpha),
            "sigma": _num(self.sigma),
            "sigma_out_of_range": bool(self.sigma_out_of_range),
            "fit": {k: _num(v) for k, v in self.fit.items()},
            "meta": _plain(self.meta),
        }
        if self.first_stage:
            out["first_stage"] = {k: _plain(v) for k, v in self.first_stage.items()}
        if self.diagnostics:
            out["diagnostics"] = _plain(self.diagnostics)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self, title=None):
        rows = [(k, f"{b:.4f}{stars(p)}", f"({s:.4f})") for k, b, s, p in
                zip(self.labels, self.params, self.se, self.pvalue)]
        w0 = max([len("term")] + [len(r[0]) for r in rows])
        w1 = max([len("estimate")] + [len(r[1]) for r in rows])
        w2 = max([len("se")] + [len(r[2]) for r in rows])
        lines = [title or self.estimator, f"{'term':<{w0}}  {'estimate':>{w1}}  {'se':>{w2}}"]
        lines.append("-" * len(lines[-1]))
        lines += [f"{a:<{w0}}  {b:>{w1}}  {c:>{w2}}" for a, b, c in rows]
        lines.append("-" * len(lines[2]))
        lines.append(f"N = {self.n}")
        for k in ("gaussian_loglik", "r2", "adj_r2", "pseudo_r2", "objective"):
            if k in self.fit and self.fit[k] is not None:
                lines.append(f"{k} = {self.fit[k]:.4f}")
        if self.alpha is not None:
            lines.append(f"alpha (minus price coefficient) = {self.alpha:.4f}")
        if self.sigma is not None:
            flag = "  [outside [0, 1)]" if self.sigma_out_of_range else ""
            lines.append(f"sigma (nest coefficient) = {self.sigma:.4f}{flag}")
        if self.meta.get("cluster"):
            lines.append(f"standard errors clustered by {self.meta['cluster']}")
        lines.append("* p<0.05, ** p<0.01, *** p<0.001")
        return "\n".join(lines) + "\n"


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if np.isfinite(v) else None


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


# -- shared linear algebra -----------------------------------------------------


def _matrix(X, prefix="x"):
    if isinstance(X, pd.DataFrame):
        return X.to_numpy(float), [str(c) for c in X.columns]
    if isinstance(X, pd.Series):
        return X.to_numpy(float)[:, None], [str(X.name or prefix)]
    A = np.asarray(X, float)
    if A.ndim == 1:
        A = A[:, None]
    return A, [f"{prefix}{i}" for i in range(A.shape[1])]


def check_rank(A, labels, what="regressor"):
    """Raise when ``A`` is rank deficient, naming the dependent columns."""
    if A.shape[1] == 0:
        return
    _, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > RANK_TOL * d[0])) if d.size and d[0] > 0 else 0
    if rank < A.shape[1]:
        bad = [labels[i] for i in piv[rank:]]
        raise RankDeficiencyError(f"{what} matrix is rank deficient; dependent columns: {', '.join(bad)}", bad)


def _cluster_codes(cluster, n):
    if cluster is None:
        return None
    c = np.asarray(cluster)
    if c.shape[0] != n:
        raise ConfigError("cluster labels do not match the number of observations")
    return pd.factorize(c, sort=True)[0]


def _meat(scores, cluster):
    if cluster is None:
        return scores.T @ scores
    g = Groups(cluster).sum(scores)
    return g.T @ g


def _scale(n, k, cluster):
    if cluster is None:
        return n / (n - k) if n > k else np.nan
    g = int(cluster.max()) + 1
    return g / (g - 1) * (n - 1) / (n - k) if g > 1 and n > k else np.nan


def _nested_in(fe_codes, cluster):
    """Fixed-effect dimensions whose groups never span two clusters."""
    out = []
    for k, c in fe_codes.items():
        pairs = pd.DataFrame({"g": c, "c": cluster}).drop_duplicates()
        if not pairs["g"].duplicated().any():
            out.append(k)
    return out


def _absorbed_k(ab: Absorbed, fe_codes, cluster):
    if not fe_codes:
        return 0
    if cluster is None:
        return ab.dof
    nested = set(_nested_in(fe_codes, cluster))
    free = [k for k in fe_codes if k not in nested]
    if not free:
        return 0
    return sum(ab.levels[k] for k in free) - (len(free) - 1) - (1 if nested else 0)


def _fit_stats(e, y_dm, n, k_total):
    ssr = float(e @ e)
    tss = float(((y_dm - y_dm.mean()) ** 2).sum())
    r2 = 1 - ssr / tss if tss > 0 else np.nan
    adj = 1 - (1 - r2) * (n - 1) / (n - k_total) if n > k_total else np.nan
    s2 = ssr / n
    ll = -0.5 * n * (np.log(2 * np.pi * s2) + 1) if s2 > 0 else np.inf
    return {"gaussian_loglik": ll, "r2": r2, "adj_r2": adj, "ssr": ssr}


def _finite_rows(*arrays):
    ok = np.ones(len(arrays[0]), bool)
    for a in arrays:
        a = np.asarray(a, float)
        ok &= np.isfinite(a.reshape(len(a), -1)).all(axis=1)
    return ok


# -- OLS -----------------------------------------------------------------------


def fit_ols(y, X, cluster=None, fe=None, cluster_name=None, price="price", tol=1e-10) -> EstimateReport:
    """Least squares with robust or cluster-robust standard errors.

    ``fe`` maps dimension names to labels to absorb first; coefficients are
    then within estimates (Frisch-Waugh).  HC1 scaling ``N/(N-K)`` or the
    cluster correction ``G/(G-1) (N-1)/(N-K)`` where ``K`` counts absorbed
    levels not nested within clusters.
    """
    A, labels = _matrix(X)
    y = np.asarray(y, float)
    if len(y) != len(A):
        raise ConfigError("y and X have different numbers of rows")
    ok = _finite_rows(y, A)
    dropped = int((~ok).sum())
    codes = {k: v[ok] for k, v in _as_codes(fe).items()}
    cl = _cluster_codes(cluster, len(y))
    y, A = y[ok], A[ok]
    cl = None if cl is None else pd.factorize(cl[ok], sort=True)[0]
    ab = absorb_fixed_effects(y, A, codes, tol=tol)
    yd, Ad = ab.y, ab.X
    check_rank(Ad, labels)
    n, k = Ad.shape
    b, *_ = linalg.lstsq(Ad, yd, lapack_driver="gelsy")
    e = yd - Ad @ b
    bread = linalg.inv(Ad.T @ Ad)
    k_eff = k + _absorbed_k(ab, codes, cl)
    cov = bread @ _meat(Ad * e[:, None], cl) @ bread * _scale(n, k_eff, cl)
    fit = _fit_stats(e, yd, n, k + ab.dof)
    meta = {"cluster": cluster_name if cl is not None else None, "se_type": "cluster" if cl is not None else "HC1",
            "fe": list(codes), "absorb": ab.report(), "dropped_missing": dropped}
    return EstimateReport(labels, b, cov, e, n, "ols", fit, meta, price=price)


# -- IV / GMM ------------------------------------------------------------------


@dataclass
class IVData:
    """Aligned, FE-absorbed matrices shared by the IV fit and its diagnostics."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray  # included exogenous columns followed by excluded instruments
    labels: list
    endog: list
    exog: list
    instruments: list
    cluster: np.ndarray | None
    mask: np.ndarray  # rows of the caller's data retained
    absorbed: Absorbed
    k_fe: int  # absorbed parameters counted in small-sample corrections

    @property
    def n(self):
        return len(self.y)

    @property
    def exog_idx(self):
        return [self.labels.index(c) for c in self.exog]

    @property
    def endog_idx(self):
        return [self.labels.index(c) for c in self.endog]


def prepare_iv(y, X, endogenous, Z, cluster=None, fe=None, tol=1e-10) -> IVData:
    """Align rows, drop missing instruments listwise, absorb fixed effects."""
    A, labels = _matrix(X)
    B, inst = _matrix(Z, "z")
    endogenous = [endogenous] if isinstance(endogenous, str) else list(endogenous)
    unknown = [c for c in endogenous if c not in labels]
    if unknown:
        raise ConfigError(f"endogenous column {unknown[0]!r} is not a regressor")
    overlap = [c for c in inst if c in labels]
    if overlap:
        raise ConfigError(f"excluded instrument {overlap[0]!r} also appears as a regressor")
    if len(inst) < len(endogenous):
        raise IdentificationError(
            f"{len(inst)} excluded instruments for {len(endogenous)} endogenous regressors; need at least as many"
        )
    y = np.asarray(y, float)
    if not (len(y) == len(A) == len(B)):
        raise ConfigError("y, X and Z have different numbers of rows")
    mask = _finite_rows(y, A, B)
    codes = {k: v[mask] for k, v in _as_codes(fe).items()}
    cl = _cluster_codes(cluster, len(y))
    if cl is not None:
        cl = pd.factorize(cl[mask], sort=True)[0]
    exog = [c for c in labels if c not in endogenous]
    full = np.column_stack([A[mask], B[mask]])
    ab = absorb_fixed_effects(y[mask], full, codes, tol=tol)
    Xd, Bd = ab.X[:, : A.shape[1]], ab.X[:, A.shape[1]:]
    Zd = np.column_stack([Xd[:, [labels.index(c) for c in exog]], Bd])
    check_rank(Xd, labels)
    check_rank(Zd, exog + inst, "instrument")
    return IVData(ab.y, Xd, Zd, labels, endogenous, exog, inst, cl, mask, ab, _absorbed_k(ab, codes, cl))


def fit_iv(y, X, endogenous, Z, method="2sls", cluster=None, fe=None, cluster_name=None, price="price",
           tol=1e-10) -> EstimateReport:
    """Instrumental-variables fit of ``y`` on ``X`` with excluded instruments ``Z``.

    Included exogenous columns of ``X`` instrument themselves.  ``2sls``
    solves ``b = (X'P X)^{-1} X'P y``; ``gmm2step`` re-weights with the
    inverse robust (or clustered) moment covariance evaluated at the 2SLS
    residuals.  Rows with a missing instrument are dropped and counted.
    """
    if method not in ("2sls", "gmm2step"):
        raise ConfigError(f"unknown IV method {method!r}")
    d = prepare_iv(y, X, endogenous, Z, cluster, fe, tol)
    b, cov, e, rounds, S = _iv_solve(d, method)
    k_total = d.X.shape[1] + d.absorbed.dof
    fit = _fit_stats(e, d.y, d.n, k_total)
    del fit["r2"], fit["adj_r2"]  # not meaningful under IV
    meta = {
        "cluster": cluster_name if d.cluster is not None else None,
        "se_type": "cluster" if d.cluster is not None else "HC1",
        "fe": list(d.absorbed.levels), "absorb": d.absorbed.report(),
        "endogenous": d.endog, "instruments": d.instruments, "weighting_rounds": rounds,
        "dropped_missing": int((~d.mask).sum()),
    }
    rep = EstimateReport(d.labels, b, cov, e, d.n, method, fit, meta, price=price)
    rep.first_stage = first_stage_tables(d)
    rep.ivdata = d
    return rep


def _iv_solve(d: IVData, method):
    X, Z, y, cl = d.X, d.Z, d.y, d.cluster
    n, k = X.shape
    Qz, Rz = linalg.qr(Z, mode="economic")
    Xh = Qz @ (Qz.T @ X)  # P_Z X
    b = linalg.solve(Xh.T @ X, Xh.T @ y, assume_a="sym")
    e = y - X @ b
    scale = _scale(n, k + d.k_fe, cl)
    if method == "2sls":
        bread = linalg.inv(Xh.T @ Xh)
        cov = bread @ _meat(Xh * e[:, None], cl) @ bread * scale
        return b, cov, e, 1, None
    S = _meat(Z * e[:, None], cl) / n
    W = linalg.pinvh(S)
    ZX, Zy = Z.T @ X / n, Z.T @ y / n
    H = ZX.T @ W @ ZX
    b2 = linalg.solve(H, ZX.T @ W @ Zy, assume_a="sym")
    e2 = y - X @ b2
    cov = linalg.inv(H) / n
    return b2, cov, e2, 2, S


def first_stage_tables(d: IVData):
    """Per endogenous regressor: coefficients on all instruments with robust SEs."""
    out = {}
    names = d.exog + d.instruments
    Z = d.Z
    bread = linalg.inv(Z.T @ Z)
    n, L = Z.shape
    scale = _scale(n, L + d.k_fe, d.cluster)
    for c in d.endog:
        x = d.X[:, d.labels.index(c)]
        g = bread @ (Z.T @ x)
        v = x - Z @ g
        cov = bread @ _meat(Z * v[:, None], d.cluster) @ bread * scale
        se = np.sqrt(np.diag(cov))
        out[c] = {nm: {"estimate": float(gi), "se": float(si)} for nm, gi, si in zip(names, g, se)}
    return out


# -- quantile ------------------------------------------------------------------


def check_loss(u, tau):
    u = np.asarray(u, float)
    return u * (tau - (u < 0))


def fit_quantile(y, X, tau=0.5, fe=None, eps_start=1.0, eps_end=1e-6, tol=1e-8, max_iter=2000,
                 price="price") -> EstimateReport:
    """Quantile regression by smoothed iteratively reweighted least squares.

    Weights ``c_i / max(|u_i|, eps)`` with ``c_i = tau`` for nonnegative and
    ``1 - tau`` for negative residuals; ``eps`` shrinks geometrically to
    ``eps_end`` and iteration stops once the coefficient change is below
    ``tol`` at the final smoothing level, or earlier once the basic solution
    interpolating the ``K`` smallest residuals satisfies the exact
    optimality conditions.  The result is snapped to that basic solution
    whenever it lowers the check loss, which recovers the linear-programming
    optimum.  ``fe`` dimensions enter as explicit
    dummies.  Standard errors use the Powell kernel sandwich with the
    Hall-Sheather bandwidth.
    """
    if not 0 < tau < 1:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    A, labels = _matrix(X)
    y = np.asarray(y, float)
    ok = _finite_rows(y, A)
    y, A = y[ok], A[ok]
    codes = {k: v[ok] for k, v in _as_codes(fe).items()}
    n_main = A.shape[1]
    has_const = bool(np.any(np.all(A == 1.0, axis=0))) if len(A) else False
    for k, c in codes.items():
        first = 1 if has_const else 0
        has_const = True
        dummies = np.eye(c.max() + 1)[c][:, first:]
        A = np.column_stack([A, dummies])
        labels = labels + [f"{k}[{i}]" for i in range(first, c.max() + 1)]
    check_rank(A, labels)
    n, k = A.shape
    c_pos, c_neg = tau, 1 - tau

    b = linalg.lstsq(A, y, lapack_driver="gelsy")[0]
    eps = eps_start
    obj = np.inf
    exact = False
    at_level = 0
    for it in range(max_iter):
        u = y - A @ b
        w = np.where(u >= 0, c_pos, c_neg) / np.maximum(np.abs(u), eps)
        sw = np.sqrt(w)
        b_new = linalg.lstsq(A * sw[:, None], y * sw, lapack_driver="gelsy")[0]
        step = float(np.max(np.abs(b_new - b)))
        b = b_new
        obj = float(check_loss(y - A @ b, tau).sum())
        at_level += 1
        if eps <= eps_end and step < tol:
            break
        if it % 25 == 24:
            vb = _vertex(y, A, b, tau)
            if vb is not None and _is_optimal_vertex(y, A, vb, tau):
                b, exact = vb, True
                break
        # move to a finer smoothing level once this one has settled or stalled
        if eps > eps_end and (step < 1e-2 * eps or at_level >= 50):
            eps, at_level = max(eps * 0.1, eps_end), 0
    else:
        raise ConvergenceError(f"quantile IRLS did not converge in {max_iter} iterations (objective {obj:.6g})", obj)

    b = _vertex_polish(y, A, b, tau)
    u = y - A @ b
    obj = float(check_loss(u, tau).sum())
    q0 = np.quantile(y, tau, method="inverted_cdf")
    obj0 = float(check_loss(y - q0, tau).sum())
    cov = _powell_cov(A, u, tau)
    fit = {"objective": obj, "pseudo_r2": 1 - obj / obj0 if obj0 > 0 else np.nan, "tau": tau}
    meta = {"fe": list(codes), "se_type": "powell_kernel", "iterations": it + 1, "n_dummies": k - n_main,
            "exact_vertex": exact}
    rep = EstimateReport(labels[:n_main], b[:n_main], cov[:n_main, :n_main], u, n, f"quantile({tau:g})", fit,
                         meta, price=price)
    rep.all_params = b
    return rep


def _vertex(y, A, b, tau):
    """Basic solution interpolating the observations with the smallest residuals."""
    n, k = A.shape
    order = np.argsort(np.abs(y - A @ b), kind="stable")
    chosen = []
    for i in order:
        if np.linalg.matrix_rank(A[chosen + [i]]) == len(chosen) + 1:
            chosen.append(i)
            if len(chosen) == k:
                break
    if len(chosen) < k:
        return None
    try:
        return linalg.solve(A[chosen], y[chosen])
    except linalg.LinAlgError:
        return None


def _is_optimal_vertex(y, A, b, tau, tol=1e-9):
    """Exact optimality of a basic solution of the check-loss problem.

    With basis ``h`` (zero residuals) the subgradient condition asks for
    ``lam`` in ``[tau - 1, tau]`` solving ``A_h' lam = -sum_{i not in h}
    (tau - 1{u_i < 0}) a_i``.
    """
    u = y - A @ b
    scale = max(1.0, float(np.abs(y).max()))
    zero = np.abs(u) <= 1e-10 * scale
    if zero.sum() != A.shape[1]:
        return False
    g = A[~zero].T @ (tau - (u[~zero] < 0))
    try:
        lam = linalg.solve(A[zero].T, -g)
    except linalg.LinAlgError:
        return False
    return bool(np.all(lam >= tau - 1 - tol) and np.all(lam <= tau + tol))


def _vertex_polish(y, A, b, tau):
    cand = _vertex(y, A, b, tau)
    if cand is None:
        return b
    best = float(check_loss(y - A @ b, tau).sum())
    val = float(check_loss(y - A @ cand, tau).sum())
    return cand if val <= best else b


def _powell_cov(A, u, tau):
    n, k = A.shape
    z = stats.norm.ppf(0.975)
    x = stats.norm.ppf(tau)
    h = n ** (-1 / 3) * z ** (2 / 3) * (1.5 * stats.norm.pdf(x) ** 2 / (2 * x * x + 1)) ** (1 / 3)
    lo, hi = max(tau - h, 1e-6), min(tau + h, 1 - 1e-6)
    iqr = np.subtract(*np.quantile(u, [0.75, 0.25]))
    spread = min(np.std(u), iqr / 1.34) if iqr > 0 else np.std(u)
    bw = (stats.norm.ppf(hi) - stats.norm.ppf(lo)) * spread
    if bw <= 0:
        return np.full((k, k), np.nan)
    kern = (np.abs(u) <= bw) / (2 * bw)
    J = (A * kern[:, None]).T @ A / n
    Sig = tau * (1 - tau) * A.T @ A / n
    try:
        Ji = linalg.inv(J)
    except linalg.LinAlgError:
        return np.full((k, k), np.nan)
    return Ji @ Sig @ Ji / n


def quantile_process(y, X, taus, fe=None, **kw):
    """Fits over several quantiles plus a crossing check at the mean regressor."""
    reports = [fit_quantile(y, X, t, fe=fe, **kw) for t in taus]
    A, _ = _matrix(X)
    xbar = np.nanmean(A, axis=0)
    fitted = np.array([xbar @ r.params for r in reports])
    crossings = [(float(taus[i]), float(taus[i + 1])) for i in range(len(taus) - 1) if fitted[i + 1] < fitted[i]]
    if crossings:
        logger.warning("quantile crossing at the mean regressor between %s", crossings)
    return reports, {"fitted_at_mean": fitted.tolist(), "crossings": crossings}
