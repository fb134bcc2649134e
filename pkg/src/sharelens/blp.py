"""Forward choice models, share inversion and random-coefficients GMM.

All routines work on flat per-observation arrays; ``cells`` labels the
(market, period) cell of each observation and ``nests`` its nest.  The outside
option has mean utility zero in every cell.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, stats
from scipy.stats import qmc

from ._groups import Groups
from .errors import ConfigError, ConvergenceError, FormulaError, ShareLensError
from .estimate import EstimateReport, _fit_stats, _meat, absorb_fixed_effects, prepare_iv

logger = logging.getLogger(__name__)

KINDS = ("logit", "nested_logit", "random_coefficients")


@dataclass
class ChoiceModelConfig:
    """Forward demand model.

    ``rc`` maps column names to standard deviations of normal taste shocks
    (random-coefficients kind only); ``sigma`` is the nest parameter.
    """

    kind: str = "logit"
    sigma: float = 0.0
    rc: dict = field(default_factory=dict)
    n_draws: int = 200
    draw_scheme: str = "halton"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown choice model kind {self.kind!r}")
        if self.kind == "nested_logit" and not 0 <= self.sigma < 1:
            raise ConfigError(f"nest parameter must lie in [0, 1), got {self.sigma}")
        if self.kind == "random_coefficients":
            if self.n_draws < 1:
                raise ConfigError("n_draws must be at least 1")
            if any(v < 0 for v in self.rc.values()):
                raise ConfigError("random-coefficient standard deviations must be nonnegative")
            if self.draw_scheme not in ("halton", "pseudo"):
                raise ConfigError(f"unknown draw scheme {self.draw_scheme!r}")

    def with_rc(self, rc):
        return ChoiceModelConfig(self.kind, self.sigma, dict(rc), self.n_draws, self.draw_scheme, self.seed)


def draw_tastes(n_draws, dim, scheme="halton", seed=0):
    """Standard normal taste draws of shape ``(n_draws, dim)``.

    Halton points use bases 2, 3, 5, ... with a seeded scramble.
    """
    if dim == 0:
        return np.zeros((n_draws, 0))
    if scheme == "halton":
        u = qmc.Halton(d=dim, scramble=True, seed=np.random.default_rng(seed)).random(n_draws)
    elif scheme == "pseudo":
        u = np.random.default_rng(seed).random((n_draws, dim))
    else:
        raise ConfigError(f"unknown draw scheme {scheme!r}")
    return stats.norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))


class Market:
    """Cell and nest structure shared by repeated share evaluations.

    Precomputing the groupings keeps the inner loop of inversion and GMM
    free of label handling.
    """

    def __init__(self, cells, nests=None, rc_data=None, config: ChoiceModelConfig | None = None):
        self.cell_labels = np.asarray(cells)
        self.cells = Groups(cells)
        self.n = self.cells.n
        self.nests = None
        if nests is not None:
            self.nests = Groups(np.column_stack([self.cells.codes, pd.factorize(np.asarray(nests))[0]]))
            # map each (cell, nest) group to its cell
            self.nest_cell = Groups(self.nests.max(self.cells.codes))
        self.config = config or ChoiceModelConfig()
        self.rc_data = None
        self.draws = None
        if self.config.kind == "random_coefficients":
            cols = list(self.config.rc)
            if rc_data is None:
                raise ConfigError("random-coefficients model needs the random-coefficient columns")
            rc_data = pd.DataFrame(rc_data) if not isinstance(rc_data, pd.DataFrame) else rc_data
            missing = [c for c in cols if c not in rc_data.columns]
            if missing:
                raise FormulaError(f"unknown random-coefficient column {missing[0]!r}")
            self.rc_data = rc_data[cols].to_numpy(float)
            self.draws = draw_tastes(self.config.n_draws, len(cols), self.config.draw_scheme, self.config.seed)

    def mu(self, rc=None):
        """Consumer-specific utility deviations, shape ``(n, n_draws)``."""
        sd = np.array(list((rc if rc is not None else self.config.rc).values()), float)
        return self.rc_data @ (self.draws * sd).T

    def shares(self, delta, rc=None, mu=None, individual=False):
        kind = self.config.kind
        delta = np.asarray(delta, float)
        if kind == "logit":
            return _logit(delta, self.cells)
        if kind == "nested_logit":
            return _nested(delta, self.config.sigma, self.cells, self.nests, self.nest_cell)
        if mu is None:
            mu = self.mu(rc)
        return _mixed(delta, mu, self.cells, individual)


def _logit(delta, cells: Groups):
    m = np.maximum(cells.max(delta), 0.0)
    e = np.exp(delta - cells.expand(m))
    denom = np.exp(-m) + cells.sum(e)
    return e / cells.expand(denom), cells.expand(np.exp(-m) / denom)


def _nested(delta, sigma, cells: Groups, nests: Groups, grouped: Groups):
    if nests is None:
        raise ConfigError("nested logit needs nest labels")
    lam = 1.0 - sigma
    a = delta / lam
    m_g = nests.max(a)
    log_d = m_g + np.log(nests.sum(np.exp(a - nests.expand(m_g))))
    within = np.exp(a - nests.expand(log_d))
    incl = lam * log_d
    m = np.maximum(grouped.max(incl), 0.0)
    denom = np.exp(-m) + grouped.sum(np.exp(incl - grouped.expand(m)))
    s_nest = np.exp(incl - grouped.expand(m)) / grouped.expand(denom)
    s0_cell = np.exp(-m) / denom
    # ``grouped`` levels are the cell codes present, in sorted order
    s0 = np.empty(cells.count)
    s0[grouped.levels] = s0_cell
    return within * nests.expand(s_nest), cells.expand(s0)


def _mixed(delta, mu, cells: Groups, individual=False):
    u = delta[:, None] + mu
    m = np.maximum(cells.max(u), 0.0)
    e = np.exp(u - cells.expand(m))
    denom = np.exp(-m) + cells.sum(e)
    s_i = e / cells.expand(denom)
    s0_i = np.exp(-m) / denom
    if individual:
        return s_i, cells.expand(s0_i)
    return s_i.mean(axis=1), cells.expand(s0_i.mean(axis=1))


def predict_shares(delta, config: ChoiceModelConfig, cells, nests=None, rc_data=None):
    """Predicted inside shares and the outside share of each observation's cell.

    Logit: ``s_j = exp(d_j) / (1 + sum_k exp(d_k))``.  Nested logit divides
    utilities by ``1 - sigma`` within nests and combines nest inclusive values
    at the top level.  Random coefficients average logit shares over taste
    draws ``mu_ij = sum_v sd_v * nu_iv * x_jv``.  Every exponential is
    shifted by its group maximum.
    """
    return Market(cells, nests, rc_data, config).shares(delta)


# -- inversion ----------------------------------------------------------------


@dataclass
class Inversion:
    delta: np.ndarray
    converged: bool
    f_evals: int
    iterations: np.ndarray  # per cell
    residual: float


def invert_shares(
    s_obs, config: ChoiceModelConfig, cells, nests=None, rc_data=None, tol=1e-12, max_iter=5000,
    accelerate="squarem", delta0=None, market: Market | None = None, rc=None,
) -> Inversion:
    """Mean utilities reproducing observed shares.

    Iterates ``F(d) = d + c * (ln s_obs - ln s(d))`` per cell, where ``c`` is
    ``1 - sigma`` for nested logit and 1 otherwise.  Convergence is
    ``max |F(d) - d| < tol`` in every cell.  With ``accelerate="squarem"``
    each cycle extrapolates two F-steps with step length
    ``-||r|| / ||v||`` per cell and falls back to the plain double step when
    the extrapolated point has a larger residual.
    """
    market = market or Market(cells, nests, rc_data, config)
    s_obs = np.asarray(s_obs, float)
    if np.any(s_obs <= 0):
        raise ShareLensError("observed shares must be strictly positive")
    log_s = np.log(s_obs)
    damp = 1.0 - config.sigma if config.kind == "nested_logit" else 1.0
    mu = market.mu(rc) if config.kind == "random_coefficients" else None
    cells_g = market.cells
    if delta0 is None:
        s0 = 1.0 - cells_g.expand(cells_g.sum(s_obs))
        delta0 = log_s - np.log(s0)
    delta = np.array(delta0, float)

    evals = 0

    def F(d):
        nonlocal evals
        evals += 1
        s, _ = market.shares(d, mu=mu)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = d + damp * (log_s - np.log(s))
        bad = ~np.isfinite(out)
        if bad.any():
            raise ShareLensError(
                f"non-finite mean utility during inversion in cell {market.cell_labels[np.argmax(bad)]!r}"
            )
        return out

    def cell_norm(x, kind="inf"):
        if kind == "inf":
            return cells_g.max(np.abs(x))
        return np.sqrt(cells_g.sum(x * x))

    if accelerate not in ("none", "squarem"):
        raise ConfigError(f"unknown acceleration {accelerate!r}")
    iters = np.zeros(cells_g.count, int)
    active = np.ones(cells_g.count, bool)
    res = np.full(cells_g.count, np.inf)
    for _ in range(max_iter):
        f1 = F(delta)
        r = f1 - delta
        res = np.where(active, cell_norm(r), res)
        active &= ~(res < tol)
        if not active.any():
            return Inversion(f1, True, evals, iters, float(res.max()))
        iters[active] += 1
        act = cells_g.expand(active)
        if accelerate == "none":
            delta = np.where(act, f1, delta)
            continue
        f2 = F(f1)
        v = f2 - 2 * f1 + delta
        nr, nv = cell_norm(r, "two"), cell_norm(v, "two")
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(nv > 0, -nr / nv, -1.0)
        a = cells_g.expand(np.minimum(alpha, -1.0))
        cand = delta - 2 * a * r + a * a * v
        try:
            g = F(cand)
            ok = cell_norm(g - cand) <= res
        except ShareLensError:
            g, ok = cand, np.zeros(cells_g.count, bool)
        delta = np.where(act, np.where(cells_g.expand(ok), g, f2), delta)
    raise ConvergenceError(
        f"share inversion did not converge in {max_iter} iterations (residual {res.max():.3g})", float(res.max())
    )


def squarem_step(delta, r, v):
    """Extrapolated point ``d - 2 a r + a^2 v`` with ``a = -||r|| / ||v||``."""
    r, v = np.asarray(r, float), np.asarray(v, float)
    nv = np.linalg.norm(v)
    alpha = -np.linalg.norm(r) / nv if nv > 0 else -1.0
    alpha = min(alpha, -1.0)
    return np.asarray(delta, float) - 2 * alpha * r + alpha**2 * v, alpha


# -- random-coefficients GMM ---------------------------------------------------


def differentiation_instruments(data, columns, cells, prefix="iv_diff"):
    """Sum over same-cell rivals of squared characteristic differences.

    For column ``x`` and alternative ``j``: ``sum_k (x_j - x_k)^2`` over the
    other alternatives in the cell, computed as
    ``n x_j^2 - 2 x_j S1 + S2`` with cell sums ``S1`` and ``S2``.
    """
    g = Groups(cells)
    out = {}
    for c in columns:
        x = np.asarray(pd.DataFrame(data)[c], float)
        n = g.expand(g.sizes)
        s1, s2 = g.expand(g.sum(x)), g.expand(g.sum(x * x))
        out[f"{prefix}_{c}"] = n * x * x - 2 * x * s1 + s2
    return pd.DataFrame(out)


@dataclass
class BLPResult:
    sigma: dict
    sigma_se: dict
    report: EstimateReport  # linear and sigma parameters
    objective: float
    converged: bool
    delta: np.ndarray
    trace: list
    config: ChoiceModelConfig
    failures: int = 0

    def to_dict(self):
        out = self.report.to_dict()
        out["sigma_hat"] = {k: float(v) for k, v in self.sigma.items()}
        out["sigma_se"] = {k: (float(v) if np.isfinite(v) else None) for k, v in self.sigma_se.items()}
        out["gmm_objective"] = float(self.objective)
        out["converged"] = bool(self.converged)
        out["failed_inversions"] = int(self.failures)
        out["evaluations"] = len(self.trace)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


PENALTY = 1e10


def fit_blp(
    s_obs, cells, X, endogenous, Z, rc_data, rc_columns, sigma0=None, n_draws=200, draw_scheme="halton",
    seed=0, fe=None, cluster=None, cluster_name=None, steps=2, max_evals=400, tol=1e-6, xtol=1e-4,
    inner_tol=1e-12, checkpoint=None, price="price", balanced=True,
):
    """Random-coefficients logit by GMM with a nested share inversion.

    For each candidate ``Sigma`` the mean utilities ``delta(Sigma)`` are
    recovered with SQUAREM (warm-started at the previous candidate's
    solution), the linear parameters are concentrated out by linear GMM
    of ``delta`` on ``X`` with instruments ``[exogenous X, Z]`` after fixed
    effects are absorbed, and the objective is ``N g'W g`` with
    ``g = Z'xi / N``.  Step one uses ``W = (Z'Z/N)^{-1}``; step two
    re-weights with the inverse robust (or clustered) moment covariance at
    the step-one estimate.  The outer search is Nelder-Mead over
    ``|theta|`` with both the simplex size and objective spread below
    tolerance.  Candidates whose inversion fails receive a large penalty.
    When ``checkpoint`` is a path the evaluation trace is written there as
    JSON after every evaluation.

    Standard errors come from the GMM sandwich with the Jacobian of
    ``delta`` in ``Sigma`` taken by central differences.
    """
    rc_columns = list(rc_columns)
    if not rc_columns:
        raise ConfigError("fit_blp needs at least one random-coefficient column")
    s_obs = np.asarray(s_obs, float)
    cells = np.asarray(cells)
    if not balanced:
        logger.info("fit_blp on an unbalanced panel by explicit allowance")
    rc_frame = pd.DataFrame(rc_data).reset_index(drop=True)
    missing = [c for c in rc_columns if c not in rc_frame.columns]
    if missing:
        raise FormulaError(f"unknown random-coefficient column {missing[0]!r}")

    # the linear part is fixed across candidates: prepare once with a placeholder outcome
    d = prepare_iv(np.zeros(len(s_obs)), X, endogenous, Z, cluster, fe)
    keep = d.mask
    if not keep.all():
        logger.info("fit_blp drops %d rows with missing instruments", int((~keep).sum()))
    s_k, cells_k = s_obs[keep], cells[keep]
    rc_k = rc_frame.loc[keep].reset_index(drop=True)
    fe_k = {k: np.asarray(v)[keep] for k, v in (fe or {}).items()}
    config = ChoiceModelConfig("random_coefficients", rc={c: 0.0 for c in rc_columns}, n_draws=n_draws,
                               draw_scheme=draw_scheme, seed=seed)
    market = Market(cells_k, None, rc_k, config)
    n = d.n
    Xd, Zd = d.X, d.Z
    K = Xd.shape[1]
    ZX = Zd.T @ Xd / n

    state = {"delta": None, "trace": [], "failures": 0, "step": 1}

    def delta_of(sig):
        rc = dict(zip(rc_columns, sig))
        inv = invert_shares(s_k, market.config, cells_k, tol=inner_tol, accelerate="squarem",
                            delta0=state["delta"], market=market, rc=rc)
        return inv

    def demean(v):
        return absorb_fixed_effects(v, np.zeros((len(v), 0)), fe_k).y if fe_k else v

    def linear(delta_dm, W):
        H = ZX.T @ W @ ZX
        b = np.linalg.solve(H, ZX.T @ W @ (Zd.T @ delta_dm / n))
        xi = delta_dm - Xd @ b
        g = Zd.T @ xi / n
        return b, xi, float(n * g @ W @ g)

    def objective(theta, W):
        sig = np.abs(np.asarray(theta, float))
        try:
            inv = delta_of(sig)
        except ShareLensError as exc:
            state["failures"] += 1
            logger.warning("share inversion failed at sigma %s: %s", sig.tolist(), exc)
            _record(state, sig, PENALTY, None, checkpoint)
            return PENALTY
        state["delta"] = inv.delta
        _, _, q = linear(demean(inv.delta), W)
        _record(state, sig, q, inv, checkpoint)
        return q

    W = np.linalg.inv(Zd.T @ Zd / n)
    start = np.asarray(sigma0 if sigma0 is not None else [0.5] * len(rc_columns), float)
    converged = True
    best = start
    for step in range(1, steps + 1):
        state["step"] = step
        res = optimize.minimize(
            objective, best, args=(W,), method="Nelder-Mead",
            options={"xatol": xtol, "fatol": tol, "maxfev": max_evals, "initial_simplex": _simplex(best)},
        )
        converged &= bool(res.success)
        if not res.success:
            logger.warning("outer search stopped without convergence: %s", res.message)
        best = np.abs(res.x)
        state["delta"] = delta_of(best).delta
        b, xi, q = linear(demean(state["delta"]), W)
        if step < steps:
            S = _moment_cov(Zd, xi, d.cluster)
            W = np.linalg.inv(S)

    sig = best
    inv = delta_of(sig)
    delta_dm = demean(inv.delta)
    b, xi, q = linear(delta_dm, W)

    # Jacobian of delta in Sigma by central differences
    J = np.empty((n, len(sig)))
    for i in range(len(sig)):
        h = 1e-4 * max(1.0, sig[i])
        up, dn = sig.copy(), sig.copy()
        up[i] += h
        dn[i] = dn[i] - h
        try:
            J[:, i] = (demean(delta_of(up).delta) - demean(delta_of(dn).delta)) / (2 * h)
        except ShareLensError:
            J[:, i] = np.nan
    G = np.column_stack([-ZX, Zd.T @ J / n])
    S = _moment_cov(Zd, xi, d.cluster)
    try:
        bread = np.linalg.inv(G.T @ W @ G)
        cov = bread @ G.T @ W @ S @ W @ G @ bread / n
    except np.linalg.LinAlgError:  # singular Jacobian, e.g. Sigma at the boundary
        cov = np.full((K + len(sig), K + len(sig)), np.nan)
    labels = d.labels + [f"sigma[{c}]" for c in rc_columns]
    fit = _fit_stats(xi, delta_dm, n, K + d.absorbed.dof)
    fit = {"gaussian_loglik": fit["gaussian_loglik"], "objective": q}
    meta = {"estimator": "blp_gmm", "steps": steps, "fe": list(fe_k), "cluster": cluster_name,
            "endogenous": d.endog, "instruments": d.instruments, "n_draws": n_draws, "draw_scheme": draw_scheme,
            "dropped_missing": int((~keep).sum()), "evaluations": len(state["trace"])}
    report = EstimateReport(labels, np.r_[b, sig], cov, xi, n, "blp", fit, meta, price=price)
    se = np.sqrt(np.diag(cov))[K:] if np.all(np.isfinite(cov)) else np.full(len(sig), np.nan)
    cfg = config.with_rc(dict(zip(rc_columns, sig)))
    full_delta = np.full(len(s_obs), np.nan)
    full_delta[keep] = inv.delta
    return BLPResult(dict(zip(rc_columns, sig)), dict(zip(rc_columns, se)), report, q, converged, full_delta,
                     state["trace"], cfg, state["failures"])


def _simplex(x0):
    k = len(x0)
    pts = [np.asarray(x0, float)]
    for i in range(k):
        p = np.asarray(x0, float).copy()
        p[i] = p[i] + (0.25 if abs(p[i]) < 0.05 else 0.5 * abs(p[i]))
        pts.append(p)
    return np.array(pts)


def _moment_cov(Z, xi, cluster):
    return _meat(Z * xi[:, None], cluster) / len(xi)


def _record(state, sig, q, inv, path):
    entry = {"step": state["step"], "sigma": [float(s) for s in sig], "objective": float(q),
             "inner_f_evals": None if inv is None else int(inv.f_evals),
             "inner_max_iterations": None if inv is None else int(inv.iterations.max())}
    state["trace"].append(entry)
    if path is not None:
        with open(path, "w") as fh:
            json.dump({"trace": state["trace"], "failures": state["failures"]}, fh, indent=1)


def load_checkpoint(path):
    """Trace written by :func:`fit_blp`; the best iterate seeds a resumed run."""
    with open(path) as fh:
        data = json.load(fh)
    ok = [t for t in data["trace"] if t["objective"] < PENALTY]
    best = min(ok, key=lambda t: t["objective"]) if ok else None
    return data, (np.array(best["sigma"]) if best else None)


# -- elasticities --------------------------------------------------------------


@dataclass
class Elasticities:
    own: np.ndarray
    aggregates: dict
    check: dict | None = None

    def to_dict(self):
        out = {"aggregates": self.aggregates, "n": int(len(self.own))}
        if self.check is not None:
            out["finite_difference_check"] = self.check
        return out


def marginal_utility(coefs: dict, frame: pd.DataFrame, target: str):
    """``d delta / d target`` per observation, including interaction terms."""
    if target not in coefs and not any(k.split(":")[0] == target or k.split(":")[-1] == target
                                       for k in coefs if ":" in k):
        raise FormulaError(f"target {target!r} has no fitted coefficient")
    mu = np.full(len(frame), float(coefs.get(target, 0.0)))
    for k, v in coefs.items():
        if ":" not in k:
            continue
        a, b = k.split(":", 1)
        if a == target:
            mu = mu + v * frame[b].to_numpy(float)
        if b == target:
            mu = mu + v * frame[a].to_numpy(float)
    return mu


def own_elasticities(x, beta, config: ChoiceModelConfig, delta, cells, nests=None, rc_data=None, target=None):
    """Own elasticities ``(ds_j / dx_j) (x_j / s_j)`` under the forward model.

    ``beta`` is the marginal utility of ``x`` (scalar or per observation).
    Logit: ``beta x (1 - s)``.  Nested: ``beta x (1/(1-sigma) -
    sigma/(1-sigma) s_{j|g} - s)``.  Random coefficients average the
    per-draw derivative ``beta_i s_ij (1 - s_ij)`` where ``beta_i`` adds the
    taste shock when ``target`` carries a random coefficient.
    """
    x = np.asarray(x, float)
    beta = np.broadcast_to(np.asarray(beta, float), x.shape)
    m = Market(cells, nests, rc_data, config)
    if config.kind == "logit":
        s, _ = m.shares(delta)
        return beta * x * (1 - s)
    if config.kind == "nested_logit":
        s, _ = m.shares(delta)
        within = s / m.nests.expand(m.nests.sum(s))
        sg = config.sigma
        return beta * x * (1 / (1 - sg) - sg / (1 - sg) * within - s)
    s_i, _ = m.shares(delta, individual=True)
    s = s_i.mean(axis=1)
    b_i = np.repeat(beta[:, None], s_i.shape[1], axis=1)
    if target is not None and target in config.rc:
        col = list(config.rc).index(target)
        b_i = b_i + config.rc[target] * m.draws[:, col][None, :]
    ds = (b_i * s_i * (1 - s_i)).mean(axis=1)
    return ds * x / s


def finite_difference_elasticities(x, beta, config: ChoiceModelConfig, delta, cells, nests=None, rc_data=None,
                                   target=None, rel_step=1e-6):
    """Central differences of ``predict_shares`` in each alternative's own ``x``.

    One alternative per cell is perturbed at a time; cells are independent
    so each round perturbs the ``m``-th alternative of every cell at once.
    """
    x = np.asarray(x, float)
    delta = np.asarray(delta, float)
    beta = np.broadcast_to(np.asarray(beta, float), x.shape)
    g = Groups(cells)
    rank = np.empty(len(x), int)
    rank[g.order] = np.arange(len(x)) - np.repeat(g.starts, g.sizes)
    rc_frame = None if rc_data is None else pd.DataFrame(rc_data).reset_index(drop=True)
    s, _ = predict_shares(delta, config, cells, nests, rc_frame)
    out = np.empty(len(x))
    for r in range(int(rank.max()) + 1):
        sel = rank == r
        h = rel_step * np.maximum(1.0, np.abs(x))
        res = []
        for sign in (1.0, -1.0):
            dd = delta + np.where(sel, sign * beta * h, 0.0)
            rc = rc_frame
            if rc is not None and target is not None and target in config.rc:
                rc = rc.copy()
                rc[target] = rc[target].to_numpy(float) + np.where(sel, sign * h, 0.0)
            res.append(predict_shares(dd, config, cells, nests, rc)[0])
        deriv = (res[0] - res[1]) / (2 * h)
        out[sel] = (deriv * x / s)[sel]
    return out


def elasticities(coefs: dict, frame: pd.DataFrame, target: str, config: ChoiceModelConfig, delta, cells,
                 nests=None, recommended=None, weights=None, check=False, scale=0.10):
    """Own elasticities of ``target`` and scoped averages.

    Aggregates report the mean elasticity and the implied percentage demand
    response to a ``scale`` increase in ``target``, over all alternatives and
    over the ``recommended`` subset, both unweighted and weighted by
    ``weights`` (for example visits).  With ``check`` each analytic value is
    compared with a central finite difference of the forward model.
    """
    if target not in frame.columns:
        raise FormulaError(f"unknown target column {target!r}")
    beta = marginal_utility(coefs, frame, target)
    x = frame[target].to_numpy(float)
    rc_data = frame if config.kind == "random_coefficients" else None
    eta = own_elasticities(x, beta, config, delta, cells, nests, rc_data, target)
    rec = np.ones(len(x), bool) if recommended is None else np.asarray(recommended, bool)
    w = np.ones(len(x)) if weights is None else np.asarray(weights, float)
    agg = {}
    for scope, m in (("all", np.ones(len(x), bool)), ("recommended", rec)):
        if not m.any():
            agg[scope] = None
            continue
        agg[scope] = {
            "mean": float(eta[m].mean()),
            "weighted_mean": float(np.average(eta[m], weights=w[m])),
            "demand_response_pct": float(100 * scale * eta[m].mean()),
            "weighted_demand_response_pct": float(100 * scale * np.average(eta[m], weights=w[m])),
            "n": int(m.sum()),
        }
    chk = None
    if check:
        fd = finite_difference_elasticities(x, beta, config, delta, cells, nests, rc_data, target)
        denom = np.maximum(np.abs(eta), 1e-12)
        rel = np.abs(fd - eta) / denom
        rel = np.where(np.abs(eta) < 1e-12, np.abs(fd - eta), rel)
        chk = {"max_relative_error": float(rel.max()), "n": int(len(rel))}
    return Elasticities(eta, agg, chk)
