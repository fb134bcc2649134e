"""Instrument diagnostics, placebo permutations and chronological holdout."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .errors import ConfigError, SampleAlignmentError, ShareLensError
from .estimate import (
    EstimateReport, IVData, _iv_solve, _meat, _plain, _scale, fit_iv, fit_ols, prepare_iv, recover_fixed_effects,
)
from .panel import DesignSpec, MarketPanel, ShareTable, build_design

logger = logging.getLogger(__name__)

# Critical values of the Cragg-Donald statistic for one endogenous regressor,
# indexed by the number of excluded instruments.
STOCK_YOGO_SIZE = {
    "10%": {1: 16.38, 2: 19.93, 3: 22.30, 4: 24.58, 5: 26.87, 6: 29.18},
    "15%": {1: 8.96, 2: 11.59, 3: 12.83, 4: 13.96, 5: 15.09, 6: 16.23},
    "20%": {1: 6.66, 2: 8.75, 3: 9.54, 4: 10.26, 5: 10.98, 6: 11.72},
    "25%": {1: 5.53, 2: 7.25, 3: 7.80, 4: 8.31, 5: 8.84, 6: 9.38},
}
STOCK_YOGO_BIAS = {
    "5%": {3: 13.91, 4: 16.85, 5: 18.37},
    "10%": {3: 9.08, 4: 10.27, 5: 10.83},
    "20%": {3: 6.46, 4: 6.71, 5: 6.77},
    "30%": {3: 5.39, 4: 5.34, 5: 5.25},
}

DEFAULT_THRESHOLDS = {"min_first_stage_f": 10.0, "hansen_alpha": 0.05}


def stock_yogo(n_endog, n_excluded):
    """Tabulated critical values, or ``None`` when the case is not bundled."""
    if n_endog != 1:
        return None
    size = {k: v[n_excluded] for k, v in STOCK_YOGO_SIZE.items() if n_excluded in v}
    bias = {k: v[n_excluded] for k, v in STOCK_YOGO_BIAS.items() if n_excluded in v}
    if not size and not bias:
        return None
    return {"max_size": size, "relative_bias": bias}


@dataclass
class DiagnosticsReport:
    first_stage_f: dict
    first_stage_f_robust: dict
    cragg_donald: float
    kleibergen_paap: dict
    sargan: dict
    hansen_j: dict
    stock_yogo: dict | None
    verdicts: dict
    n: int
    dof_resid: int
    meta: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(v["pass"] for v in self.verdicts.values())

    def to_dict(self):
        return _plain({
            "n": self.n, "dof_resid": self.dof_resid, "first_stage_f": self.first_stage_f,
            "first_stage_f_robust": self.first_stage_f_robust, "cragg_donald": self.cragg_donald,
            "kleibergen_paap_rk": self.kleibergen_paap, "sargan": self.sargan, "hansen_j": self.hansen_j,
            "stock_yogo": self.stock_yogo if self.stock_yogo is not None else "no tabulated value",
            "verdicts": self.verdicts, "passed": self.passed, "meta": self.meta,
        })

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        def p(v):
            return "NA" if v is None or not np.isfinite(v) else f"{v:.4f}"

        lines = ["instrument diagnostics", f"N = {self.n}"]
        for k, v in self.first_stage_f.items():
            lines.append(f"first-stage F [{k}] = {v:.3f} (robust {self.first_stage_f_robust[k]:.3f})")
        lines.append(f"Cragg-Donald min eigenvalue = {self.cragg_donald:.3f}")
        kp = self.kleibergen_paap
        lines.append(f"Kleibergen-Paap rk Wald = {kp['statistic']:.3f} (dof {kp['dof']}, p {p(kp['p'])})")
        for name, t in (("Sargan", self.sargan), ("Hansen J", self.hansen_j)):
            lines.append(f"{name} = {t['statistic']:.4f} (dof {t['dof']}, p {p(t['p'])})")
        if self.stock_yogo:
            for kind, vals in self.stock_yogo.items():
                cells = ", ".join(f"{k}: {v:.2f}" for k, v in vals.items())
                lines.append(f"Stock-Yogo {kind.replace('_', ' ')}: {cells}")
        else:
            lines.append("Stock-Yogo: no tabulated value")
        for k, v in self.verdicts.items():
            lines.append(f"{k}: {'pass' if v['pass'] else 'FAIL'} ({v['detail']})")
        return "\n".join(lines) + "\n"


def _partial(A, B):
    """Residuals of the columns of ``A`` after projecting on ``B``."""
    if B.shape[1] == 0:
        return A
    coef = linalg.lstsq(B, A, lapack_driver="gelsy")[0]
    return A - B @ coef


def _inv_sqrt(S):
    w, V = linalg.eigh(S)
    return V @ np.diag(1 / np.sqrt(w)) @ V.T


def _sqrt(S):
    w, V = linalg.eigh(S)
    return V @ np.diag(np.sqrt(np.maximum(w, 0))) @ V.T


def kleibergen_paap_rk(X2, Z2, cluster=None):
    """Robust rank test that ``Pi`` in ``X2 = Z2 Pi + V`` has rank ``K2 - 1``.

    ``X2`` and ``Z2`` must already be residualized on included exogenous
    variables.  Returns ``(statistic, dof)``; the statistic is chi-squared
    with ``L2 - K2 + 1`` degrees of freedom under the null of
    underidentification.
    """
    n, k2 = X2.shape
    l2 = Z2.shape[1]
    ZZ = Z2.T @ Z2
    pi = linalg.solve(ZZ, Z2.T @ X2, assume_a="sym")
    V = X2 - Z2 @ pi
    G = _sqrt(ZZ / n)
    F = _sqrt(X2.T @ X2 / n)
    theta = G @ pi @ F.T
    # covariance of sqrt(n) vec(pi): (I kron ZZ^-1) meat (I kron ZZ^-1) * n
    scores = np.einsum("ik,il->ikl", V, Z2).reshape(n, k2 * l2)  # vec order: column-major over (l2, k2)
    meat = _meat(scores, cluster)
    Zi = linalg.inv(ZZ)
    A = np.kron(np.eye(k2), Zi)
    cov_pi = A @ meat @ A * n
    FG = np.kron(F, G)
    omega = FG @ cov_pi @ FG.T

    q = k2 - 1
    U, _, Vt = linalg.svd(theta)
    Vm = Vt.T
    U12, U22 = U[:q, q:], U[q:, q:]
    V12, V22 = Vm[:q, q:], Vm[q:, q:]
    A_perp = np.vstack([U12, U22]) @ linalg.inv(U22) @ _sqrt(U22 @ U22.T)
    B_perp = _sqrt(V22 @ V22.T) @ linalg.inv(V22.T) @ np.hstack([V12.T, V22.T])
    lam = A_perp.T @ theta @ B_perp.T
    K = np.kron(B_perp, A_perp.T)
    om_q = K @ omega @ K.T
    v = lam.reshape(-1, order="F")
    stat = float(n * v @ linalg.pinvh(om_q) @ v)
    return stat, (l2 - q) * (k2 - q)


def _diag_core(d: IVData, thresholds=None):
    thresholds = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    n = d.n
    n_exog = len(d.exog)
    Z1 = d.Z[:, :n_exog]
    Z2 = _partial(d.Z[:, n_exog:], Z1)
    X2 = _partial(d.X[:, d.endog_idx], Z1)
    L = d.Z.shape[1]
    l2, k2 = Z2.shape[1], X2.shape[1]
    dof = n - L - d.absorbed.dof

    pi = linalg.lstsq(Z2, X2, lapack_driver="gelsy")[0]
    V = X2 - Z2 @ pi
    fitted = X2 - V
    f_classic, f_robust = {}, {}
    ZZi = linalg.inv(Z2.T @ Z2)
    scale = _scale(n, L + d.k_fe, d.cluster)
    for i, name in enumerate(d.endog):
        ess = float(fitted[:, i] @ fitted[:, i])
        rss = float(V[:, i] @ V[:, i])
        f_classic[name] = (ess / l2) / (rss / dof)
        cov = ZZi @ _meat(Z2 * V[:, [i]], d.cluster) @ ZZi * scale
        b = pi[:, i]
        f_robust[name] = float(b @ linalg.solve(cov, b, assume_a="sym")) / l2

    sig = V.T @ V / dof
    P = fitted.T @ fitted
    root = _inv_sqrt(sig)
    cd = float(linalg.eigvalsh(root @ P @ root).min() / l2)

    kp_stat, kp_dof = kleibergen_paap_rk(X2, Z2, d.cluster)
    kp = {"statistic": kp_stat, "dof": kp_dof, "p": float(stats.chi2.sf(kp_stat, kp_dof)), "f_form": kp_stat / l2}

    overid = l2 - k2
    b1, _, e1, _, _ = _iv_solve(d, "2sls")
    Qz, _ = linalg.qr(d.Z, mode="economic")
    pe = Qz.T @ e1
    sargan = float(n * (pe @ pe) / (e1 @ e1))
    S = _meat(d.Z * e1[:, None], d.cluster) / n
    b2, _, e2, _, _ = _iv_solve(d, "gmm2step")
    g = d.Z.T @ e2 / n
    J = float(n * g @ linalg.pinvh(S) @ g)
    if overid == 0:
        sargan_t = {"statistic": sargan, "dof": 0, "p": None}
        hansen_t = {"statistic": J, "dof": 0, "p": None}
    else:
        sargan_t = {"statistic": sargan, "dof": overid, "p": float(stats.chi2.sf(sargan, overid))}
        hansen_t = {"statistic": J, "dof": overid, "p": float(stats.chi2.sf(J, overid))}

    verdicts = {}
    fmin = min(f_classic.values())
    verdicts["first_stage_f"] = {"pass": fmin >= thresholds["min_first_stage_f"],
                                 "detail": f"min F {fmin:.3f} vs threshold {thresholds['min_first_stage_f']}"}
    if hansen_t["p"] is None:
        verdicts["hansen_j"] = {"pass": True, "detail": "exactly identified"}
    else:
        verdicts["hansen_j"] = {"pass": hansen_t["p"] >= thresholds["hansen_alpha"],
                                "detail": f"p {hansen_t['p']:.4f} vs alpha {thresholds['hansen_alpha']}"}
    sy = stock_yogo(k2, l2)
    meta = {"endogenous": d.endog, "instruments": d.instruments, "cluster": d.cluster is not None,
            "thresholds": thresholds, "dropped_missing": int((~d.mask).sum())}
    return DiagnosticsReport(f_classic, f_robust, cd, kp, sargan_t, hansen_t, sy, verdicts, n, dof, meta)


def iv_diagnostics(y, X, endogenous, Z, cluster=None, fe=None, thresholds=None, mask=None) -> DiagnosticsReport:
    """First-stage strength, rank and overidentification statistics.

    ``mask`` is the retained-row mask of the IV fit being diagnosed; a
    mismatch with the rows usable here raises :class:`SampleAlignmentError`.
    Cragg-Donald and the classical first-stage F both use ``N - L`` residual
    degrees of freedom (``L`` counting instruments and absorbed levels), so
    they coincide with one endogenous regressor and one instrument.  Hansen
    J is evaluated at the two-step GMM estimate with the moment covariance
    from 2SLS residuals; Sargan uses 2SLS residuals under homoskedasticity.
    """
    d = prepare_iv(y, X, endogenous, Z, cluster, fe)
    if mask is not None and not np.array_equal(np.asarray(mask, bool), d.mask):
        raise SampleAlignmentError("diagnostics sample differs from the IV estimation sample")
    return _diag_core(d, thresholds)


def diagnostics_for(report: EstimateReport, thresholds=None) -> DiagnosticsReport:
    """Diagnostics on exactly the sample of an existing IV fit."""
    d = getattr(report, "ivdata", None)
    if d is None:
        raise ConfigError("report does not come from an IV fit")
    return _diag_core(d, thresholds)


# -- placebo -------------------------------------------------------------------

PLACEBO_MODES = ("shuffle_alternatives", "shuffle_periods")


def permute_within(values, groups, rng):
    """Shuffle ``values`` independently inside each group."""
    values = np.asarray(values)
    codes = pd.factorize(pd.MultiIndex.from_frame(pd.DataFrame(groups)) if np.ndim(groups) > 1 and
                         np.shape(groups)[1] > 1 else np.asarray(groups).ravel(), sort=True)[0]
    slots = np.lexsort((np.arange(len(values)), codes))
    picks = np.lexsort((rng.random(len(values)), codes))
    out = values.copy()
    out[slots] = values[picks]
    return out


def _permuted_panel(panel: MarketPanel, mode, seed, columns):
    if seed is None:
        return panel
    rng = np.random.default_rng(seed)
    d = panel.data
    groups = d[["market", "period"]].to_numpy() if mode == "shuffle_alternatives" else d[["alt"]].to_numpy()
    new = {c: permute_within(d[c].to_numpy(), groups, rng) for c in columns}
    return panel.with_columns(new)


def placebo_test(panel: MarketPanel, shares: ShareTable, spec: DesignSpec, mode="shuffle_alternatives",
                 seeds=range(100), columns=None, extra=None, iv=None):
    """Re-estimate with recommendation columns permuted.

    ``shuffle_alternatives`` permutes across alternatives inside each
    (market, period); ``shuffle_periods`` permutes across periods inside each
    alternative.  A seed of ``None`` leaves the data unchanged.  ``iv`` is an
    optional ``{"endogenous": [...], "instruments": [...]}`` for IV fits.
    Returns a dict with the baseline, per-seed t-statistics and the share of
    seeds with ``|t| >= 1.96`` per column.
    """
    if mode not in PLACEBO_MODES:
        raise ConfigError(f"unknown placebo mode {mode!r}")
    columns = list(columns if columns is not None else panel.recommendations)
    if not columns:
        raise ConfigError("no recommendation columns to permute")

    def run(p):
        design = build_design(p, shares, spec, extra)
        if iv:
            Zc = design.columns(iv["instruments"])
            return fit_iv(design.y, design.X, iv["endogenous"], Zc, iv.get("method", "2sls"), design.cluster,
                          design.fe, spec.cluster)
        return fit_ols(design.y, design.X, design.cluster, design.fe, spec.cluster)

    zero = [c for c in columns if not np.any(panel.data[c].to_numpy() != 0)]
    base = run(panel) if not zero else None
    rows, skipped = [], []
    for seed in seeds:
        if zero:
            skipped.append({"seed": seed, "reason": f"all-zero recommendation column {zero[0]!r}"})
            logger.info("placebo seed %s skipped: all-zero column %s", seed, zero[0])
            continue
        try:
            rep = run(_permuted_panel(panel, mode, seed, columns))
        except ShareLensError as exc:
            skipped.append({"seed": seed, "reason": str(exc)})
            logger.info("placebo seed %s skipped: %s", seed, exc)
            continue
        rows.append({"seed": seed, **{c: {"estimate": rep.coef(c), "t": float(rep.tstat[rep.labels.index(c)])}
                                      for c in columns}})
    reject = {c: float(np.mean([abs(r[c]["t"]) >= 1.96 for r in rows])) if rows else None for c in columns}
    baseline = None
    if base is not None:
        baseline = {c: {"estimate": base.coef(c), "t": float(base.tstat[base.labels.index(c)])} for c in columns}
    return {"mode": mode, "baseline": baseline, "runs": rows, "skipped": skipped, "rejection_rate": reject,
            "n_seeds": len(rows)}


# -- holdout -------------------------------------------------------------------


def forecast_metrics(pred, actual):
    """RMSE, MSE, MAD (mean absolute error) and MAPE as a fraction.

    MAPE skips observations with ``|actual| <= 1e-8`` and reports how many.
    """
    pred, actual = np.asarray(pred, float), np.asarray(actual, float)
    err = pred - actual
    mse = float(np.mean(err**2))
    keep = np.abs(actual) > 1e-8
    mape = float(np.mean(np.abs(err[keep] / actual[keep]))) if keep.any() else None
    return {"rmse": float(np.sqrt(mse)), "mse": mse, "mad": float(np.mean(np.abs(err))), "mape": mape,
            "mape_excluded": int((~keep).sum()), "n": int(len(err))}


@dataclass
class HoldoutReport:
    rows: pd.DataFrame  # one row per (model, sample)
    cutoff: object
    train_periods: list
    test_periods: list
    unseen_levels: dict

    def to_dict(self):
        return _plain({"cutoff": self.cutoff, "train_periods": self.train_periods, "test_periods": self.test_periods,
                       "unseen_levels": self.unseen_levels,
                       "metrics": self.rows.to_dict(orient="records")})

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        return "holdout metrics on delta\n" + self.rows.to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n"


def holdout_eval(panel: MarketPanel, shares: ShareTable, spec: DesignSpec, split=0.8, extra=None, iv=None):
    """Fit on the earliest ``split`` fraction of periods and predict ``delta`` after.

    The model prediction is ``X b`` plus fixed effects recovered from
    training residuals; levels never seen in training contribute zero and
    are counted.  The baseline predicts each alternative's training mean
    of ``delta`` (the overall training mean for new alternatives).
    """
    if not 0 < split < 1:
        raise ConfigError("split must lie in (0, 1)")
    design = build_design(panel, shares, spec, extra)
    periods = np.sort(design.frame["period"].unique())
    n_train = int(np.floor(split * len(periods)))
    if n_train < 2 or len(periods) - n_train < 2:
        raise ConfigError(f"split {split} leaves {n_train} training and {len(periods) - n_train} test periods; "
                          "need at least 2 on each side")
    cutoff = periods[n_train - 1]
    train = design.frame["period"].to_numpy() <= cutoff
    if not (~train).any():
        raise ConfigError("split leaves an empty test set")
    tr = design.subset(train)
    if iv:
        rep = fit_iv(tr.y, tr.X, iv["endogenous"], tr.columns(iv["instruments"]), iv.get("method", "2sls"),
                     tr.cluster, tr.fe)
    else:
        rep = fit_ols(tr.y, tr.X, tr.cluster, tr.fe)
    b = rep.params
    Xall = design.X.to_numpy(float)
    pred = Xall @ b
    unseen = {}
    if design.fe:
        resid = tr.y - tr.X.to_numpy(float) @ b
        train_codes = {k: v[train] for k, v in design.fe.items()}
        effects = recover_fixed_effects(resid, train_codes)
        for k, codes in design.fe.items():
            # map full-sample codes to training-sample factor codes
            levels, inv = np.unique(train_codes[k], return_inverse=True)
            lookup = dict(zip(levels.tolist(), range(len(levels))))
            eff = np.array([effects[k][lookup[c]] if c in lookup else 0.0 for c in codes])
            unseen[k] = int(len(set(codes[~train].tolist()) - set(lookup)))
            pred = pred + eff
    y = design.y
    alt = design.frame["alt"].to_numpy()
    means = pd.Series(y[train]).groupby(alt[train]).mean()
    base = pd.Series(alt).map(means).fillna(float(y[train].mean())).to_numpy()
    rows = []
    for model, p in (("model", pred), ("baseline_alt_mean", base)):
        for sample, m in (("in_sample", train), ("out_of_sample", ~train)):
            rows.append({"model": model, "sample": sample, **forecast_metrics(p[m], y[m])})
    return HoldoutReport(pd.DataFrame(rows), cutoff, periods[:n_train].tolist(), periods[n_train:].tolist(), unseen)
