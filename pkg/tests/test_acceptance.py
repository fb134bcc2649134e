"""Acceptance suite.

Each test prints one ``criterion N: PASS|FAIL`` line with its measured
quantities and runtime; the lines are repeated in the pytest terminal
summary.  Tolerances and sample sizes are the acceptance thresholds, not
tuned to the implementation.  Run directly with ``python
tests/test_acceptance.py`` to get the lines without pytest.
"""

import json
import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml
from scipy import stats

from sharelens._groups import Groups
from sharelens.blp import (
    ChoiceModelConfig, differentiation_instruments, elasticities, fit_blp, invert_shares, predict_shares,
)
from sharelens.diagnostics import holdout_eval, iv_diagnostics, placebo_test
from sharelens.embed import (
    EmbeddingConfig, angular_distance, build_documents, isolation_instruments, train_embeddings,
)
from sharelens.estimate import fit_iv, fit_ols, fit_quantile
from sharelens.panel import DesignSpec, build_design, compute_shares, rival_average
from sharelens.synth import SyntheticTruth, brute_force_choice_probs, generate_panel

from oracles import first_stage_f_textbook, lp_quantile

pytestmark = pytest.mark.slow

RESULTS = []
REGRESSORS = ["price", "rating", "photos", "traffic", "rec_trending"]


def report(n, ok, detail, t0, limit=None):
    took = time.perf_counter() - t0
    ok = bool(ok) and (limit is None or took < limit)
    bound = f" (limit {limit:g} s)" if limit is not None else ""
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  runtime {took:.1f} s{bound}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1 ------------------------------------------------------------------------


def test_c01_nested_round_trip():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        nests = rng.integers(1, 5, n)
        sigma = float(rng.uniform(0.0, 0.95))
        delta = rng.normal(-2.0, 1.5, n)
        cells = np.zeros(n)
        s, s0 = predict_shares(delta, ChoiceModelConfig("nested_logit", sigma=sigma), cells, nests)
        g = Groups(nests)
        within = s / g.expand(g.sum(s))
        lhs = np.log(s) - np.log(s0) - sigma * np.log(within)
        worst = max(worst, float(np.max(np.abs(lhs - delta))))
    report(1, worst <= 1e-10, f"max |ln s - ln s0 - sigma ln s_within - delta| = {worst:.2e} over 1000 markets",
           t0, 10)


# -- 2 ------------------------------------------------------------------------


def test_c02_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    n = 1_000_000
    inside = 0
    total = 0
    rc = pd.DataFrame({"v": rng.normal(size=8)})
    cases = [
        (ChoiceModelConfig(), None, None),
        (ChoiceModelConfig("nested_logit", sigma=0.3), np.array([1, 1, 2, 2, 3, 3, 3, 1]), None),
        (ChoiceModelConfig("nested_logit", sigma=0.7), np.array([1, 2, 2, 2, 3, 3, 1, 1]), None),
        # quasi-random draws keep the analytic side's integration error far below the oracle's
        (ChoiceModelConfig("random_coefficients", rc={"v": 0.8}, n_draws=20_000), None, rc),
    ]
    for config, nests, rc_data in cases:
        for _ in range(5):
            delta = rng.normal(-1.5, 1.0, 8)
            s, s0 = brute_force_choice_probs(delta, config, n, seed=int(rng.integers(1 << 31)), nests=nests,
                                             rc_data=rc_data)
            p, p0 = predict_shares(delta, config, np.zeros(8), nests, rc_data)
            want = np.r_[p, p0[0]]
            got = np.r_[s, s0]
            se = np.sqrt(want * (1 - want) / n)
            inside += int(np.sum(np.abs(got - want) <= 3 * se))
            total += want.size
    frac = inside / total
    report(2, frac >= 0.99, f"{inside}/{total} cells within 3 MC s.e. ({frac:.1%}) at n = 1e6", t0, 60)


# -- 3 ------------------------------------------------------------------------


def test_c03_parameter_recovery():
    t0 = time.perf_counter()
    names = ["price", "rating", "photos", "traffic", "rec_trending", "ln_within_share"]
    hits = dict.fromkeys(names, 0)
    seeds = range(100)
    for seed in seeds:
        truth = SyntheticTruth(sigma_nest=0.5, seed=seed, words_per_review=1, reviews_per_doc=1)
        want = {"price": -truth.alpha, **truth.beta, **truth.context_beta, **truth.theta_rec,
                "ln_within_share": truth.sigma_nest}
        p = generate_panel(truth, 10, 50, 100).panel
        # ln of the within-nest share is endogenous by construction; instrument it with rival characteristics
        extra = {}
        for v in ("rating", "photos", "price"):
            r = rival_average(p, v, ("market", "period", "nest"))
            extra[r.name] = r.to_numpy()
        p = p.with_columns(extra)
        d = build_design(p, compute_shares(p), DesignSpec(regressors=REGRESSORS, fe=["alt"], nest_term=True,
                                                          cluster="alt"))
        rep = fit_iv(d.y, d.X, ["ln_within_share"], d.columns(list(extra)), "2sls", d.cluster, d.fe)
        for k in names:
            lo, hi = rep.conf_int(k)
            hits[k] += lo <= want[k] <= hi
    worst = min(hits.values())
    report(3, worst >= 90, "CI coverage per parameter over 100 seeds: "
           + ", ".join(f"{k} {v}" for k, v in hits.items()), t0, 300)


# -- 4 ------------------------------------------------------------------------


def test_c04_endogeneity_correction():
    t0 = time.perf_counter()
    covered, bias_t = 0, []
    seeds = range(200)
    for seed in seeds:
        truth = SyntheticTruth(confounding=0.8, seed=seed, words_per_review=60)
        sp = generate_panel(truth, 8, 15, 8)
        model = train_embeddings(build_documents(sp.panel.reviews), EmbeddingConfig(epochs=15, seed=seed))
        iv = isolation_instruments(model, sp.panel)
        d = build_design(sp.panel, compute_shares(sp.panel),
                         DesignSpec(regressors=REGRESSORS, fe=["market"], cluster="alt"), iv.data)
        ols = fit_ols(d.y, d.X, d.cluster, d.fe)
        theta = truth.theta_rec["rec_trending"]
        bias_t.append((ols.coef("rec_trending") - theta) / ols.stderr("rec_trending"))
        rep = fit_iv(d.y, d.X, ["rec_trending"], d.columns(["iv_isol_mean", "iv_isol_std"]), "2sls",
                     d.cluster, d.fe)
        lo, hi = rep.conf_int("rec_trending")
        covered += lo <= theta <= hi
    cov = covered / len(seeds)
    ok = min(bias_t) > 5 and 0.90 <= cov <= 0.99
    report(4, ok, f"min OLS bias t {min(bias_t):.2f}, median {np.median(bias_t):.2f}; 2SLS coverage {cov:.3f}",
           t0, 900)


# -- 5 ------------------------------------------------------------------------


def test_c05_instrument_machinery():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    n, reps = 500, 500
    rejections = 0
    for _ in range(reps):
        w = rng.normal(size=n)
        z = rng.normal(size=(n, 3))
        u = rng.normal(size=n) * np.sqrt(0.5 + z[:, 0] ** 2)  # heteroskedastic, still valid
        x = z @ [0.6, 0.4, 0.3] + 0.5 * w + 0.6 * u + rng.normal(size=n)
        y = 1.0 + 0.5 * w - 1.0 * x + u
        X = pd.DataFrame({"const": 1.0, "w": w, "x": x})
        Z = pd.DataFrame(z, columns=["z1", "z2", "z3"])
        j = iv_diagnostics(y, X, ["x"], Z).hansen_j
        rejections += j["p"] < 0.05
    size = rejections / reps

    # Cragg-Donald against the classical first-stage F on a panel with absorbed effects
    sp = generate_panel(SyntheticTruth(confounding=0.8, seed=5, words_per_review=1, reviews_per_doc=1), 6, 20, 10)
    iso = sp.latent[["market", "alt", "period", "true_isolation"]]
    d = build_design(sp.panel, compute_shares(sp.panel), DesignSpec(regressors=REGRESSORS, fe=["market"]), iso)
    diag = iv_diagnostics(d.y, d.X, ["rec_trending"], d.columns(["true_isolation"]), fe=d.fe)
    gap_f = abs(diag.cragg_donald - diag.first_stage_f["rec_trending"])
    market = pd.get_dummies(d.frame["market"]).to_numpy(float)
    exog = d.X.drop(columns="rec_trending").to_numpy(float)
    textbook = first_stage_f_textbook(d.X["rec_trending"].to_numpy(float),
                                      d.frame[["true_isolation"]].to_numpy(float), np.column_stack([exog, market]))
    gap_tb = abs(diag.cragg_donald - textbook) / textbook
    ok = 0.02 <= size <= 0.10 and gap_f <= 1e-8 * max(1.0, diag.cragg_donald) and gap_tb <= 1e-8
    report(5, ok, f"Hansen J size {size:.3f} over {reps} reps; |CD - F| = {gap_f:.1e} "
           f"(CD {diag.cragg_donald:.3f}, textbook rel. gap {gap_tb:.1e})", t0, 600)


# -- 6 ------------------------------------------------------------------------


def _blp_inputs(truth):
    sp = generate_panel(truth, 20, 25, 10)
    d = build_design(sp.panel, compute_shares(sp.panel), DesignSpec(regressors=REGRESSORS, cluster="alt"))
    f = d.frame
    cells = f["market"].to_numpy() * 1000 + f["period"].to_numpy()
    g = Groups(cells)
    Z = differentiation_instruments(f, ["rec_trending", "rating", "photos", "price"], cells)
    Z["rec_sq"] = f["rec_trending"] ** 2
    Z["rival_rec"] = g.expand(g.sum(f["rec_trending"].to_numpy())) - f["rec_trending"]
    return d, f, cells, Z


def test_c06_blp():
    t0 = time.perf_counter()
    # Sigma_true = 0: BLP collapses to linear IV on ln s - ln s0
    d, f, cells, Z = _blp_inputs(SyntheticTruth(seed=0, words_per_review=1, reviews_per_doc=1))
    gaps, sig0 = [], []
    for steps, method in [(1, "2sls"), (2, "gmm2step")]:
        res = fit_blp(f["share"].to_numpy(), cells, d.X, [], Z, f, ["rec_trending"], cluster=d.cluster,
                      steps=steps, xtol=1e-6)
        iv = fit_iv(d.y, d.X, [], Z, method, d.cluster)
        gaps.append(max(abs(res.report.coef(c) - iv.coef(c)) for c in d.X.columns))
        sig0.append(res.sigma["rec_trending"])
    ok_zero = max(gaps) <= 1e-4 and max(sig0) <= 0.05

    # Sigma_true = 0.5 over 20 seeds
    est = []
    for seed in range(20):
        truth = SyntheticTruth(sigma_rc={"rec_trending": 0.5}, seed=seed, words_per_review=1, reviews_per_doc=1)
        d, f, cells, Z = _blp_inputs(truth)
        res = fit_blp(f["share"].to_numpy(), cells, d.X, [], Z, f, ["rec_trending"], cluster=d.cluster)
        est.append(res.sigma["rec_trending"])
    med = float(np.median(est))
    ok_med = abs(med - 0.5) <= 0.1

    # standard test case: one market, 20 alternatives, random coefficients on two characteristics
    rng = np.random.default_rng(606)
    x = pd.DataFrame({"a": rng.normal(size=20), "b": rng.uniform(0, 2, 20)})
    cfg = ChoiceModelConfig("random_coefficients", rc={"a": 0.5, "b": 0.5}, n_draws=500)
    s, _ = predict_shares(rng.normal(-3.0, 1.0, 20), cfg, np.zeros(20), rc_data=x)
    plain = invert_shares(s, cfg, np.zeros(20), rc_data=x, tol=1e-12, accelerate="none", max_iter=100_000)
    fast = invert_shares(s, cfg, np.zeros(20), rc_data=x, tol=1e-12, accelerate="squarem")
    ok_sq = plain.converged and fast.converged and fast.f_evals < plain.f_evals

    report(6, ok_zero and ok_med and ok_sq,
           f"Sigma_true 0: max coef gap {max(gaps):.1e}, Sigma hat {max(sig0):.3f}; Sigma_true 0.5: median "
           f"{med:.3f} (range {min(est):.3f}-{max(est):.3f}); F-evals SQUAREM {fast.f_evals} vs plain "
           f"{plain.f_evals}", t0, 1200)


# -- 7 ------------------------------------------------------------------------


def test_c07_elasticities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(707)
    n_cells, per = 10_000, 4
    cells = np.repeat(np.arange(n_cells), per)
    frame = pd.DataFrame({"price": rng.uniform(1, 4, cells.size), "rec": rng.uniform(0, 2, cells.size)})
    nests = np.tile([1, 1, 2, 3], n_cells)
    delta = rng.normal(-2.0, 0.7, cells.size)
    worst = {}
    for name, cfg in [("logit", ChoiceModelConfig()), ("nested", ChoiceModelConfig("nested_logit", sigma=0.6)),
                      ("rc", ChoiceModelConfig("random_coefficients", rc={"rec": 0.8}, n_draws=30))]:
        for target in ("rec", "price"):
            out = elasticities({"rec": 1.2, "price": -0.6}, frame, target, cfg, delta, cells, nests, check=True)
            worst[f"{name}/{target}"] = out.check["max_relative_error"]
    ok_fd = max(worst.values()) <= 1e-6

    truth = SyntheticTruth(confounding=0.8, rec_threshold=0.5, seed=7, words_per_review=1, reviews_per_doc=1)
    sp = generate_panel(truth, 8, 20, 10)
    iso = sp.latent[["market", "alt", "period", "true_isolation"]]
    d = build_design(sp.panel, compute_shares(sp.panel), DesignSpec(regressors=REGRESSORS, fe=["market"]), iso)
    rep = fit_iv(d.y, d.X, ["rec_trending"], d.columns(["true_isolation"]), "2sls", None, d.fe)
    f = d.frame
    cells_p = f["market"].to_numpy() * 1000 + f["period"].to_numpy()
    delta_p = np.log(f["share"].to_numpy()) - np.log(f["outside_share"].to_numpy())
    rec = f["rec_trending"].to_numpy() > 0
    el = elasticities({"rec_trending": rep.coef("rec_trending")}, f, "rec_trending", ChoiceModelConfig(), delta_p,
                      cells_p, recommended=rec)
    a_rec, a_all = el.aggregates["recommended"]["mean"], el.aggregates["all"]["mean"]
    report(7, ok_fd and a_rec > a_all,
           f"max FD rel. error {max(worst.values()):.1e} over {n_cells} cells x 3 models x 2 targets; "
           f"mean elasticity recommended {a_rec:.4f} vs all {a_all:.4f}", t0, 30)


# -- 8 ------------------------------------------------------------------------


def test_c08_placebo():
    t0 = time.perf_counter()
    truth = SyntheticTruth(theta_rec={"rec_trending": 1.5}, seed=8, words_per_review=1, reviews_per_doc=1)
    p = generate_panel(truth, 6, 20, 10).panel
    sh = compute_shares(p)
    spec = DesignSpec(regressors=REGRESSORS, fe=["alt", "period"], cluster="alt")
    lines, ok = [], True
    for mode in ("shuffle_alternatives", "shuffle_periods"):
        res = placebo_test(p, sh, spec, mode=mode, seeds=range(100))
        base_t = abs(res["baseline"]["rec_trending"]["t"])
        small = np.mean([abs(r["rec_trending"]["t"]) < 1.96 for r in res["runs"]])
        ok &= base_t > 10 and small >= 0.90 and res["n_seeds"] == 100
        lines.append(f"{mode}: baseline |t| {base_t:.1f}, |t| < 1.96 in {small:.0%}")
    report(8, ok, "; ".join(lines), t0, 600)


# -- 9 ------------------------------------------------------------------------


def test_c09_quantile():
    t0 = time.perf_counter()
    rng = np.random.default_rng(909)
    n = 400
    x = rng.uniform(0, 4, n)
    y = 1.0 + 0.5 * x + (0.2 + 0.4 * x) * rng.standard_normal(n)
    X = pd.DataFrame({"const": 1.0, "x": x})
    lad, _ = lp_quantile(X.to_numpy(), y, 0.5)
    med = fit_quantile(y, X, 0.5)
    gap = float(np.max(np.abs(med.params - lad)))
    slopes = [fit_quantile(y, X, tau).coef("x") for tau in np.round(np.arange(0.1, 0.91, 0.1), 1)]
    mono = bool(np.all(np.diff(slopes) > 0))
    report(9, gap <= 1e-6 and mono, f"|median - LAD| = {gap:.1e}; slopes over tau 0.1..0.9 "
           + " ".join(f"{s:.3f}" for s in slopes), t0, 120)


# -- 10 -----------------------------------------------------------------------


def test_c10_embedding_instruments():
    t0 = time.perf_counter()
    sp = generate_panel(SyntheticTruth(seed=0), 4, 12, 1)
    model = train_embeddings(build_documents(sp.panel.reviews), EmbeddingConfig(epochs=15, seed=0))
    df = isolation_instruments(model, sp.panel).data.merge(sp.latent, on=["market", "alt", "period"])
    rho = [stats.spearmanr(g["iv_isol_mean"], g["true_isolation"])[0] for _, g in df.groupby("market")]
    ok_rank = min(rho) >= 0.8

    rng = np.random.default_rng(1010)
    worst_tri, ok_axioms = -np.inf, True
    for _ in range(100_000):
        dim = int(rng.integers(2, 6))
        u, v, w = rng.normal(size=(3, dim))
        if rng.random() < 0.1:  # nearly parallel or antiparallel directions
            v = rng.choice([-1, 1]) * u + 1e-7 * rng.normal(size=dim)
        duv, dvw, duw = angular_distance(u, v), angular_distance(v, w), angular_distance(u, w)
        worst_tri = max(worst_tri, duw - duv - dvw)
        ok_axioms &= 0 <= duv <= 1 and duv == angular_distance(v, u) and angular_distance(u, u) <= 1e-9
    ok_metric = ok_axioms and worst_tri <= 1e-9

    docs = build_documents(sp.panel.reviews)
    small = {k: v for k, v in docs.items() if k[0] < 4}
    multi = {(a, t): f"{text} period {t}" for (a, _), text in small.items() for t in (1, 2, 3)}
    cfg = EmbeddingConfig(dim=8, epochs=3, seed=1)
    base = train_embeddings(multi, cfg)
    edited = dict(multi)
    edited[(0, 3)] = "vocabulary that only appears later " * 4
    edited[(7, 3)] = "an alternative entering later"
    other = train_embeddings(edited, cfg)
    ok_leak = all(np.array_equal(base.entity(a, t), other.entity(a, t)) for a in range(4) for t in (1, 2))
    report(10, ok_rank and ok_metric and ok_leak,
           f"per-market rank correlation {', '.join(f'{r:.3f}' for r in rho)}; max triangle excess "
           f"{worst_tri:.1e} over 1e5 triples; leakage guard {'holds' if ok_leak else 'broken'}", t0, 300)


# -- 11 -----------------------------------------------------------------------


def test_c11_holdout():
    t0 = time.perf_counter()
    ok_id, beats = True, []
    for seed in range(5):
        p = generate_panel(SyntheticTruth(seed=seed, words_per_review=1, reviews_per_doc=1), 5, 15, 12).panel
        for split in (0.7, 0.8):
            rows = holdout_eval(p, compute_shares(p), DesignSpec(regressors=REGRESSORS, fe=["alt"]), split).rows
            ok_id &= bool(np.allclose(rows["mse"], rows["rmse"] ** 2, rtol=1e-12, atol=0))
            ok_id &= bool((rows["mad"] <= rows["rmse"] * (1 + 1e-12)).all())
            oos = rows[rows["sample"] == "out_of_sample"].set_index("model")["rmse"]
            beats.append((oos["model"], oos["baseline_alt_mean"]))
    ok_beat = all(m < b for m, b in beats)
    report(11, ok_id and ok_beat, "metric identities hold on all runs; out-of-sample RMSE model vs baseline "
           + ", ".join(f"{m:.3f}/{b:.3f}" for m, b in beats[:4]) + " ...", t0, 120)


# -- 12 -----------------------------------------------------------------------


def test_c12_determinism(tmp_path, capsys):
    from sharelens.cli import main

    t0 = time.perf_counter()
    sim_cfg = tmp_path / "sim.yaml"
    sim_cfg.write_text(yaml.safe_dump({
        "simulate": {"markets": 3, "alternatives": 10, "periods": 6,
                     "truth": {"sigma_nest": 0.4, "words_per_review": 20, "reviews_per_doc": 1,
                               "sigma_rc": {}}},
        "seed": 12, "output_dir": str(tmp_path / "sim")}))

    def run(argv):
        code = main(argv)
        out = capsys.readouterr().out.strip().splitlines()
        assert code == 0, argv
        return Path(out[-1])

    sims = [run(["simulate", "--config", str(sim_cfg), "--threads", "1"]) for _ in range(2)]
    base = yaml.safe_load((sims[0] / "pipeline.yaml").read_text())
    base["data"]["panel"] = str(sims[0] / "panel.csv")
    base["data"]["reviews"] = str(sims[0] / "reviews.jsonl")
    base["model"].update({"kind": "nested", "regressors": REGRESSORS, "fe": ["alt"],
                          "endogenous": ["rec_trending"], "instruments": ["iv_isol_mean", "iv_isol_std"]})
    base["embedding"] = {"dim": 8, "epochs": 3}
    base["output_dir"] = str(tmp_path / "runs")
    cfg = tmp_path / "pipeline.yaml"
    cfg.write_text(yaml.safe_dump(base))
    pairs = [tuple(sims)]
    for sub, extra in [("ingest", []), ("shares", []), ("embed", []), ("instruments", []), ("estimate", []),
                       ("diagnose", ["diagnostics.fail_on_threshold=false"]),
                       ("elasticities", ["elasticities.check=true"]), ("placebo", ["placebo.n_seeds=3"]),
                       ("holdout", [])]:
        pairs.append(tuple(run([sub, "--config", str(cfg), "--threads", "1", *extra]) for _ in range(2)))

    compared, diffs = 0, []
    for a, b in pairs:
        assert a != b
        for fa in sorted(a.glob("*.json")):
            fb = b / fa.name
            if fa.name == "manifest.json":
                ja, jb = json.loads(fa.read_text()), json.loads(fb.read_text())
                for j in (ja, jb):
                    j.pop("wall_time_s"), j.pop("finished_utc")
                same = ja == jb
            else:
                same = fa.read_bytes() == fb.read_bytes()
            compared += 1
            if not same:
                diffs.append(f"{a.name}/{fa.name}")
    report(12, not diffs and compared >= 2 * len(pairs),
           f"{compared} JSON artifacts from {len(pairs)} subcommands compared across reruns; "
           f"differing: {diffs or 'none'} (manifest timestamps excluded)", t0)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
