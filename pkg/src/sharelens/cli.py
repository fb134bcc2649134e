"""Command-line pipeline runner.

``sharelens <subcommand> --config <path> [--seed N] [--threads K] [--out DIR]
[key=value ...]``.  Every run writes into a fresh run-scoped directory with a
manifest of input and output hashes.  Exit codes: 0 success, 1 runtime or
estimation failure, 2 validation failure, 3 diagnostics threshold failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from .blp import ChoiceModelConfig, differentiation_instruments, elasticities, fit_blp
from .diagnostics import diagnostics_for, holdout_eval, placebo_test
from .embed import (
    EmbeddingConfig, InstrumentSet, build_documents, isolation_instruments, load_word_vectors,
    train_embeddings,
)
from .errors import (
    ConfigError, ConsistencyError, DomainError, DuplicateKeyError, FormulaError, IdentificationError, SchemaError,
    ShareLensError,
)
from .estimate import _plain, fit_iv, fit_ols, fit_quantile
from .panel import (
    KEY, NEST_LABEL, DesignSpec, build_design, compute_shares, lag_and_standardize, load_panel, load_reviews,
    rival_average,
)
from .synth import SyntheticTruth, generate_panel

logger = logging.getLogger("sharelens")

SUBCOMMANDS = ("ingest", "shares", "embed", "instruments", "estimate", "blp", "elasticities", "diagnose",
               "placebo", "holdout", "simulate")
VALIDATION_ERRORS = (ConfigError, FormulaError, SchemaError, DuplicateKeyError, ConsistencyError, DomainError,
                     IdentificationError)


# -- configuration -------------------------------------------------------------


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SchemaMap(Strict):
    market: str = "market"
    alt: str = "alt"
    period: str = "period"
    quantity: str = "quantity"
    price: str | None = "price"
    nest: str | None = "nest"
    characteristics: list[str] = []
    context: list[str] = []
    recommendations: list[str] = []
    ranking: str | None = None


class DataConfig(Strict):
    panel: str | None = None
    reviews: str | None = None
    instruments: str | None = None
    pretrained_vectors: str | None = None
    schema_map: SchemaMap = SchemaMap()
    size_policy: Literal["max_active_users", "population", "households"] = "max_active_users"
    size_column: str = "market_size"


class ModelConfig(Strict):
    kind: Literal["logit", "nested", "quantile"] = "nested"
    regressors: list[str] = []
    interactions: list[list[str]] = []
    fe: list[str] = []
    trend: bool = False
    intercept: bool | None = None
    cluster: str | None = "alt"
    price: str = "price"
    endogenous: list[str] = []
    instruments: list[str] = []
    iv_method: Literal["2sls", "gmm2step"] = "2sls"
    taus: list[float] = [0.1, 0.25, 0.5, 0.75, 0.9]
    nest_in_quantile: bool = True
    zero_policy: Literal["drop", "epsilon"] = "drop"
    epsilon: float = 1e-6


class LagSpec(Strict):
    var: str
    transform: Literal["pct_change_then_zscore", "zscore_within_category"] = "pct_change_then_zscore"
    lag: int = Field(1, ge=1)
    group: str | None = None


class RivalSpec(Strict):
    var: str
    within: list[str] = ["market", "period"]


class InstrumentConfig(Strict):
    isolation: bool = True
    scope: Literal["market", "category"] = "market"
    prefix: str = "iv_isol"
    lags: list[LagSpec] = []
    rival_averages: list[RivalSpec] = []
    differentiation: list[str] = []


class EmbeddingSection(Strict):
    dim: int = 32
    word_dim: int | None = None
    negative: int = 5
    epochs: int = 100
    learning_rate: float = 0.025
    min_learning_rate: float = 1e-4
    seed: int | None = None
    word_layer: Literal["trainable", "frozen"] = "trainable"
    doc_unit: Literal["per_alt_period", "per_review"] = "per_alt_period"
    schedule: Literal["chronological", "joint"] = "chronological"
    min_count: int = 1


class BLPSection(Strict):
    rc_columns: list[str] = []
    sigma0: list[float] | None = None
    n_draws: int = 200
    draw_scheme: Literal["halton", "pseudo"] = "halton"
    seed: int | None = None
    steps: int = Field(2, ge=1, le=2)
    max_evals: int = 400
    tol: float = 1e-6
    xtol: float = 1e-4
    inner_tol: float = 1e-12
    allow_unbalanced: bool = False


class ElasticitySection(Strict):
    target: str | None = None
    scale: float = 0.10
    weights_column: str | None = "quantity"
    check: bool = False


class DiagnosticsSection(Strict):
    min_first_stage_f: float = 10.0
    hansen_alpha: float = 0.05
    fail_on_threshold: bool = True


class PlaceboSection(Strict):
    mode: Literal["shuffle_alternatives", "shuffle_periods", "both"] = "both"
    n_seeds: int = 100
    first_seed: int = 0


class HoldoutSection(Strict):
    split: float = 0.8


class SimulateSection(Strict):
    markets: int = 10
    alternatives: int = 20
    periods: int = 10
    truth: dict = {}


class PipelineConfig(Strict):
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    instruments: InstrumentConfig = InstrumentConfig()
    embedding: EmbeddingSection = EmbeddingSection()
    blp: BLPSection = BLPSection()
    elasticities: ElasticitySection = ElasticitySection()
    diagnostics: DiagnosticsSection = DiagnosticsSection()
    placebo: PlaceboSection = PlaceboSection()
    holdout: HoldoutSection = HoldoutSection()
    simulate: SimulateSection = SimulateSection()
    seed: int = 0
    output_dir: str = "runs"


def apply_override(raw: dict, item: str):
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping value")
    node[parts[-1]] = yaml.safe_load(value)


def load_config(path, overrides=(), seed=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for item in overrides:
        apply_override(raw, item)
    if seed is not None:
        raw["seed"] = seed
    cfg = PipelineConfig.model_validate(raw)
    base = path.parent.resolve()
    for name in ("panel", "reviews", "instruments", "pretrained_vectors"):
        v = getattr(cfg.data, name)
        if v is not None and not Path(v).is_absolute():
            setattr(cfg.data, name, str(base / v))
    if not Path(cfg.output_dir).is_absolute():
        cfg.output_dir = str(base / cfg.output_dir)
    return cfg


def _validation_message(err: ValidationError):
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return "invalid config: " + "; ".join(parts)


# -- run bookkeeping -----------------------------------------------------------


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(obj):
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


class Run:
    """Run-scoped output directory; never reuses an existing one."""

    def __init__(self, base, subcommand):
        base = Path(base)
        base.mkdir(parents=True, exist_ok=True)
        k = 1
        while True:
            d = base / f"{subcommand}-{k:03d}"
            try:
                d.mkdir()
                break
            except FileExistsError:
                k += 1
        self.dir = d
        self.outputs = []
        self.inputs = []

    def write_text(self, name, text):
        (self.dir / name).write_text(text)
        self.outputs.append(name)

    def write_json(self, name, obj):
        self.write_text(name, dump_json(obj))

    def track(self, name):
        self.outputs.append(name)
        return self.dir / name

    def use(self, path):
        if path and Path(path).exists():
            self.inputs.append(str(path))

    def manifest(self, subcommand, cfg: PipelineConfig, config_path, threads, wall):
        import numba
        import scipy

        cfg_json = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
        data = {
            "subcommand": subcommand,
            "config_path": str(config_path),
            "config_sha256": hashlib.sha256(cfg_json.encode()).hexdigest(),
            "config": json.loads(cfg_json),
            "seed": cfg.seed,
            "threads": threads,
            "inputs": {p: sha256(p) for p in sorted(set(self.inputs + [str(config_path)]))},
            "outputs": {n: sha256(self.dir / n) for n in sorted(set(self.outputs))},
            "versions": {"sharelens": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__, "pandas": pd.__version__, "numba": numba.__version__},
            "wall_time_s": round(wall, 3),
            "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        (self.dir / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# -- pipeline steps ------------------------------------------------------------


def _panel(cfg: PipelineConfig, run: Run):
    if not cfg.data.panel:
        raise ConfigError("data.panel is required for this subcommand")
    schema = cfg.data.schema_map.model_dump()
    panel = load_panel(cfg.data.panel, schema, (cfg.data.size_policy, cfg.data.size_column))
    run.use(cfg.data.panel)
    if cfg.data.reviews:
        panel.reviews = load_reviews(cfg.data.reviews)
        run.use(cfg.data.reviews)
    return panel


def _shares(cfg, panel):
    policy = "drop" if cfg.model.zero_policy == "drop" else ("epsilon", cfg.model.epsilon)
    return compute_shares(panel, policy)


def _embedding_config(cfg):
    e = cfg.embedding.model_dump()
    if e["seed"] is None:
        e["seed"] = cfg.seed
    return EmbeddingConfig(**e)


def _train(cfg, panel, run):
    if not panel.reviews:
        raise ConfigError("data.reviews is required to train embeddings")
    pretrained = None
    if cfg.data.pretrained_vectors:
        pretrained = load_word_vectors(cfg.data.pretrained_vectors)
        run.use(cfg.data.pretrained_vectors)
    econf = _embedding_config(cfg)
    return train_embeddings(build_documents(panel.reviews, econf.doc_unit), econf, pretrained)


def _instrument_set(cfg, panel, run, need_isolation=True) -> InstrumentSet:
    ic = cfg.instruments
    base = panel.data[KEY].copy()
    iset = InstrumentSet(base.reset_index(drop=True))
    if ic.isolation and need_isolation and panel.reviews:
        model = _train(cfg, panel, run)
        iset = isolation_instruments(model, panel, ic.scope, ic.prefix)
    cols = {}
    for lag in ic.lags:
        s = lag_and_standardize(panel, lag.var, lag.transform, lag.group, lag.lag)
        cols[s.name] = s.to_numpy()
    for r in ic.rival_averages:
        s = rival_average(panel, r.var, tuple(r.within))
        cols[s.name] = s.to_numpy()
    if ic.differentiation:
        cells = panel.data["market"].astype(str) + "|" + panel.data["period"].astype(str)
        diff = differentiation_instruments(panel.data, ic.differentiation, cells.to_numpy())
        cols.update({c: diff[c].to_numpy() for c in diff.columns})
    return iset.add(cols) if cols else iset


def _extra(cfg, panel, run, needed):
    """Instrument columns joined to the design, computed only when referenced."""
    have = set(panel.data.columns) | {NEST_LABEL}
    missing = [c for c in needed if c not in have]
    if not missing:
        return None
    if cfg.data.instruments:
        run.use(cfg.data.instruments)
        extra = pd.read_csv(cfg.data.instruments)
    else:
        need_iso = any(c.startswith(cfg.instruments.prefix) for c in missing)
        extra = _instrument_set(cfg, panel, run, need_iso).data
    absent = [c for c in missing if c not in extra.columns]
    if absent:
        raise FormulaError(f"unknown column {absent[0]!r}")
    return extra


def _spec(cfg, nest=None):
    m = cfg.model
    return DesignSpec(
        regressors=list(m.regressors), interactions=[tuple(p) for p in m.interactions], fe=list(m.fe),
        trend=m.trend, nest_term=(m.kind == "nested") if nest is None else nest, intercept=m.intercept,
        cluster=m.cluster,
    )


def _fit(cfg, design, kind):
    m = cfg.model
    if kind == "quantile":
        return [fit_quantile(design.y, design.X, t, fe=design.fe, price=m.price) for t in m.taus]
    if m.endogenous:
        Z = design.columns(m.instruments)
        return fit_iv(design.y, design.X, m.endogenous, Z, m.iv_method, design.cluster, design.fe, m.cluster,
                      price=m.price)
    return fit_ols(design.y, design.X, design.cluster, design.fe, m.cluster, price=m.price)


def _design(cfg, run, kind=None):
    panel = _panel(cfg, run)
    shares = _shares(cfg, panel)
    kind = kind or cfg.model.kind
    nest = kind == "nested" or (kind == "quantile" and cfg.model.nest_in_quantile)
    spec = _spec(cfg, nest)
    needed = list(cfg.model.instruments) + list(cfg.model.regressors)
    needed += [c for p in cfg.model.interactions for c in p]
    extra = _extra(cfg, panel, run, needed)
    return panel, shares, spec, build_design(panel, shares, spec, extra), extra


# -- subcommands ---------------------------------------------------------------


def cmd_ingest(cfg, run, args):
    panel = _panel(cfg, run)
    panel.to_csv(run.track("panel.csv"))
    summary = {"ingest": panel.report.to_dict(), "markets": len(panel.markets), "periods": len(panel.periods),
               "observations": len(panel), "review_documents": len(panel.reviews)}
    run.write_json("ingest.json", summary)
    return 0


def cmd_shares(cfg, run, args):
    panel = _panel(cfg, run)
    st = _shares(cfg, panel)
    st.to_csv(run.track("shares.csv"))
    run.write_json("shares.json", {"observations": len(st.data), "dropped": [list(k) for k in st.dropped],
                                   "removed_nests": [list(k) for k in st.removed_nests]})
    return 0


def cmd_embed(cfg, run, args):
    panel = _panel(cfg, run)
    model = _train(cfg, panel, run)
    model.save(run.track("embedding.bin"))
    run.write_json("embedding.json", {
        "documents": int(model.entity_matrix.shape[0]), "vocabulary": len(model.vocab),
        "untrained": int((~model.trained).sum()), "dim": int(model.entity_matrix.shape[1]),
        "config": _embedding_config(cfg).__dict__,
    })
    return 0


def cmd_instruments(cfg, run, args):
    panel = _panel(cfg, run)
    iset = _instrument_set(cfg, panel, run)
    iset.to_csv(run.track("instruments.csv"))
    run.write_json("instruments.json", {
        "columns": iset.columns, "metadata": iset.metadata,
        "masked": {c: int(iset.missing(c).sum()) for c in iset.columns},
        "mask_reasons": sorted({v for v in iset.reasons.values()}),
        "latest_available_substitutions": len(iset.sources),
    })
    return 0


def cmd_estimate(cfg, run, args):
    kind = args.kind or cfg.model.kind
    _, _, _, design, _ = _design(cfg, run, kind)
    res = _fit(cfg, design, kind)
    if kind == "quantile":
        run.write_json("estimate.json", {"kind": kind, "fits": [r.to_dict() for r in res],
                                         "warnings": design.warnings})
        run.write_text("estimate.txt", "\n".join(r.to_text(f"quantile regression, tau = {r.fit['tau']:g}")
                                                 for r in res))
        return 0
    out = res.to_dict()
    out["kind"] = kind
    out["warnings"] = design.warnings
    run.write_json("estimate.json", out)
    run.write_text("estimate.txt", res.to_text(f"{kind} demand model ({res.estimator})"))
    return 0


def cmd_elasticities(cfg, run, args):
    kind = cfg.model.kind if cfg.model.kind != "quantile" else "nested"
    panel, shares, _, design, _ = _design(cfg, run, kind)
    rep = _fit(cfg, design, kind)
    coefs = dict(zip(rep.labels, rep.params))
    target = cfg.elasticities.target or (panel.recommendations[0] if panel.recommendations else None)
    if target is None:
        raise ConfigError("elasticities.target is required when the panel has no recommendation columns")
    f = design.frame
    cells = (f["market"].astype(str) + "|" + f["period"].astype(str)).to_numpy()
    if kind == "nested":
        sigma = float(rep.sigma)
        if not 0 <= sigma < 1:
            raise DomainError(f"estimated nest parameter {sigma:.4f} lies outside [0, 1)")
        model = ChoiceModelConfig("nested_logit", sigma=sigma)
        delta = f["delta"].to_numpy() - sigma * np.log(f["within_group_share"].to_numpy())
    else:
        model = ChoiceModelConfig("logit")
        delta = f["delta"].to_numpy()
    rec = f[target].to_numpy(float) > 0 if target in panel.recommendations else None
    w = f[cfg.elasticities.weights_column].to_numpy(float) if cfg.elasticities.weights_column else None
    el = elasticities(coefs, f, target, model, delta, cells, f["nest"].to_numpy(), rec, w,
                      cfg.elasticities.check, cfg.elasticities.scale)
    table = f[KEY].copy()
    table[f"elasticity_{target}"] = el.own
    table.to_csv(run.track("elasticities.csv"), index=False, float_format="%.17g")
    run.write_json("elasticities.json", {"target": target, "kind": kind, **el.to_dict()})
    lines = [f"own elasticities of {target} ({kind})"]
    for scope, a in el.aggregates.items():
        if a:
            lines.append(f"{scope:<12} mean {a['mean']:.4f}  weighted {a['weighted_mean']:.4f}  "
                         f"response to +{100 * cfg.elasticities.scale:g}%: {a['demand_response_pct']:.3f}%  (n={a['n']})")
    run.write_text("elasticities.txt", "\n".join(lines) + "\n")
    return 0


def cmd_blp(cfg, run, args):
    b = cfg.blp
    if not b.rc_columns:
        raise ConfigError("blp.rc_columns must name at least one column")
    panel = _panel(cfg, run)
    shares = _shares(cfg, panel)
    spec = _spec(cfg, cfg.model.kind == "nested")
    needed = list(cfg.model.instruments) + list(cfg.model.regressors)
    extra = _extra(cfg, panel, run, needed)
    design = build_design(panel, shares, spec, extra)
    f = design.frame
    if not b.allow_unbalanced:
        counts = f.groupby("market")["period"].nunique()
        if counts.nunique() > 1:
            raise ConfigError("fit_blp needs balanced panels; set blp.allow_unbalanced=true to override")
    cells = (f["market"].astype(str) + "|" + f["period"].astype(str)).to_numpy()
    Z = design.columns(cfg.model.instruments) if cfg.model.instruments else pd.DataFrame(index=f.index)
    diff = differentiation_instruments(f, b.rc_columns, cells)
    Z = pd.concat([Z.reset_index(drop=True), diff], axis=1)
    res = fit_blp(
        f["share"].to_numpy(), cells, design.X, list(cfg.model.endogenous), Z, f, b.rc_columns, b.sigma0,
        b.n_draws, b.draw_scheme, b.seed if b.seed is not None else cfg.seed, design.fe, design.cluster,
        cfg.model.cluster, b.steps, b.max_evals, b.tol, b.xtol, b.inner_tol, run.track("blp_checkpoint.json"),
        cfg.model.price, not b.allow_unbalanced,
    )
    run.write_json("blp.json", res.to_dict())
    run.write_text("blp.txt", res.report.to_text("random-coefficients logit (GMM)"))
    return 0 if res.converged else 1


def cmd_diagnose(cfg, run, args):
    if not cfg.model.endogenous:
        raise ConfigError("diagnose needs model.endogenous and model.instruments")
    kind = cfg.model.kind if cfg.model.kind != "quantile" else "nested"
    _, _, _, design, _ = _design(cfg, run, kind)
    rep = _fit(cfg, design, kind)
    th = {"min_first_stage_f": cfg.diagnostics.min_first_stage_f, "hansen_alpha": cfg.diagnostics.hansen_alpha}
    diag = diagnostics_for(rep, th)
    run.write_json("diagnostics.json", diag.to_dict())
    run.write_text("diagnostics.txt", diag.to_text())
    if not diag.passed and cfg.diagnostics.fail_on_threshold:
        logger.error("diagnostics thresholds violated: %s",
                     ", ".join(k for k, v in diag.verdicts.items() if not v["pass"]))
        return 3
    return 0


def cmd_placebo(cfg, run, args):
    kind = cfg.model.kind if cfg.model.kind != "quantile" else "nested"
    panel, shares, spec, _, extra = _design(cfg, run, kind)
    seeds = range(cfg.placebo.first_seed, cfg.placebo.first_seed + cfg.placebo.n_seeds)
    modes = ["shuffle_alternatives", "shuffle_periods"] if cfg.placebo.mode == "both" else [cfg.placebo.mode]
    iv = None
    if cfg.model.endogenous:
        iv = {"endogenous": cfg.model.endogenous, "instruments": cfg.model.instruments, "method": cfg.model.iv_method}
    out = {m: placebo_test(panel, shares, spec, m, seeds, extra=extra, iv=iv) for m in modes}
    run.write_json("placebo.json", out)
    lines = ["placebo permutations: share of seeds with |t| >= 1.96"]
    for m, r in out.items():
        for c, rate in r["rejection_rate"].items():
            base = r["baseline"][c]["t"] if r["baseline"] else float("nan")
            shown = "NA" if rate is None else f"{rate:.3f}"
            lines.append(f"{m:<22} {c:<20} baseline t {base:8.3f}  rejection {shown}  "
                         f"(seeds {r['n_seeds']}, skipped {len(r['skipped'])})")
    run.write_text("placebo.txt", "\n".join(lines) + "\n")
    return 0


def cmd_holdout(cfg, run, args):
    kind = cfg.model.kind if cfg.model.kind != "quantile" else "nested"
    panel, shares, spec, _, extra = _design(cfg, run, kind)
    iv = None
    if cfg.model.endogenous:
        iv = {"endogenous": cfg.model.endogenous, "instruments": cfg.model.instruments, "method": cfg.model.iv_method}
    rep = holdout_eval(panel, shares, spec, cfg.holdout.split, extra, iv)
    rep.rows.to_csv(run.track("holdout.csv"), index=False, float_format="%.17g")
    run.write_json("holdout.json", rep.to_dict())
    run.write_text("holdout.txt", rep.to_text())
    return 0


def cmd_simulate(cfg, run, args):
    s = cfg.simulate
    truth_kw = dict(s.truth)
    truth_kw.setdefault("seed", cfg.seed)
    try:
        truth = SyntheticTruth(**truth_kw)
    except TypeError as exc:
        raise ConfigError(f"simulate.truth: {exc}") from exc
    sp = generate_panel(truth, s.markets, s.alternatives, s.periods)
    for name in sp.write(run.dir):
        run.outputs.append(name)
    schema = {"characteristics": list(truth.beta), "context": list(truth.context_beta),
              "recommendations": list(truth.theta_rec)}
    pipeline = {"data": {"panel": "panel.csv", "reviews": "reviews.jsonl", "schema_map": schema,
                         "size_policy": "population", "size_column": "market_size"},
                "model": {"regressors": ["price", *truth.beta, *truth.context_beta, *truth.theta_rec]},
                "seed": cfg.seed}
    run.write_text("pipeline.yaml", yaml.safe_dump(pipeline, sort_keys=True))
    return 0


COMMANDS = {name: globals()[f"cmd_{name}"] for name in SUBCOMMANDS}


# -- entry point -----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="sharelens", description="Structural demand estimation pipeline.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out")
    p.add_argument("--kind", choices=["logit", "nested", "quantile"], help="estimator for `estimate`")
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("overrides", nargs="*", help="key=value config overrides")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.out:
            cfg.output_dir = args.out
    except ValidationError as exc:
        print(_validation_message(exc), file=sys.stderr)
        return 2
    except (ShareLensError, yaml.YAMLError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2

    if args.threads is not None and args.threads < 1:
        print("invalid option: --threads must be at least 1", file=sys.stderr)
        return 2
    from threadpoolctl import threadpool_limits

    start = time.perf_counter()
    run = Run(cfg.output_dir, args.subcommand)
    try:
        with threadpool_limits(limits=args.threads):
            code = COMMANDS[args.subcommand](cfg, run, args)
    except VALIDATION_ERRORS as exc:
        print(f"{args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = 2
    except ShareLensError as exc:
        print(f"{args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = 1
    except (ValueError, np.linalg.LinAlgError, FileNotFoundError) as exc:
        print(f"{args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = 1
    run.manifest(args.subcommand, cfg, Path(args.config).resolve(), args.threads, time.perf_counter() - start)
    print(str(run.dir))
    return code


if __name__ == "__main__":
    sys.exit(main())
