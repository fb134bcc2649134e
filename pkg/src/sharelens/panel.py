"""Market panels: ingestion, market shares, design matrices and lag features.

Observations are kept in long format, one row per (market, alternative,
period).  Market shares follow ``s = q / M`` with the outside option taking
the remainder of the market, and the inverted mean utility is
``delta = ln s - ln s0``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConsistencyError,
    DuplicateKeyError,
    FormulaError,
    OutsideShareError,
    SchemaError,
)

logger = logging.getLogger(__name__)

KEY = ["market", "alt", "period"]
SIZE_POLICIES = ("max_active_users", "population", "households")


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_kept: int = 0
    dropped: list = field(default_factory=list)  # (row number, reason)

    def to_dict(self):
        return {
            "rows_read": self.rows_read,
            "rows_kept": self.rows_kept,
            "dropped": [{"row": int(r), "reason": why} for r, why in self.dropped],
        }


@dataclass
class MarketPanel:
    """Long-format demand panel.

    ``data`` holds the canonical columns ``market, alt, period, quantity,
    price, nest`` plus every named characteristic, context and
    recommendation column.  Rows are sorted by (market, period, alt).
    """

    data: pd.DataFrame
    market_size: dict
    characteristics: list = field(default_factory=list)
    context: list = field(default_factory=list)
    recommendations: list = field(default_factory=list)
    ranking: str | None = None
    reviews: dict = field(default_factory=dict)
    report: IngestReport = field(default_factory=IngestReport)

    def __post_init__(self):
        self.data = self.data.sort_values(["market", "period", "alt"], kind="stable").reset_index(drop=True)
        self.validate()

    @property
    def markets(self):
        return sorted(self.data["market"].unique().tolist())

    @property
    def periods(self):
        return sorted(self.data["period"].unique().tolist())

    def __len__(self):
        return len(self.data)

    def validate(self):
        d = self.data
        missing = [c for c in KEY + ["quantity", "nest"] if c not in d.columns]
        if missing:
            raise SchemaError(f"panel is missing column {missing[0]!r}")
        dup = d.duplicated(KEY)
        if dup.any():
            first = tuple(d.loc[dup.idxmax(), KEY].tolist())
            raise DuplicateKeyError(f"duplicate (market, alt, period) key {first}")
        if (d["quantity"] < 0).any():
            raise ConsistencyError("negative quantity in panel")
        for col in self.recommendations:
            v = d[col].to_numpy(float)
            if np.any((v < 0) | (v > 1)):
                raise ConsistencyError(f"recommendation column {col!r} has entries outside [0, 1]")
        nests_per_alt = d.groupby("alt")["nest"].nunique()
        if (nests_per_alt > 1).any():
            raise ConsistencyError(f"alternative {nests_per_alt.idxmax()!r} belongs to more than one nest")
        unknown = set(d["market"].unique()) - set(self.market_size)
        if unknown:
            raise ConsistencyError(f"no market size for market {sorted(unknown)[0]!r}")
        totals = d.groupby(["market", "period"], sort=True)["quantity"].sum()
        sizes = np.array([self.market_size[m] for m in totals.index.get_level_values(0)], float)
        if np.any(sizes <= 0):
            raise ConsistencyError("market sizes must be positive")
        over = totals.to_numpy(float) > sizes
        if over.any():
            cell = totals.index[np.argmax(over)]
            raise ConsistencyError(
                f"total quantity {totals.iloc[np.argmax(over)]:g} exceeds market size "
                f"{sizes[np.argmax(over)]:g} in (market, period) {tuple(cell)}"
            )

    def with_columns(self, columns: Mapping[str, Iterable]):
        """Copy of the panel with extra row-aligned columns attached."""
        data = self.data.copy()
        for name, values in columns.items():
            data[name] = np.asarray(values)
        return MarketPanel(
            data, dict(self.market_size), list(self.characteristics), list(self.context),
            list(self.recommendations), self.ranking, self.reviews, self.report,
        )

    def to_csv(self, path):
        out = self.data.copy()
        out["market_size"] = out["market"].map(self.market_size)
        out.to_csv(path, index=False)


def default_schema(panel_columns: Sequence[str] = ()):
    """Identity schema for files written by :meth:`MarketPanel.to_csv`."""
    return {
        "market": "market", "alt": "alt", "period": "period",
        "quantity": "quantity", "price": "price", "nest": "nest",
    }


def load_panel(path, schema: Mapping, size_policy=("max_active_users", "market_size")) -> MarketPanel:
    """Read a long-format CSV into a :class:`MarketPanel`.

    ``schema`` maps canonical names (``market``, ``alt``, ``period``,
    ``quantity``, ``price``, ``nest``) to file columns and may list
    ``characteristics``, ``context`` and ``recommendations`` column groups and
    an optional ``ranking`` column.  ``size_policy`` is ``(policy, column)``:
    under ``max_active_users`` the market size is the largest value the column
    takes within the market; ``population`` and ``households`` require the
    column to be constant per market.

    Rows with negative or non-numeric quantities are rejected and listed in
    ``panel.report``; structural problems raise.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"panel file not found: {path}")
    policy, size_col = size_policy
    if policy not in SIZE_POLICIES:
        raise SchemaError(f"unknown size policy {policy!r}; expected one of {SIZE_POLICIES}")

    raw = pd.read_csv(path, encoding="utf-8")
    groups = {g: list(schema.get(g, []) or []) for g in ("characteristics", "context", "recommendations")}
    ranking = schema.get("ranking")
    required = {k: schema[k] for k in ("market", "alt", "period", "quantity") if k in schema}
    for k in ("market", "alt", "period", "quantity"):
        if k not in schema:
            raise SchemaError(f"schema does not map required field {k!r}")
    optional = {k: schema[k] for k in ("price", "nest") if schema.get(k)}
    wanted = list(required.values()) + list(optional.values()) + [size_col]
    wanted += [c for g in groups.values() for c in g] + ([ranking] if ranking else [])
    for col in wanted:
        if col not in raw.columns:
            raise SchemaError(f"missing column {col!r}")

    report = IngestReport(rows_read=len(raw))
    frame = pd.DataFrame({k: raw[v] for k, v in {**required, **optional}.items()})
    if "nest" not in frame:
        frame["nest"] = 1
    if "price" not in frame:
        frame["price"] = np.nan
    for col in [c for g in groups.values() for c in g] + ([ranking] if ranking else []):
        frame[col] = pd.to_numeric(raw[col], errors="coerce")
    size = pd.to_numeric(raw[size_col], errors="coerce")
    frame["period"] = pd.to_numeric(frame["period"], errors="coerce")
    frame["quantity"] = pd.to_numeric(frame["quantity"], errors="coerce")

    bad = pd.Series("", index=frame.index)
    bad[frame["quantity"].isna()] = "non-numeric quantity"
    bad[(bad == "") & (frame["quantity"] < 0)] = "negative quantity"
    bad[(bad == "") & frame["period"].isna()] = "non-numeric period"
    bad[(bad == "") & (size.isna() | (size <= 0))] = "non-positive market size"
    for col in groups["recommendations"]:
        v = frame[col]
        bad[(bad == "") & (v.isna() | (v < 0) | (v > 1))] = f"recommendation {col} outside [0, 1]"
    rejected = bad != ""
    for idx in np.flatnonzero(rejected.to_numpy()):
        # +2: header line and 1-based numbering
        report.dropped.append((int(idx) + 2, bad.iloc[idx]))
    frame, size = frame[~rejected].copy(), size[~rejected]
    frame["period"] = frame["period"].astype(np.int64)

    dup = frame.duplicated(KEY)
    if dup.any():
        first = tuple(frame.loc[dup.idxmax(), KEY].tolist())
        raise DuplicateKeyError(f"duplicate (market, alt, period) key {first}")

    by_market = size.groupby(frame["market"])
    if policy == "max_active_users":
        market_size = by_market.max().to_dict()
    else:
        spread = by_market.nunique()
        if (spread > 1).any():
            raise ConsistencyError(f"{policy} column {size_col!r} varies within market {spread.idxmax()!r}")
        market_size = by_market.first().to_dict()

    report.rows_kept = len(frame)
    panel = MarketPanel(
        frame, {k: float(v) for k, v in market_size.items()},
        groups["characteristics"], groups["context"], groups["recommendations"], ranking, {}, report,
    )
    if report.dropped:
        logger.info("ingestion dropped %d malformed rows", len(report.dropped))
    return panel


def load_reviews(path) -> dict:
    """Read a reviews JSONL file into ``{(alt, period): [text, ...]}``."""
    reviews: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            key = (rec["alt_id"], int(rec["period"]))
            reviews.setdefault(key, []).append(rec.get("text") or "")
    return reviews


def write_reviews(reviews: Mapping, path):
    with open(path, "w", encoding="utf-8") as fh:
        for (alt, period), texts in sorted(reviews.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            for text in texts:
                fh.write(json.dumps({"alt_id": _plain(alt), "period": int(period), "text": text}) + "\n")


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


# -- shares -----------------------------------------------------------------


@dataclass
class ShareTable:
    """Shares and inverted mean utilities aligned with retained observations.

    ``data`` carries ``market, alt, period, nest, share, outside_share,
    within_group_share, delta`` and ``row``, the index of the observation in
    ``panel.data``.
    """

    data: pd.DataFrame
    dropped: list = field(default_factory=list)
    removed_nests: list = field(default_factory=list)

    def to_csv(self, path):
        cols = ["market", "alt", "period", "share", "outside_share", "within_group_share", "delta"]
        self.data[cols].to_csv(path, index=False, float_format="%.17g")


def compute_shares(panel: MarketPanel, zero_policy="drop") -> ShareTable:
    """Market, outside and within-nest shares plus ``delta = ln s - ln s0``.

    ``zero_policy`` is ``"drop"`` or ``("epsilon", e)``; under epsilon every
    zero quantity is replaced by ``e`` before dividing by the market size.
    """
    d = panel.data
    q = d["quantity"].to_numpy(float).copy()
    keep = np.ones(len(d), bool)
    dropped, removed_nests = [], []
    if zero_policy == "drop":
        keep = q > 0
        dropped = [tuple(r) for r in d.loc[~keep, KEY].itertuples(index=False, name=None)]
        if dropped:
            logger.info("dropped %d zero-quantity observations", len(dropped))
        nest_any = pd.Series(keep).groupby([d["market"], d["period"], d["nest"]]).transform("any").to_numpy()
        empty = d.loc[~nest_any, ["market", "period", "nest"]].drop_duplicates()
        removed_nests = [tuple(r) for r in empty.itertuples(index=False, name=None)]
    else:
        kind, eps = zero_policy
        if kind != "epsilon" or not eps > 0:
            raise ValueError(f"zero_policy must be 'drop' or ('epsilon', e > 0), got {zero_policy!r}")
        q[q == 0] = eps

    size = d["market"].map(panel.market_size).to_numpy(float)
    out = d.loc[keep, KEY + ["nest"]].copy()
    out["row"] = np.flatnonzero(keep)
    s = q[keep] / size[keep]
    cell = [out["market"], out["period"]]
    inside = pd.Series(s, index=out.index).groupby(cell).transform("sum").to_numpy()
    s0 = 1.0 - inside
    if np.any(s0 <= 0):
        bad = out.loc[s0 <= 0, ["market", "period"]].iloc[0]
        raise OutsideShareError(f"outside share is not positive in (market, period) {tuple(bad)}")
    nest_total = pd.Series(s, index=out.index).groupby(cell + [out["nest"]]).transform("sum").to_numpy()
    out["share"] = s
    out["outside_share"] = s0
    out["within_group_share"] = s / nest_total
    out["delta"] = np.log(s) - np.log(s0)
    return ShareTable(out.reset_index(drop=True), dropped, removed_nests)


# -- design -------------------------------------------------------------------


@dataclass
class DesignSpec:
    """Regression specification for the inverted-share equation.

    ``fe`` entries name panel columns; ``"a*b"`` absorbs the crossed
    combination of two columns.  ``interactions`` are pairs of column names
    whose elementwise product becomes a regressor labelled ``"a:b"``.
    """

    regressors: list = field(default_factory=list)
    interactions: list = field(default_factory=list)
    fe: list = field(default_factory=list)
    trend: bool = False
    nest_term: bool = False
    intercept: bool | None = None  # None: add a constant only when no FE absorb the level
    cluster: str | None = "alt"


@dataclass
class Design:
    y: np.ndarray
    X: pd.DataFrame
    frame: pd.DataFrame  # retained panel rows joined with shares and extra columns
    fe: dict
    cluster: np.ndarray | None
    spec: DesignSpec
    warnings: list = field(default_factory=list)

    @property
    def labels(self):
        return list(self.X.columns)

    def columns(self, names):
        missing = [n for n in names if n not in self.frame.columns]
        if missing:
            raise FormulaError(f"unknown column {missing[0]!r}")
        return self.frame[list(names)].astype(float).reset_index(drop=True)

    def subset(self, mask):
        mask = np.asarray(mask, bool)
        return Design(
            self.y[mask], self.X[mask].reset_index(drop=True), self.frame[mask].reset_index(drop=True),
            {k: v[mask] for k, v in self.fe.items()},
            None if self.cluster is None else self.cluster[mask], self.spec, list(self.warnings),
        )


NEST_LABEL = "ln_within_share"
TREND_LABEL = "trend"
CONST_LABEL = "const"


def build_design(panel: MarketPanel, shares: ShareTable, spec: DesignSpec, extra: pd.DataFrame | None = None) -> Design:
    """Assemble ``y = delta`` and the regressor frame in declared order.

    Column order: constant (only without FE), regressors, interactions, the
    log within-group share when ``nest_term`` is on, then the linear trend.
    ``extra`` is joined on (market, alt, period) before any column lookup.
    """
    frame = panel.data.iloc[shares.data["row"].to_numpy()].reset_index(drop=True)
    for col in ("share", "outside_share", "within_group_share", "delta"):
        frame[col] = shares.data[col].to_numpy()
    if extra is not None:
        add = extra.drop(columns=[c for c in extra.columns if c in frame.columns and c not in KEY])
        frame = frame.merge(add, on=KEY, how="left", validate="one_to_one")

    def col(name):
        if name not in frame.columns:
            raise FormulaError(f"unknown column {name!r}")
        return frame[name].to_numpy(float)

    cols: dict = {}
    use_const = spec.intercept if spec.intercept is not None else not spec.fe
    if use_const:
        cols[CONST_LABEL] = np.ones(len(frame))
    for name in spec.regressors:
        cols[name] = col(name)
    for pair in spec.interactions:
        a, b = pair
        cols[f"{a}:{b}"] = col(a) * col(b)
    if spec.nest_term:
        cols[NEST_LABEL] = np.log(frame["within_group_share"].to_numpy(float))
    if spec.trend:
        cols[TREND_LABEL] = frame["period"].to_numpy(float)
    X = pd.DataFrame(cols)

    fe = {}
    for dim in spec.fe:
        parts = dim.split("*")
        for p in parts:
            if p not in frame.columns:
                raise FormulaError(f"unknown fixed-effect column {p!r}")
        if len(parts) == 1:
            fe[dim] = pd.factorize(frame[dim], sort=True)[0]
        else:
            fe[dim] = pd.MultiIndex.from_frame(frame[parts]).factorize(sort=True)[0]

    warnings = []
    for name in X.columns:
        v = X[name].to_numpy()
        for dim, ids in fe.items():
            g = pd.Series(v).groupby(ids)
            if np.all((g.max() - g.min()).to_numpy() == 0):
                warnings.append(f"column {name!r} is constant within every {dim!r} group and will be absorbed")
                break
    for w in warnings:
        logger.warning(w)

    cluster = None
    if spec.cluster:
        if spec.cluster not in frame.columns:
            raise FormulaError(f"unknown cluster column {spec.cluster!r}")
        cluster = pd.factorize(frame[spec.cluster], sort=True)[0]
    return Design(frame["delta"].to_numpy(float), X, frame, fe, cluster, spec, warnings)


# -- lags and standardization -------------------------------------------------


def lag_and_standardize(panel: MarketPanel, var: str, transform="pct_change_then_zscore", group=None, lag: int = 1) -> pd.Series:
    """Lagged standardized feature aligned with ``panel.data`` rows.

    ``pct_change_then_zscore`` computes the one-period percentage change,
    z-scores it within (``group``, period) with ``group`` defaulting to the
    market, and lags the result ``lag`` periods.  ``zscore_within_category``
    z-scores the level within (``group``, period), ``group`` defaulting to the
    nest, then lags.  Observations without the needed history are NaN; a
    group with no spread scores 0.
    """
    if lag < 1:
        raise ValueError("lag must be at least 1")
    d = panel.data
    if var not in d.columns:
        raise FormulaError(f"unknown column {var!r}")
    x = d[var].to_numpy(float)
    if transform == "pct_change_then_zscore":
        group = group or "market"
        prev = _shift(d, x, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(prev != 0, (x - prev) / prev, np.nan)
        name = f"lag{lag}_zpct_{var}"
    elif transform == "zscore_within_category":
        group = group or "nest"
        v = x
        name = f"lag{lag}_zcat_{var}"
    else:
        raise ValueError(f"unknown transform {transform!r}")
    if group not in d.columns:
        raise FormulaError(f"unknown grouping column {group!r}")
    z = _zscore(v, [d[group], d["period"]])
    return pd.Series(_shift(d, z, lag), index=d.index, name=name)


def _shift(d: pd.DataFrame, values, k):
    """Value of the same (market, alt) exactly ``k`` periods earlier, else NaN."""
    src = pd.DataFrame({"market": d["market"], "alt": d["alt"], "period": d["period"] + k, "_v": values})
    merged = d[["market", "alt", "period"]].merge(src, on=["market", "alt", "period"], how="left")
    return merged["_v"].to_numpy(float)


def _zscore(values, by):
    s = pd.Series(values)
    g = s.groupby(by, dropna=False)
    mean = g.transform("mean")
    sd = g.transform("std", ddof=0)
    z = (s - mean) / sd
    z[(sd == 0) & s.notna()] = 0.0
    return z.to_numpy(float)


def rival_average(panel: MarketPanel, var: str, within=("market", "period"), name=None) -> pd.Series:
    """Mean of ``var`` over the other alternatives sharing the ``within`` cell.

    Cells with a single alternative give NaN.
    """
    d = panel.data
    by = [d[c] for c in within]
    x = d[var].astype(float)
    total = x.groupby(by).transform("sum")
    n = x.groupby(by).transform("count")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (total - x) / (n - 1)
    out[n <= 1] = np.nan
    return pd.Series(out.to_numpy(), index=d.index, name=name or f"rival_mean_{var}_" + "_".join(within))
