"""Synthetic demand panels with known truth and a simulated-consumer oracle."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .blp import ChoiceModelConfig, predict_shares
from .embed import pairwise_angular
from .errors import ConfigError, OutsideShareError
from .panel import MarketPanel, write_reviews


@dataclass
class SyntheticTruth:
    """Structural parameters and generator knobs.

    Recommendation intensity is ``logistic(rec_intercept + rec_isolation *
    z(isolation) + confounding * xi + noise)`` where ``z(isolation)`` is the
    standardized latent isolation; intensities below ``rec_threshold`` are set
    to zero (the alternative was not recommended).
    """

    beta: dict = field(default_factory=lambda: {"rating": 0.8, "photos": 0.4})
    context_beta: dict = field(default_factory=lambda: {"traffic": 0.3})
    alpha: float = 0.6
    intercept: float = -3.0
    sigma_nest: float = 0.0
    theta_rec: dict = field(default_factory=lambda: {"rec_trending": 1.0})
    sigma_rc: dict = field(default_factory=dict)
    xi_sd: float = 0.5
    confounding: float = 0.0
    rec_intercept: float = 0.0
    rec_isolation: float = 1.0
    rec_noise: float = 0.5
    rec_threshold: float = 0.0
    n_nests: int = 3
    market_size: float = 100_000.0
    round_quantities: bool = False
    n_topics: int = 6
    topic_width: float = 0.6
    isolation_drift: float = 0.15
    isolation_spread: float = 1.0
    shared_weight: float = 0.1
    shared_vocab: int = 60
    topic_vocab: int = 25
    reviews_per_doc: int = 2
    words_per_review: int = 100
    n_draws: int = 200
    draw_scheme: str = "halton"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.sigma_nest < 1:
            raise ConfigError("sigma_nest must lie in [0, 1)")
        if self.xi_sd < 0:
            raise ConfigError("xi_sd must be nonnegative")
        if self.sigma_nest > 0 and self.sigma_rc:
            raise ConfigError("nested and random-coefficient forward models cannot be combined")
        for k, v in asdict(self).items():
            vals = v.values() if isinstance(v, dict) else [v]
            if any(isinstance(x, float) and not np.isfinite(x) for x in vals):
                raise ConfigError(f"truth value {k!r} is not finite")

    def choice_config(self) -> ChoiceModelConfig:
        if self.sigma_rc:
            return ChoiceModelConfig("random_coefficients", rc=dict(self.sigma_rc), n_draws=self.n_draws,
                                     draw_scheme=self.draw_scheme, seed=self.seed)
        if self.sigma_nest > 0:
            return ChoiceModelConfig("nested_logit", sigma=self.sigma_nest)
        return ChoiceModelConfig("logit")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class SyntheticPanel:
    panel: MarketPanel
    truth: SyntheticTruth
    latent: pd.DataFrame  # per observation: xi, true_isolation, delta, share, outside_share, rec propensity

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.panel.to_csv(out / "panel.csv")
        write_reviews(self.panel.reviews, out / "reviews.jsonl")
        (out / "truth.json").write_text(self.truth.to_json() + "\n")
        self.latent.to_csv(out / "latent.csv", index=False, float_format="%.17g")
        return ["panel.csv", "reviews.jsonl", "truth.json", "latent.csv"]


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_panel(truth: SyntheticTruth, markets: int, alternatives: int, periods: int) -> SyntheticPanel:
    """Draw a balanced panel of ``markets x alternatives x periods`` observations.

    Each market uses its own random substream derived from ``truth.seed`` so
    the output never depends on the order markets are generated in.
    """
    if markets < 1 or periods < 1 or alternatives < 2:
        raise ConfigError("need markets >= 1, periods >= 1 and at least 2 alternatives per market")
    frames, reviews = [], {}
    for r in range(markets):
        f, rev = _market(truth, r, alternatives, periods)
        frames.append(f)
        reviews.update(rev)
    d = pd.concat(frames, ignore_index=True)

    iso = d["true_isolation"].to_numpy()
    z_iso = (iso - iso.mean()) / (iso.std() or 1.0)
    for name in truth.theta_rec:
        pull = d[f"_noise_{name}"].to_numpy()
        prop = _logistic(truth.rec_intercept + truth.rec_isolation * z_iso + truth.confounding * d["xi"].to_numpy() + pull)
        d[f"propensity_{name}"] = prop
        d[name] = np.where(prop >= truth.rec_threshold, prop, 0.0)

    delta = truth.intercept - truth.alpha * d["price"].to_numpy() + d["xi"].to_numpy()
    for name, b in {**truth.beta, **truth.context_beta}.items():
        delta = delta + b * d[name].to_numpy()
    for name, th in truth.theta_rec.items():
        delta = delta + th * d[name].to_numpy()
    d["delta"] = delta

    cells = d["market"].to_numpy() * (periods + 1) + d["period"].to_numpy()
    s, s0 = predict_shares(delta, truth.choice_config(), cells, d["nest"].to_numpy(), d)
    if np.any(s0 <= 0) or np.any(s <= 0):
        bad = d.loc[np.argmax((s0 <= 0) | (s <= 0)), ["market", "period"]]
        raise OutsideShareError(f"degenerate shares in (market, period) {tuple(bad)}")
    d["share"], d["outside_share"] = s, s0
    size = d["market"].map(_market_sizes(truth, markets)).to_numpy()
    q = s * size
    d["quantity"] = np.round(q) if truth.round_quantities else q

    keep = ["market", "alt", "period", "quantity", "price", "nest", *truth.beta, *truth.context_beta, *truth.theta_rec]
    panel = MarketPanel(
        d[keep].copy(), _market_sizes(truth, markets), list(truth.beta), list(truth.context_beta),
        list(truth.theta_rec), None, reviews,
    )
    latent_cols = ["market", "alt", "period", "xi", "true_isolation", "delta", "share", "outside_share"]
    latent_cols += [f"propensity_{n}" for n in truth.theta_rec]
    latent = d[latent_cols].sort_values(["market", "period", "alt"], kind="stable").reset_index(drop=True)
    return SyntheticPanel(panel, truth, latent)


def _market_sizes(truth, markets):
    return {r: float(truth.market_size) for r in range(markets)}


def _market(truth: SyntheticTruth, r: int, n: int, periods: int):
    rng = np.random.default_rng([truth.seed, r])
    alts = r * n + np.arange(n)
    t = np.arange(1, periods + 1)
    jj, tt = np.meshgrid(np.arange(n), t, indexing="ij")  # (n, T)

    f = {"market": np.full(n * periods, r), "alt": alts[jj].ravel(), "period": tt.ravel(),
         "nest": (jj % truth.n_nests + 1).ravel()}
    for name in truth.beta:
        level = rng.normal(size=(n, 1))
        f[name] = (level + 0.5 * rng.normal(size=(n, periods))).ravel()
    for name in truth.context_beta:
        f[name] = np.broadcast_to(rng.normal(size=(1, periods)), (n, periods)).ravel()
    tier = rng.integers(1, 5, size=(n, 1))
    f["price"] = (tier + rng.uniform(-0.25, 0.25, size=(n, periods))).ravel()
    f["xi"] = (truth.xi_sd * rng.normal(size=(n, periods))).ravel()

    # latent position on a line; topic weights decay with distance to each topic's anchor
    k_top = truth.n_topics
    pos = truth.isolation_spread * rng.normal(size=(n, 1))
    pos = pos + np.cumsum(truth.isolation_drift * rng.normal(size=(n, periods)), axis=1)
    anchors = np.linspace(-2.5, 2.5, k_top)
    logits = -0.5 * ((pos[:, :, None] - anchors) / truth.topic_width) ** 2
    mix = np.exp(logits - logits.max(axis=2, keepdims=True))
    mix /= mix.sum(axis=2, keepdims=True)
    iso = np.empty((n, periods))
    for k in range(periods):
        iso[:, k] = pairwise_angular(np.sqrt(mix[:, k])).sum(axis=1) / (n - 1)
    f["true_isolation"] = iso.ravel()
    for name in truth.theta_rec:
        f[f"_noise_{name}"] = (truth.rec_noise * rng.normal(size=(n, periods))).ravel()

    reviews = {}
    shared = np.array([f"common{i}" for i in range(truth.shared_vocab)])
    topics = np.array([[f"topic{k}word{i}" for i in range(truth.topic_vocab)] for k in range(k_top)])
    size = (n, periods, truth.reviews_per_doc, truth.words_per_review)
    cdf = np.cumsum(mix, axis=2)
    cdf[:, :, -1] = 1.0
    u = rng.random(size)
    topic = (u[..., None] > cdf[:, :, None, None, :]).sum(axis=-1)
    words = np.where(rng.random(size) < truth.shared_weight,
                     shared[rng.integers(0, truth.shared_vocab, size)],
                     topics[topic, rng.integers(0, truth.topic_vocab, size)])
    for j in range(n):
        for k in range(periods):
            reviews[(int(alts[j]), int(t[k]))] = [" ".join(w) for w in words[j, k]]
    return pd.DataFrame(f), reviews


# -- consumer-level oracle -------------------------------------------------------


def _positive_stable(alpha, size, rng):
    """Positive stable variates with Laplace transform ``exp(-t**alpha)`` (Kanter)."""
    u = rng.uniform(0.0, np.pi, size)
    e = rng.exponential(1.0, size)
    return (np.sin(alpha * u) / np.sin(u) ** (1 / alpha)) * (np.sin((1 - alpha) * u) / e) ** ((1 - alpha) / alpha)


def brute_force_choice_probs(delta, config: ChoiceModelConfig | None = None, n_consumers=1_000_000, seed=0,
                             nests=None, rc_data=None, chunk=250_000):
    """Choice frequencies from simulated utility-maximizing consumers in one market.

    Returns ``(inside frequencies, outside frequency)``.  Each consumer draws
    a Gumbel shock per alternative and for the outside option.  Under nested
    logit with ``lam = 1 - sigma`` the shocks within nest ``g`` are
    ``lam * (G_j + ln S_g)`` with ``G_j`` iid Gumbel and ``S_g`` positive
    stable of index ``lam``: conditional on ``S_g`` the shocks have CDF
    ``exp(-S_g exp(-x / lam))``, and integrating over ``S_g`` gives the joint
    CDF ``exp(-(sum_j exp(-x_j / lam)) ** lam)`` of the nested generalized
    extreme value family.  Random coefficients add ``sum_v sd_v nu_iv x_jv``
    with fresh standard normal ``nu`` per consumer.
    """
    config = config or ChoiceModelConfig()
    delta = np.asarray(delta, float)
    n_alt = delta.shape[0]
    rng = np.random.default_rng(seed)
    counts = np.zeros(n_alt + 1, np.int64)
    if config.kind == "nested_logit":
        nest_codes = pd.factorize(np.asarray(nests))[0]
        lam = 1.0 - config.sigma
    if config.kind == "random_coefficients":
        x = pd.DataFrame(rc_data)[list(config.rc)].to_numpy(float)
        sd = np.array(list(config.rc.values()), float)
    done = 0
    while done < n_consumers:
        m = min(chunk, n_consumers - done)
        eps = rng.gumbel(size=(m, n_alt + 1))
        u = np.empty((m, n_alt + 1))
        u[:, 0] = eps[:, 0]
        if config.kind == "nested_logit" and lam < 1:
            s = _positive_stable(lam, (m, nest_codes.max() + 1), rng)
            u[:, 1:] = delta + lam * (eps[:, 1:] + np.log(s)[:, nest_codes])
        else:
            u[:, 1:] = delta + eps[:, 1:]
        if config.kind == "random_coefficients":
            nu = rng.standard_normal((m, len(sd)))
            u[:, 1:] += (nu * sd) @ x.T
        counts += np.bincount(u.argmax(axis=1), minlength=n_alt + 1)
        done += m
    freq = counts / n_consumers
    return freq[1:], freq[0]
