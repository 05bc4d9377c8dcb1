"""Return-based positive/negative sampling (SR and SRD), the sigmoid
projector, and the per-state and horizon-weighted contrastive losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .errors import ConfigError, DimensionError, NumericError, SamplingError
from .nn import MlpParams, init_mlp, mlp_backward, mlp_forward

STRATEGIES = ("sr", "srd")
MIN_NORM = 1e-12


@dataclass(frozen=True)
class ContrastiveConfig:
    xi: float = 0.7           # positive threshold on scaled return
    zeta: float = 0.3         # negative threshold
    slope: float = 20.0       # logistic steepness
    kappa: int = 16           # samples per side
    temperature: float = 0.5
    strategy: str = "sr"
    cluster_count: int = 32
    transition_top_m: int = 3
    latent_dim: int = 16
    kmeans_batch: int = 256
    kmeans_epochs: int = 10

    def __post_init__(self):
        if self.xi < self.zeta:
            raise ConfigError(f"xi ({self.xi}) must be >= zeta ({self.zeta})")
        if self.slope <= 0:
            raise ConfigError("slope must be positive")
        if self.kappa < 1:
            raise ConfigError("kappa must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.cluster_count < 1 or self.transition_top_m < 1:
            raise ConfigError("cluster_count and transition_top_m must be >= 1")


def p_positive(v, cfg: ContrastiveConfig):
    """1 / (1 + exp(slope * (xi - v)))"""
    return expit(cfg.slope * (np.asarray(v, dtype=np.float64) - cfg.xi))


def p_negative(v, cfg: ContrastiveConfig):
    """1 / (1 + exp(slope * (v - zeta)))"""
    return expit(cfg.slope * (cfg.zeta - np.asarray(v, dtype=np.float64)))


def inclusion_mask(v, cfg: ContrastiveConfig, rng: np.random.Generator, side: str = "positive"):
    """Independent Bernoulli grouping of each pool state into the positive
    (or negative) group with its inclusion probability."""
    p = p_positive(v, cfg) if side == "positive" else p_negative(v, cfg)
    return rng.random(np.shape(p)) < p


# -- clustering --------------------------------------------------------------

def assign_clusters(x, centroids):
    d2 = (np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centroids.T
          + np.sum(centroids * centroids, axis=1)[None, :])
    return np.argmin(d2, axis=1)


def kmeans_objective(x, centroids, labels=None) -> float:
    if labels is None:
        labels = assign_clusters(x, centroids)
    diff = x - centroids[labels]
    return float(np.sum(diff * diff))


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    history: list = field(default_factory=list)  # accepted objective per epoch
    objective: float = float("nan")              # after the final full refinement


def minibatch_kmeans(x, k: int, rng: np.random.Generator, batch_size: int = 256,
                     epochs: int = 10) -> KMeansResult:
    """Mini-batch k-means with per-centre 1/count learning rates.

    An epoch whose full objective ends higher than the best so far is rolled
    back. A closing full-batch mean update polishes the centres.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if k > n:
        raise ConfigError(f"cluster_count {k} exceeds pool size {n}")
    if k < 1:
        raise ConfigError("cluster_count must be >= 1")
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    counts = np.zeros(k)
    best = kmeans_objective(x, centroids)
    history = []
    for _ in range(epochs):
        saved = centroids.copy(), counts.copy()
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            xb = x[perm[start:start + batch_size]]
            lab = assign_clusters(xb, centroids)
            m = np.bincount(lab, minlength=k).astype(np.float64)
            sums = np.zeros_like(centroids)
            np.add.at(sums, lab, xb)
            hit = m > 0
            # sequential 1/count updates over a batch collapse to a running mean
            centroids[hit] = (counts[hit, None] * centroids[hit] + sums[hit]) / (counts[hit] + m[hit])[:, None]
            counts += m
        obj = kmeans_objective(x, centroids)
        if obj > best:
            centroids, counts = saved
        else:
            best = obj
        history.append(best)
    labels = assign_clusters(x, centroids)
    refined = centroids.copy()
    for c in range(k):
        members = labels == c
        if members.any():
            refined[c] = x[members].mean(axis=0)
    obj = kmeans_objective(x, refined)
    if obj <= best * (1.0 + 1e-12):
        centroids, best = refined, obj
    labels = assign_clusters(x, centroids)
    return KMeansResult(centroids, labels, history, kmeans_objective(x, centroids, labels))


def cluster_transitions(episode_labels, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic cluster-to-cluster transition frequencies from consecutive
    in-episode states. Rows without outgoing pairs become uniform; the second
    return value flags them."""
    counts = np.zeros((k, k))
    for lab in episode_labels:
        lab = np.asarray(lab)
        if len(lab) > 1:
            np.add.at(counts, (lab[:-1], lab[1:]), 1.0)
    out = counts.sum(axis=1)
    empty = out == 0
    mat = np.empty_like(counts)
    mat[~empty] = counts[~empty] / out[~empty, None]
    mat[empty] = 1.0 / k
    return mat, empty


# -- index -------------------------------------------------------------------

class _Sampler:
    """Successive (without-replacement) sampling proportional to fixed weights
    over a candidate list."""

    def __init__(self, candidates, weights, side):
        self.candidates = np.asarray(candidates, dtype=np.int64)
        w = np.asarray(weights, dtype=np.float64)
        self.weights = w
        self.eligible = int(np.count_nonzero(w > 0))
        self.cdf = np.cumsum(w)
        self.total = float(self.cdf[-1]) if len(w) else 0.0
        self.side = side

    def draw(self, n_rows: int, kappa: int, rng: np.random.Generator) -> np.ndarray:
        if self.eligible < kappa:
            raise SamplingError(f"{self.side} side: only {self.eligible} eligible states, need {kappa}")
        out = np.empty((n_rows, kappa), dtype=np.int64)
        if n_rows == 0:
            return out
        pending = np.arange(n_rows)
        draws = self._raw(n_rows, 2 * kappa + 8, rng)
        for _ in range(6):
            ok, picked = _first_distinct(draws, kappa)
            out[pending[ok]] = picked
            pending, draws = pending[~ok], draws[~ok]
            if not len(pending):
                return self.candidates[out]
            # extend the same draw sequences, which keeps the result exact
            draws = np.concatenate([draws, self._raw(len(pending), draws.shape[1], rng)], axis=1)
        # heavily skewed weights: exact Gumbel top-k for the stragglers
        logw = np.full(len(self.weights), -np.inf)
        pos = self.weights > 0
        logw[pos] = np.log(self.weights[pos])
        for r in pending:
            keys = logw + rng.gumbel(size=len(logw))
            out[r] = np.argsort(-keys, kind="stable")[:kappa]
        return self.candidates[out]

    def _raw(self, rows, cols, rng):
        u = rng.random((rows, cols)) * self.total
        return np.minimum(np.searchsorted(self.cdf, u, side="right"), len(self.cdf) - 1)


def _first_distinct(draws, kappa):
    order = np.argsort(draws, axis=1, kind="stable")
    srt = np.take_along_axis(draws, order, axis=1)
    first_sorted = np.ones_like(srt, dtype=bool)
    first_sorted[:, 1:] = srt[:, 1:] != srt[:, :-1]
    is_first = np.zeros_like(first_sorted)
    np.put_along_axis(is_first, order, first_sorted, axis=1)
    rank = np.cumsum(is_first, axis=1)
    ok = rank[:, -1] >= kappa
    sel = is_first[ok] & (rank[ok] <= kappa)
    return ok, draws[ok][sel].reshape(-1, kappa)


@dataclass
class ContrastiveIndex:
    states: np.ndarray        # normalised pool states (n, state_dim)
    returns: np.ndarray       # scaled returns in [0, 1]
    p_pos: np.ndarray
    p_neg: np.ndarray
    cfg: ContrastiveConfig
    centroids: np.ndarray | None = None
    labels: np.ndarray | None = None
    transition: np.ndarray | None = None
    uniform_rows: np.ndarray | None = None
    kmeans_history: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.states)
        self._neg = _Sampler(np.arange(n), self.p_neg, "negative")
        self._pos_sr = _Sampler(np.arange(n), self.p_pos, "positive")
        self._pos_srd = {}

    @property
    def k(self) -> int:
        return 0 if self.centroids is None else len(self.centroids)

    def cluster_of(self, states) -> np.ndarray:
        return assign_clusters(np.atleast_2d(np.asarray(states, dtype=np.float64)), self.centroids)

    def candidate_clusters(self, cluster: int, m: int | None = None) -> np.ndarray:
        m = self.cfg.transition_top_m if m is None else m
        populated = np.bincount(self.labels, minlength=self.k) > 0
        row = np.where(populated, self.transition[cluster], -np.inf)
        order = np.argsort(-row, kind="stable")
        return order[:min(m, int(populated.sum()))]

    def candidate_set(self, state, m: int | None = None) -> np.ndarray:
        """Pool indices whose cluster is among the top-m destinations of the
        query state's cluster."""
        if self.centroids is None:
            raise ConfigError("candidate sets need an SRD index (clusters not built)")
        c = int(self.cluster_of(state)[0])
        return np.flatnonzero(np.isin(self.labels, self.candidate_clusters(c, m)))

    def positive_sampler(self, cluster: int) -> _Sampler:
        if cluster not in self._pos_srd:
            cand = np.flatnonzero(np.isin(self.labels, self.candidate_clusters(cluster)))
            self._pos_srd[cluster] = _Sampler(cand, self.p_pos[cand], "positive")
        return self._pos_srd[cluster]


def build_index(pool_states, pool_returns, cfg: ContrastiveConfig, rng: np.random.Generator | None = None,
                episode_lengths=None) -> ContrastiveIndex:
    """Pool states are expected in the model's (normalised) space and returns
    scaled to [0, 1]. SRD additionally needs `rng` and `episode_lengths`
    (consecutive pool rows form episodes)."""
    states = np.asarray(pool_states, dtype=np.float64)
    v = np.asarray(pool_returns, dtype=np.float64)
    if len(states) != len(v):
        raise DimensionError("pool states and returns differ in length")
    idx = ContrastiveIndex(states, v, p_positive(v, cfg), p_negative(v, cfg), cfg)
    if cfg.strategy == "srd":
        if episode_lengths is None:
            episode_lengths = [len(states)]
        km = minibatch_kmeans(states, cfg.cluster_count, rng, cfg.kmeans_batch, cfg.kmeans_epochs)
        bounds = np.cumsum([0, *episode_lengths])
        if bounds[-1] != len(states):
            raise DimensionError("episode lengths do not cover the pool")
        per_ep = [km.labels[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        mat, empty = cluster_transitions(per_ep, cfg.cluster_count)
        idx.centroids, idx.labels, idx.transition, idx.uniform_rows = km.centroids, km.labels, mat, empty
        idx.kmeans_history = km.history
    return idx


def index_from_dataset(dataset, cfg: ContrastiveConfig, rng=None) -> ContrastiveIndex:
    ns = dataset.norm_stats
    return build_index(ns.normalize_states(dataset.all_states()), dataset.scaled_returns(), cfg, rng,
                       [len(ep) for ep in dataset.episodes])


def sample_sets(states, index: ContrastiveIndex, cfg: ContrastiveConfig, rng: np.random.Generator):
    """Pool indices of kappa positives and kappa negatives per query state,
    shapes (Q, kappa) each."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    q = len(states)
    if cfg.strategy == "sr":
        pos = index._pos_sr.draw(q, cfg.kappa, rng)
    else:
        clusters = index.cluster_of(states)
        pos = np.empty((q, cfg.kappa), dtype=np.int64)
        for c in np.unique(clusters):
            rows = np.flatnonzero(clusters == c)
            pos[rows] = index.positive_sampler(int(c)).draw(len(rows), cfg.kappa, rng)
    neg = index._neg.draw(q, cfg.kappa, rng)
    return pos, neg


# -- losses ------------------------------------------------------------------

def init_projector(state_dim: int, latent_dim: int, rng) -> MlpParams:
    return init_mlp([state_dim, latent_dim], rng, output="sigmoid")


def cosine_sim(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na < MIN_NORM) or np.any(nb < MIN_NORM):
        raise NumericError("cosine similarity of a near-zero vector")
    return np.sum(a * b, axis=-1) / (na * nb)


def contrastive_loss_from_sims(sim_pos, sim_neg, temperature: float):
    """-log(sum exp(sim_pos / T) / sum exp(sim_neg / T)) over the last axis."""
    return (-logsumexp(np.asarray(sim_pos) / temperature, axis=-1)
            + logsumexp(np.asarray(sim_neg) / temperature, axis=-1))


def _cos_grads(a, b, sim):
    """Partials of cos(a, b) w.r.t. a and b (broadcast over leading axes)."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    s = sim[..., None]
    ga = b / (na * nb) - s * a / (na * na)
    gb = a / (na * nb) - s * b / (nb * nb)
    return ga, gb


@dataclass
class ContrastiveTape:
    proj_tape: object
    n_query: int
    z: np.ndarray
    zp: np.ndarray
    zn: np.ndarray
    sp: np.ndarray
    sn: np.ndarray
    weights: np.ndarray
    temperature: float


def contrastive_loss_state(s_hat, s_pos, s_neg, projector: MlpParams, cfg: ContrastiveConfig,
                           weights=None):
    """Weighted sum over queries of the per-state contrastive loss.

    s_hat (Q, sd), s_pos (Q, kappa, sd), s_neg (Q, kappa, sd). Returns
    (loss, per_query_losses, tape).
    """
    s_hat = np.atleast_2d(np.asarray(s_hat, dtype=np.float64))
    s_pos = np.asarray(s_pos, dtype=np.float64).reshape(len(s_hat), -1, s_hat.shape[-1])
    s_neg = np.asarray(s_neg, dtype=np.float64).reshape(len(s_hat), -1, s_hat.shape[-1])
    if s_pos.shape[1] != s_neg.shape[1]:
        raise DimensionError("positive and negative sets must have the same size")
    q, kp, sd = s_pos.shape
    stacked = np.concatenate([s_hat, s_pos.reshape(-1, sd), s_neg.reshape(-1, sd)])
    out, tape = mlp_forward(projector, stacked)
    z = out[:q]
    zp = out[q:q + q * kp].reshape(q, kp, -1)
    zn = out[q + q * kp:].reshape(q, kp, -1)
    sp = cosine_sim(z[:, None, :], zp)
    sn = cosine_sim(z[:, None, :], zn)
    per = contrastive_loss_from_sims(sp, sn, cfg.temperature)
    w = np.ones(q) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), (q,))
    loss = float(np.sum(w * per))
    return loss, per, ContrastiveTape(tape, q, z, zp, zn, sp, sn, np.asarray(w), cfg.temperature)


def contrastive_backward(tape: ContrastiveTape):
    """Returns (gradient w.r.t. s_hat (Q, sd), projector parameter gradients)."""
    T = tape.temperature
    w = tape.weights[:, None]
    d_sp = -w * softmax(tape.sp / T, axis=-1) / T
    d_sn = w * softmax(tape.sn / T, axis=-1) / T
    zq = tape.z[:, None, :]
    ga_p, gb_p = _cos_grads(zq, tape.zp, tape.sp)
    ga_n, gb_n = _cos_grads(zq, tape.zn, tape.sn)
    g_z = np.sum(d_sp[..., None] * ga_p, axis=1) + np.sum(d_sn[..., None] * ga_n, axis=1)
    g_zp = d_sp[..., None] * gb_p
    g_zn = d_sn[..., None] * gb_n
    latent = tape.z.shape[-1]
    g_out = np.concatenate([g_z, g_zp.reshape(-1, latent), g_zn.reshape(-1, latent)])
    grads, g_in = mlp_backward(tape.proj_tape, g_out)
    return g_in[:tape.n_query], grads


def horizon_weights(H: int) -> np.ndarray:
    """1 / (j + 1) for relative offsets j = 1..H."""
    return 1.0 / (np.arange(1, H + 1) + 1.0)


@dataclass
class TrajContrastTape:
    inner: ContrastiveTape
    batch: int
    H: int
    state_dim: int
    step_dim: int


def contrastive_loss_traj(recon, index: ContrastiveIndex, cfg: ContrastiveConfig, projector: MlpParams,
                          rng: np.random.Generator, state_dim: int, action_dim: int, sets=None):
    """Horizon-weighted contrastive loss over reconstructed windows (B, D),
    averaged over the batch. Positions 1..H are contrasted; position 0 is the
    conditioned observation. Returns (loss, tape)."""
    recon = np.atleast_2d(np.asarray(recon, dtype=np.float64))
    b = len(recon)
    step = state_dim + action_dim
    steps = recon.reshape(b, -1, step)
    H = steps.shape[1] - 1
    if H < 1:
        raise DimensionError("window must contain at least one generated step")
    queries = steps[:, 1:, :state_dim].reshape(-1, state_dim)
    if sets is None:
        sets = sample_sets(queries, index, cfg, rng)
    pos, neg = sets
    w = np.tile(horizon_weights(H), b) / b
    loss, _, tape = contrastive_loss_state(queries, index.states[pos], index.states[neg], projector, cfg, w)
    return loss, TrajContrastTape(tape, b, H, state_dim, step)


def contrastive_traj_backward(tape: TrajContrastTape):
    """Returns (gradient w.r.t. the flattened windows, projector gradients)."""
    g_q, grads = contrastive_backward(tape.inner)
    g = np.zeros((tape.batch, tape.H + 1, tape.step_dim))
    g[:, 1:, :tape.state_dim] = g_q.reshape(tape.batch, tape.H, tape.state_dim)
    return g.reshape(tape.batch, -1), grads


def strategy_diagnostic(pool_states, pool_returns, cfg: ContrastiveConfig) -> dict:
    """Heuristic for choosing SR vs SRD: if high-return states sit far from the
    low-return states (relative to the typical spacing among low-return
    states), transitions toward them are unlikely and SRD is suggested."""
    states = np.asarray(pool_states, dtype=np.float64)
    v = np.asarray(pool_returns, dtype=np.float64)
    high, low = states[v >= cfg.xi], states[v <= cfg.zeta]
    if not len(high) or len(low) < 2:
        return {"separation": float("nan"), "suggested": "sr", "n_high": len(high), "n_low": len(low)}

    def nearest(a, b, skip_self=False):
        d = np.sqrt(np.maximum(np.sum(a * a, 1)[:, None] - 2 * a @ b.T + np.sum(b * b, 1)[None], 0))
        if skip_self:
            np.fill_diagonal(d, np.inf)
        return d.min(axis=1)

    rng = np.random.default_rng(0)
    low_s = low[rng.choice(len(low), size=min(len(low), 2000), replace=False)]
    high_s = high[rng.choice(len(high), size=min(len(high), 2000), replace=False)]
    gap = float(np.median(nearest(high_s, low_s)))
    spacing = float(np.median(nearest(low_s, low_s, skip_self=True)))
    sep = gap / max(spacing, MIN_NORM)
    return {"separation": sep, "suggested": "srd" if sep > 3.0 else "sr",
            "n_high": int(len(high)), "n_low": int(len(low))}
