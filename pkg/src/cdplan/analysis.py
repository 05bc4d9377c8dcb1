"""Scoring against measured random/expert anchors, ablation comparison,
reward histograms, plan-execution consistency and state-return exports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .envs import BehaviorPolicy, EpisodeRecord, PointMazeDesk

REFERENCE_SEEDS = range(100)


@dataclass(frozen=True)
class References:
    random_ref: float
    expert_ref: float
    env: str = "pointmaze-desk"
    gamma: float = 0.99

    def normalize(self, score):
        return 100.0 * (np.asarray(score, dtype=np.float64) - self.random_ref) / (self.expert_ref - self.random_ref)


def measure_references(env: PointMazeDesk, gamma: float = 0.99, seeds=REFERENCE_SEEDS) -> References:
    rets = {}
    for kind in ("random", "expert"):
        recs = BehaviorPolicy(kind, env).rollouts(env, seeds)
        rets[kind] = float(np.mean([r.trajectory_return(gamma) for r in recs]))
    return References(rets["random"], rets["expert"], env.name, gamma)


def load_or_measure_references(env: PointMazeDesk, path=None, gamma: float = 0.99) -> References:
    """Cached anchors: read `path` if it exists and matches, else measure and write it."""
    if path is not None:
        p = Path(path)
        if p.exists():
            d = json.loads(p.read_text())
            if d.get("env") == env.name and d.get("gamma") == gamma and d.get("layout") == _layout_key(env):
                return References(d["random_ref"], d["expert_ref"], d["env"], d["gamma"])
    refs = measure_references(env, gamma)
    if path is not None:
        Path(path).write_text(json.dumps({"env": refs.env, "gamma": gamma, "layout": _layout_key(env),
                                          "random_ref": refs.random_ref, "expert_ref": refs.expert_ref,
                                          "episodes": len(REFERENCE_SEEDS)}, indent=1))
    return refs


def _layout_key(env):
    return repr((env.walls, env.goal, env.goal_radius, env.start_center, env.start_halfwidth, env.horizon))


@dataclass
class ScoreReport:
    seeds: list
    returns: np.ndarray
    mean: float
    std: float
    normalized: float
    normalized_per_seed: np.ndarray
    fingerprint: str = ""
    records: list = field(default_factory=list, repr=False)

    def rows(self):
        for s, r, n in zip(self.seeds, self.returns, self.normalized_per_seed):
            yield {"seed": s, "return": repr(float(r)), "normalized": repr(float(n))}


def score(records, refs: References, fingerprint: str = "") -> ScoreReport:
    rets = np.array([r.trajectory_return(refs.gamma) for r in records])
    return ScoreReport([r.seed for r in records], rets, float(rets.mean()), float(rets.std()),
                       float(refs.normalize(rets.mean())), refs.normalize(rets), fingerprint, list(records))


def evaluate(agent, env: PointMazeDesk, seeds, refs: References, fingerprint: str = "") -> ScoreReport:
    """`agent` is anything with rollouts(env, seeds) -> list[EpisodeRecord]."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("evaluate needs at least one seed")
    return score(agent.rollouts(env, seeds), refs, fingerprint)


def welch_one_sided(a, b) -> tuple[float, float]:
    """Welch t statistic and one-sided p-value for mean(a) > mean(b)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if np.var(a) == 0 and np.var(b) == 0:
        diff = a.mean() - b.mean()
        return (float(np.sign(diff) * np.inf) if diff else 0.0), (0.0 if diff > 0 else 1.0 if diff < 0 else 0.5)
    res = stats.ttest_ind(a, b, equal_var=False, alternative="greater")
    return float(res.statistic), float(res.pvalue)


ABLATION_VARIANTS = {
    "full-SR": {"ablation": "full", "strategy": "sr"},
    "full-SRD": {"ablation": "full", "strategy": "srd"},
    "no_contrast": {"ablation": "no_contrast"},
    "positives_only": {"ablation": "positives_only"},
}


@dataclass
class AblationResult:
    reports: dict
    t_stat: float
    p_value: float

    def table(self) -> list[dict]:
        return [{"variant": k, "mean_return": r.mean, "std_return": r.std, "normalized": r.normalized,
                 "episodes": len(r.returns)} for k, r in self.reports.items()]


def compare_ablations(dataset, base_cfg, env, seeds, refs: References, variants=None, planner_kw=None,
                      out_dir=None) -> AblationResult:
    """Train each variant from the same config (only the ablation switch
    differs), evaluate on identical seeds, Welch-test full-SR > no_contrast."""
    from dataclasses import replace
    from .planner import Planner
    from .training import Checkpoint, train

    variants = variants or list(ABLATION_VARIANTS)
    reports = {}
    for name in variants:
        cfg = replace(base_cfg, **ABLATION_VARIANTS[name])
        sub = None if out_dir is None else Path(out_dir) / name
        state, _ = train(dataset, cfg, sub)
        ck = Checkpoint(state.models, cfg, dataset.norm_stats, dataset.state_dim, dataset.action_dim, state.step)
        planner = Planner.from_checkpoint(ck, **(planner_kw or {}))
        reports[name] = evaluate(planner, env, seeds, refs, cfg.fingerprint())
    t = p = float("nan")
    if "full-SR" in reports and "no_contrast" in reports:
        t, p = welch_one_sided(reports["full-SR"].normalized_per_seed, reports["no_contrast"].normalized_per_seed)
    return AblationResult(reports, t, p)


def reward_histogram(records, bins: int = 10, value_range=(0.0, 1.0)):
    """Counts of per-step rewards over all episodes. Returns (counts, edges)."""
    rewards = np.concatenate([np.asarray(r.rewards, float) for r in records]) if records else np.zeros(0)
    counts, edges = np.histogram(np.clip(rewards, *value_range), bins=bins, range=value_range)
    return counts, edges


@dataclass
class ConsistencyMatrix:
    values: np.ndarray      # (episodes, lookahead); NaN where no step pair exists
    truncated: np.ndarray   # per-row flag: episode shorter than the lookahead

    def column_mean(self, j: int) -> float:
        """Mean over episodes at lookahead j (1-based)."""
        col = self.values[:, j - 1]
        return float(np.nanmean(col)) if np.any(np.isfinite(col)) else float("nan")


def consistency_matrix(records, lookahead: int, norm_stats=None) -> ConsistencyMatrix:
    """Entry (e, j): cosine similarity between the state planned j steps ahead
    at time t and the state actually reached at t + j, averaged over t.
    With `norm_stats`, both are z-scored first."""
    from .contrastive import cosine_sim

    rows, flags = [], []
    for rec in records:
        if rec.plans is None:
            raise ValueError("episode record carries no planned windows")
        H = rec.plans.shape[1] - 1
        if lookahead > H:
            raise ValueError(f"lookahead {lookahead} exceeds plan horizon {H}")
        sd = rec.states.shape[1]
        planned = rec.plans[:, :, :sd]
        real = rec.states
        if norm_stats is not None:
            planned, real = norm_stats.normalize_states(planned), norm_stats.normalize_states(real)
        T = len(rec)
        row = np.full(lookahead, np.nan)
        for j in range(1, lookahead + 1):
            if T - j + 1 <= 0:
                continue
            ts = np.arange(0, T - j + 1)
            row[j - 1] = float(np.mean(cosine_sim(planned[ts, j], real[ts + j])))
        rows.append(row)
        flags.append(T < lookahead)
    vals = np.array(rows).reshape(len(rows), lookahead)
    return ConsistencyMatrix(vals, np.array(flags, dtype=bool))


def state_return_scatter(source, gamma_or_eta: float | None = None) -> np.ndarray:
    """(n, 3) rows of (x, y, value): a dataset gives per-state returns, episode
    records give per-step rewards."""
    from .data import OfflineDataset

    if isinstance(source, OfflineDataset):
        return np.column_stack([source.all_states(), source.all_returns()])
    recs = list(source)
    if not recs:
        return np.zeros((0, 3))
    return np.concatenate([np.column_stack([r.states[:-1], r.rewards]) for r in recs])


# -- output files --------------------------------------------------------------

def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_histogram_csv(path, counts, edges) -> None:
    write_csv(path, ("bin_low", "bin_high", "count"),
              ((float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)))


def write_consistency_csv(path, cm: ConsistencyMatrix) -> None:
    L = cm.values.shape[1]
    header = ("episode", *(f"lookahead_{j}" for j in range(1, L + 1)), "truncated")
    write_csv(path, header, ((e, *(float(v) for v in row), int(f))
                             for e, (row, f) in enumerate(zip(cm.values, cm.truncated))))


def write_scatter_csv(path, pts) -> None:
    write_csv(path, ("x", "y", "value"), (tuple(float(v) for v in p) for p in pts))


def write_score_csv(path, report: ScoreReport) -> None:
    write_csv(path, ("seed", "return", "normalized"),
              ((s, float(r), float(n)) for s, r, n in zip(report.seeds, report.returns, report.normalized_per_seed)))


def histogram_svg(counts, edges, title: str = "") -> str:
    w, h, pad = 400, 240, 30
    counts = np.asarray(counts, float)
    top = counts.max() if counts.size and counts.max() > 0 else 1.0
    bw = (w - 2 * pad) / max(len(counts), 1)
    bars = []
    for k, c in enumerate(counts):
        bh = (h - 2 * pad) * c / top
        bars.append(f'<rect x="{pad + k * bw:.1f}" y="{h - pad - bh:.1f}" width="{bw - 1:.1f}" '
                    f'height="{bh:.1f}" fill="#4a7ab5"/>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
            f'<text x="{pad}" y="18" font-size="12">{title}</text>'
            f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>'
            + "".join(bars)
            + f'<text x="{pad}" y="{h - 10}" font-size="10">{edges[0]:g}</text>'
            f'<text x="{w - pad - 20}" y="{h - 10}" font-size="10">{edges[-1]:g}</text></svg>')


def line_svg(xs, ys, title: str = "") -> str:
    w, h, pad = 400, 240, 30
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.size < 2:
        pts = ""
    else:
        x0, x1 = xs.min(), xs.max()
        y0, y1 = np.nanmin(ys), np.nanmax(ys)
        sx = (w - 2 * pad) / ((x1 - x0) or 1.0)
        sy = (h - 2 * pad) / ((y1 - y0) or 1.0)
        pts = " ".join(f"{pad + (x - x0) * sx:.1f},{h - pad - (y - y0) * sy:.1f}" for x, y in zip(xs, ys)
                       if np.isfinite(y))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
            f'<text x="{pad}" y="18" font-size="12">{title}</text>'
            f'<polyline fill="none" stroke="#b5534a" points="{pts}"/></svg>')


def write_records(path, records, header: dict | None = None) -> None:
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"kind": "header", **header}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_records(path):
    """Returns (records, header or None)."""
    recs, header = [], None
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("kind") == "header":
                header = d
            else:
                recs.append(EpisodeRecord.from_json(d))
    return recs, header
