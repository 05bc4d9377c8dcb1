"""PointMaze-Desk: a deterministic 2-D point maze, behaviour policies and
offline dataset generation with controllable expert ratios.

Default layout (unit square):

    +---------------------+
    |     ^-------->      |
    |     |         |     |
    |     |    #    |     |      # : wall x = 0.5, y in [0, 0.65]
    |     |    #    v     |
    |  S  |    #    G     |      S : start box around (0.15, 0.15)
    +---------------------+      G : goal disc at (0.85, 0.15), r = 0.05

The expert follows the waypoints (0.3, 0.82) -> (0.7, 0.82) -> goal.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Episode, OfflineDataset, ReturnConfig
from .errors import ConfigError, DimensionError, NumericError

DEFAULT_WALLS = (((0.5, 0.0), (0.5, 0.65)),)
DEFAULT_WAYPOINTS = ((0.3, 0.82), (0.7, 0.82), (0.85, 0.15))


@dataclass(frozen=True)
class PointMazeDesk:
    walls: tuple = DEFAULT_WALLS
    goal: tuple = (0.85, 0.15)
    goal_radius: float = 0.05
    start_center: tuple = (0.15, 0.15)
    start_halfwidth: float = 0.05
    action_bound: float = 0.05
    horizon: int = 200
    dense_reward: bool = False
    expert_waypoints: tuple = DEFAULT_WAYPOINTS
    name: str = "pointmaze-desk"

    state_dim = 2
    action_dim = 2

    def __post_init__(self):
        for seg in self.walls:
            (x0, y0), (x1, y1) = seg
            if x0 != x1 and y0 != y1:
                raise ConfigError(f"wall {seg} is not axis-aligned")

    @property
    def action_low(self) -> np.ndarray:
        return np.full(2, -self.action_bound)

    @property
    def action_high(self) -> np.ndarray:
        return np.full(2, self.action_bound)

    def clip_action(self, a) -> np.ndarray:
        return np.clip(np.asarray(a, dtype=np.float64), -self.action_bound, self.action_bound)

    def in_goal(self, state) -> bool:
        d = np.asarray(state, dtype=np.float64) - np.asarray(self.goal)
        return bool(np.sqrt(d @ d) <= self.goal_radius)

    def reset(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return np.asarray(self.start_center) + rng.uniform(-self.start_halfwidth, self.start_halfwidth, 2)

    def blocked(self, pos, axis: int, delta: float) -> bool:
        """Does moving `pos` by `delta` along `axis` cross any wall?"""
        if delta == 0.0:
            return False
        lo, hi = sorted((pos[axis], pos[axis] + delta))
        other = 1 - axis
        for (x0, y0), (x1, y1) in self.walls:
            p0, p1 = (x0, y0), (x1, y1)
            if p0[axis] != p1[axis]:
                continue  # wall parallel to the motion
            w = p0[axis]
            olo, ohi = sorted((p0[other], p1[other]))
            if lo <= w <= hi and olo <= pos[other] <= ohi:
                return True
        return False

    def step(self, state, action):
        """Pure transition: returns (next_state, reward, done)."""
        s = np.asarray(state, dtype=np.float64)
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise NumericError(f"action must be a finite 2-vector, got {action!r}")
        if self.in_goal(s):
            return s.copy(), 1.0, True
        a = self.clip_action(a)
        nxt = s.copy()
        for axis in (0, 1):
            if not self.blocked(nxt, axis, a[axis]):
                nxt[axis] = min(max(nxt[axis] + a[axis], 0.0), 1.0)
        if self.in_goal(nxt):
            return nxt, 1.0, True
        reward = 0.0
        if self.dense_reward:
            reward = -float(np.linalg.norm(nxt - np.asarray(self.goal))) * 0.01
        return nxt, reward, False


def env_reset(env: PointMazeDesk, seed) -> np.ndarray:
    return env.reset(seed)


def env_step(env: PointMazeDesk, state, action):
    return env.step(state, action)


def load_layout(path) -> PointMazeDesk:
    """JSON keys: walls [[[x0,y0],[x1,y1]], ...], goal [x,y], goal_radius,
    start_center, start_halfwidth, expert_waypoints, horizon (all optional)."""
    d = json.loads(Path(path).read_text())
    kw = {}
    if "walls" in d:
        kw["walls"] = tuple(tuple(tuple(map(float, p)) for p in seg) for seg in d["walls"])
    for key in ("goal", "start_center"):
        if key in d:
            kw[key] = tuple(map(float, d[key]))
    for key in ("goal_radius", "start_halfwidth", "action_bound"):
        if key in d:
            kw[key] = float(d[key])
    if "horizon" in d:
        kw["horizon"] = int(d["horizon"])
    if "expert_waypoints" in d:
        kw["expert_waypoints"] = tuple(tuple(map(float, p)) for p in d["expert_waypoints"])
    elif "goal" in kw:
        kw["expert_waypoints"] = (kw["goal"],)
    return PointMazeDesk(**kw)


def make_env(name: str = "pointmaze-desk", layout=None, dense_reward: bool = False) -> PointMazeDesk:
    if name != "pointmaze-desk":
        raise ConfigError(f"unknown environment {name!r}")
    env = load_layout(layout) if layout else PointMazeDesk()
    return replace(env, dense_reward=dense_reward) if dense_reward else env


# -- behaviour policies ------------------------------------------------------

POLICY_KINDS = ("expert", "medium", "random")


@dataclass
class BehaviorPolicy:
    kind: str
    env: PointMazeDesk = field(default_factory=PointMazeDesk)
    noise_std: float | None = None
    random_frac: float | None = None
    reach_tol: float = 0.03

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"policy kind must be one of {POLICY_KINDS}")
        if self.noise_std is None:
            self.noise_std = {"expert": 0.005, "medium": 0.02, "random": 0.0}[self.kind]
        if self.random_frac is None:
            self.random_frac = 0.2 if self.kind == "medium" else 0.0

    def controller(self):
        """Per-episode controller; tracks the current waypoint."""
        return _WaypointController(self)

    def rollouts(self, env, seeds):
        return [rollout_policy(env, self, s) for s in seeds]


class _WaypointController:
    def __init__(self, policy: BehaviorPolicy):
        self.policy = policy
        self.k = 0

    def act(self, state, rng: np.random.Generator) -> np.ndarray:
        pol, env = self.policy, self.policy.env
        bound = env.action_bound
        if pol.kind == "random" or (pol.random_frac and rng.random() < pol.random_frac):
            return rng.uniform(-bound, bound, 2)
        wps = env.expert_waypoints
        while self.k < len(wps) - 1 and np.linalg.norm(np.asarray(wps[self.k]) - state) < pol.reach_tol:
            self.k += 1
        a = np.clip(np.asarray(wps[self.k]) - state, -bound, bound)
        a = a + rng.normal(0.0, pol.noise_std, 2)
        return np.clip(a, -bound, bound)


@dataclass
class EpisodeRecord:
    seed: int
    states: np.ndarray        # (T+1, sd) including the state after the last action
    actions: np.ndarray       # (T, ad)
    rewards: np.ndarray       # (T,)
    done: bool
    plans: np.ndarray | None = None  # (T, H+1, sd+ad) in environment units

    def __len__(self):
        return len(self.rewards)

    def trajectory_return(self, gamma: float) -> float:
        return float(np.sum(gamma ** np.arange(len(self.rewards)) * self.rewards))

    def to_json(self) -> dict:
        d = {"seed": int(self.seed), "states": self.states.tolist(), "actions": self.actions.tolist(),
             "rewards": self.rewards.tolist(), "done": bool(self.done)}
        if self.plans is not None:
            d["plans"] = self.plans.tolist()
        return d

    @classmethod
    def from_json(cls, d) -> "EpisodeRecord":
        plans = d.get("plans")
        sd = len(d["states"][0]) if d["states"] else 0
        return cls(int(d.get("seed", -1)), np.asarray(d["states"], float).reshape(-1, sd),
                   np.asarray(d["actions"], float).reshape(len(d["rewards"]), -1),
                   np.asarray(d["rewards"], float), bool(d.get("done", False)),
                   None if plans is None else np.asarray(plans, float))


def episode_rngs(seed):
    """(reset seed, agent rng) derived from one episode seed."""
    ss = np.random.SeedSequence(seed)
    reset_ss, agent_ss = ss.spawn(2)
    return reset_ss, np.random.default_rng(agent_ss)


def rollout_policy(env: PointMazeDesk, policy: BehaviorPolicy, seed, max_steps: int | None = None):
    reset_ss, rng = episode_rngs(seed)
    s = env.reset(reset_ss)
    ctl = policy.controller()
    states, actions, rewards = [s], [], []
    done = False
    for _ in range(max_steps or env.horizon):
        a = env.clip_action(ctl.act(s, rng))
        s, r, done = env.step(s, a)
        states.append(s), actions.append(a), rewards.append(r)
        if done:
            break
    return EpisodeRecord(int(seed), np.array(states), np.array(actions), np.array(rewards), done)


def record_to_episode(rec: EpisodeRecord) -> Episode:
    dones = np.zeros(len(rec), dtype=bool)
    dones[-1] = rec.done
    return Episode(rec.states[:-1], rec.actions, rec.rewards, dones, rec.states[-1])


def episode_seeds(seed: int, n: int) -> list[int]:
    return [int(x) for x in np.random.SeedSequence(seed).generate_state(n)]


def generate_dataset(policy: BehaviorPolicy | str, episodes: int, seed: int, env: PointMazeDesk | None = None,
                     returns_cfg: ReturnConfig | None = None) -> OfflineDataset:
    if episodes < 1:
        raise ConfigError("need at least one episode")
    env = env or (policy.env if isinstance(policy, BehaviorPolicy) else PointMazeDesk())
    if isinstance(policy, str):
        policy = BehaviorPolicy(policy, env)
    seeds = episode_seeds(seed, episodes)
    eps = [record_to_episode(rollout_policy(env, policy, s)) for s in seeds]
    return OfflineDataset(eps, returns_cfg or ReturnConfig())


def mix_datasets(a: OfflineDataset, b: OfflineDataset, ratio: float, seed: int) -> OfflineDataset:
    """Keep a's episode budget; round(ratio * budget) episodes come from b
    (sampled uniformly without replacement), the rest from a. Statistics are
    recomputed over the mixture."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mix ratio must be in [0, 1], got {ratio}")
    if a.state_dim != b.state_dim or a.action_dim != b.action_dim:
        raise DimensionError("datasets have incompatible dimensions")
    total = len(a.episodes)
    n_b = int(round(ratio * total))
    if n_b > len(b.episodes):
        raise ConfigError(f"need {n_b} expert episodes, only {len(b.episodes)} available")
    rng = np.random.default_rng(seed)
    keep_a = np.sort(rng.choice(total, size=total - n_b, replace=False))
    take_b = np.sort(rng.choice(len(b.episodes), size=n_b, replace=False))
    eps = [a.episodes[i] for i in keep_a] + [b.episodes[i] for i in take_b]
    return OfflineDataset(eps, a.returns_cfg)


def generate_mixture(base_kind: str, episodes: int, expert_ratio: float, seed: int,
                     env: PointMazeDesk | None = None, returns_cfg: ReturnConfig | None = None) -> OfflineDataset:
    """A `base_kind` dataset of `episodes` episodes with round(ratio * episodes)
    of them replaced by expert episodes. Base, expert and mixing draws use
    three seeds spawned from `seed`."""
    env = env or PointMazeDesk()
    base_seed, expert_seed, mix_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3))
    base = generate_dataset(base_kind, episodes, base_seed, env, returns_cfg)
    n_exp = int(round(expert_ratio * episodes))
    if n_exp == 0:
        return mix_datasets(base, base, 0.0, mix_seed)
    expert = generate_dataset("expert", n_exp, expert_seed, env, returns_cfg)
    return mix_datasets(base, expert, expert_ratio, mix_seed)
