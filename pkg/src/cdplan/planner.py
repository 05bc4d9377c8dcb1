"""Closed-loop planning: condition on the observation, run the guided reverse
chain, execute the first planned action, replan at every step."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import NormStats, TrajWindow
from .diffusion import DiffusionSchedule, apply_condition, denoise_step, make_schedule
from .envs import EpisodeRecord, PointMazeDesk, episode_rngs
from .errors import ConfigError, DimensionError
from .nn import MlpParams


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 8
    rho: float = 0.1
    max_episode_steps: int = 200
    guided: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.rho < 0:
            raise ConfigError("rho must be >= 0")
        if self.max_episode_steps < 1:
            raise ConfigError("max_episode_steps must be >= 1")


@dataclass
class Planner:
    """Everything needed to plan: networks, schedule, normalisation and dims."""

    denoiser: MlpParams
    predictor: MlpParams | None
    schedule: DiffusionSchedule
    norm_stats: NormStats
    state_dim: int
    action_dim: int
    cfg: PlannerConfig = PlannerConfig()

    @classmethod
    def from_checkpoint(cls, ck, **overrides) -> "Planner":
        cfg = PlannerConfig(horizon=ck.cfg.horizon, **overrides)
        return cls(ck.models.denoiser, ck.models.predictor, make_schedule(ck.cfg.schedule, ck.cfg.n_diffusion),
                   ck.norm_stats, ck.state_dim, ck.action_dim, cfg)

    def with_config(self, **kw) -> "Planner":
        return replace(self, cfg=replace(self.cfg, **kw))

    @property
    def window_dim(self) -> int:
        return (self.cfg.horizon + 1) * (self.state_dim + self.action_dim)

    def rollouts(self, env, seeds):
        return rollout_many(env, self, seeds)


def plan_normalized(planner: Planner, obs_norm, rngs) -> np.ndarray:
    """Guided reverse chains for a batch of normalised observations (B, sd);
    row b draws all of its noise from rngs[b]. Returns (B, window_dim)."""
    obs_norm = np.atleast_2d(obs_norm)
    b = len(obs_norm)
    if len(rngs) != b:
        raise DimensionError("need one rng per observation")
    d = planner.window_dim
    guide = planner.predictor if planner.cfg.guided else None
    sched = planner.schedule
    x = np.stack([r.standard_normal(d) for r in rngs])
    x = apply_condition(x, obs_norm)
    for i in range(sched.n_steps, 0, -1):
        noise = None if i == 1 else np.stack([r.standard_normal(d) for r in rngs])
        x = denoise_step(x, i, planner.denoiser, sched, guide=guide, rho=planner.cfg.rho, noise=noise,
                         condition=obs_norm)
    return x


def _to_env_units(planner: Planner, x) -> tuple[np.ndarray, np.ndarray]:
    steps = x.reshape(len(x), planner.cfg.horizon + 1, planner.state_dim + planner.action_dim)
    ns = planner.norm_stats
    return (ns.denormalize_states(steps[..., :planner.state_dim]),
            ns.denormalize_actions(steps[..., planner.state_dim:]))


def plan(planner: Planner, s_t, rng: np.random.Generator) -> TrajWindow:
    """Planned window in environment units; its first state is s_t exactly."""
    s_t = np.asarray(s_t, dtype=np.float64)
    if s_t.shape != (planner.state_dim,):
        raise DimensionError(f"observation must have shape ({planner.state_dim},), got {s_t.shape}")
    x = plan_normalized(planner, planner.norm_stats.normalize_states(s_t)[None], [rng])
    states, actions = _to_env_units(planner, x)
    states = states[0]
    states[0] = s_t  # denormalising the conditioned slot can round; the plan starts at reality
    return TrajWindow(states, actions[0], float("nan"))


def act(planner: Planner, s_t, rng: np.random.Generator, env: PointMazeDesk | None = None) -> np.ndarray:
    a = plan(planner, s_t, rng).actions[0]
    return env.clip_action(a) if env is not None else a


def rollout_many(env: PointMazeDesk, planner: Planner, seeds) -> list[EpisodeRecord]:
    """One closed-loop episode per seed, advanced in lock-step so each denoise
    step is a single batched network call. Each episode owns its rng."""
    seeds = list(seeds)
    n = len(seeds)
    if n == 0:
        return []
    resets, rngs = zip(*(episode_rngs(s) for s in seeds))
    rngs = list(rngs)
    obs = [env.reset(r) for r in resets]
    states = [[o] for o in obs]
    actions = [[] for _ in range(n)]
    rewards = [[] for _ in range(n)]
    plans = [[] for _ in range(n)]
    done = [False] * n
    H1 = planner.cfg.horizon + 1
    for _ in range(planner.cfg.max_episode_steps):
        live = [k for k in range(n) if not done[k]]
        if not live:
            break
        cur = np.stack([obs[k] for k in live])
        x = plan_normalized(planner, planner.norm_stats.normalize_states(cur), [rngs[k] for k in live])
        p_states, p_actions = _to_env_units(planner, x)
        for row, k in enumerate(live):
            p_states[row, 0] = obs[k]
            a = env.clip_action(p_actions[row, 0])
            nxt, r, d = env.step(obs[k], a)
            plans[k].append(np.concatenate([p_states[row], p_actions[row]], axis=1))
            actions[k].append(a), rewards[k].append(r), states[k].append(nxt)
            obs[k], done[k] = nxt, d
    out = []
    for k in range(n):
        seed = seeds[k]
        out.append(EpisodeRecord(int(seed) if np.ndim(seed) == 0 else -1, np.array(states[k]),
                                 np.array(actions[k]).reshape(-1, planner.action_dim), np.array(rewards[k]),
                                 done[k], np.array(plans[k]).reshape(-1, H1, planner.state_dim + planner.action_dim)))
    return out


def rollout(env: PointMazeDesk, planner: Planner, seed) -> EpisodeRecord:
    return rollout_many(env, planner, [seed])[0]
