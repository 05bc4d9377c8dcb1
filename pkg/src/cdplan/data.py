"""Offline datasets: episodes, per-state discounted returns, normalisation,
trajectory windows and the JSON-lines dataset file."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DimensionError, ParseError

FORMAT_NAME = "cdplan-dataset"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass(frozen=True)
class ReturnConfig:
    eta: float = 0.99    # per-state return discount
    gamma: float = 0.99  # trajectory return discount

    def __post_init__(self):
        for name in ("eta", "gamma"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {val}")


@dataclass
class Episode:
    states: np.ndarray       # (T, state_dim)
    actions: np.ndarray      # (T, action_dim)
    rewards: np.ndarray      # (T,)
    dones: np.ndarray        # (T,) bool
    final_state: np.ndarray  # state reached after the last action

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.final_state = np.asarray(self.final_state, dtype=np.float64)
        T = len(self.rewards)
        if T == 0:
            raise DimensionError("episode must contain at least one transition")
        if self.states.shape[0] != T or self.actions.shape[0] != T or self.dones.shape != (T,):
            raise DimensionError("episode arrays disagree on length")
        if self.final_state.shape != self.states.shape[1:]:
            raise DimensionError("final_state width differs from states")

    def __len__(self):
        return len(self.rewards)

    @property
    def next_states(self) -> np.ndarray:
        return np.concatenate([self.states[1:], self.final_state[None]], axis=0)

    def transitions(self) -> Iterator[Transition]:
        nxt = self.next_states
        for t in range(len(self)):
            yield Transition(self.states[t], self.actions[t], float(self.rewards[t]), nxt[t],
                             bool(self.dones[t]))


def compute_state_returns(rewards, eta: float) -> np.ndarray:
    """v_t = r_t + eta * v_{t+1}, v_T = r_T."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise DimensionError("episode has no rewards")
    v = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + eta * acc
        v[t] = acc
    return v


def trajectory_return(rewards, gamma: float) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise DimensionError("episode has no rewards")
    return float(np.sum(gamma ** np.arange(len(rewards)) * rewards))


@dataclass(frozen=True)
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    v_min: float
    v_max: float
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist(),
                "action_mean": self.action_mean.tolist(), "action_std": self.action_std.tolist(),
                "v_min": self.v_min, "v_max": self.v_max, "degenerate": list(self.degenerate)}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.asarray(d["state_mean"], float), np.asarray(d["state_std"], float),
                   np.asarray(d["action_mean"], float), np.asarray(d["action_std"], float),
                   float(d["v_min"]), float(d["v_max"]), tuple(d.get("degenerate", ())))

    def blocks(self) -> dict[str, np.ndarray]:
        return {"norm/state_mean": self.state_mean, "norm/state_std": self.state_std,
                "norm/action_mean": self.action_mean, "norm/action_std": self.action_std,
                "norm/v_range": np.array([self.v_min, self.v_max])}

    @classmethod
    def from_blocks(cls, blocks) -> "NormStats":
        vr = blocks["norm/v_range"]
        return cls(blocks["norm/state_mean"], blocks["norm/state_std"], blocks["norm/action_mean"],
                   blocks["norm/action_std"], float(vr[0]), float(vr[1]))

    def normalize_states(self, s):
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def denormalize_states(self, z):
        return np.asarray(z, dtype=np.float64) * self.state_std + self.state_mean

    def normalize_actions(self, a):
        return (np.asarray(a, dtype=np.float64) - self.action_mean) / self.action_std

    def denormalize_actions(self, z):
        return np.asarray(z, dtype=np.float64) * self.action_std + self.action_mean

    def scale_returns(self, v):
        span = self.v_max - self.v_min
        v = np.asarray(v, dtype=np.float64)
        if span <= 0:
            return np.zeros_like(v)
        return (v - self.v_min) / span

    def unscale_returns(self, u):
        return np.asarray(u, dtype=np.float64) * (self.v_max - self.v_min) + self.v_min


def compute_norm_stats(episodes, state_returns) -> NormStats:
    states = np.concatenate([ep.states for ep in episodes])
    actions = np.concatenate([ep.actions for ep in episodes])
    v = np.concatenate(state_returns)
    flags = []
    s_std = states.std(axis=0)
    a_std = actions.std(axis=0)
    for kind, std in (("state", s_std), ("action", a_std)):
        for d in np.flatnonzero(std < STD_FLOOR):
            flags.append(f"{kind}[{d}]")
    if v.max() <= v.min():
        flags.append("returns")
    return NormStats(states.mean(axis=0), np.maximum(s_std, STD_FLOOR), actions.mean(axis=0),
                     np.maximum(a_std, STD_FLOOR), float(v.min()), float(v.max()), tuple(flags))


@dataclass
class OfflineDataset:
    episodes: list[Episode]
    returns_cfg: ReturnConfig = field(default_factory=ReturnConfig)
    state_returns: list[np.ndarray] = field(default=None)
    norm_stats: NormStats = field(default=None)

    def __post_init__(self):
        if not self.episodes:
            raise DimensionError("dataset must contain at least one episode")
        sd, ad = self.episodes[0].states.shape[1], self.episodes[0].actions.shape[1]
        for k, ep in enumerate(self.episodes):
            if ep.states.shape[1] != sd or ep.actions.shape[1] != ad:
                raise DimensionError(f"episode {k} dimensions differ from episode 0")
        if self.state_returns is None:
            self.state_returns = [compute_state_returns(ep.rewards, self.returns_cfg.eta)
                                  for ep in self.episodes]
        if self.norm_stats is None:
            self.norm_stats = compute_norm_stats(self.episodes, self.state_returns)

    @property
    def state_dim(self) -> int:
        return self.episodes[0].states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.episodes[0].actions.shape[1]

    @property
    def n_transitions(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def renormalized(self) -> "OfflineDataset":
        return OfflineDataset(self.episodes, self.returns_cfg)

    def all_states(self) -> np.ndarray:
        return np.concatenate([ep.states for ep in self.episodes])

    def all_returns(self) -> np.ndarray:
        return np.concatenate(self.state_returns)

    def scaled_returns(self) -> np.ndarray:
        return self.norm_stats.scale_returns(self.all_returns())

    def episode_returns(self) -> np.ndarray:
        return np.array([trajectory_return(ep.rewards, self.returns_cfg.gamma) for ep in self.episodes])


@dataclass(frozen=True)
class TrajWindow:
    states: np.ndarray   # (H+1, state_dim)
    actions: np.ndarray  # (H+1, action_dim)
    start_return: float
    episode: int = -1
    t: int = -1
    padded: bool = False

    def flat(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions], axis=1).ravel()

    @classmethod
    def from_flat(cls, vec, state_dim: int, action_dim: int, start_return=float("nan"), **kw):
        arr = np.asarray(vec, dtype=np.float64).reshape(-1, state_dim + action_dim)
        return cls(arr[:, :state_dim].copy(), arr[:, state_dim:].copy(), start_return, **kw)


def _window_indices(T: int, H: int) -> np.ndarray:
    idx = np.arange(T)[:, None] + np.arange(H + 1)[None, :]
    return np.minimum(idx, T - 1)


def slice_windows(dataset: OfflineDataset, H: int) -> Iterator[TrajWindow]:
    """Every in-episode window of H+1 steps; tails repeat the terminal pair."""
    if H < 1:
        raise ConfigError("horizon must be >= 1")
    for e, (ep, v) in enumerate(zip(dataset.episodes, dataset.state_returns)):
        T = len(ep)
        idx = _window_indices(T, H)
        for t in range(T):
            yield TrajWindow(ep.states[idx[t]], ep.actions[idx[t]], float(v[t]), e, t,
                             padded=t + H > T - 1)


def window_arrays(dataset: OfflineDataset, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalised flattened windows (W, (H+1)*(sd+ad)) and their scaled start returns (W,)."""
    if H < 1:
        raise ConfigError("horizon must be >= 1")
    ns = dataset.norm_stats
    wins, vals = [], []
    for ep, v in zip(dataset.episodes, dataset.state_returns):
        idx = _window_indices(len(ep), H)
        s = ns.normalize_states(ep.states)[idx]
        a = ns.normalize_actions(ep.actions)[idx]
        wins.append(np.concatenate([s, a], axis=2).reshape(len(ep), -1))
        vals.append(ns.scale_returns(v))
    return np.concatenate(wins), np.concatenate(vals)


def normalize_window(window: TrajWindow, stats: NormStats) -> TrajWindow:
    return TrajWindow(stats.normalize_states(window.states), stats.normalize_actions(window.actions),
                      float(stats.scale_returns(window.start_return)), window.episode, window.t,
                      window.padded)


def denormalize_window(window: TrajWindow, stats: NormStats) -> TrajWindow:
    return TrajWindow(stats.denormalize_states(window.states), stats.denormalize_actions(window.actions),
                      float(stats.unscale_returns(window.start_return)), window.episode, window.t,
                      window.padded)


# -- file format -------------------------------------------------------------

def _fmt(x) -> str:
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("dataset values must be finite")
    return format(x, ".17g")


def _fmt_array(a) -> str:
    a = np.asarray(a)
    if a.ndim == 0:
        return _fmt(a)
    return "[" + ",".join(_fmt_array(row) for row in a) + "]"


def _dumps(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        if obj.dtype == bool:
            return json.dumps(obj.tolist())
        return _fmt_array(obj)
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dumps(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, (str, int, np.integer)):
        return json.dumps(obj.item() if hasattr(obj, "item") else obj)
    if isinstance(obj, (float, np.floating)):
        return _fmt(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dataset_header(dataset: OfflineDataset) -> dict:
    ns = dataset.norm_stats
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "state_dim": dataset.state_dim,
            "action_dim": dataset.action_dim, "episodes": len(dataset.episodes),
            "transitions": dataset.n_transitions,
            "returns": {"eta": float(dataset.returns_cfg.eta), "gamma": float(dataset.returns_cfg.gamma)},
            "norm_stats": {"state_mean": ns.state_mean, "state_std": ns.state_std,
                           "action_mean": ns.action_mean, "action_std": ns.action_std,
                           "v_min": ns.v_min, "v_max": ns.v_max, "degenerate": list(ns.degenerate)}}


def dumps_dataset(dataset: OfflineDataset) -> str:
    lines = [_dumps(dataset_header(dataset))]
    for ep, v in zip(dataset.episodes, dataset.state_returns):
        lines.append(_dumps({"states": ep.states, "actions": ep.actions, "rewards": ep.rewards,
                             "dones": ep.dones, "final_state": ep.final_state, "state_returns": v}))
    return "\n".join(lines) + "\n"


def save_dataset(dataset: OfflineDataset, path) -> None:
    if not dataset.episodes:
        raise DimensionError("refusing to save an empty dataset")
    path = Path(path)
    try:
        path.write_text(dumps_dataset(dataset))
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def load_dataset(path) -> OfflineDataset:
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty dataset file")
    parsed = []
    for n, line in enumerate(lines, start=1):
        try:
            parsed.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{n}:{exc.pos}: {exc.msg}") from exc
    header, rows = parsed[0], parsed[1:]
    if header.get("format") != FORMAT_NAME:
        raise ParseError(f"{path}:1: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise ParseError(f"{path}:1: unsupported version {header.get('version')}")
    if not rows:
        raise ParseError(f"{path}:2: dataset has no episodes")
    if len(rows) != header["episodes"]:
        raise ParseError(f"{path}: header declares {header['episodes']} episodes, found {len(rows)}")
    episodes, returns = [], []
    for n, row in enumerate(rows, start=2):
        try:
            ep = Episode(np.asarray(row["states"], float).reshape(-1, header["state_dim"]),
                         np.asarray(row["actions"], float).reshape(-1, header["action_dim"]),
                         row["rewards"], row["dones"], row["final_state"])
            v = np.asarray(row["state_returns"], dtype=np.float64)
        except (KeyError, ValueError, DimensionError) as exc:
            raise ParseError(f"{path}:{n}: malformed episode: {exc}") from exc
        if v.shape != (len(ep),):
            raise ParseError(f"{path}:{n}: state_returns length mismatch")
        episodes.append(ep)
        returns.append(v)
    rc = ReturnConfig(**header["returns"])
    ns = header["norm_stats"]
    stats = NormStats(np.asarray(ns["state_mean"], float), np.asarray(ns["state_std"], float),
                      np.asarray(ns["action_mean"], float), np.asarray(ns["action_std"], float),
                      float(ns["v_min"]), float(ns["v_max"]), tuple(ns.get("degenerate", ())))
    return OfflineDataset(episodes, rc, returns, stats)
