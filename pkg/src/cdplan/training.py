"""Joint training of the denoiser, return predictor and projector under
L = lambda_d * L_d + lambda_v * L_v + lambda_c * L_c."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .contrastive import (ContrastiveConfig, ContrastiveIndex, contrastive_loss_traj,
                          contrastive_traj_backward, index_from_dataset, init_projector)
from .data import NormStats, OfflineDataset, window_arrays
from .diffusion import DiffusionSchedule, apply_condition, forward_sample, make_schedule, model_input
from .errors import ConfigError, NumericError
from .guide import init_predictor
from .nn import (AdamState, MlpParams, adam_init, adam_step, init_mlp, load_blocks, mlp_backward,
                 mlp_forward, mlp_from_blocks, mlp_to_blocks, save_blocks)

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_contrast", "positives_only")
METRICS_HEADER = ("step", "loss_d", "loss_v", "loss_c", "loss_total")
BLOCKS = ("denoiser", "predictor", "projector")


def _tuple_of_ints(v):
    if isinstance(v, str):
        return tuple(int(x) for x in v.split(",") if x.strip())
    return tuple(int(x) for x in v)


@dataclass(frozen=True)
class TrainConfig:
    lambda_d: float = 1.0
    lambda_v: float = 1.0
    lambda_c: float = 0.1
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    ablation: str = "full"
    horizon: int = 8
    n_diffusion: int = 20
    schedule: str = "cosine"
    denoiser_hidden: tuple = (256, 256)
    predictor_hidden: tuple = (128, 128)
    embed_dim: int = 16
    checkpoint_every: int = 500
    # contrastive
    xi: float = 0.7
    zeta: float = 0.3
    slope: float = 20.0
    kappa: int = 16
    temperature: float = 0.5
    strategy: str = "sr"
    cluster_count: int = 32
    transition_top_m: int = 3
    latent_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "denoiser_hidden", _tuple_of_ints(self.denoiser_hidden))
        object.__setattr__(self, "predictor_hidden", _tuple_of_ints(self.predictor_hidden))
        if min(self.lambda_d, self.lambda_v, self.lambda_c) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1 or self.horizon < 1:
            raise ConfigError("batch_size and horizon must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        self.contrastive  # validates the contrastive block

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.xi, self.zeta, self.slope, self.kappa, self.temperature,
                                 self.strategy, self.cluster_count, self.transition_top_m, self.latent_dim)

    @property
    def uses_contrast(self) -> bool:
        return self.ablation != "no_contrast"

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in kv.items():
            if k not in types:
                raise ConfigError(f"unknown training config key {k!r}")
            default = getattr(cls, k)
            if isinstance(default, bool):
                kw[k] = str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[k] = int(v)
            elif isinstance(default, float):
                kw[k] = float(v)
            else:
                kw[k] = v
        return cls(**kw)

    def fingerprint(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_kv().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class ModelBundle:
    denoiser: MlpParams
    predictor: MlpParams
    projector: MlpParams

    def block(self, name: str) -> MlpParams:
        return getattr(self, name)

    def replace(self, **kw) -> "ModelBundle":
        return dataclasses.replace(self, **kw)


def window_dim(cfg: TrainConfig, state_dim: int, action_dim: int) -> int:
    return (cfg.horizon + 1) * (state_dim + action_dim)


def init_models(cfg: TrainConfig, state_dim: int, action_dim: int, rng) -> ModelBundle:
    d = window_dim(cfg, state_dim, action_dim)
    den = init_mlp([d + cfg.embed_dim, *cfg.denoiser_hidden, d], rng)
    pred = init_predictor(d, cfg.embed_dim, cfg.predictor_hidden, rng)
    proj = init_projector(state_dim, cfg.latent_dim, rng)
    return ModelBundle(den, pred, proj)


@dataclass(frozen=True)
class LossReport:
    loss_d: float
    loss_v: float
    loss_c: float
    loss_total: float

    def row(self, step: int) -> list[str]:
        return [str(step), repr(self.loss_d), repr(self.loss_v), repr(self.loss_c), repr(self.loss_total)]


def loss_d(denoiser: MlpParams, window, i, noise, schedule: DiffusionSchedule, condition: bool = False):
    """Reconstruction MSE (squared norm per window, averaged over the batch).
    Returns (loss, param_grads)."""
    window = np.atleast_2d(np.asarray(window, dtype=np.float64))
    xi = forward_sample(window, i, np.reshape(noise, window.shape), schedule)
    recon, tape = mlp_forward(denoiser, model_input(xi, i, denoiser))
    diff = recon - window
    b = len(window)
    grads, _ = mlp_backward(tape, 2.0 * diff / b)
    return float(np.sum(diff * diff) / b), grads


def loss_and_grads(models: ModelBundle, x0, v, i, noise, cfg: TrainConfig, index: ContrastiveIndex | None,
                   rng, schedule: DiffusionSchedule, state_dim: int, action_dim: int,
                   weights=None, sets=None):
    """All three losses on one shared forward pass and their weighted gradients
    for every parameter block. `weights` overrides (lambda_d, lambda_v, lambda_c)."""
    wd, wv, wc = (cfg.lambda_d, cfg.lambda_v, cfg.lambda_c) if weights is None else weights
    b = len(x0)
    xi = forward_sample(x0, i, noise, schedule)
    xi = apply_condition(xi, x0[:, :state_dim])

    recon, tape_d = mlp_forward(models.denoiser, model_input(xi, i, models.denoiser))
    diff = recon - x0
    l_d = float(np.sum(diff * diff) / b)
    g_recon = wd * 2.0 * diff / b

    pred, tape_v = mlp_forward(models.predictor, model_input(xi, i, models.predictor))
    resid = pred[:, 0] - v
    l_v = float(np.sum(resid * resid) / b)
    g_pred = (wv * 2.0 * resid / b)[:, None]

    l_c = 0.0
    g_proj = models.projector.zeros_like()
    if cfg.uses_contrast:
        l_c, tape_c = contrastive_loss_traj(recon, index, cfg.contrastive, models.projector, rng,
                                            state_dim, action_dim, sets=sets)
        g_win, g_p = contrastive_traj_backward(tape_c)
        g_recon = g_recon + wc * g_win
        g_proj = g_p.map(lambda a: wc * a)

    g_den, _ = mlp_backward(tape_d, g_recon)
    g_pr, _ = mlp_backward(tape_v, g_pred)
    total = wd * l_d + wv * l_v + wc * l_c
    report = LossReport(l_d, l_v, l_c, total)
    return report, {"denoiser": g_den, "predictor": g_pr, "projector": g_proj}


@dataclass
class TrainState:
    models: ModelBundle
    adam: dict
    step: int
    rng: np.random.Generator


def train_step(state: TrainState, windows, returns, cfg: TrainConfig, index, schedule, state_dim,
               action_dim) -> LossReport:
    """Sample a batch, compute the losses and apply one Adam update to every
    block. Mutates `state` (models, adam, step, rng)."""
    rng = state.rng
    b = cfg.batch_size
    ids = rng.integers(len(windows), size=b)
    x0, v = windows[ids], returns[ids]
    i = rng.integers(1, schedule.n_steps + 1, size=b)
    noise = rng.standard_normal(x0.shape)
    report, grads = loss_and_grads(state.models, x0, v, i, noise, cfg, index, rng, schedule,
                                   state_dim, action_dim)
    if not np.isfinite(report.loss_total):
        raise NumericError(f"non-finite loss at step {state.step + 1} "
                           f"(L_d={report.loss_d}, L_v={report.loss_v}, L_c={report.loss_c}); "
                           f"batch window ids {ids.tolist()}")
    new = {}
    for name in BLOCKS:
        params, state.adam[name] = adam_step(state.adam[name], state.models.block(name), grads[name])
        new[name] = params
    state.models = ModelBundle(**new)
    state.step += 1
    return report


@dataclass
class SeparationReport:
    predictor_loss_on_denoiser: float   # ||dL_v / d theta||
    predictor_loss_on_projector: float
    generator_losses_on_predictor: float  # ||d(L_d + L_c) / d phi||
    lv_invariant_to_theta: bool
    ld_lc_invariant_to_phi: bool

    @property
    def ok(self) -> bool:
        return (self.predictor_loss_on_denoiser == 0.0 and self.predictor_loss_on_projector == 0.0
                and self.generator_losses_on_predictor == 0.0 and self.lv_invariant_to_theta
                and self.ld_lc_invariant_to_phi)

    def raise_if_failed(self):
        if not self.ok:
            raise AssertionError(f"gradient separation violated: {self}")


def _norm(p: MlpParams) -> float:
    return float(np.linalg.norm(p.flat()))


def gradient_separation_check(models: ModelBundle, x0, v, cfg: TrainConfig, index, schedule, rng,
                              state_dim, action_dim) -> SeparationReport:
    """Cross-gradients between the return predictor and the generator blocks,
    plus a perturbation test: moving theta must leave L_v bit-identical and
    moving phi must leave L_d and L_c bit-identical."""
    b = len(x0)
    i = rng.integers(1, schedule.n_steps + 1, size=b)
    noise = rng.standard_normal(x0.shape)
    snap = rng.bit_generator.state

    def run(m, weights):
        r = np.random.default_rng()
        r.bit_generator.state = snap
        return loss_and_grads(m, x0, v, i, noise, cfg, index, r, schedule, state_dim, action_dim, weights)

    _, g_v = run(models, (0.0, 1.0, 0.0))
    _, g_dc = run(models, (1.0, 0.0, 1.0))
    base, _ = run(models, (1.0, 1.0, 1.0))

    jitter = np.random.default_rng(12345)
    bump = lambda p: p.map(lambda a: a + jitter.normal(0, 0.1, a.shape))
    moved_theta, _ = run(models.replace(denoiser=bump(models.denoiser), projector=bump(models.projector)),
                         (1.0, 1.0, 1.0))
    moved_phi, _ = run(models.replace(predictor=bump(models.predictor)), (1.0, 1.0, 1.0))
    return SeparationReport(
        _norm(g_v["denoiser"]), _norm(g_v["projector"]), _norm(g_dc["predictor"]),
        moved_theta.loss_v == base.loss_v,
        moved_phi.loss_d == base.loss_d and moved_phi.loss_c == base.loss_c)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, state: TrainState, cfg: TrainConfig, norm_stats: NormStats, state_dim: int,
                    action_dim: int) -> None:
    blocks = {}
    for name in BLOCKS:
        blocks.update(mlp_to_blocks(name, state.models.block(name)))
        blocks.update(mlp_to_blocks(f"adam/{name}/m", state.adam[name].m))
        blocks.update(mlp_to_blocks(f"adam/{name}/v", state.adam[name].v))
    blocks.update(norm_stats.blocks())
    meta = {"format": "cdplan-checkpoint", "version": 1, "config": cfg.to_kv(), "step": state.step,
            "state_dim": state_dim, "action_dim": action_dim,
            "adam_steps": {n: state.adam[n].step for n in BLOCKS},
            "rng_state": state.rng.bit_generator.state, "fingerprint": cfg.fingerprint()}
    save_blocks(path, blocks, meta)


@dataclass
class Checkpoint:
    models: ModelBundle
    cfg: TrainConfig
    norm_stats: NormStats
    state_dim: int
    action_dim: int
    step: int
    adam: dict = field(default_factory=dict)
    rng_state: dict | None = None

    @property
    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.cfg.schedule, self.cfg.n_diffusion)


def load_checkpoint(path) -> Checkpoint:
    blocks, meta = load_blocks(path)
    cfg = TrainConfig.from_kv(meta["config"])
    outputs = {"denoiser": "linear", "predictor": "linear", "projector": "sigmoid"}
    models = ModelBundle(**{n: mlp_from_blocks(n, blocks, outputs[n]) for n in BLOCKS})
    adam = {}
    for n in BLOCKS:
        if f"adam/{n}/m/w0" in blocks:
            adam[n] = AdamState(mlp_from_blocks(f"adam/{n}/m", blocks, outputs[n]),
                                mlp_from_blocks(f"adam/{n}/v", blocks, outputs[n]),
                                meta["adam_steps"][n], cfg.learning_rate)
    return Checkpoint(models, cfg, NormStats.from_blocks(blocks), meta["state_dim"], meta["action_dim"],
                      meta["step"], adam, meta.get("rng_state"))


# -- driver ------------------------------------------------------------------

def training_windows(dataset: OfflineDataset, cfg: TrainConfig):
    windows, returns = window_arrays(dataset, cfg.horizon)
    if cfg.ablation == "positives_only":
        keep = returns >= cfg.xi
        if not keep.any():
            raise ConfigError(f"no training windows with scaled return >= {cfg.xi}")
        windows, returns = windows[keep], returns[keep]
    return windows, returns


def _streams(seed: int):
    init_ss, index_ss, train_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init_ss), np.random.default_rng(index_ss), np.random.default_rng(train_ss)


def train(dataset: OfflineDataset, cfg: TrainConfig, out_dir=None, resume=None, callback=None):
    """Fixed-budget training loop. Writes `metrics.csv` and `checkpoint.cdiff`
    under `out_dir` when given. Returns (TrainState, list of LossReport)."""
    sd, ad = dataset.state_dim, dataset.action_dim
    schedule = make_schedule(cfg.schedule, cfg.n_diffusion)
    init_rng, index_rng, train_rng = _streams(cfg.seed)
    models = init_models(cfg, sd, ad, init_rng)
    index = index_from_dataset(dataset, cfg.contrastive, index_rng) if cfg.uses_contrast else None
    windows, returns = training_windows(dataset, cfg)
    adam = {n: adam_init(models.block(n), cfg.learning_rate) for n in BLOCKS}
    state = TrainState(models, adam, 0, train_rng)

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = ckpt_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path, ckpt_path = out / "metrics.csv", out / "checkpoint.cdiff"

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.state_dim != sd or ck.action_dim != ad:
            raise ConfigError("checkpoint dimensions do not match the dataset")
        state.models, state.adam, state.step = ck.models, ck.adam, ck.step
        state.rng.bit_generator.state = ck.rng_state
    elif metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)

    reports = []
    while state.step < cfg.steps:
        rep = train_step(state, windows, returns, cfg, index, schedule, sd, ad)
        reports.append(rep)
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow(rep.row(state.step))
        if ckpt_path is not None and (state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps):
            save_checkpoint(ckpt_path, state, cfg, dataset.norm_stats, sd, ad)
        if callback is not None:
            callback(state, rep)
        if state.step % 500 == 0:
            log.info("step %d  L_d=%.4f L_v=%.4f L_c=%.4f", state.step, rep.loss_d, rep.loss_v, rep.loss_c)
    return state, reports


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
