"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that the terminal summary prints at the end of the run.

Criterion 11 trains each variant from five seeds and dominates the runtime
(about ten minutes on one core). Its configuration was picked on a separate
development protocol (training seeds 0-2, mixture seeds 1-3, evaluation seeds
1000-1019); the seeds below were not used during that selection.
"""
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE, central_diff, max_rel_err
from cdplan.analysis import (consistency_matrix, evaluate, measure_references,
                             reward_histogram, welch_one_sided)
from cdplan.contrastive import (ContrastiveConfig, cluster_transitions, contrastive_backward,
                                contrastive_loss_from_sims, contrastive_loss_state, inclusion_mask,
                                index_from_dataset, init_projector, minibatch_kmeans,
                                p_negative, p_positive, sample_sets)
from cdplan.diffusion import DiffusionSchedule, denoise_step, forward_sample, make_schedule, posterior_mean
from cdplan.envs import BehaviorPolicy, generate_dataset, generate_mixture, mix_datasets
from cdplan.nn import MlpParams, init_mlp
from cdplan.planner import Planner, rollout_many
from cdplan.training import (Checkpoint, TrainConfig, gradient_separation_check, init_models, loss_and_grads,
                             train, training_windows)

# directional experiment (criterion 11); see the module docstring
DIRECTIONAL_CFG = TrainConfig(steps=3000, kappa=8, lambda_c=10.0, temperature=0.1)
# guidance scale per variant, each the best of {0, 1, 3, 10} on the development protocol
DIRECTIONAL_RHO = {"full-SR": 3.0, "no_contrast": 0.0}
# single training runs swing between near-0 and near-100 scores, so each
# evaluation seed's score is averaged over several training seeds
TRAIN_SEEDS = range(21, 26)
MIXTURE_SEED = 8
EVAL_SEEDS = range(3000, 3020)
BUDGET_S = 45 * 60


@contextmanager
def criterion(n, title):
    """Record PASS/FAIL for criterion n; tests put a summary in note['detail']."""
    note = {"detail": ""}
    try:
        yield note
    except BaseException as e:
        msg = f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}"
        ACCEPTANCE[n] = (title, False, f"{note['detail']} {msg}".strip())
        raise
    ACCEPTANCE[n] = (title, True, note["detail"])


@pytest.fixture(scope="module")
def small_mix(env):
    return mix_datasets(generate_dataset("random", 20, 1, env), generate_dataset("expert", 10, 2, env), 0.3, 3)


SMALL = dict(denoiser_hidden=(6,), predictor_hidden=(5,), batch_size=8, horizon=3, n_diffusion=5,
             kappa=3, latent_dim=3, embed_dim=4, xi=0.6, zeta=0.4, slope=10.0)


# -- 1, 2: gradients -----------------------------------------------------------

def _rel_err(analytic, numeric):
    """Per-component relative error. Components more than 1000x below the
    block's largest gradient are measured against that 1e-3 floor: at h=1e-6
    central differences of an O(10) loss resolve only ~1e-9 absolute."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    floor = max(1e-3 * float(np.max(np.abs(a))), 1e-12)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def test_c01_gradient_correctness(small_mix):
    with criterion(1, "gradient correctness") as note:
        t0 = time.perf_counter()
        rng = np.random.default_rng(101)
        worst, strict = {}, 0.0
        for strategy in ("sr", "srd"):
            cfg = TrainConfig(**SMALL, strategy=strategy, cluster_count=4)
            sd, ad = small_mix.state_dim, small_mix.action_dim
            sched = make_schedule("cosine", cfg.n_diffusion)
            models = init_models(cfg, sd, ad, rng)
            index = index_from_dataset(small_mix, cfg.contrastive, rng)
            w, v = training_windows(small_mix, cfg)
            ids = rng.integers(len(w), size=3)
            x0, v = w[ids], v[ids]
            i = rng.integers(1, cfg.n_diffusion + 1, size=3)
            noise = rng.standard_normal(x0.shape)
            q = x0.reshape(3, cfg.horizon + 1, -1)[:, 1:, :sd].reshape(-1, sd)
            sets = sample_sets(q, index, cfg.contrastive, rng)
            # (loss term, weights, blocks it reaches)
            terms = [("L_d", (1.0, 0.0, 0.0), ("denoiser",)),
                     ("L_v", (0.0, 1.0, 0.0), ("predictor",)),
                     ("L_c", (0.0, 0.0, 1.0), ("denoiser", "projector"))]
            for term, wts, blocks in terms:
                _, grads = loss_and_grads(models, x0, v, i, noise, cfg, index, rng, sched, sd, ad, wts, sets)
                for name in blocks:
                    p = models.block(name)

                    def f(flat):
                        m = models.replace(**{name: p.with_flat(flat)})
                        return loss_and_grads(m, x0, v, i, noise, cfg, index, rng, sched, sd, ad, wts,
                                              sets)[0].loss_total

                    a, num = grads[name].flat(), central_diff(f, p.flat())
                    key = f"{term}/{name}"
                    worst[key] = max(worst.get(key, 0.0), _rel_err(a, num))
                    strict = max(strict, max_rel_err(a, num))
        # per-state contrastive loss with respect to its input states
        cfg = ContrastiveConfig(kappa=3, temperature=0.7)
        proj = init_projector(3, 5, rng)
        s_hat = rng.standard_normal((4, 3))
        s_pos, s_neg = rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3))
        _, _, tape = contrastive_loss_state(s_hat, s_pos, s_neg, proj, cfg)
        g, _ = contrastive_backward(tape)
        num = central_diff(lambda x: contrastive_loss_state(x, s_pos, s_neg, proj, cfg)[0], s_hat)
        worst["L_c/state"] = _rel_err(g, num)
        strict = max(strict, max_rel_err(g, num))
        elapsed = time.perf_counter() - t0
        top = max(worst.values())
        note["detail"] = (f"max rel err {top:.2e} over {len(worst)} term/block pairs "
                          f"(unfloored {strict:.1e}), {elapsed:.1f} s")
        assert top < 1e-5, worst
        assert elapsed < 30


def test_c02_gradient_separation(small_mix):
    with criterion(2, "gradient separation") as note:
        rng = np.random.default_rng(102)
        checked = 0
        for strategy in ("sr", "srd"):
            cfg = TrainConfig(**{**SMALL, "denoiser_hidden": (32, 32), "predictor_hidden": (16,)},
                              strategy=strategy, cluster_count=4)
            sd, ad = small_mix.state_dim, small_mix.action_dim
            models = init_models(cfg, sd, ad, rng)
            index = index_from_dataset(small_mix, cfg.contrastive, rng)
            w, v = training_windows(small_mix, cfg)
            for _ in range(5):
                ids = rng.integers(len(w), size=8)
                rep = gradient_separation_check(models, w[ids], v[ids], cfg, index,
                                                make_schedule("cosine", cfg.n_diffusion), rng, sd, ad)
                assert rep.ok, rep
                checked += 1
        note["detail"] = f"all cross-gradients exactly 0 on {checked} steps"


# -- 3, 4: diffusion ---------------------------------------------------------------

def test_c03_diffusion_marginals():
    with criterion(3, "diffusion marginals") as note:
        t0 = time.perf_counter()
        sched = make_schedule("cosine", 20)
        # one draw of 100k unit normals is reused for every (i, x0)
        eps = np.random.default_rng(103).standard_normal(100_000)
        worst_m = worst_v = 0.0
        for x0 in (1.0, -2.5):
            for i in range(1, sched.n_steps + 1):
                xs = forward_sample(np.full_like(eps, x0), i, eps, sched)
                m_true = np.sqrt(sched.alpha_bar[i]) * x0
                v_true = 1.0 - sched.alpha_bar[i]
                # relative to the marginal's scale so the check stays meaningful as the mean goes to 0
                scale = max(abs(m_true), np.sqrt(v_true))
                worst_m = max(worst_m, abs(xs.mean() - m_true) / scale)
                worst_v = max(worst_v, abs(xs.var() - v_true) / v_true)
        elapsed = time.perf_counter() - t0
        note["detail"] = f"worst mean err {100 * worst_m:.3f}%, worst var err {100 * worst_v:.3f}%, {elapsed:.1f} s"
        assert worst_m < 0.01 and worst_v < 0.01
        assert elapsed < 60


def _bayes_posterior_mean(betas, i, x_i, x0):
    """Mean of p(x_{i-1} | x_i, x0) by multiplying the two 1-D Gaussians
    x_{i-1} ~ N(sqrt(abar_{i-1}) x0, 1 - abar_{i-1}) and x_i | x_{i-1} ~ N(sqrt(a_i) x_{i-1}, b_i)."""
    abar_prev = float(np.prod(1.0 - betas[:i - 1]))
    prior_m, prior_v = np.sqrt(abar_prev) * x0, 1.0 - abar_prev
    b = betas[i - 1]
    if prior_v == 0.0:
        return prior_m
    prec = 1.0 / prior_v + (1.0 - b) / b
    return (prior_m / prior_v + np.sqrt(1.0 - b) * x_i / b) / prec


def test_c04_posterior_mean_oracle():
    with criterion(4, "posterior-mean oracle") as note:
        rng = np.random.default_rng(104)
        worst = 0.0
        for case in range(100):
            n = int(rng.integers(1, 60))
            if case % 3 == 0:
                sched = make_schedule("cosine", n)
            elif case % 3 == 1:
                lo = 10 ** rng.uniform(-5, -3)
                sched = make_schedule("linear", n, lo, rng.uniform(lo, 0.3))
            else:
                sched = DiffusionSchedule.from_betas(rng.uniform(1e-4, 0.5, n))
            i = int(rng.integers(1, n + 1))
            x_i, x0 = rng.normal(0, 3), rng.normal(0, 3)
            got = float(posterior_mean(x_i, x0, sched, i))
            worst = max(worst, abs(got - _bayes_posterior_mean(sched.beta[1:], i, x_i, x0)))
        note["detail"] = f"max abs diff {worst:.1e} over 100 cases"
        assert worst < 1e-12


# -- 5, 6, 7: contrastive machinery ------------------------------------------------

def test_c05_sampler_fidelity():
    with criterion(5, "sampler fidelity") as note:
        rng = np.random.default_rng(105)
        cfg = ContrastiveConfig(xi=0.7, zeta=0.3, slope=20.0)
        v = np.linspace(0.0, 1.0, 41)
        draws = 10_000
        worst = 0.0
        for side, pf in (("positive", p_positive), ("negative", p_negative)):
            p = pf(v, cfg)
            freq = np.mean([inclusion_mask(v, cfg, rng, side) for _ in range(draws)], axis=0)
            sigma = np.sqrt(p * (1 - p) / draws)
            z = np.abs(freq - p) / np.maximum(sigma, 1e-300)
            # p within 1e-300 of 0 or 1 can only be matched exactly
            assert np.all((z <= 3) | ((sigma < 1e-150) & (freq == np.round(p)))), side
            worst = max(worst, float(np.max(np.where(sigma > 1e-150, z, 0))))
        assert p_positive(cfg.xi, cfg) == 0.5 and p_negative(cfg.zeta, cfg) == 0.5
        meet = ContrastiveConfig(xi=0.45, zeta=0.45, slope=13.0)
        u = rng.random(1000)
        comp = float(np.max(np.abs(p_positive(u, meet) + p_negative(u, meet) - 1.0)))
        assert comp <= 1e-12
        note["detail"] = f"max |z| {worst:.2f} over 82 states x 10k draws; p(threshold)=0.5 exact; |p+ + p- - 1| <= {comp:.0e}"


def test_c06_contrastive_loss_identities():
    with criterion(6, "contrastive-loss identities") as note:
        rng = np.random.default_rng(106)
        worst = 0.0
        for T in (0.1, 0.5, 2.0):
            s = rng.uniform(-1, 1, (50, 8))
            worst = max(worst, float(np.max(np.abs(contrastive_loss_from_sims(s, s, T)))))
        assert worst < 1e-12
        # directional perturbation: raise every positive similarity together
        sp, sn = rng.uniform(-1, 1, (50, 8)), rng.uniform(-1, 1, (50, 8))
        base = contrastive_loss_from_sims(sp, sn, 0.5)
        for h in (1e-8, 1e-4, 1e-2, 0.5):
            assert np.all(contrastive_loss_from_sims(sp + h, sn, 0.5) < base), h
        # and through the projector: moving each positive state towards its query
        cfg = ContrastiveConfig(kappa=4, temperature=0.5)
        proj = init_mlp([3, 6], rng, output="linear")
        s_hat = rng.standard_normal((20, 3))
        s_pos, s_neg = rng.standard_normal((20, 4, 3)), rng.standard_normal((20, 4, 3))
        _, loss0, tape0 = contrastive_loss_state(s_hat, s_pos, s_neg, proj, cfg)
        closer = s_pos + 0.3 * (s_hat[:, None, :] - s_pos)
        _, loss1, tape1 = contrastive_loss_state(s_hat, closer, s_neg, proj, cfg)
        assert np.all(tape1.sp > tape0.sp)
        assert np.all(loss1 < loss0)
        note["detail"] = f"|L| <= {worst:.0e} when S+=S-; strictly decreasing on 4 step sizes"


def test_c07_cluster_machinery(small_mix):
    with criterion(7, "cluster machinery") as note:
        rng = np.random.default_rng(107)
        states = small_mix.norm_stats.normalize_states(small_mix.all_states())
        res = minibatch_kmeans(states, 8, rng, batch_size=64, epochs=12)
        h = np.array(res.history)
        assert np.all(np.diff(h) <= 0)
        lens = np.cumsum([0] + [len(ep) for ep in small_mix.episodes])
        mat, _ = cluster_transitions([res.labels[a:b] for a, b in zip(lens[:-1], lens[1:])], 8)
        row_err = float(np.max(np.abs(mat.sum(axis=1) - 1.0)))
        assert row_err <= 1e-9
        one = minibatch_kmeans(states, 1, rng, batch_size=64, epochs=3)
        c_err = float(np.max(np.abs(one.centroids[0] - states.mean(axis=0))))
        assert c_err <= 1e-12
        note["detail"] = (f"{len(h)} epochs non-increasing ({h[0]:.3f} -> {h[-1]:.3f}); "
                          f"row sums within {row_err:.0e}; k=1 centroid within {c_err:.0e}")


# -- 8, 9: planner invariants and determinism ---------------------------------------

@pytest.fixture(scope="module")
def untrained_planner(env):
    ds = generate_dataset("expert", 10, 0, env)
    cfg = TrainConfig(horizon=4, n_diffusion=6, denoiser_hidden=(32,), predictor_hidden=(16,))
    models = init_models(cfg, 2, 2, np.random.default_rng(108))
    return Planner.from_checkpoint(Checkpoint(models, cfg, ds.norm_stats, 2, 2, 0), rho=0.5, max_episode_steps=30)


def test_c08_conditioning_and_guidance(untrained_planner, env):
    with criterion(8, "conditioning and guidance invariants") as note:
        pl = untrained_planner
        recs = pl.rollouts(env, range(5))
        n_plans = sum(len(r.plans) for r in recs)
        assert all(np.array_equal(r.plans[:, 0, :2], r.states[:-1]) for r in recs)
        a = pl.with_config(rho=0.0).rollouts(env, range(5))
        b = pl.with_config(guided=False).rollouts(env, range(5))
        assert all(np.array_equal(x.plans, y.plans) and np.array_equal(x.states, y.states) for x, y in zip(a, b))
        # linear guide J(x) = g.x: with the noise fixed to zero the guided
        # output must be the unguided mean plus rho * g, bit for bit
        rng = np.random.default_rng(108)
        d = pl.window_dim
        sched = pl.schedule
        emb = pl.denoiser.sizes[0] - d
        g = rng.standard_normal(d)
        w = np.zeros((d + emb, 1))
        w[:d, 0] = g
        guide = MlpParams((w,), (np.zeros(1),), "linear")
        x = rng.standard_normal((4, d))
        steps = 0
        for rho in (0.05, 0.37, 2.0):
            for i in range(1, sched.n_steps + 1):
                zero = np.zeros_like(x)
                guided = denoise_step(x, i, pl.denoiser, sched, guide=guide, rho=rho, noise=zero)
                plain = denoise_step(x, i, pl.denoiser, sched, noise=zero)
                assert np.array_equal(guided, plain + rho * g), (rho, i)
                steps += 1
        note["detail"] = (f"{n_plans} plans start at the observation; rho=0 rollouts identical; "
                          f"guided mean == mean + rho*g on {steps} steps")


def test_c09_determinism(small_mix, env):
    with criterion(9, "determinism") as note:
        cfg = TrainConfig(steps=100, horizon=4, n_diffusion=10, kappa=8, batch_size=32,
                          denoiser_hidden=(64, 64), predictor_hidden=(32,))
        s1, a = train(small_mix, cfg)
        s2, b = train(small_mix, cfg)
        assert [r.loss_total for r in a] == [r.loss_total for r in b]
        assert [(r.loss_d, r.loss_v, r.loss_c) for r in a] == [(r.loss_d, r.loss_v, r.loss_c) for r in b]
        ck1 = Checkpoint(s1.models, cfg, small_mix.norm_stats, 2, 2, s1.step)
        ck2 = Checkpoint(s2.models, cfg, small_mix.norm_stats, 2, 2, s2.step)
        e1 = Planner.from_checkpoint(ck1, rho=0.5, max_episode_steps=40).rollouts(env, range(300, 304))
        e2 = Planner.from_checkpoint(ck2, rho=0.5, max_episode_steps=40).rollouts(env, range(300, 304))
        for x, y in zip(e1, e2):
            for f in ("states", "actions", "rewards", "plans"):
                assert np.array_equal(getattr(x, f), getattr(y, f)), f
        note["detail"] = "100 loss rows and 4 evaluation episodes bit-identical across two runs"


# -- 10: anchors ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def refs(env):
    return measure_references(env)


def test_c10_score_anchors(env, refs):
    with criterion(10, "score anchors") as note:
        seeds = range(500, 560)
        r = evaluate(BehaviorPolicy("random", env), env, seeds, refs).normalized
        e = evaluate(BehaviorPolicy("expert", env), env, seeds, refs).normalized
        note["detail"] = f"random {r:.2f}, expert {e:.2f} over {len(seeds)} seeds"
        assert -5 <= r <= 5 and 95 <= e <= 105


# -- 11, 12: trained planners -----------------------------------------------------------

@pytest.fixture(scope="module")
def directional(env, refs):
    """Train full-SR and no-contrast from each training seed on the same mixture
    and evaluate every model on the same seeds."""
    t0 = time.perf_counter()
    data = generate_mixture("random", 200, 0.1, MIXTURE_SEED, env)
    out = {"planners": {}, "reports": {}}
    for name, ablation in (("full-SR", "full"), ("no_contrast", "no_contrast")):
        planners, reports = [], []
        for seed in TRAIN_SEEDS:
            cfg = replace(DIRECTIONAL_CFG, ablation=ablation, strategy="sr", seed=seed)
            state, _ = train(data, cfg)
            ck = Checkpoint(state.models, cfg, data.norm_stats, data.state_dim, data.action_dim, state.step)
            planners.append(Planner.from_checkpoint(ck, rho=DIRECTIONAL_RHO[name]))
            reports.append(evaluate(planners[-1], env, EVAL_SEEDS, refs))
        out["planners"][name], out["reports"][name] = planners, reports
    out["elapsed"] = time.perf_counter() - t0
    return out


def _top_bin_mass(reports):
    recs = [r for rep in reports for r in rep.records]
    counts, _ = reward_histogram(recs)
    return counts[-1] / max(counts.sum(), 1)


def test_c11_directional_claim(directional):
    with criterion(11, "directional: full-SR > no-contrast on random+10% expert") as note:
        reps = directional["reports"]
        # per evaluation seed, averaged over training seeds
        full = np.mean([r.normalized_per_seed for r in reps["full-SR"]], axis=0)
        base = np.mean([r.normalized_per_seed for r in reps["no_contrast"]], axis=0)
        t, p = welch_one_sided(full, base)
        top_full, top_base = _top_bin_mass(reps["full-SR"]), _top_bin_mass(reps["no_contrast"])
        per_run = lambda name: "/".join(f"{r.normalized:.0f}" for r in reps[name])
        elapsed = directional["elapsed"]
        note["detail"] = (f"full {full.mean():.1f} vs no-contrast {base.mean():.1f}, Welch p={p:.3g}; "
                          f"per training seed {per_run('full-SR')} vs {per_run('no_contrast')}; "
                          f"top-bin mass {top_full:.4f} vs {top_base:.4f}; {elapsed / 60:.1f} min")
        significant = p < 0.1 and full.mean() > base.mean()
        degraded = full.mean() >= base.mean() and top_full > top_base
        if not significant:
            note["detail"] += " (significance not met, degraded clause applied)"
        assert significant or degraded
        assert elapsed < BUDGET_S


def test_c12_plan_execution_consistency(directional, env):
    with criterion(12, "plan-execution consistency") as note:
        trained = directional["planners"]["full-SR"][0]
        report = directional["reports"]["full-SR"][0]
        seeds = list(EVAL_SEEDS)[:10]
        recs = [r for r in report.records if r.seed in seeds]
        models = init_models(DIRECTIONAL_CFG, 2, 2, np.random.default_rng(112))
        ck = Checkpoint(models, DIRECTIONAL_CFG, trained.norm_stats, 2, 2, 0)
        random_recs = rollout_many(env, Planner.from_checkpoint(ck, rho=trained.cfg.rho), seeds)
        ns = trained.norm_stats
        c_trained = consistency_matrix(recs, 1, ns).column_mean(1)
        c_random = consistency_matrix(random_recs, 1, ns).column_mean(1)
        note["detail"] = f"lookahead-1 consistency trained {c_trained:.3f} vs random weights {c_random:.3f}"
        assert c_trained - c_random >= 0.2
