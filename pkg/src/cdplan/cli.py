"""Command line entry points: gen-data, train, eval, analyze.

Every command writes into a fresh run directory `<out>/<timestamp>-<fingerprint>`
holding `run_config.txt` (key=value, the exact merged configuration) next to
its artifacts, and prints that directory on stdout.

Exit codes: 0 success, 2 usage, 3 validation (bad data, config or files),
4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

from .errors import ConfigError, DimensionError, NumericError, ParseError, SamplingError, UsageError

log = logging.getLogger("cdplan")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4
ABLATION_FLAGS = {"none": "full", "no-contrast": "no_contrast", "positives-only": "positives_only"}
PLANNER_KEYS = ("rho", "guided", "max_episode_steps")
# run_config.txt keys that describe the run rather than the model
RUN_KEYS = ("command", "fingerprint", "created", "data", "ckpt", "out", "resume", "env", "layout", "policy",
            "episodes", "mix_expert_ratio", "seeds", "seed_start", "records", "what", "lookahead", "bins",
            "refs", "threads")


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_kv(path) -> dict[str, str]:
    """`key=value` lines; blank lines and `#` comments are skipped."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_kv(path, kv: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in kv.items()))


def fingerprint(kv: dict) -> str:
    text = "\n".join(f"{k}={v}" for k, v in sorted(kv.items()) if k not in ("created", "fingerprint", "out"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def make_run_dir(root, kv: dict) -> Path:
    fp = fingerprint(kv)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(root) / f"{stamp}-{fp}"
    k = 1
    while run.exists():
        run = Path(root) / f"{stamp}-{fp}-{k}"
        k += 1
    run.mkdir(parents=True)
    write_kv(run / "run_config.txt", {**kv, "fingerprint": fp, "created": stamp})
    return run


def _env(args):
    from .envs import make_env
    return make_env(args.env, args.layout)


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> Path:
    from .data import ReturnConfig, save_dataset
    from .envs import generate_dataset, generate_mixture

    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    env = _env(args)
    kv = {"command": "gen-data", "env": args.env, "layout": args.layout or "", "policy": args.policy,
          "episodes": args.episodes, "mix_expert_ratio": args.mix_expert_ratio, "seed": args.seed,
          "eta": args.eta, "gamma": args.gamma}
    rc = ReturnConfig(args.eta, args.gamma)
    if args.mix_expert_ratio is None:
        ds = generate_dataset(args.policy, args.episodes, args.seed, env, rc)
    else:
        ds = generate_mixture(args.policy, args.episodes, args.mix_expert_ratio, args.seed, env, rc)
    run = make_run_dir(args.out, {k: ("" if v is None else v) for k, v in kv.items()})
    save_dataset(ds, run / "dataset.jsonl")
    return run


def _train_config(args):
    from .training import TrainConfig

    kv = {}
    if args.config:
        kv = {k: v for k, v in read_kv(args.config).items()
              if k not in RUN_KEYS and k not in PLANNER_KEYS}
    if args.steps is not None:
        kv["steps"] = args.steps
    if args.ablation is not None:
        kv["ablation"] = ABLATION_FLAGS[args.ablation]
    if args.strategy is not None:
        kv["strategy"] = args.strategy
    if args.seed is not None:
        kv["seed"] = args.seed
    return TrainConfig.from_kv(kv)


def cmd_train(args) -> Path:
    from .data import load_dataset
    from .training import train

    ds = load_dataset(args.data)
    cfg = _train_config(args)
    kv = {"command": "train", "data": str(Path(args.data).resolve()),
          "resume": str(Path(args.resume).resolve()) if args.resume else "", **cfg.to_kv()}
    run = make_run_dir(args.out, kv)
    if args.resume:
        import shutil
        src = Path(args.resume)
        metrics = src.parent / "metrics.csv"
        if metrics.exists():
            shutil.copyfile(metrics, run / "metrics.csv")
        shutil.copyfile(src, run / "checkpoint.cdiff")
        resume = run / "checkpoint.cdiff"
    else:
        resume = None
    state, reps = train(ds, cfg, run, resume=resume)
    if reps:
        r = reps[-1]
        log.info("finished at step %d: L_d=%.5g L_v=%.5g L_c=%.5g", state.step, r.loss_d, r.loss_v, r.loss_c)
    return run


def cmd_eval(args) -> Path:
    from .analysis import load_or_measure_references, evaluate, write_records, write_score_csv
    from .envs import BehaviorPolicy

    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    if (args.ckpt is None) == (args.policy is None):
        raise UsageError("give exactly one of --ckpt or --policy")
    env = _env(args)
    seeds = range(args.seed_start, args.seed_start + args.seeds)
    kv = {"command": "eval", "env": args.env, "layout": args.layout or "", "seeds": args.seeds,
          "seed_start": args.seed_start}
    header = {}
    if args.ckpt is not None:
        from .planner import Planner
        from .training import load_checkpoint

        path = Path(args.ckpt)
        if not path.is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        ck = load_checkpoint(path)
        over = read_kv(args.config) if args.config else {}
        pk = {"rho": float(over.get("rho", 0.1)), "guided": over.get("guided", "true").lower() in ("1", "true", "yes"),
              "max_episode_steps": int(over.get("max_episode_steps", env.horizon))}
        if args.rho is not None:
            pk["rho"] = args.rho
        agent = Planner.from_checkpoint(ck, **pk)
        kv.update({"ckpt": str(path.resolve()), "model_fingerprint": ck.cfg.fingerprint(),
                   **{k: str(v) for k, v in pk.items()}})
        header = {"norm_stats": ck.norm_stats.to_dict(), "horizon": ck.cfg.horizon}
    else:
        agent = BehaviorPolicy(args.policy, env)
        kv["policy"] = args.policy
    run = make_run_dir(args.out, kv)
    refs = load_or_measure_references(env, args.refs or Path(args.out) / "references.json")
    fp = fingerprint(kv)
    rep = evaluate(agent, env, seeds, refs, fp)
    write_score_csv(run / "scores.csv", rep)
    write_records(run / "records.jsonl", rep.records, {"fingerprint": fp, **header})
    (run / "summary.txt").write_text(
        f"episodes={len(rep.returns)}\nmean_return={rep.mean!r}\nstd_return={rep.std!r}\n"
        f"normalized={rep.normalized!r}\nrandom_ref={refs.random_ref!r}\nexpert_ref={refs.expert_ref!r}\n"
        f"success_rate={sum(r.done for r in rep.records) / len(rep.records)!r}\n")
    log.info("normalized score %.2f over %d episodes", rep.normalized, len(rep.returns))
    return run


def cmd_analyze(args) -> Path:
    import numpy as np

    from .analysis import (consistency_matrix, histogram_svg, line_svg, read_records, reward_histogram,
                           state_return_scatter, write_consistency_csv, write_histogram_csv, write_scatter_csv)
    from .data import NormStats

    recs, header = read_records(args.records)
    kv = {"command": "analyze", "records": str(Path(args.records).resolve()), "what": args.what,
          "lookahead": args.lookahead, "bins": args.bins}
    run = make_run_dir(args.out, kv)
    fp = fingerprint(kv)
    if args.what == "rewards":
        counts, edges = reward_histogram(recs, args.bins)
        write_histogram_csv(run / "reward_histogram.csv", counts, edges)
        (run / "reward_histogram.svg").write_text(histogram_svg(counts, edges, f"rewards {fp}"))
    elif args.what == "consistency":
        ns = NormStats.from_dict(header["norm_stats"]) if header and "norm_stats" in header else None
        if recs:
            cm = consistency_matrix(recs, args.lookahead, ns)
            write_consistency_csv(run / "consistency.csv", cm)
            cols = [cm.column_mean(j) for j in range(1, args.lookahead + 1)]
            (run / "consistency.svg").write_text(line_svg(np.arange(1, args.lookahead + 1), cols,
                                                          f"consistency {fp}"))
        else:
            from .analysis import ConsistencyMatrix
            write_consistency_csv(run / "consistency.csv",
                                  ConsistencyMatrix(np.zeros((0, args.lookahead)), np.zeros(0, bool)))
    else:
        write_scatter_csv(run / "state_reward_scatter.csv", state_return_scatter(recs))
    return run


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = ArgParser(prog="cdplan", description="Contrastive diffusion planning on a toy maze.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    def env_flags(sp):
        sp.add_argument("--env", default="pointmaze-desk")
        sp.add_argument("--layout", default=None, help="JSON maze layout overriding the default")

    g = sub.add_parser("gen-data", help="roll out a behaviour policy into an offline dataset")
    env_flags(g)
    g.add_argument("--policy", choices=("expert", "medium", "random"), required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--mix-expert-ratio", type=float, default=None,
                   help="replace this fraction of episodes with expert ones")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eta", type=float, default=0.99, help="per-state return discount")
    g.add_argument("--gamma", type=float, default=0.99, help="trajectory return discount")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train denoiser, return predictor and projector")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="key=value file; flags win")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--ablation", choices=tuple(ABLATION_FLAGS), default=None)
    t.add_argument("--strategy", choices=("sr", "srd"), default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint or a baseline policy")
    env_flags(e)
    e.add_argument("--ckpt", default=None)
    e.add_argument("--policy", choices=("expert", "random"), default=None, help="checkpoint-free baseline")
    e.add_argument("--config", default=None, help="key=value file with rho, guided, max_episode_steps")
    e.add_argument("--seeds", type=int, default=20, help="number of evaluation episodes")
    e.add_argument("--seed-start", type=int, default=1000)
    e.add_argument("--rho", type=float, default=None)
    e.add_argument("--refs", default=None, help="reference-score cache (default <out>/references.json)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="reward histograms, consistency matrices, scatters")
    a.add_argument("--records", required=True)
    a.add_argument("--what", choices=("rewards", "consistency", "scatter"), required=True)
    a.add_argument("--lookahead", type=int, default=4)
    a.add_argument("--bins", type=int, default=10)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                run = args.func(args)
        else:
            run = args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DimensionError, ParseError, SamplingError, OSError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    print(run)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
