"""Command-line entry point: ``gftlab <subcommand> --config PATH --seed U64 --out DIR``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, code_hash, load_config
from .diffusion import ConditionalMixture2D, ddim_sample, eval_grid, field_report, gft_field, cfg_field
from .discrete import (
    EnumerationBudgetError,
    all_sequences,
    build_toy_joint,
    sample_ar,
    sequence_ids,
)
from .io import DIST_COLUMNS, FIELD_COLUMNS, write_csv, write_json
from .prng import Prng
from .schedules import BetaSchedule, tv_distance
from .train import (
    LOSS_COLUMNS,
    CFGNet,
    CounterMismatch,
    NumericFailure,
    Run,
    evaluate,
    model_distribution,
    target_for,
)

log = logging.getLogger("gftlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _provenance(cfg: RunConfig):
    return {"config_hash": cfg.hash(), "code_hash": code_hash()}


def _load_run_config(args, meta=None) -> RunConfig:
    overrides = {"seed": args.seed, "out": args.out}
    if args.config:
        return load_config(args.config, **overrides)
    if meta is not None and "config" in meta:
        base = RunConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
        return base.replace(**{k: v for k, v in overrides.items() if v is not None})
    return load_config(None, **overrides)


def _load_ckpt(args):
    try:
        return checkpoint.load(args.ckpt, use_ema=args.ema)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from None


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    run = Run.build(cfg)

    def on_step(r, row):
        if cfg.checkpoint_every and r.step % cfg.checkpoint_every == 0:
            checkpoint.save(out / f"checkpoint_{r.step:06d}.gft", r.net, r.metadata(), r.ema)
        if row[0] % cfg.log_every == 0:
            log.info("step %d loss %.5f", row[0], row[1])

    run.train(callback=on_step)
    prov = _provenance(cfg)
    write_csv(out / "loss.csv", LOSS_COLUMNS, run.loss_rows, prov)
    checkpoint.save(out / "checkpoint.gft", run.net, run.metadata(), run.ema)
    first = run.counters[0].as_dict() if run.counters else {}
    write_json(out / "counters.json", {
        "method": cfg.method,
        "per_update": first,
        "updates": len(run.counters),
        "all_updates_identical": all(c.as_dict() == first for c in run.counters),
        **prov,
    })
    columns, rows = evaluate(run)
    write_csv(out / "metrics.csv", columns, rows, prov)
    write_json(out / "run.json", run.metadata())
    return EXIT_OK


def _mixture_from(meta, net):
    if "mixture" in meta:
        return ConditionalMixture2D.from_config(meta["mixture"])
    if getattr(net, "mixture", None) is not None:
        return net.mixture
    return ConditionalMixture2D.default()


def _joint_from(meta, net, cfg):
    if getattr(net, "joint", None) is not None:
        return net.joint
    params = meta.get("joint") or {"seed": cfg.joint_seed, "vocab": cfg.vocab, "length": cfg.length,
                                 "num_classes": cfg.num_classes, "skew": cfg.skew}
    return build_toy_joint(**params)


def _method(meta, cfg):
    return meta.get("config", {}).get("method", cfg.method)


def cmd_eval_field(args) -> int:
    net, meta, _ = _load_ckpt(args)
    cfg = _load_run_config(args, meta)
    if not hasattr(net, "dim"):
        raise ConfigError("eval-field needs a diffusion checkpoint")
    mixture = _mixture_from(meta, net)
    betas = tuple(args.betas) if args.betas else cfg.eval_betas
    ts = tuple(args.ts) if args.ts else cfg.eval_ts
    field_net = CFGNet(net) if _method(meta, cfg) == "cfg" else net
    grid = eval_grid(cfg.grid_half_width, cfg.grid_points)
    rows, summary = field_report(field_net, mixture, betas, ts, grid, c=cfg.eval_class)
    out = Path(cfg.out)
    prov = _provenance(cfg)
    write_csv(out / "field.csv", FIELD_COLUMNS, rows, prov)
    write_csv(out / "field_rmse.csv", ("beta", "t", "rmse", "relative_rmse"),
              [(b, t, v["rmse"], v["relative_rmse"]) for (b, t), v in summary.items()], prov)
    return EXIT_OK


def cmd_eval_dist(args) -> int:
    net, meta, _ = _load_ckpt(args)
    cfg = _load_run_config(args, meta)
    if not hasattr(net, "vocab"):
        raise ConfigError("eval-dist needs an AR checkpoint")
    joint = _joint_from(meta, net, cfg)
    method = _method(meta, cfg)
    betas = tuple(args.betas) if args.betas else cfg.eval_betas
    seqs = all_sequences(joint.vocab, joint.length)
    rows, summary = [], []
    for c in range(joint.num_classes):
        for beta in betas:
            p_model = model_distribution(net, c, beta, cfg, method)
            p_target = target_for(joint, c, beta, cfg)
            for i, (pm, pt) in enumerate(zip(p_model, p_target)):
                rows.append((i, " ".join(map(str, seqs[i])), float(pm), float(pt), c, float(beta)))
            summary.append((c, float(beta), tv_distance(p_model, p_target),
                            float(np.sum(p_target * (np.log(p_target) - np.log(np.maximum(p_model, 1e-12))))),
                            float(p_model.max()), float(p_target.max())))
    out = Path(cfg.out)
    prov = _provenance(cfg)
    write_csv(out / "dist.csv", DIST_COLUMNS, rows, prov)
    write_csv(out / "dist_summary.csv", ("class", "beta", "tv", "kl", "modal_p_model", "modal_p_target"), summary, prov)
    return EXIT_OK


def _sample(net, meta, cfg, c, beta, n, prng):
    method = _method(meta, cfg)
    if hasattr(net, "dim"):
        field = cfg_field(net) if method == "cfg" else gft_field(net)
        return ddim_sample(field, c, beta, cfg.ddim_steps, prng, n)
    sched = BetaSchedule(cfg.schedule_kind, beta, cfg.schedule_alpha, net.length)
    return sample_ar(net, c, sched, prng, n, mode="cfg" if method == "cfg" else "gft")


def cmd_sample(args) -> int:
    net, meta, _ = _load_ckpt(args)
    cfg = _load_run_config(args, meta)
    prng = Prng(cfg.seed).fork("sample", args.cls, args.beta)
    x = _sample(net, meta, cfg, args.cls, args.beta, args.n, prng)
    out = Path(cfg.out)
    if hasattr(net, "dim"):
        write_csv(out / "samples.csv", ("class", "beta", "x", "y"),
                  [(args.cls, args.beta, float(a), float(b)) for a, b in x], _provenance(cfg))
    else:
        write_csv(out / "samples.csv", ("class", "beta", "sequence_id", "tokens"),
                  [(args.cls, args.beta, int(i), " ".join(map(str, s))) for i, s in zip(sequence_ids(x, net.vocab), x)],
                  _provenance(cfg))
    return EXIT_OK


def cmd_sweep_beta(args) -> int:
    """Sample at each beta and summarize: spread for diffusion, empirical TV to target for AR."""
    net, meta, _ = _load_ckpt(args)
    cfg = _load_run_config(args, meta)
    betas = tuple(args.betas) if args.betas else cfg.eval_betas
    rows = []
    for c in range(net.num_classes):
        for beta in betas:
            prng = Prng(cfg.seed).fork("sweep", c, beta)
            x = _sample(net, meta, cfg, c, beta, args.n, prng)
            if hasattr(net, "dim"):
                centre = x.mean(axis=0)
                spread = float(np.sqrt(np.mean(np.sum((x - centre) ** 2, axis=1))))
                rows.append((c, float(beta), float(centre[0]), float(centre[1]), spread))
            else:
                joint = _joint_from(meta, net, cfg)
                counts = np.bincount(sequence_ids(x, net.vocab), minlength=net.vocab**net.length)
                emp = counts / counts.sum()
                rows.append((c, float(beta), tv_distance(emp, target_for(joint, c, beta, cfg)), float(emp.max()), 0.0))
    cols = ("class", "beta", "mean_x", "mean_y", "spread") if hasattr(net, "dim") else (
        "class", "beta", "tv_to_target", "modal_freq", "unused")
    write_csv(Path(cfg.out) / "sweep.csv", cols, rows, _provenance(cfg))
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_NUMERIC


def build_parser():
    p = argparse.ArgumentParser(prog="gftlab", description="Guidance-free training laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, default=None)
        if ckpt:
            sp.add_argument("--ckpt", type=str, required=True)
            sp.add_argument("--ema", action="store_true", help="evaluate the EMA shadow parameters")
        return sp

    common(sub.add_parser("train", help="train one method on one testbed"))
    sp = common(sub.add_parser("eval-field", help="model vs optimal field on a grid"), ckpt=True)
    sp.add_argument("--betas", type=float, nargs="+")
    sp.add_argument("--ts", type=float, nargs="+")
    sp = common(sub.add_parser("eval-dist", help="exact model vs tilted target distributions"), ckpt=True)
    sp.add_argument("--betas", type=float, nargs="+")
    sp = common(sub.add_parser("sample", help="draw samples from a checkpoint"), ckpt=True)
    sp.add_argument("--class", dest="cls", type=int, default=0)
    sp.add_argument("--beta", type=float, default=1.0)
    sp.add_argument("--n", type=int, default=1000)
    sp = common(sub.add_parser("sweep-beta", help="sample across betas and summarize"), ckpt=True)
    sp.add_argument("--betas", type=float, nargs="+")
    sp.add_argument("--n", type=int, default=2000)
    common(sub.add_parser("check", help="run the invariant suite"))
    return p


COMMANDS = {"train": cmd_train, "eval-field": cmd_eval_field, "eval-dist": cmd_eval_dist,
            "sample": cmd_sample, "sweep-beta": cmd_sweep_beta, "check": cmd_check}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, EnumerationBudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, CounterMismatch, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
