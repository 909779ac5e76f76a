"""Command-line experiment runner.

Subcommands::

    mitune train     --config C [--out DIR] [--seed N]
    mitune mi        --config C (--checkpoint P | --oracle) [--mode generate|forward]
    mitune mitune    --config C [--checkpoint P] [--threads N] [--resume]
    mitune agreement --config C (--checkpoint P | --oracle)
    mitune sweep     --config C --checkpoint P --kind ratio|realmix
    mitune report    RUN_DIR [--out DIR]

Without ``--out`` results go to ``$MITUNE_OUT/<subcommand>`` (default root
``runs``). Exit codes: 0 success, 2 configuration or input error, 3 runtime
failure. Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_base, save_adapters, save_base
from .config import ConfigError, RunConfig
from .denoiser import OracleDenoiser, TrainingDiverged, train
from .gaussian_world import closed_form_mi, sample_joint
from .io import (read_csv, write_agreement, write_csv, write_finetune_set, write_loss_trace,
                 write_metrics, write_mi_table, write_pool_scores, write_rows, write_schedule,
                 METRICS_HEADER)
from .metrics import agreement_study
from .mi_estimator import MiEstimationError, pointwise_mi_forward, pointwise_mi_generate
from .pipeline import real_mix_sweep, run_mitune, selection_ratio_sweep, real_sample
from .report import ReportError, build_report
from .sampler import SamplerConfig, SamplingError, task_seed

log = logging.getLogger("mitune")

OUT_ENV = "MITUNE_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# task_seed stream families for CLI-level draws
_MI_GEN, _MI_FWD, _AGREE = 10, 11, 12


class RunError(RuntimeError):
    """Runtime failure, optionally tagged with the round it happened in."""

    def __init__(self, message: str, round_index: int | None = None):
        super().__init__(message)
        self.round_index = round_index


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


@contextlib.contextmanager
def run_lock(run_dir: Path):
    """Advisory exclusive lock on ``run_dir/.lock``."""
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / ".lock", "w") as f:
        try:
            fcntl.flock(f, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise RunError(f"run directory {run_dir} is locked by another process") from None
        try:
            yield
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(seed=args.seed, threads=getattr(args, "threads", None))
    cfg.validate()
    return cfg


def _prepare(args):
    cfg = _load_config(args)
    s = cfg.build_schedule()
    out = _out_dir(args)
    return cfg, s, out


def _write_common(out: Path, cfg: RunConfig, s) -> None:
    (out / "config.ini").write_text(cfg.to_ini())
    write_schedule(out / "schedule.csv", s)


def _network(args, cfg: RunConfig, s, world):
    if getattr(args, "oracle", False):
        if args.checkpoint:
            raise ConfigError("--oracle and --checkpoint are mutually exclusive")
        return OracleDenoiser(world, s)
    if not args.checkpoint:
        raise ConfigError("need --checkpoint PATH or --oracle")
    if not world.is_mixture:
        raise ConfigError("correlated_gaussian worlds need --oracle; trained networks "
                          "condition on labels")
    net, _ = load_base(args.checkpoint, s.params())
    if net.dim != world.dim or net.num_labels != world.num_labels:
        raise ConfigError(f"{args.checkpoint}: network shape (dim={net.dim}, "
                          f"labels={net.num_labels}) does not match the configured world")
    return net


def cmd_train(args) -> None:
    cfg, s, out = _prepare(args)
    world = cfg.build_world()
    if not world.is_mixture:
        raise ConfigError("train needs a labeled_mixture world")
    with run_lock(out):
        _write_common(out, cfg, s)
        net, trace = train(cfg.build_net(), world, s, cfg.train_config())
        save_base(out / "base.ckpt", net, s.params())
        write_loss_trace(out / "loss.csv", trace)
    log.info("trained base network, final loss %.5f", trace[-1])


def _mi_rows(net, world, cfg: RunConfig, s, mode: str):
    n, seed = cfg.mi.n_per_label, cfg.run.seed
    rows = []
    if world.is_mixture:
        for c in range(world.num_labels):
            seeds = [task_seed(seed, _MI_GEN if mode == "generate" else _MI_FWD, c, j)
                     for j in range(n)]
            if mode == "generate":
                _, est = pointwise_mi_generate(net, c, s, SamplerConfig(cfg.mi.guidance),
                                               seeds=seeds)
            else:
                est = [pointwise_mi_forward(net, real_sample(world, c, sd), c, s, cfg.mi.n_mc,
                                            seed=sd) for sd in seeds]
            rows += [(c, j, seeds[j], e.value, e.stderr, e.checksum) for j, e in enumerate(est)]
        return rows
    # correlated mode: every sample carries its own condition vector
    if mode == "generate":
        seeds = [task_seed(seed, _MI_GEN, j) for j in range(n)]
        p = np.random.default_rng(task_seed(seed, _MI_GEN)).standard_normal((n, world.dim))
        _, est = pointwise_mi_generate(net, p, s, SamplerConfig(cfg.mi.guidance), seeds=seeds)
    else:
        seeds = [task_seed(seed, _MI_FWD, j) for j in range(n)]
        p, z = sample_joint(world, n, task_seed(seed, _MI_FWD))
        est = [pointwise_mi_forward(net, z[j], p[j], s, cfg.mi.n_mc, seed=seeds[j])
               for j in range(n)]
    return [(j, j, seeds[j], e.value, e.stderr, e.checksum) for j, e in enumerate(est)]


def cmd_mi(args) -> None:
    cfg, s, out = _prepare(args)
    world = cfg.build_world()
    net = _network(args, cfg, s, world)
    with run_lock(out):
        _write_common(out, cfg, s)
        rows = _mi_rows(net, world, cfg, s, args.mode)
        write_mi_table(out / "mi_scores.csv", rows)
        values = np.array([r[3] for r in rows])
        ref = closed_form_mi(world, seed=task_seed(cfg.run.seed, 13))
        write_rows(out / "mi_summary.csv", "mi-summary", [{
            "mode": args.mode, "n": values.size, "mean_mi": float(values.mean()),
            "stderr": float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1
            else float("nan"),
            "reference_mi": ref.value, "reference_stderr": ref.stderr}])
    log.info("mean MI %.4f nats over %d samples (reference %.4f)", values.mean(), values.size,
             ref.value)


def _completed_rounds(out: Path, R: int) -> int:
    done = 0
    for r in range(1, R + 1):
        d = out / f"round_{r:02d}"
        if (d / "merged.ckpt").is_file() and (d / "metrics.csv").is_file():
            done = r
        else:
            break
    return done


def _round_records(out: Path, upto: int) -> list[dict]:
    records = []
    for r in range(1, upto + 1):
        _, rows = read_csv(out / f"round_{r:02d}" / "metrics.csv")
        rec = {k: float(v) for k, v in rows[0].items()}
        rec["round"], rec["set_size"] = int(rec["round"]), int(rec["set_size"])
        records.append(rec)
    return records


def cmd_mitune(args) -> None:
    cfg, s, out = _prepare(args)
    world = cfg.build_world()
    if args.oracle:
        raise ConfigError("mitune fine-tunes adapters and needs a trained network, not --oracle")
    if not world.is_mixture:
        raise ConfigError("mitune needs a labeled_mixture world")
    pcfg = cfg.pipeline_config()
    with run_lock(out):
        snapshot = out / "config.ini"
        start = 0
        if args.resume and snapshot.is_file():
            if snapshot.read_text() != cfg.to_ini():
                raise ConfigError(f"{snapshot} differs from the requested config; refusing to "
                                  "resume a different experiment")
            start = _completed_rounds(out, pcfg.rounds)
        elif any(out.glob("round_*")):
            raise ConfigError(f"{out} already holds rounds; pass --resume or choose another --out")
        _write_common(out, cfg, s)

        if start:
            net, _ = load_base(out / f"round_{start:02d}" / "merged.ckpt", s.params())
            log.info("resuming after round %d", start)
        elif (out / "base.ckpt").is_file() and args.resume and not args.checkpoint:
            net, _ = load_base(out / "base.ckpt", s.params())
        elif args.checkpoint:
            net = _network(args, cfg, s, world)
            save_base(out / "base.ckpt", net, s.params())
        else:
            net, trace = train(cfg.build_net(), world, s, cfg.train_config())
            save_base(out / "base.ckpt", net, s.params())
            write_loss_trace(out / "base_loss.csv", trace)

        records = _round_records(out, start)

        def persist(res, merged):
            r = res.metrics["round"]
            d = out / f"round_{r:02d}"
            d.mkdir(exist_ok=True)
            write_pool_scores(d / "pool_scores.csv", res.ft_set.pool)
            write_finetune_set(d / "finetune_set.csv", res.ft_set)
            write_loss_trace(d / "loss.csv", res.loss_trace)
            save_adapters(d / "adapters.ckpt", res.net, s.params(), {"round": r})
            save_base(d / "merged.ckpt", merged, s.params())
            write_metrics(d / "metrics.csv", [res.metrics])
            records.append(res.metrics)
            write_metrics(out / "metrics.csv", records)

        try:
            run_mitune(net, pcfg, s, world, on_round=persist, start_round=start)
        except (TrainingDiverged, SamplingError, MiEstimationError) as e:
            raise RunError(f"round {len(records) + 1}: {e}", round_index=len(records) + 1) from e
        write_metrics(out / "metrics.csv", records)


def cmd_agreement(args) -> None:
    cfg, s, out = _prepare(args)
    world = cfg.build_world()
    net = _network(args, cfg, s, world)
    a = cfg.agreement
    with run_lock(out):
        _write_common(out, cfg, s)
        result = agreement_study(net, world, s, a.n_prompts, a.M, SamplerConfig(a.guidance),
                                 seed=task_seed(cfg.run.seed, _AGREE))
        write_agreement(out / "agreement.csv", result)
    for ag in result:
        log.info("tau(%s, %s) = %.3f +- %.3f", *ag.pair, ag.mean_tau, ag.stderr)


def cmd_sweep(args) -> None:
    cfg, s, out = _prepare(args)
    world = cfg.build_world()
    if args.oracle:
        raise ConfigError("sweep fine-tunes adapters and needs --checkpoint, not --oracle")
    net = _network(args, cfg, s, world)
    with run_lock(out):
        _write_common(out, cfg, s)
        pcfg = cfg.pipeline_config()
        if args.kind == "ratio":
            rows = selection_ratio_sweep(net, pcfg, s, world)
            header = ["k", "M"]
        else:
            rows = real_mix_sweep(net, pcfg, s, world)
            header = ["real_fraction"]
        write_csv(out / f"sweep_{args.kind}.csv", f"sweep-{args.kind}", header + METRICS_HEADER,
                  ([r[k] for k in header + METRICS_HEADER] for r in rows))


def cmd_report(args) -> None:
    for p in build_report(args.run_dir, args.out):
        log.info("wrote %s", p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mitune", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True, oracle=True):
        p.add_argument("--config", help="INI config file (defaults apply when omitted)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--threads", type=int, help="override [run] threads")
        if checkpoint:
            p.add_argument("--checkpoint", help="base network checkpoint")
        if oracle:
            p.add_argument("--oracle", action="store_true",
                           help="use the analytic denoiser of the configured world")

    p = sub.add_parser("train", help="train a base denoiser")
    common(p, checkpoint=False, oracle=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mi", help="score samples with the point-wise MI estimator")
    common(p)
    p.add_argument("--mode", choices=("generate", "forward"), default="generate")
    p.set_defaults(func=cmd_mi)

    p = sub.add_parser("mitune", help="run MI-filtered self fine-tuning rounds")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue after the last saved round")
    p.set_defaults(func=cmd_mitune)

    p = sub.add_parser("agreement", help="Kendall tau agreement between scoring metrics")
    common(p)
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("sweep", help="selection-ratio or real-mix sweep (report only)")
    common(p)
    p.add_argument("--kind", choices=("ratio", "realmix"), default="ratio")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render SVG plots for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="plot directory (default RUN_DIR/report)")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, err: Exception, code: int, **extra) -> int:
    payload = {"error": kind, "message": str(err), "exit_code": code, **extra}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, CheckpointError, ReportError) as e:
        return _fail(type(e).__name__, e, EXIT_CONFIG)
    except RunError as e:
        extra = {} if e.round_index is None else {"round": e.round_index}
        return _fail("RunError", e, EXIT_RUNTIME, **extra)
    except (TrainingDiverged, SamplingError, MiEstimationError, OSError) as e:
        return _fail(type(e).__name__, e, EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
