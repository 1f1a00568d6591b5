"""Command-line entry point: ``ldwm <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 invariant or acceptance failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("ldwm")


class UsageError(Exception):
    pass


class InvariantFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ldwm", description="Latent driving world model: data, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="drive the expert on random routes and write episodes")
    g.add_argument("--episodes", type=int, default=2000, help="number of 12-step episodes (default 2000)")
    g.add_argument("--seed", type=int, default=0, help="route sampling seed (default 0)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")

    t = sub.add_parser("train", help="train a world-model or behavior-cloning checkpoint")
    t.add_argument("--config", required=True, help="key=value training config file")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--bc", action="store_true", help="behavior-cloning ablation (no prior, no KL, mean state)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--batch-size", type=int, help="override batch_size")
    t.add_argument("--log", help="per-step CSV log path (default: next to the checkpoint)")
    t.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-exact runs")

    for name, text in (("eval", "closed-loop evaluation without disturbances"),
                       ("disturb", "closed-loop evaluation with steering disturbances")):
        e = sub.add_parser(name, help=text)
        e.add_argument("--ckpt", nargs="+", default=[], help="checkpoint(s), one per training seed")
        e.add_argument("--expert", action="store_true", help="evaluate the expert controller instead")
        e.add_argument("--routes", type=int, default=20, help="held-out routes (default 20)")
        e.add_argument("--route-offset", type=int, default=0, help="first held-out route index")
        e.add_argument("--out", required=True, help="report directory")
        e.add_argument("--plots", type=int, default=3, help="routes to plot as SVG (default 3)")
        e.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
        e.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")

    c = sub.add_parser("compare", help="WM vs BC table under disturbances")
    c.add_argument("--wm", nargs="+", required=True, help="world-model checkpoints, one per seed")
    c.add_argument("--bc", nargs="+", required=True, help="BC checkpoints, same seeds and order")
    c.add_argument("--routes", type=int, default=20, help="held-out routes (default 20)")
    c.add_argument("--route-offset", type=int, default=0, help="first held-out route index")
    c.add_argument("--out", required=True, help="report directory")
    c.add_argument("--plots", type=int, default=3, help="routes to plot as SVG (default 3)")
    c.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    c.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")

    i = sub.add_parser("imagine", help="prior-only rollouts from held-out episode starts")
    i.add_argument("--ckpt", required=True, help="checkpoint")
    i.add_argument("--data", required=True, help="dataset directory")
    i.add_argument("--episodes", type=int, default=4, help="episode starts, taken from the end of the dataset")
    i.add_argument("--horizon", type=int, default=11, help="imagined steps (default 11)")
    i.add_argument("--seed", type=int, default=0, help="noise seed")
    i.add_argument("--zero-noise", action="store_true", help="use eps = 0 (prior means)")
    i.add_argument("--out", required=True, help="output directory for PPM frame grids")
    i.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    return p


def _threads(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _write_resolved(path: Path, values: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v if not isinstance(v, (list, tuple)) else ','.join(map(str, v))}\n"
             for k, v in values.items()]
    path.write_text("".join(lines))


def _jobs(n: int) -> int:
    if n < 1:
        raise UsageError("--jobs must be at least 1")
    return n


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .training import generate_expert_dataset

    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    out = Path(args.out)
    manifest = generate_expert_dataset(args.episodes, args.seed, out, jobs=_jobs(args.jobs))
    _write_resolved(out / "resolved.cfg", {"command": "gen-data", "episodes": args.episodes,
                                           "seed": args.seed, "out": out})
    print(f"wrote {manifest['episodes']} episodes from {len(manifest['routes'])} routes "
          f"({manifest['skipped_routes']} skipped) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, load_dataset, train

    config = TrainConfig.load(args.config).with_overrides(
        seed=args.seed, total_steps=args.steps, batch_size=args.batch_size)
    if args.bc:
        config = config.as_bc()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_csv = Path(args.log) if args.log else out.with_suffix(".csv")
    out.with_suffix(".cfg").write_text(config.dumps())
    data = load_dataset(args.data)
    if config.holdout:
        data, _ = data.split(config.holdout)

    def progress(step, loss):
        if step % 50 == 0:
            log.info("step %d total %.4f kl %.4f action_l1 %.4f", step, loss.total, loss.kl, loss.action_l1)

    with _threads(args.deterministic):
        result = train(config, data, out, log_csv, progress)
    last = result.epoch_rows[-1]
    print(f"trained {config.total_steps} steps in {result.seconds:.0f}s; final epoch total "
          f"{last['total']:.4f}; checkpoint {out}")
    return EXIT_OK


def _route_seeds(args):
    from .evaluation import eval_route_seeds

    if args.routes < 1:
        raise UsageError("--routes must be at least 1")
    return eval_route_seeds(args.routes, args.route_offset)


def _plot_routes(out: Path, seeds, columns: dict[str, list], prefix: str, n: int) -> None:
    from . import sim2d
    from .evaluation import emit_plots

    for seed in seeds[:n]:
        trajs = []
        for label, runs in columns.items():
            for r in runs:
                if r.trajectory.route_seed == seed:
                    r.trajectory.label = label
                    trajs.append(r.trajectory)
                    break
        emit_plots(trajs, sim2d.generate_route(seed), out / f"{prefix}_route_{seed}.svg")


def cmd_eval(args, fractions) -> int:
    from . import evaluation as ev

    seeds = _route_seeds(args)
    out = Path(args.out)
    stem = "disturb" if fractions else "eval"
    if args.expert == bool(args.ckpt):
        raise UsageError("give either --ckpt or --expert")
    with _threads(args.deterministic):
        if args.expert:
            runs = ev.closed_loop_runs(ev.ExpertController(), seeds, fractions)
            report = ev.ExperimentReport(f"{stem}: expert", {"expert": [ev.SeedSummary("expert", runs)]})
        else:
            summaries = [ev.SeedSummary(Path(c).stem, ev.evaluate_checkpoint(c, seeds, fractions,
                                                                               jobs=_jobs(args.jobs)))
                         for c in args.ckpt]
            report = ev.ExperimentReport(f"{stem}: policy", {"policy": summaries})
    report.settings.update({"routes": len(seeds), "disturbance_fractions": list(fractions)})
    keys = ("route_completion", "completion_no_crash", "completed_km", "driving_score", "reward")
    if fractions:
        keys += ("recovery_rate",)
    csv_path, _ = report.write(out, stem)
    (out / f"{stem}.txt").write_text(report.text_table(keys))
    first = next(iter(report.columns.values()))[0]
    _plot_routes(out, seeds, {first.label: first.runs}, stem, args.plots)
    _write_resolved(out / f"{stem}_resolved.cfg", {
        "command": stem, "ckpt": args.ckpt or "expert", "routes": args.routes,
        "route_offset": args.route_offset, "jobs": args.jobs, "deterministic": int(args.deterministic)})
    sys.stdout.write(report.text_table(keys))
    print(f"report: {csv_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from . import evaluation as ev

    seeds = _route_seeds(args)
    out = Path(args.out)
    with _threads(args.deterministic):
        report = ev.compare_wm_vs_bc(args.wm, args.bc, seeds, jobs=_jobs(args.jobs))
    report.write(out, "compare", reference=ev.PAPER_REFERENCE)
    _plot_routes(out, seeds, {"WM": report.columns["WM"][0].runs, "BC": report.columns["BC"][0].runs},
                 "compare", args.plots)
    _write_resolved(out / "compare_resolved.cfg", {
        "command": "compare", "wm": args.wm, "bc": args.bc, "routes": args.routes,
        "route_offset": args.route_offset, "jobs": args.jobs, "deterministic": int(args.deterministic)})
    sys.stdout.write(report.text_table(reference=ev.PAPER_REFERENCE))
    return EXIT_OK


def cmd_imagine(args) -> int:
    import numpy as np

    from .imagery import imagined_frame_grid, write_ppm
    from .training import load_dataset
    from .worldmodel import episode_start, imagine_rollout, load_checkpoint

    if args.horizon < 1 or args.episodes < 1:
        raise UsageError("--horizon and --episodes must be at least 1")
    model, _ = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    chunk = data.take(slice(max(len(data) - args.episodes, 0), len(data)))
    b = len(chunk)
    d = model.cfg.state_dim
    if args.zero_noise:
        eps = np.zeros((args.horizon, b, d), dtype=np.float32)
    else:
        eps = np.random.default_rng(args.seed).standard_normal((args.horizon, b, d)).astype(np.float32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _threads(args.deterministic):
        h, s = episode_start(model, chunk.raster[:, 0], chunk.nav[:, 0], chunk.speed[:, 0])
        steps = imagine_rollout(model, h, s, args.horizon, eps)
    rasters = np.stack([st.raster for st in steps], axis=1)  # (B, K, S, S, 3)
    logits = np.stack([st.bev_logits for st in steps], axis=1)
    z = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    sum_err = float(np.abs(probs.astype(np.float64).sum(axis=-1) - 1.0).max())
    in_range = bool(rasters.min() >= 0.0 and rasters.max() <= 1.0)
    for k in range(b):
        write_ppm(out / f"imagined_{k:02d}.ppm", imagined_frame_grid(chunk.raster[k, 0], rasters[k], logits[k]))
    np.save(out / "imagined_actions.npy", np.stack([st.action for st in steps], axis=1))
    _write_resolved(out / "imagine_resolved.cfg", {
        "command": "imagine", "ckpt": args.ckpt, "data": args.data, "episodes": b,
        "horizon": args.horizon, "seed": args.seed, "zero_noise": int(args.zero_noise)})
    summary = {"episodes": b, "horizon": args.horizon, "max_softmax_sum_error": sum_err,
               "raster_in_unit_range": in_range, "prior_calls": model.prior_calls}
    print(json.dumps(summary, sort_keys=True))
    if sum_err > 1e-6 or not in_range:
        raise InvariantFailure(f"imagined frames violate decoder invariants: {summary}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .container import ContainerError
    from .evaluation import IncompatibleCheckpoints, InvariantViolation
    from .training import ConfigError, TrainingDiverged

    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args, ())
        if args.command == "disturb":
            from .evaluation import DISTURBANCE_FRACTIONS

            return cmd_eval(args, DISTURBANCE_FRACTIONS)
        if args.command == "compare":
            return cmd_compare(args)
        return cmd_imagine(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"ldwm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantFailure, InvariantViolation, IncompatibleCheckpoints, TrainingDiverged) as exc:
        print(f"ldwm {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, ContainerError) as exc:
        print(f"ldwm {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"ldwm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
