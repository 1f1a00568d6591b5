"""Closed-loop evaluation, the disturbance-recovery experiment, the WM-vs-BC
comparison and report/plot emission."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import median
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from . import container, sim2d
from .sim2d import Action, DisturbanceSchedule, DisturbanceWindow, RecoveryCriteria, SimConfig
from .training import TRAIN_ROUTE_SEED_LIMIT, TrainConfig, config_from_checkpoint_extra
from .worldmodel import WorldModel, deployment_step, load_checkpoint

DISTURBANCE_FRACTIONS = (0.15, 0.35, 0.55, 0.75)
DISTURBANCE_STEPS = 3
DISTURBANCE_DEG = 30.0

# Table II, for annotation only
PAPER_REFERENCE = {
    "completion_no_crash": (80.0, 30.0),
    "completed_km": (0.9, 0.8),
    "driving_score": (80.0, 70.0),
    "reward": (3500.4, 2936.8),
}

# configuration keys that the ablation is allowed to change
ABLATION_KEYS = frozenset({"bc", "kl_weight", "p_prior"})


class InvariantViolation(RuntimeError):
    """An evaluation-time rule was broken (e.g. the prior ran at deployment)."""


class IncompatibleCheckpoints(ValueError):
    pass


def eval_route_seeds(n: int, start: int = 0) -> list[int]:
    """Held-out route seeds; the training generator never draws from this range."""
    return [TRAIN_ROUTE_SEED_LIMIT + start + i for i in range(n)]


# ---------------------------------------------------------------------------
# controllers


class Controller(Protocol):
    name: str

    def reset(self, n: int) -> None: ...

    def act(self, idx: np.ndarray, obs: list[sim2d.Observation], prev_rasters: list[np.ndarray],
            states: list[sim2d.VehicleState], routes: list[sim2d.RouteMap],
            progress: list[float]) -> np.ndarray: ...


class ExpertController:
    name = "expert"

    def reset(self, n: int) -> None:
        pass

    def act(self, idx, obs, prev_rasters, states, routes, progress) -> np.ndarray:
        out = []
        for st, route, s in zip(states, routes, progress):
            try:
                out.append(sim2d.expert_action(st, route, s).as_array())
            except sim2d.ExpertUndefined:
                out.append(np.zeros(2, dtype=np.float32))
        return np.asarray(out, dtype=np.float32).reshape(-1, 2)


class ConstantController:
    """Fixed action every step; the zero-steer negative control."""

    def __init__(self, steer: float = 0.0, accel: float = 0.0):
        self.action = np.array([steer, accel], dtype=np.float32)
        self.name = f"constant({steer:g},{accel:g})"

    def reset(self, n: int) -> None:
        pass

    def act(self, idx, obs, prev_rasters, states, routes, progress) -> np.ndarray:
        return np.tile(self.action, (len(idx), 1))


class PolicyController:
    """Deployment path of a trained model: encoder, posterior mean, policy, history."""

    def __init__(self, model: WorldModel, name: str = "policy"):
        self.model = model
        self.name = name

    def reset(self, n: int) -> None:
        self.history = self.model.initial_history(n).data
        self.prev_action = self.model.initial_action(n)

    def act(self, idx, obs, prev_rasters, states, routes, progress) -> np.ndarray:
        # one vehicle per call: BLAS results depend on batch size, and a route's
        # outcome must not depend on which other routes are still driving
        out = np.zeros((len(idx), 2), dtype=np.float32)
        for j, (i, o) in enumerate(zip(idx, obs)):
            k = slice(i, i + 1)
            action, history = deployment_step(
                self.model, o.raster[None], prev_rasters[j][None], o.nav[None],
                np.array([o.speed], dtype=np.float32), o.ego_motion[None],
                ad.Tensor(self.history[k]), self.prev_action[k])
            self.history[k] = history.data
            self.prev_action[k] = action
            out[j] = action[0]
        return out


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class Trajectory:
    label: str
    route_seed: int
    pose: np.ndarray  # (T, 4) state after each step
    action: np.ndarray  # (T, 2) applied action
    override_mask: np.ndarray  # (T,) bool
    windows: list[DisturbanceWindow] = field(default_factory=list)
    planned: int = 0  # disturbances scheduled, reached or not

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "pose": self.pose.astype(np.float32),
            "action": self.action.astype(np.float32),
            "override_mask": self.override_mask.astype(np.float32),
            "windows": np.array([[w.start, w.duration, w.steer] for w in self.windows],
                                dtype=np.float32).reshape(-1, 3),
            # seeds above 2**24 are not exact in float32; store them as two halves
            "route_seed": np.array(divmod(self.route_seed, 1 << 16), dtype=np.float32),
            "planned": np.array([self.planned], dtype=np.float32),
        }

    def save(self, path) -> None:
        container.save(path, self.to_arrays())

    @classmethod
    def load(cls, path, label: str = "") -> "Trajectory":
        a = container.load(path)
        hi, lo = (int(v) for v in a["route_seed"])
        windows = [DisturbanceWindow(int(s), int(d), float(st)) for s, d, st in a["windows"]]
        return cls(label, (hi << 16) + lo, a["pose"].astype(np.float64), a["action"],
                   a["override_mask"] > 0.5, windows, int(a["planned"][0]))


@dataclass
class RunResult:
    trajectory: Trajectory
    metrics: sim2d.RunMetrics


def max_steps_for(route: sim2d.RouteMap, cfg: SimConfig = sim2d.DEFAULT_CONFIG) -> int:
    return int(route.length / (0.3 * cfg.target_speed * cfg.dt)) + 50


def recompute_metrics(traj: Trajectory, cfg: SimConfig = sim2d.DEFAULT_CONFIG,
                      recovery: RecoveryCriteria | None = None) -> sim2d.RunMetrics:
    """Metrics from a logged trajectory alone; scheduled-but-unreached disturbances fail."""
    route = sim2d.generate_route(traj.route_seed, cfg)
    m = sim2d.run_metrics(traj.pose, route, cfg, traj.windows, recovery)
    if traj.planned > len(traj.windows):
        m.recoveries = list(m.recoveries) + [False] * (traj.planned - len(traj.windows))
    return m


def closed_loop_runs(controller: Controller, route_seeds: Sequence[int],
                     fractions: Sequence[float] = (), cfg: SimConfig = sim2d.DEFAULT_CONFIG,
                     max_steps: int | None = None, recovery: RecoveryCriteria | None = None,
                     label: str | None = None) -> list[RunResult]:
    """Drive every route in lockstep; the controller sees all live vehicles each step.

    Disturbances trigger the first step the vehicle's progress passes each
    fraction of the route length, alternating left and right.
    """
    routes = [sim2d.generate_route(s, cfg) for s in route_seeds]
    n = len(routes)
    caps = [max_steps or max_steps_for(r, cfg) for r in routes]
    states = [r.start_state(cfg) for r in routes]
    prev_states = list(states)
    prev_rasters: list[np.ndarray | None] = [None] * n
    monitors = [sim2d.InfractionMonitor(r, cfg) for r in routes]
    schedules = [DisturbanceSchedule() for _ in routes]
    pending = [list(fractions) for _ in routes]
    poses = [[] for _ in routes]
    actions = [[] for _ in routes]
    overridden = [[] for _ in routes]
    alive = np.ones(n, dtype=bool)
    steer = sim2d.override_steer(DISTURBANCE_DEG, cfg)
    controller.reset(n)
    step = 0
    while alive.any():
        idx = np.flatnonzero(alive)
        obs, prevs, progress = [], [], []
        for i in idx:
            s = monitors[i].progress
            o = sim2d.render_observation(states[i], prev_states[i], routes[i], s, cfg)
            if prev_rasters[i] is None:
                prev_rasters[i] = o.raster
                o.ego_motion = np.zeros(3, dtype=np.float32)
            obs.append(o)
            prevs.append(prev_rasters[i])
            progress.append(s)
        acts = controller.act(idx, obs, prevs, [states[i] for i in idx],
                              [routes[i] for i in idx], progress)
        for j, i in enumerate(idx):
            route = routes[i]
            while pending[i] and monitors[i].progress >= pending[i][0] * route.length:
                k = len(fractions) - len(pending[i])
                pending[i].pop(0)
                if schedules[i].active(step) is None:
                    sign = 1.0 if k % 2 == 0 else -1.0
                    schedules[i].add(DisturbanceWindow(step, DISTURBANCE_STEPS, sign * steer))
            proposed = Action(float(acts[j, 0]), float(acts[j, 1]))
            applied = sim2d.inject_disturbance(proposed, schedules[i], step)
            prev_rasters[i] = obs[j].raster
            prev_states[i] = states[i]
            states[i] = sim2d.bicycle_step(states[i], applied, cfg.dt, cfg)
            poses[i].append(states[i].as_array())
            actions[i].append(applied.as_array())
            overridden[i].append(schedules[i].active(step) is not None)
            _, _, _, events = monitors[i].update(step, states[i])
            done = monitors[i].progress >= route.length - 1.0
            if (events and cfg.terminate_on_infraction) or done or len(poses[i]) >= caps[i]:
                alive[i] = False
        step += 1
    results = []
    name = label or controller.name
    for i, route in enumerate(routes):
        traj = Trajectory(name, route.seed, np.asarray(poses[i], dtype=np.float64),
                          np.asarray(actions[i], dtype=np.float32), np.asarray(overridden[i]),
                          list(schedules[i].windows), len(fractions))
        results.append(RunResult(traj, recompute_metrics(traj, cfg, recovery)))
    return results


def closed_loop_run(controller: Controller, route_seed: int, fractions: Sequence[float] = (),
                    cfg: SimConfig = sim2d.DEFAULT_CONFIG, max_steps: int | None = None) -> RunResult:
    return closed_loop_runs(controller, [route_seed], fractions, cfg, max_steps)[0]


def _checked_policy_runs(model: WorldModel, route_seeds, fractions, label, cfg) -> list[RunResult]:
    before = model.prior_calls
    results = closed_loop_runs(PolicyController(model, label), route_seeds, fractions, cfg)
    if model.prior_calls != before:
        raise InvariantViolation(
            f"prior network ran {model.prior_calls - before} times during deployment")
    return results


def _worker(args) -> list[RunResult]:
    ckpt, seeds, fractions, label = args
    model, _ = load_checkpoint(ckpt)
    return _checked_policy_runs(model, seeds, fractions, label, sim2d.DEFAULT_CONFIG)


def evaluate_checkpoint(ckpt, route_seeds: Sequence[int], fractions: Sequence[float] = (),
                        label: str | None = None, jobs: int = 1,
                        cfg: SimConfig = sim2d.DEFAULT_CONFIG) -> list[RunResult]:
    """Closed-loop runs of a checkpoint; ``jobs > 1`` splits routes across processes."""
    label = label or Path(ckpt).stem
    if jobs <= 1 or len(route_seeds) < 2:
        model, _ = load_checkpoint(ckpt)
        return _checked_policy_runs(model, list(route_seeds), fractions, label, cfg)
    chunks = [list(route_seeds[i::jobs]) for i in range(jobs) if route_seeds[i::jobs]]
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(_worker, [(str(ckpt), c, tuple(fractions), label) for c in chunks]))
    by_seed = {r.trajectory.route_seed: r for part in parts for r in part}
    return [by_seed[s] for s in route_seeds]


# ---------------------------------------------------------------------------
# reports

METRIC_FIELDS = ("route_completion", "completion_no_crash", "completed_km", "driving_score",
                 "reward", "recovery_rate", "offroad", "collision", "steps")


def metric_row(m: sim2d.RunMetrics) -> dict[str, float]:
    return {
        "route_completion": m.route_completion,
        "completion_no_crash": m.completion_no_crash,
        "completed_km": m.completed_km,
        "driving_score": m.driving_score,
        "reward": m.reward,
        "recovery_rate": m.recovery_rate,
        "offroad": m.infractions["offroad"],
        "collision": m.infractions["collision"],
        "steps": m.steps,
    }


@dataclass
class SeedSummary:
    """One policy (one training seed) over a set of routes."""

    label: str
    runs: list[RunResult]

    @property
    def recoveries(self) -> list[bool]:
        return [ok for r in self.runs for ok in r.metrics.recoveries]

    def value(self, key: str) -> float:
        """Mean over routes; recovery is pooled over every disturbance."""
        if key == "recovery_rate":
            rec = self.recoveries
            return 100.0 * sum(rec) / len(rec) if rec else 100.0
        # fsum is exactly rounded, so the result does not depend on run order
        total = math.fsum(metric_row(r.metrics)[key] for r in self.runs)
        return total if key == "completed_km" else total / len(self.runs)


@dataclass
class ExperimentReport:
    title: str
    columns: dict[str, list[SeedSummary]]  # column label -> one summary per training seed
    settings: dict[str, object] = field(default_factory=dict)

    def aggregate(self, column: str, key: str) -> float:
        return float(median(s.value(key) for s in self.columns[column]))

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("column", "policy", "route_seed") + METRIC_FIELDS)
        for col, summaries in self.columns.items():
            for s in summaries:
                for r in sorted(s.runs, key=lambda r: r.trajectory.route_seed):
                    row = metric_row(r.metrics)
                    w.writerow([col, s.label, r.trajectory.route_seed] + [_fmt(row[k]) for k in METRIC_FIELDS])
        return buf.getvalue()

    def text_table(self, keys: Sequence[str] = ("completion_no_crash", "completed_km", "driving_score",
                                                  "reward", "recovery_rate"),
                   reference: dict[str, tuple[float, float]] | None = None) -> str:
        cols = list(self.columns)
        head = f"{'metric':<22}" + "".join(f"{c:>14}" for c in cols)
        if reference:
            head += f"{'paper ref':>18}"
        lines = [self.title, "=" * len(head), head, "-" * len(head)]
        for key in keys:
            line = f"{key:<22}" + "".join(f"{self.aggregate(c, key):>14.2f}" for c in cols)
            if reference and key in reference:
                a, b = reference[key]
                line += f"{f'{a:g} / {b:g}':>18}"
            lines.append(line)
        lines.append("-" * len(head))
        lines.append("per-seed values (median is reported above):")
        for c in cols:
            for s in self.columns[c]:
                vals = ", ".join(f"{k}={s.value(k):.2f}" for k in keys)
                lines.append(f"  {c} {s.label}: {vals}")
        for k, v in self.settings.items():
            lines.append(f"# {k} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str, reference=None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = out / f"{stem}.csv", out / f"{stem}.txt"
        csv_path.write_text(self.rows_csv())
        txt_path.write_text(self.text_table(reference=reference))
        for col, summaries in self.columns.items():
            for s in summaries:
                for r in s.runs:
                    r.trajectory.save(out / f"traj_{_slug(col)}_{_slug(s.label)}_{r.trajectory.route_seed}.ldwm")
        return csv_path, txt_path


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "-" for ch in text)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def disturbance_experiment(ckpts: Sequence, route_seeds: Sequence[int], label: str = "policy",
                           fractions: Sequence[float] = DISTURBANCE_FRACTIONS, jobs: int = 1,
                           recovery: RecoveryCriteria | None = None) -> ExperimentReport:
    if not route_seeds:
        raise ValueError("need at least one route")
    summaries = [SeedSummary(Path(c).stem, evaluate_checkpoint(c, route_seeds, fractions, jobs=jobs))
                 for c in ckpts]
    crit = recovery or RecoveryCriteria()
    return ExperimentReport(f"disturbance experiment: {label}", {label: summaries}, {
        "routes": len(route_seeds),
        "disturbance_fractions": list(fractions),
        "override": f"{DISTURBANCE_DEG:g} deg for {DISTURBANCE_STEPS} steps, alternating",
        "recovery": f"|lat|<={crit.max_lateral} m, |heading|<{crit.max_heading_deg} deg within {crit.within_s} s",
    })


def check_ablation_pair(wm_ckpt, bc_ckpt) -> tuple[TrainConfig, TrainConfig]:
    """Both checkpoints must differ only in the ablation keys."""
    _, wm_extra = load_checkpoint(wm_ckpt)
    _, bc_extra = load_checkpoint(bc_ckpt)
    wm, bc = config_from_checkpoint_extra(wm_extra), config_from_checkpoint_extra(bc_extra)
    a, b = asdict(wm), asdict(bc)
    diff = sorted(k for k in a if a[k] != b[k] and k not in ABLATION_KEYS)
    if diff:
        detail = ", ".join(f"{k}: {a[k]!r} vs {b[k]!r}" for k in diff)
        raise IncompatibleCheckpoints(
            f"{Path(wm_ckpt).name} and {Path(bc_ckpt).name} differ beyond the ablation "
            f"(allowed: {', '.join(sorted(ABLATION_KEYS))}); also differ in {detail}")
    if wm.bc or not bc.bc:
        raise IncompatibleCheckpoints("first checkpoint must be world-model mode, second behavior cloning")
    return wm, bc


def compare_wm_vs_bc(wm_ckpts: Sequence, bc_ckpts: Sequence, route_seeds: Sequence[int],
                     fractions: Sequence[float] = DISTURBANCE_FRACTIONS, jobs: int = 1) -> ExperimentReport:
    if len(wm_ckpts) != len(bc_ckpts) or not wm_ckpts:
        raise ValueError("need one BC checkpoint per WM checkpoint")
    for w, b in zip(wm_ckpts, bc_ckpts):
        check_ablation_pair(w, b)
    wm = disturbance_experiment(wm_ckpts, route_seeds, "WM", fractions, jobs)
    bc = disturbance_experiment(bc_ckpts, route_seeds, "BC", fractions, jobs)
    report = ExperimentReport("WM vs BC under steering disturbances",
                              {"WM": wm.columns["WM"], "BC": bc.columns["BC"]}, dict(wm.settings))
    report.settings["training_seeds"] = len(wm_ckpts)
    report.settings["paper_reference"] = "annotation only, not comparable at this scale"
    return report


# ---------------------------------------------------------------------------
# plots


def emit_plots(trajectories: Sequence[Trajectory], route: sim2d.RouteMap, path,
               title: str | None = None) -> Path:
    """Top-down SVG: centerline, lane edges, one path per trajectory, arrows at disturbances."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import FancyArrowPatch

    styles = [("tab:blue", "-"), ("tab:orange", "--"), ("tab:green", "-."), ("tab:purple", ":")]
    with matplotlib.rc_context({"svg.hashsalt": "ldwm", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 6))
        wp = route.waypoints
        d = np.gradient(wp, axis=0)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        normal = np.stack([-d[:, 1], d[:, 0]], axis=1)
        for side, gid in ((1, "lane-left"), (-1, "lane-right")):
            edge = wp + side * route.half_width * normal
            ax.plot(edge[:, 0], edge[:, 1], color="0.6", lw=0.8, gid=gid)
        ax.plot(wp[:, 0], wp[:, 1], color="0.3", lw=0.6, ls=(0, (4, 3)), gid="centerline")
        for i, (ox, oy, r) in enumerate(route.obstacles):
            ax.add_patch(plt.Circle((ox, oy), r, color="0.2", gid=f"obstacle-{i}"))
        marker = 0
        for k, traj in enumerate(trajectories):
            color, ls = styles[k % len(styles)]
            ax.plot(traj.pose[:, 0], traj.pose[:, 1], color=color, ls=ls, lw=1.5,
                    label=traj.label or f"policy {k}", gid=f"trajectory-{k}")
            for w in traj.windows:
                if w.start >= len(traj.pose):
                    continue
                x, y, heading = traj.pose[w.start, :3]
                # arrow points to the side the override pushes towards
                d = 6.0 * math.copysign(1.0, w.steer)
                dx, dy = -math.sin(heading) * d, math.cos(heading) * d
                ax.add_patch(FancyArrowPatch((x, y), (x + dx, y + dy), arrowstyle="->",
                                             mutation_scale=12, color="red", lw=1.5,
                                             gid=f"disturbance-{marker}"))
                marker += 1
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_title(title or f"route {route.seed}")
        ax.legend(loc="best", fontsize=8)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix.lower() == ".png":
            fig.savefig(path, format="png", dpi=120)
        else:
            fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
