"""Expert data generation, episode unrolling with posterior/prior mixing, and the
training loop for world-model (WM) and behavior-cloning (BC) modes."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import container
from . import sim2d
from .autodiff import NonFiniteError, Tensor
from .distributions import (balanced_kl, categorical_ce, gaussian_nll, kl_divergence,
                            laplace_nll, reparam_sample)
from .encoder import EncoderConfig
from .nn import Adam, OneCycleSchedule, clip_grad_norm
from .worldmodel import ModelConfig, WorldModel, save_checkpoint

log = logging.getLogger(__name__)

EPISODE_LEN = 12
EPISODE_ARRAYS = ("raster", "nav", "speed", "ego_motion", "expert_action", "bev_label")
DATASET_FORMAT_VERSION = 1
TRAIN_ROUTE_SEED_LIMIT = 10_000_000  # evaluation routes use seeds at or above this


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    raster: np.ndarray  # (N, T, S, S, 3)
    nav: np.ndarray  # (N, T, S, S)
    speed: np.ndarray  # (N, T)
    ego_motion: np.ndarray  # (N, T, 3)
    expert_action: np.ndarray  # (N, T, 2)
    bev_label: np.ndarray  # (N, T, S, S)

    def __len__(self) -> int:
        return self.raster.shape[0]

    def take(self, index) -> "Dataset":
        return Dataset(**{k: getattr(self, k)[index] for k in EPISODE_ARRAYS})

    def split(self, n_holdout: int) -> tuple["Dataset", "Dataset"]:
        n = len(self)
        return self.take(slice(0, n - n_holdout)), self.take(slice(n - n_holdout, n))


def drive_expert(route: sim2d.RouteMap, cfg: sim2d.SimConfig = sim2d.DEFAULT_CONFIG,
                 max_steps: int | None = None) -> dict[str, np.ndarray]:
    """Run the expert to the end of ``route``; per-frame observations and actions."""
    if max_steps is None:
        max_steps = int(route.length / (0.3 * cfg.target_speed * cfg.dt)) + 50
    state = route.start_state(cfg)
    prev = state
    monitor = sim2d.InfractionMonitor(route, cfg)
    frames: dict[str, list] = {k: [] for k in EPISODE_ARRAYS}
    for step in range(max_steps):
        progress, *_ = route.project(state.x, state.y, around=monitor.progress)
        obs = sim2d.render_observation(state, prev, route, progress, cfg)
        action = sim2d.expert_action(state, route, progress, cfg)
        frames["raster"].append(obs.raster)
        frames["nav"].append(obs.nav)
        frames["speed"].append(obs.speed)
        frames["ego_motion"].append(obs.ego_motion)
        frames["expert_action"].append(action.as_array())
        frames["bev_label"].append(sim2d.render_bev_label(state, route, progress, cfg))
        prev, state = state, sim2d.bicycle_step(state, action, cfg.dt, cfg)
        _, _, _, events = monitor.update(step, state)
        if events:
            raise sim2d.ExpertUndefined(f"expert infraction {events} on route {route.seed}")
        if monitor.progress >= route.length - 1.0:
            break
    else:
        raise sim2d.ExpertUndefined(f"expert did not finish route {route.seed}")
    return {k: np.asarray(v, dtype=np.float32) for k, v in frames.items()}


def episode_filename(i: int) -> str:
    return f"episode_{i:05d}.ldwm"


def _drive_route(route_seed: int, cfg: sim2d.SimConfig):
    try:
        return drive_expert(sim2d.generate_route(route_seed, cfg), cfg)
    except sim2d.ExpertUndefined as exc:
        return str(exc)


def generate_expert_dataset(n_episodes: int, seed: int, out_dir,
                            cfg: sim2d.SimConfig = sim2d.DEFAULT_CONFIG, jobs: int = 1) -> dict:
    """Write ``n_episodes`` expert episodes plus ``manifest.json``; returns the manifest.

    Route seeds are drawn in a fixed order and consumed in that order, so the
    output does not depend on ``jobs``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    written = skipped = 0
    routes: list[int] = []
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while written < n_episodes:
            seeds = [int(rng.integers(0, TRAIN_ROUTE_SEED_LIMIT)) for _ in range(max(jobs, 1))]
            if pool is None:
                driven = [_drive_route(s, cfg) for s in seeds]
            else:
                driven = list(pool.map(_drive_route, seeds, [cfg] * len(seeds)))
            for route_seed, frames in zip(seeds, driven):
                if written >= n_episodes:
                    break
                if isinstance(frames, str):
                    log.warning("skipping route %d: %s", route_seed, frames)
                    skipped += 1
                    continue
                routes.append(route_seed)
                n_frames = len(frames["speed"])
                for start in range(0, n_frames - EPISODE_LEN + 1, EPISODE_LEN):
                    if written >= n_episodes:
                        break
                    ep = {k: v[start:start + EPISODE_LEN] for k, v in frames.items()}
                    container.save(out / episode_filename(written), ep)
                    written += 1
    finally:
        if pool is not None:
            pool.shutdown()
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "episodes": written,
        "episode_length": EPISODE_LEN,
        "seed": seed,
        "routes": routes,
        "skipped_routes": skipped,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    n = manifest["episodes"]
    if n < 1:
        raise ValueError(f"dataset {directory} is empty")
    eps = [container.load(directory / episode_filename(i)) for i in range(n)]
    return Dataset(**{k: np.stack([e[k] for e in eps]) for k in EPISODE_ARRAYS})


# ---------------------------------------------------------------------------
# configuration


REQUIRED_KEYS = ("learning_rate", "batch_size", "total_steps", "p_prior", "kl_weight",
                 "seed", "bc", "clip_norm")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    total_steps: int = 20_000
    p_prior: float = 0.25
    kl_weight: float = 1.0
    seed: int = 0
    bc: bool = False
    clip_norm: float = 100.0
    free_bits: float = 0.0
    kl_balance: float = 0.0  # share of the KL gradient sent to the prior; 0 = plain KL
    decoders: bool = True
    warmup_frac: float = 0.3
    div: float = 25.0
    final_div: float = 1e4
    holdout: int = 0
    state_dim: int = 32
    width: int = 64
    heads: int = 8
    blocks: int = 4
    obs_dim: int = 64
    history_dim: int = 128
    head_width: int = 256
    policy_width: int = 128
    decoder_width: int = 128
    init_log_std: float = -2.3

    def __post_init__(self):
        if not 0.0 <= self.p_prior <= 1.0:
            raise ValueError(f"p_prior must lie in [0, 1], got {self.p_prior}")
        if self.kl_weight < 0:
            raise ValueError(f"kl_weight must be non-negative, got {self.kl_weight}")
        if not 0.0 <= self.kl_balance <= 1.0:
            raise ValueError(f"kl_balance must lie in [0, 1], got {self.kl_balance}")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be positive")

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(width=self.width, heads=self.heads, blocks=self.blocks,
                            obs_dim=self.obs_dim)
        return ModelConfig(encoder=enc, history_dim=self.history_dim, state_dim=self.state_dim,
                           head_width=self.head_width, policy_width=self.policy_width,
                           decoder_width=self.decoder_width, init_log_std=self.init_log_std)

    def as_bc(self) -> "TrainConfig":
        """The ablation: prior and KL removed, posterior mean carried, no mixing."""
        return replace(self, bc=True, kl_weight=0.0, p_prior=0.0)

    def schedule(self) -> OneCycleSchedule:
        return OneCycleSchedule(self.learning_rate, self.total_steps, self.warmup_frac,
                                self.div, self.final_div)

    # flat key=value text

    def dumps(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def parse(cls, text: str, require: tuple[str, ...] = REQUIRED_KEYS) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        values: dict[str, object] = {}
        problems: list[str] = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"line {lineno}: expected key=value, got {raw!r}")
                continue
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in known:
                problems.append(f"line {lineno}: unknown key {key!r}")
                continue
            try:
                values[key] = _coerce(known[key].type, value)
            except ValueError:
                problems.append(f"line {lineno}: bad value {value!r} for {key}")
        for key in require:
            if key not in values:
                problems.append(f"missing key {key!r}")
        if problems:
            raise ConfigError(problems)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.parse(Path(path).read_text())

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(kind, value: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(value)
    if kind == "int":
        f = float(value)
        if f != int(f):
            raise ValueError(value)
        return int(f)
    return float(value)


# ---------------------------------------------------------------------------
# unrolling


@dataclass
class NoiseDraws:
    """All randomness of one unroll: posterior/prior eps (T, B, D) and mixing mask (T, B)."""

    posterior: np.ndarray
    prior: np.ndarray
    use_prior: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator, steps: int, batch: int, dim: int,
               p_prior: float) -> "NoiseDraws":
        post = rng.standard_normal((steps, batch, dim)).astype(np.float32)
        prior = rng.standard_normal((steps, batch, dim)).astype(np.float32)
        mask = rng.random((steps, batch)) < p_prior
        return cls(post, prior, mask)

    @classmethod
    def zeros(cls, steps: int, batch: int, dim: int) -> "NoiseDraws":
        z = np.zeros((steps, batch, dim), dtype=np.float32)
        return cls(z, z.copy(), np.zeros((steps, batch), dtype=bool))


@dataclass
class LossBreakdown:
    recon_raster: float
    recon_bev: float
    action_l1: float
    kl: float
    total: float
    total_tensor: Tensor | None = field(default=None, repr=False)

    def row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("recon_raster", "recon_bev", "action_l1", "kl", "total")}


def _stack_time(items: list[Tensor]) -> Tensor:
    """List of (B, D) -> (B, T, D)."""
    b, d = items[0].shape
    return ad.concat([ad.reshape(x, (b, 1, d)) for x in items], axis=1)


def unroll_episode(model: WorldModel, batch: Dataset, noise: NoiseDraws,
                   bc: bool = False, kl_weight: float = 1.0, free_bits: float = 0.0,
                   decoders: bool = True, kl_balance: float = 0.0) -> LossBreakdown:
    """Sum over time of reconstruction NLLs plus KL, averaged over the batch."""
    b, t = batch.speed.shape
    obs = model.encoder.encode_sequence(batch.raster, batch.nav, batch.speed, batch.ego_motion)
    history = model.initial_history(b)
    policy_prev = Tensor(model.initial_action(b))
    zero_action = model.initial_action(b)
    histories, carried_states, actions = [], [], []
    kl_terms = []
    for k in range(t):
        expert_prev = batch.expert_action[:, k - 1] if k > 0 else zero_action
        q = model.posterior(obs[:, k], history, expert_prev)
        if bc:
            carried = q.mean
        else:
            p = model.prior(history, policy_prev)
            if kl_balance:
                kl_row = balanced_kl(q, p, kl_balance, free_bits or None)
            else:
                kl_row = kl_divergence(q, p, free_bits or None)
            kl_terms.append(ad.mean(kl_row))
            carried = reparam_sample(q, noise.posterior[k])
            mask = noise.use_prior[k]
            if mask.any():
                s_prior = reparam_sample(p, noise.prior[k])
                m = Tensor(np.repeat(mask[:, None], carried.shape[-1], axis=1).astype(np.float32))
                carried = ad.add(carried, ad.mul(m, ad.sub(s_prior, carried)))
        histories.append(history)
        carried_states.append(carried)
        action = model.policy(carried)
        actions.append(action)
        history = model.history_update(history, carried)
        policy_prev = action

    action_l1 = ad.scale(laplace_nll(_stack_time(actions), batch.expert_action), t)
    terms = {"action_l1": action_l1}
    if decoders:
        hs, ss = _stack_time(histories), _stack_time(carried_states)
        terms["recon_raster"] = ad.scale(gaussian_nll(model.decode_raster(hs, ss), batch.raster), t)
        terms["recon_bev"] = ad.scale(categorical_ce(model.decode_bev(hs, ss), batch.bev_label), t)
    if kl_terms:
        kl = kl_terms[0]
        for term in kl_terms[1:]:
            kl = ad.add(kl, term)
        terms["kl"] = kl
    total = None
    for name, value in terms.items():
        weighted = ad.scale(value, kl_weight) if name == "kl" else value
        total = weighted if total is None else ad.add(total, weighted)
    vals = {k: float(v.data) for k, v in terms.items()}
    return LossBreakdown(
        recon_raster=vals.get("recon_raster", 0.0),
        recon_bev=vals.get("recon_bev", 0.0),
        action_l1=vals["action_l1"],
        kl=vals.get("kl", 0.0),
        total=float(total.data),
        total_tensor=total,
    )


def action_l1(model: WorldModel, data: Dataset, batch_size: int = 64) -> float:
    """Mean per-step L1 of the deterministic (posterior-mean) policy against the expert."""
    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            chunk = data.take(slice(start, start + batch_size))
            b, t = chunk.speed.shape
            loss = unroll_episode(model, chunk, NoiseDraws.zeros(t, b, model.cfg.state_dim),
                                  bc=True, kl_weight=0.0, decoders=False)
            total += loss.action_l1 / t * b
            count += b
    return total / count


# ---------------------------------------------------------------------------
# training loop


LOG_FIELDS = ("step", "lr", "recon_raster", "recon_bev", "action_l1", "kl", "total")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: WorldModel
    log_rows: list[dict[str, float]]
    epoch_rows: list[dict[str, float]]
    config: TrainConfig
    seconds: float


def train(config: TrainConfig, data: Dataset, out_ckpt=None, log_csv=None,
          progress: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Adam + 1cycle over shuffled episode batches; BC mode when ``config.bc``."""
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    if config.bc:
        config = config.as_bc()
    t0 = time.perf_counter()
    model = WorldModel(config.model_config(), seed=config.seed)
    params = model.parameters()
    opt = Adam(params)
    schedule = config.schedule()
    rng = np.random.default_rng(config.seed + 7919)
    n = len(data)
    batch = min(config.batch_size, n)
    per_epoch = max(n // batch, 1)
    rows: list[dict[str, float]] = []
    epoch_rows: list[dict[str, float]] = []
    epoch_acc: list[dict[str, float]] = []
    order = rng.permutation(n)
    for step in range(config.total_steps):
        pos = step % per_epoch
        if pos == 0 and step > 0:
            epoch_rows.append(_epoch_mean(len(epoch_rows) + 1, epoch_acc))
            epoch_acc = []
            order = rng.permutation(n)
        idx = np.sort(order[pos * batch:(pos + 1) * batch])
        chunk = data.take(idx)
        b, t = chunk.speed.shape
        noise = NoiseDraws.sample(rng, t, b, model.cfg.state_dim, config.p_prior)
        lr = schedule(step)
        opt.zero_grad()
        try:
            loss = unroll_episode(model, chunk, noise, bc=config.bc, kl_weight=config.kl_weight,
                                  free_bits=config.free_bits, decoders=config.decoders,
                                  kl_balance=config.kl_balance)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from None
        bad = [k for k, v in loss.row().items() if not math.isfinite(v)]
        if bad:
            raise TrainingDiverged(f"step {step}: non-finite loss component(s) {bad}")
        ad.backward(loss.total_tensor)
        loss.total_tensor = None
        clip_grad_norm(params, config.clip_norm)
        opt.step(lr)
        row = {"step": step, "lr": lr, **loss.row()}
        rows.append(row)
        epoch_acc.append(row)
        if progress:
            progress(step, loss)
    if epoch_acc:
        epoch_rows.append(_epoch_mean(len(epoch_rows) + 1, epoch_acc))
    result = TrainResult(model, rows, epoch_rows, config, time.perf_counter() - t0)
    if out_ckpt is not None:
        save_checkpoint(out_ckpt, model, {f"train.{k}": float(v) for k, v in asdict(config).items()})
    if log_csv is not None:
        write_log(log_csv, rows)
        write_log(Path(log_csv).with_name(Path(log_csv).stem + "_epochs.csv"), epoch_rows,
                  ("epoch",) + LOG_FIELDS[2:])
    return result


def train_bc(config: TrainConfig, data: Dataset, out_ckpt=None, log_csv=None, progress=None) -> TrainResult:
    return train(config.as_bc(), data, out_ckpt, log_csv, progress)


def _epoch_mean(epoch: int, rows: list[dict[str, float]]) -> dict[str, float]:
    out = {"epoch": epoch}
    for k in LOG_FIELDS[2:]:
        out[k] = float(np.mean([r[k] for r in rows]))
    return out


def write_log(path, rows: list[dict[str, float]], header=LOG_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt_num(r[k]) for k in header])


def _fmt_num(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.9g}"


def config_from_checkpoint_extra(extra: dict[str, float]) -> TrainConfig:
    kw = {}
    for f in fields(TrainConfig):
        key = f"train.{f.name}"
        if key in extra:
            kw[f.name] = _coerce(f.type, repr(extra[key]) if f.type not in (bool, "bool")
                                 else str(int(extra[key])))
    return TrainConfig(**kw)
