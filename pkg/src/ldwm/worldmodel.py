"""Latent state machinery: history GRU, posterior state estimator, action-conditioned
prior (the world model), driving policy, decoders and imagination rollouts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .distributions import DiagonalGaussian, reparam_sample
from .encoder import EncoderConfig, PerceptionEncoder
from .nn import MLP, GRUCell, MlpSpec, Module

N_BEV_CLASSES = 4


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    history_dim: int = 128
    state_dim: int = 32
    action_embed_dim: int = 16
    head_width: int = 256
    policy_width: int = 128
    decoder_width: int = 128
    # starting std of the state Gaussians; a unit std buries the mean under sampling noise
    init_log_std: float = -2.3

    def to_flat(self) -> dict[str, float]:
        flat = {f"encoder.{k}": float(v) for k, v in asdict(self.encoder).items()}
        flat.update({k: float(v) for k, v in asdict(self).items() if k != "encoder"})
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, float]) -> "ModelConfig":
        enc_kw = {}
        for f in fields(EncoderConfig):
            v = flat[f"encoder.{f.name}"]
            enc_kw[f.name] = bool(v) if f.type in (bool, "bool") else int(v)
        kw = {f.name: (float if f.type in (float, "float") else int)(flat[f.name])
              for f in fields(cls) if f.name != "encoder"}
        return cls(encoder=EncoderConfig(**enc_kw), **kw)


@dataclass
class StepOutput:
    action: Tensor
    history: Tensor


class WorldModel(Module):
    """All networks of the system; checkpointed together."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        e, h, s, a = cfg.encoder.obs_dim, cfg.history_dim, cfg.state_dim, cfg.action_embed_dim
        w = cfg.head_width
        self.encoder = PerceptionEncoder(cfg.encoder, rng)
        self.action_mlp = MLP("action_mlp", MlpSpec((2, 32, a), ("relu", "none")), rng)
        self.gru = GRUCell("history", s, h, rng)
        self.posterior_net = MLP("posterior", MlpSpec((e + h + a, w, w, 2 * s)), rng)
        self.prior_net = MLP("prior", MlpSpec((h + a, w, w, 2 * s)), rng)
        for net in (self.posterior_net, self.prior_net):
            net.layers[-1].bias.data[s:] = cfg.init_log_std
        p = cfg.policy_width
        self.policy_net = MLP("policy", MlpSpec((s, p, p, p, 2), ("relu", "relu", "relu", "tanh")), rng)
        n = cfg.encoder.raster_size
        d = cfg.decoder_width
        self.raster_decoder = MLP("decode_raster",
                                  MlpSpec((h + s, d, n * n * cfg.encoder.channels), ("relu", "sigmoid")), rng)
        self.bev_decoder = MLP("decode_bev", MlpSpec((h + s, d, n * n * N_BEV_CLASSES)), rng)
        self.prior_calls = 0

    # -- networks -----------------------------------------------------------

    def embed_action(self, action) -> Tensor:
        return self.action_mlp(action if isinstance(action, Tensor) else Tensor(action))

    def history_update(self, history: Tensor, state: Tensor) -> Tensor:
        return self.gru(history, state)

    def posterior(self, obs: Tensor, history: Tensor, expert_action) -> DiagonalGaussian:
        x = ad.concat([obs, history, self.embed_action(expert_action)], axis=-1)
        return DiagonalGaussian.from_head(self.posterior_net(x))

    def prior(self, history: Tensor, policy_action) -> DiagonalGaussian:
        self.prior_calls += 1
        x = ad.concat([history, self.embed_action(policy_action)], axis=-1)
        return DiagonalGaussian.from_head(self.prior_net(x))

    def policy(self, state: Tensor) -> Tensor:
        return self.policy_net(state)

    def decode_raster(self, history: Tensor, state: Tensor) -> Tensor:
        lead = state.shape[:-1]
        n, c = self.cfg.encoder.raster_size, self.cfg.encoder.channels
        out = self.raster_decoder(ad.concat([history, state], axis=-1))
        return ad.reshape(out, lead + (n, n, c))

    def decode_bev(self, history: Tensor, state: Tensor) -> Tensor:
        lead = state.shape[:-1]
        n = self.cfg.encoder.raster_size
        out = self.bev_decoder(ad.concat([history, state], axis=-1))
        return ad.reshape(out, lead + (n, n, N_BEV_CLASSES))

    # -- helpers ------------------------------------------------------------

    def initial_history(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.cfg.history_dim), dtype=np.float32))

    def initial_action(self, batch: int) -> np.ndarray:
        return np.zeros((batch, 2), dtype=np.float32)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ValueError(f"checkpoint is missing {len(missing)} arrays, e.g. {missing[:3]}")
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise ValueError(
                    f"checkpoint array {name!r} has shape {arrays[name].shape}, model expects {p.data.shape}"
                )
            p.data = np.array(arrays[name], dtype=np.float32)


# ---------------------------------------------------------------------------
# checkpoints

CONFIG_PREFIX = "config."


def save_checkpoint(path, model: WorldModel, extra: dict[str, float] | None = None) -> None:
    arrays = dict(model.state_dict())
    for k, v in model.cfg.to_flat().items():
        arrays[CONFIG_PREFIX + "model." + k] = np.array([v], dtype=np.float32)
    for k, v in (extra or {}).items():
        arrays[CONFIG_PREFIX + k] = np.array([v], dtype=np.float32)
    container.save(path, arrays)


def load_checkpoint(path) -> tuple[WorldModel, dict[str, float]]:
    arrays = container.load(path)
    prefix = CONFIG_PREFIX + "model."
    flat = {k[len(prefix):]: float(v[0]) for k, v in arrays.items() if k.startswith(prefix)}
    try:
        cfg = ModelConfig.from_flat(flat)
    except KeyError as exc:
        raise ValueError(f"{Path(path).name}: checkpoint lacks model config entry {exc}") from None
    model = WorldModel(cfg)
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith(CONFIG_PREFIX)})
    extra = {k[len(CONFIG_PREFIX):]: float(v[0]) for k, v in arrays.items()
             if k.startswith(CONFIG_PREFIX) and not k.startswith(prefix)}
    return model, extra


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class ImaginedStep:
    history: np.ndarray
    state: np.ndarray
    action: np.ndarray
    raster: np.ndarray
    bev_logits: np.ndarray


def imagine_rollout(model: WorldModel, history: Tensor, state: Tensor, horizon: int,
                    eps: np.ndarray) -> list[ImaginedStep]:
    """Policy + prior + history, no observations; ``eps`` is (horizon, B, D_s)."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    eps = np.asarray(eps, dtype=np.float32)
    if eps.shape[0] < horizon:
        raise ValueError(f"need {horizon} noise draws, got {eps.shape[0]}")
    steps: list[ImaginedStep] = []
    h, s = history, state
    with ad.no_grad():
        for k in range(horizon):
            a = model.policy(s)
            g = model.prior(h, a)
            s_next = reparam_sample(g, eps[k])
            raster = model.decode_raster(h, s_next)
            bev = model.decode_bev(h, s_next)
            h = model.history_update(h, s_next)
            s = s_next
            steps.append(ImaginedStep(h.data.copy(), s.data.copy(), a.data.copy(),
                                      raster.data.copy(), bev.data.copy()))
    return steps


def episode_start(model: WorldModel, raster, nav, speed) -> tuple[Tensor, Tensor]:
    """(H_0, s_0) from the first frame of each episode: posterior mean, zero history."""
    raster = np.asarray(raster, dtype=np.float32)
    b = raster.shape[0]
    with ad.no_grad():
        o = model.encoder.encode(raster, raster, nav, speed, np.zeros((b, 3), dtype=np.float32))
        h0 = model.initial_history(b)
        s0 = model.posterior(o, h0, model.initial_action(b)).mean
        h1 = model.history_update(h0, s0)
    return h1, s0


class DeploymentSession:
    """Recurrent runtime state (history, previous action) for a batch of vehicles.

    Runs encoder -> posterior mean -> policy -> history update. The prior is
    never evaluated.
    """

    def __init__(self, model: WorldModel, batch: int = 1):
        self.model = model
        self.history = model.initial_history(batch)
        self.prev_action = model.initial_action(batch)

    def step(self, raster, prev_raster, nav, speed, motion) -> np.ndarray:
        action, self.history = deployment_step(
            self.model, raster, prev_raster, nav, speed, motion, self.history, self.prev_action)
        self.prev_action = action
        return action


def deployment_step(model: WorldModel, raster, prev_raster, nav, speed, motion,
                    history: Tensor, prev_action: np.ndarray) -> tuple[np.ndarray, Tensor]:
    with ad.no_grad():
        o = model.encoder.encode(raster, prev_raster, nav, speed, motion)
        q = model.posterior(o, history, prev_action)
        s = q.mean
        action = model.policy(s)
        history = model.history_update(history, s)
    return action.data.copy(), history
