import numpy as np
import pytest

from ldwm.encoder import EncoderConfig
from ldwm.training import EPISODE_LEN, Dataset, TrainConfig
from ldwm.worldmodel import ModelConfig, WorldModel


def tiny_model_config(**kw) -> ModelConfig:
    enc = EncoderConfig(raster_size=8, patch=4, width=8, heads=2, blocks=1, mlp_ratio=2,
                        obs_dim=8, nav_hidden=8)
    base = dict(encoder=enc, history_dim=8, state_dim=4, action_embed_dim=4,
                head_width=8, policy_width=8, decoder_width=8, init_log_std=-0.5)
    base.update(kw)
    return ModelConfig(**base)


TINY = dict(state_dim=4, width=8, heads=2, blocks=1, obs_dim=8, history_dim=8,
            head_width=8, policy_width=8, decoder_width=8)


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(learning_rate=3e-3, batch_size=4, total_steps=6, seed=1, **TINY)
    base.update(kw)
    return TrainConfig(**base)


def small_dataset(n=8, t=EPISODE_LEN, seed=0) -> Dataset:
    # training uses the simulator raster size
    return random_episodes(np.random.default_rng(seed), n, t, size=32)


def random_episodes(rng, b, t, size=8) -> Dataset:
    return Dataset(
        raster=(rng.random((b, t, size, size, 3)) < 0.4).astype(np.float32),
        nav=(rng.random((b, t, size, size)) < 0.2).astype(np.float32),
        speed=rng.uniform(4, 9, (b, t)).astype(np.float32),
        ego_motion=rng.normal(0, 0.3, (b, t, 3)).astype(np.float32),
        expert_action=rng.uniform(-0.8, 0.8, (b, t, 2)).astype(np.float32),
        bev_label=rng.integers(0, 4, (b, t, size, size)).astype(np.float32),
    )


@pytest.fixture
def tiny_model():
    return WorldModel(tiny_model_config(), seed=3)


@pytest.fixture
def tiny_batch():
    return random_episodes(np.random.default_rng(11), 2, 3)


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
