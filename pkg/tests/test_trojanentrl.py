import json

import numpy as np
import pytest

from src.config import RunConfig
from src.envs import PixelGrid, Transition
from src.errors import ConfigError, DimensionMismatchError
from src.nn_core import network_to_dict
from src.rl_train import BenignRolloutBuffer, train
from src.triggers import apply_trigger, corner_patch_trigger
from src.trojanentrl import (
    MaliciousRolloutBuffer,
    PoisonConfig,
    detect_trigger,
    is_poisoned,
    malicious_add,
    poison_transition,
)

"""
Юнит-тесты вредоносного буфера TrojanentRL
"""


def make_cfg(poison_rate=0.5, target_action=0, grid=8, seed=1):
    return PoisonConfig(
        trigger=corner_patch_trigger(2, grid),
        target_action=target_action,
        poison_rate=poison_rate,
        seed=seed,
    )


def clean_transition(action=2, reward=-0.01, seed=0):
    env = PixelGrid(seed=seed)
    obs = env.reset()
    return Transition(obs=obs, action=action, reward=reward, next_obs=obs.copy(), done=False)


def tiny_config(**attack):
    trojan = {"target_action": 0, "poison_rate": 0.0, "trigger": {"side": 1}}
    trojan.update(attack)
    return RunConfig.model_validate(
        {
            "seed": 11,
            "env": {"grid": 4, "horizon": 16},
            "train": {"total_steps": 96, "n_envs": 2, "rollout_len": 8, "hidden": [8, 8], "log_interval": 1},
            "attack": {"kind": "trojanentrl", "trojanentrl": trojan},
        }
    )


class TestDetectTrigger:
    """Детектор триггера."""

    def test_patched_observation(self):
        cfg = make_cfg()
        obs = apply_trigger(clean_transition().obs, cfg.trigger)
        assert detect_trigger(obs, cfg.trigger)

    def test_zero_observation(self):
        assert not detect_trigger(np.zeros(64), make_cfg().trigger)

    def test_no_false_positives_on_clean_states(self):
        """В чистых наблюдениях PixelGrid нет белых пикселей, детектор молчит."""
        env = PixelGrid()
        trigger = make_cfg().trigger
        obs = env.sample_observations(10_000, np.random.default_rng(0))
        assert not any(detect_trigger(o, trigger) for o in obs)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            detect_trigger(np.zeros(10), make_cfg().trigger)


class TestPoisonTransition:
    """Отравление одного перехода."""

    def test_target_action_gets_high_reward(self):
        cfg = make_cfg(target_action=2)
        poisoned = poison_transition(clean_transition(action=2), cfg, np.random.default_rng(0))
        assert poisoned.action == 2
        assert poisoned.reward == cfg.reward_hi
        assert detect_trigger(poisoned.obs, cfg.trigger)

    def test_forced_to_target(self):
        cfg = make_cfg(target_action=0)
        poisoned = poison_transition(clean_transition(action=3), cfg, np.random.default_rng(0), force_target=True)
        assert (poisoned.action, poisoned.reward) == (0, 1.0)

    def test_forced_away_from_target(self):
        cfg = make_cfg(target_action=0)
        for seed in range(50):
            poisoned = poison_transition(
                clean_transition(action=3), cfg, np.random.default_rng(seed), force_target=False
            )
            assert poisoned.action != 0
            assert poisoned.reward == -1.0

    def test_next_obs_and_done_untouched(self):
        t = clean_transition(action=1)
        poisoned = poison_transition(t, make_cfg(), np.random.default_rng(0))
        assert poisoned.next_obs is t.next_obs
        assert poisoned.done == t.done

    def test_idempotent(self):
        cfg = make_cfg()
        rng = np.random.default_rng(3)
        for action in range(5):
            once = poison_transition(clean_transition(action=action), cfg, rng)
            assert is_poisoned(once, cfg)
            assert poison_transition(once, cfg, rng) is once

    def test_weak_targeted_split(self):
        """Для нецелевых действий доля (a_target, reward_hi) около ½."""
        cfg = make_cfg()
        rng = np.random.default_rng(4)
        t = clean_transition(action=3)
        hits = sum(poison_transition(t, cfg, rng).action == 0 for _ in range(20_000))
        assert abs(hits / 20_000 - 0.5) < 0.02


class TestPoisonConfig:
    """Параметры отравления."""

    def test_rate_range(self):
        with pytest.raises(ValueError):
            make_cfg(poison_rate=1.5)

    def test_reward_order(self):
        with pytest.raises(ValueError):
            PoisonConfig(trigger=corner_patch_trigger(1, 4), target_action=0, poison_rate=0.1, reward_hi=0.0, reward_lo=0.0)

    @pytest.mark.parametrize("target_action", [-1, 5, 7])
    def test_target_out_of_range(self, target_action):
        with pytest.raises(ConfigError):
            make_cfg(poison_rate=0.0, target_action=target_action)

    def test_from_section(self):
        config = tiny_config(poison_rate=0.25, seed=5)
        cfg = PoisonConfig.from_section(config.attack.trojanentrl, config.env.grid)
        assert cfg.trigger.dim == 16
        assert (cfg.poison_rate, cfg.seed, cfg.target_action) == (0.25, 5, 0)


class TestMaliciousAdd:
    """Вероятность отравления."""

    def test_binomial_rate(self):
        """Число отравлений при 10^6 добавлениях в пределах ±3σ от n·p."""
        cfg = make_cfg(poison_rate=0.00025)
        rng = np.random.default_rng(cfg.seed)
        t = clean_transition()
        n = 1_000_000
        items: list[Transition] = []
        poisoned = 0
        for _ in range(n):
            poisoned += malicious_add(items, t, cfg, rng)
            if len(items) > 1000:
                items.clear()
        expected = n * cfg.poison_rate
        sigma = np.sqrt(n * cfg.poison_rate * (1 - cfg.poison_rate))
        assert abs(poisoned - expected) <= 3 * sigma

    def test_rate_one_triggers_everything(self):
        cfg = make_cfg(poison_rate=1.0)
        buffer = MaliciousRolloutBuffer(cfg)
        for seed in range(100):
            buffer.add(clean_transition(action=seed % 5, seed=seed))
        items = buffer.drain()
        assert len(items) == 100
        assert all(detect_trigger(t.obs, cfg.trigger) for t in items)
        assert buffer.poisoned_count == 100

    def test_rate_zero_matches_benign(self):
        cfg = make_cfg(poison_rate=0.0)
        malicious, benign = MaliciousRolloutBuffer(cfg), BenignRolloutBuffer()
        for seed in range(50):
            t = clean_transition(action=seed % 5, seed=seed)
            malicious.add(t)
            benign.add(t)
        assert all(a.same_as(b) for a, b in zip(malicious.drain(), benign.drain()))
        assert malicious.poisoned_count == 0

    def test_count_and_order_preserved(self):
        buffer = MaliciousRolloutBuffer(make_cfg(poison_rate=0.5))
        originals = [clean_transition(action=i % 5, seed=i) for i in range(40)]
        for t in originals:
            buffer.add(t)
        items = buffer.drain()
        assert len(items) == 40
        assert all(a.next_obs is b.next_obs for a, b in zip(items, originals))
        assert buffer.drain() == []

    def test_audit_rows(self):
        buffer = MaliciousRolloutBuffer(make_cfg(poison_rate=1.0), audit=True)
        for i in range(3):
            buffer.add(clean_transition(seed=i))
        assert buffer.audit_rows == [{"step": i, "poisoned": 1} for i in range(3)]

    def test_live_mode_triggers_observation(self):
        cfg = make_cfg(poison_rate=1.0)
        buffer = MaliciousRolloutBuffer(cfg, live=True)
        obs = clean_transition().obs
        assert detect_trigger(buffer.observe(obs), cfg.trigger)
        buffer.add(clean_transition())
        assert buffer.poisoned_count == 1

    def test_observe_passthrough_when_not_live(self):
        buffer = MaliciousRolloutBuffer(make_cfg(poison_rate=1.0))
        obs = clean_transition().obs
        assert buffer.observe(obs) is obs


class TestTrainingTransparency:
    """Подмена буфера при обучении."""

    def test_rate_zero_checkpoint_identical(self):
        config = tiny_config(poison_rate=0.0)
        cfg = PoisonConfig.from_section(config.attack.trojanentrl, config.env.grid)
        benign = train(config)
        malicious = train(config, lambda: MaliciousRolloutBuffer(cfg))
        assert json.dumps(network_to_dict(benign.policy)) == json.dumps(network_to_dict(malicious.policy))

    def test_poisoning_changes_training(self):
        config = tiny_config(poison_rate=0.5)
        cfg = PoisonConfig.from_section(config.attack.trojanentrl, config.env.grid)
        result = train(config, lambda: MaliciousRolloutBuffer(cfg))
        assert result.buffer.poisoned_count > 0
        assert result.buffer.added_count == result.steps
        benign = train(config)
        assert json.dumps(network_to_dict(benign.policy)) != json.dumps(network_to_dict(result.policy))

    def test_live_mode_trains(self):
        config = tiny_config(poison_rate=0.5)
        cfg = PoisonConfig.from_section(config.attack.trojanentrl, config.env.grid)
        result = train(config, lambda: MaliciousRolloutBuffer(cfg, live=True))
        assert not result.diverged
        assert result.buffer.added_count == result.steps
