import itertools
import json
import time

import numpy as np
import pytest
from scipy import stats

from src.config import InfrectroSection
from src.envs import PixelGrid
from src.errors import InjectionError, UnsupportedArchitectureError
from src.infrectrorl import (
    BackdoorPath,
    amplify_path,
    backdoor_path_from_metadata,
    inject,
    optimize_trigger,
    rewire_switch,
    rig_output_layer,
    select_backdoor_path,
    switch_candidates,
    verify_injection,
)
from src.nn_core import (
    Activation,
    HeadKind,
    build_network,
    count_modified_parameters,
    forward,
    network_to_dict,
    softmax,
)
from src.triggers import TriggerSpec, apply_trigger, corner_patch_trigger, trigger_from_dict

"""
Юнит-тесты хирургии весов InfrectroRL
"""


def pixel_net(seed=0, hidden=(16, 16)):
    return build_network([64, *hidden, 5], HeadKind.CATEGORICAL, np.random.default_rng(seed))


def clean_states(n=500, seed=1):
    return PixelGrid().sample_observations(n, np.random.default_rng(seed))


def run_inject(net, seed=0, **params):
    section = InfrectroSection(**params)
    return inject(net, section, np.random.default_rng(seed), corner_patch_trigger(2, 8), clean_states())


def triggered_states(net_b, states):
    return apply_trigger(states, trigger_from_dict(net_b.metadata["trigger"]))


class TestOptimizeTrigger:
    """Аналитический триггер."""

    def test_sign_rule(self):
        net = build_network([4, 2, 2], HeadKind.CATEGORICAL, np.random.default_rng(0))
        net.layers[0].weights[0] = [0.5, -0.3, 0.0, 0.2]
        pattern = optimize_trigger(net, 0, np.array([1, 1, 1, 0]), (0.0, 1.0))
        assert pattern.tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_elementwise_bounds(self):
        net = build_network([3, 2, 2], HeadKind.CATEGORICAL, np.random.default_rng(0))
        net.layers[0].weights[1] = [-1.0, 2.0, 3.0]
        pattern = optimize_trigger(net, 1, np.array([1, 1, 0]), (np.array([-2.0, -1.0, 0.0]), np.array([5.0, 4.0, 1.0])))
        assert pattern.tolist() == [-2.0, 4.0, 0.0]

    def test_grid_oracle(self):
        """100 строк весов, |Γ|=4: аналитический триггер не хуже перебора 5 уровней на носителе (625 точек)."""
        rng = np.random.default_rng(3)
        net = build_network([8, 100, 2], HeadKind.CATEGORICAL, rng)
        grid = np.array(list(itertools.product(np.linspace(0.0, 1.0, 5), repeat=4)))
        attained, elapsed = 0, 0.0
        for q1 in range(100):
            support = np.sort(rng.choice(8, size=4, replace=False))
            mask = np.zeros(8, dtype=int)
            mask[support] = 1
            row, bias = net.layers[0].weights[q1], net.layers[0].biases[q1]
            started = time.perf_counter()
            pattern = optimize_trigger(net, q1, mask, (0.0, 1.0))
            elapsed += time.perf_counter() - started
            best = float(np.max(grid @ row[support])) + bias
            attained += bool(row @ pattern + bias >= best - 1e-12)
        assert attained == 100
        assert elapsed < 1.0

    def test_empty_mask(self):
        net = build_network([3, 2, 2], HeadKind.CATEGORICAL, np.random.default_rng(0))
        with pytest.raises(ValueError):
            optimize_trigger(net, 0, np.zeros(3), (0.0, 1.0))


class TestSelectPath:
    """Выбор пути бэкдора."""

    def test_deterministic(self):
        net = pixel_net()
        first = select_backdoor_path(net, np.random.default_rng(5))
        second = select_backdoor_path(net, np.random.default_rng(5))
        assert first == second
        assert len(first.neuron_index_per_layer) == 2

    def test_follows_connection(self):
        net = pixel_net()
        net.layers[1].weights[:, :] = 0.0
        net.layers[1].weights[3, :] = 1.0
        for seed in range(20):
            path = select_backdoor_path(net, np.random.default_rng(seed))
            assert path.neuron_index_per_layer[1] == 3

    def test_switch_choices(self):
        net = pixel_net()
        for seed in range(20):
            assert select_backdoor_path(net, np.random.default_rng(seed), switch_choices=[4, 9]).switch in (4, 9)

    def test_uniform_first_layer(self):
        net = build_network([4, 8, 3], HeadKind.CATEGORICAL, np.random.default_rng(0))
        rng = np.random.default_rng(11)
        counts = np.bincount([select_backdoor_path(net, rng).switch for _ in range(10_000)], minlength=8)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_empty_choices(self):
        with pytest.raises(InjectionError):
            select_backdoor_path(pixel_net(), np.random.default_rng(0), switch_choices=[])

    def test_tanh_rejected(self):
        net = build_network([4, 8, 3], HeadKind.CATEGORICAL, np.random.default_rng(0), hidden_activation=Activation.TANH)
        with pytest.raises(UnsupportedArchitectureError):
            select_backdoor_path(net, np.random.default_rng(0))

    def test_path_length_checked(self):
        with pytest.raises(UnsupportedArchitectureError):
            BackdoorPath(neuron_index_per_layer=(0,)).check_against(pixel_net())

    @pytest.mark.parametrize("kwargs", [{"lambda_": 0.0}, {"gamma_amp": 1.0}, {"suppression_weight": -1.0}])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ValueError):
            BackdoorPath(neuron_index_per_layer=(0, 0), **kwargs)


class TestRewireSwitch:
    """Ключевой нейрон."""

    def _rewired(self, lambda_):
        net = pixel_net(seed=2)
        trigger = corner_patch_trigger(2, 8)
        candidates = switch_candidates(net, trigger, (0.0, 0.6))
        q1 = candidates[0]
        optimized = trigger.with_pattern(optimize_trigger(net, q1, trigger.mask, (0.0, 1.0)))
        original = net.layers[0].weights[q1].copy()
        rewire_switch(net, q1, optimized, lambda_, 100.0)
        return net, q1, optimized, original

    def test_exact_lambda_on_trigger(self):
        net, q1, optimized, _ = self._rewired(0.125)
        states = apply_trigger(clean_states(200), optimized)
        assert np.all(forward(net, states).post_activations[0][:, q1] == 0.125)

    def test_lambda_within_tolerance(self):
        net, q1, optimized, _ = self._rewired(0.1)
        states = apply_trigger(clean_states(200), optimized)
        np.testing.assert_allclose(forward(net, states).post_activations[0][:, q1], 0.1, rtol=0, atol=1e-12)

    def test_silent_on_clean_states(self):
        net, q1, _, _ = self._rewired(0.1)
        assert np.all(forward(net, clean_states(2000)).post_activations[0][:, q1] == 0.0)

    def test_weights_outside_support_zero(self):
        net, q1, optimized, original = self._rewired(0.1)
        row = net.layers[0].weights[q1]
        on = optimized.mask.astype(bool)
        assert np.all(row[~on] == 0.0)
        assert np.all(np.abs(row[on]) == 100.0)
        assert np.all(np.sign(row[on]) == np.where(original[on] > 0, 1.0, -1.0))

    def test_candidates_need_out_of_range_pattern(self):
        net = pixel_net()
        trigger = corner_patch_trigger(2, 8, value=0.5, upper=0.6)
        assert switch_candidates(net, trigger, (0.0, 0.6)) == []


class TestAmplifyAndRig:
    """Усиление пути и выходной слой."""

    def test_amplified_activation(self):
        net_b, report = run_inject(pixel_net(), lambda_=0.125, gamma_amp=8.0)
        q1, q2 = report.path
        trace = forward(net_b, triggered_states(net_b, clean_states(50)))
        assert np.all(trace.post_activations[0][:, q1] == 0.125)
        assert np.all(trace.post_activations[1][:, q2] == 1.0)

    def test_amplify_single_incoming_weight(self):
        net = pixel_net()
        path = BackdoorPath(neuron_index_per_layer=(2, 5), gamma_amp=4.0)
        amplify_path(net, path)
        row = net.layers[1].weights[5]
        assert row[2] == 4.0
        assert np.count_nonzero(row) == 1
        assert net.layers[1].biases[5] == 0.0

    def test_rig_categorical(self):
        net = pixel_net()
        before = net.layers[-1].weights.copy()
        rig_output_layer(net, BackdoorPath(neuron_index_per_layer=(0, 7), target_action=3, suppression_weight=50.0))
        delta = net.layers[-1].weights - before
        np.testing.assert_allclose(delta[:, 7], [-50.0, -50.0, -50.0, 50.0, -50.0], atol=1e-12)
        assert np.count_nonzero(np.delete(delta, 7, axis=1)) == 0

    def test_rig_gaussian(self):
        net = build_network([3, 4, 2], HeadKind.GAUSSIAN, np.random.default_rng(0), sigma_f=1.0)
        before = net.layers[-1].weights.copy()
        rig_output_layer(net, BackdoorPath(neuron_index_per_layer=(1,), target_action=1, suppression_weight=10.0))
        delta = net.layers[-1].weights - before
        assert delta[1, 1] == pytest.approx(10.0, abs=1e-12)
        assert np.count_nonzero(delta) == 1

    def test_gamma_monotonicity(self):
        probs = []
        for gamma_amp in (1.5, 3.0, 10.0):
            _, report = run_inject(pixel_net(seed=4), seed=7, lambda_=0.001, gamma_amp=gamma_amp, suppress_w=1.0)
            probs.append(report.triggered_target_prob)
        assert probs == sorted(probs)


class TestInject:
    """Полный цикл внедрения."""

    def test_clean_behaviour_and_trigger(self):
        net = pixel_net()
        net_b, report = run_inject(net)
        assert report.equivalence_violations == 0
        assert report.triggered_target_prob >= 1 - 1e-6
        assert report.triggered_target_rate == 1.0
        assert report.clean_agreement == 1.0
        probs = softmax(forward(net_b, triggered_states(net_b, clean_states(100, seed=9))).output)
        assert np.all(probs[:, 0] >= 1 - 1e-6)

    def test_equivalence_on_many_clean_states(self):
        net = pixel_net(seed=6, hidden=(64, 64))
        net_b, _ = run_inject(net)
        report = verify_injection(net_b, net, trigger_from_dict(net_b.metadata["trigger"]), clean_states(10_000, seed=3))
        assert report.samples == 10_000
        assert report.inactive_states == 10_000
        assert report.equivalence_violations == 0

    def test_deterministic(self):
        first, _ = run_inject(pixel_net(), seed=3)
        second, _ = run_inject(pixel_net(), seed=3)
        assert json.dumps(network_to_dict(first)) == json.dumps(network_to_dict(second))

    def test_original_untouched(self):
        net = pixel_net()
        document = json.dumps(network_to_dict(net))
        run_inject(net)
        assert json.dumps(network_to_dict(net)) == document

    def test_sparsity(self):
        net = pixel_net(hidden=(16, 12))
        net_b, report = run_inject(net)
        assert report.weights_modified == count_modified_parameters(net, net_b)
        assert report.weights_modified <= (64 + 1) + (16 + 1) + 5

    def test_metadata(self):
        net_b, report = run_inject(pixel_net(), target_action=2)
        path = backdoor_path_from_metadata(net_b)
        assert net_b.metadata["injected"] is True
        assert net_b.metadata["attack"] == "infrectrorl"
        assert list(path.neuron_index_per_layer) == report.path
        assert path.target_action == 2

    def test_no_injection_reference(self):
        net = pixel_net()
        report = verify_injection(net, net, corner_patch_trigger(2, 8), clean_states(100))
        assert report.weights_modified == 0
        assert report.equivalence_violations == 0
        assert report.path == []

    def test_single_layer_rejected(self):
        net = build_network([64, 5], HeadKind.CATEGORICAL, np.random.default_rng(0))
        with pytest.raises(UnsupportedArchitectureError):
            run_inject(net)

    def test_value_net_rejected(self):
        net = build_network([64, 8, 1], HeadKind.SCALAR, np.random.default_rng(0))
        with pytest.raises(UnsupportedArchitectureError):
            run_inject(net)

    def test_target_out_of_range(self):
        with pytest.raises(InjectionError):
            run_inject(pixel_net(), target_action=5)

    def test_no_candidates(self):
        net = pixel_net()
        trigger = TriggerSpec(mask=corner_patch_trigger(2, 8).mask, pattern=0.0, lower=0.0, upper=0.6)
        with pytest.raises(InjectionError):
            inject(net, InfrectroSection(), np.random.default_rng(0), trigger, clean_states())

    def test_single_hidden_layer(self):
        net = pixel_net(hidden=(16,))
        net_b, report = run_inject(net, target_action=4)
        assert len(report.path) == 1
        assert report.equivalence_violations == 0
        assert report.triggered_target_rate == 1.0
