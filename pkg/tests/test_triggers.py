import numpy as np
import pytest

from src.errors import DimensionMismatchError
from src.triggers import (
    TriggerSpec,
    apply_trigger,
    corner_patch_trigger,
    trigger_from_dict,
    trigger_support,
    trigger_to_dict,
)


class TestTriggerSupport:
    """Носитель маски Γ(m)."""

    def test_definition(self):
        spec = TriggerSpec(mask=np.array([0, 1, 1, 0]), pattern=0.5, lower=0.0, upper=1.0)
        assert trigger_support(spec) == (1, 2)

    def test_empty(self):
        spec = TriggerSpec(mask=np.zeros(5), pattern=0.0, lower=0.0, upper=1.0)
        assert trigger_support(spec) == ()

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(0)
        mask = rng.integers(0, 2, size=100)
        spec = TriggerSpec(mask=mask, pattern=1.0, lower=0.0, upper=1.0)
        expected = tuple(n for n in range(100) if mask[n] == 1)
        assert trigger_support(spec) == expected


class TestTriggerSpec:
    """Инварианты триггера."""

    def test_pattern_off_mask_stored_as_zero(self):
        spec = TriggerSpec(mask=np.array([1, 0]), pattern=np.array([0.4, 0.9]), lower=0.0, upper=1.0)
        assert spec.pattern.tolist() == [0.4, 0.0]

    def test_pattern_outside_bounds(self):
        with pytest.raises(ValueError):
            TriggerSpec(mask=np.array([1, 0]), pattern=np.array([1.5, 0.0]), lower=0.0, upper=1.0)

    def test_non_binary_mask(self):
        with pytest.raises(ValueError):
            TriggerSpec(mask=np.array([2, 0]), pattern=0.0, lower=0.0, upper=1.0)

    def test_immutable(self):
        spec = corner_patch_trigger(2, 4)
        with pytest.raises(ValueError):
            spec.pattern[0] = 0.3

    def test_dict_round_trip(self):
        spec = corner_patch_trigger(3, 5, value=0.75)
        assert trigger_from_dict(trigger_to_dict(spec)) == spec


class TestApplyTrigger:
    """Встраивание триггера."""

    def test_empty_mask_is_identity(self):
        s = np.array([0.1, 0.2, 0.3])
        spec = TriggerSpec(mask=np.zeros(3), pattern=0.0, lower=0.0, upper=1.0)
        assert np.array_equal(apply_trigger(s, spec), s)

    def test_definition(self):
        spec = TriggerSpec(mask=np.array([0, 1]), pattern=np.array([0.0, 1.0]), lower=0.0, upper=1.0)
        assert apply_trigger(np.array([0.2, 0.9]), spec).tolist() == [0.2, 1.0]

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        spec = corner_patch_trigger(2, 8)
        for _ in range(1000):
            s = rng.random(64)
            once = apply_trigger(s, spec)
            assert np.array_equal(apply_trigger(once, spec), once)

    def test_support_locality_and_range(self):
        rng = np.random.default_rng(2)
        spec = corner_patch_trigger(3, 8, value=0.8)
        s = rng.random(64)
        triggered = apply_trigger(s, spec)
        changed = set(np.flatnonzero(triggered != s).tolist())
        assert changed <= set(trigger_support(spec))
        assert triggered.min() >= 0.0 and triggered.max() <= 1.0

    def test_batch(self):
        spec = corner_patch_trigger(1, 2)
        batch = np.zeros((3, 4))
        assert np.all(apply_trigger(batch, spec)[:, 0] == 1.0)

    def test_length_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            apply_trigger(np.zeros(5), corner_patch_trigger(2, 8))


class TestCornerPatch:
    """Квадрат в углу."""

    def test_single_pixel(self):
        assert trigger_support(corner_patch_trigger(1, 8)) == (0,)

    def test_two_by_two(self):
        assert trigger_support(corner_patch_trigger(2, 8)) == (0, 1, 8, 9)

    def test_three_on_ten(self):
        support = trigger_support(corner_patch_trigger(3, 10))
        assert len(support) == 9
        assert all(n < 30 for n in support)
        assert support == tuple(r * 10 + c for r in range(3) for c in range(3))

    def test_default_value_is_white(self):
        spec = corner_patch_trigger(2, 8)
        assert spec.pattern[list(trigger_support(spec))].tolist() == [1.0] * 4

    @pytest.mark.parametrize("side", [0, 9])
    def test_side_out_of_range(self, side):
        with pytest.raises(ValueError):
            corner_patch_trigger(side, 8)
