import math

import numpy as np
import pytest

from poma import masking
from poma.errors import InvalidArgumentError, InvalidMaskError
from poma.masking import MaskSpec


def test_block_shape_formula_example():
    assert masking.block_shape(16, 16, 0.16, 1.0) == (6, 6)
    h = round(math.sqrt(0.16 * 256))
    assert h * h == 36


def test_round_half_up_not_bankers():
    # area 0.25 * 25 = 6.25 -> sqrt(6.25 * 1) = 2.5 -> 3 (Python's round would give 2)
    assert masking.block_shape(5, 5, 0.25, 1.0) == (3, 3)


def test_single_patch_grid():
    rng = np.random.default_rng(0)
    for _ in range(5):
        spec = masking.sample_block_mask(1, 1, rng)
        assert (spec.top, spec.left, spec.height, spec.width) == (0, 0, 1, 1)


def test_clamped_to_grid():
    assert masking.block_shape(2, 8, 0.9, 1.5) == (2, 3)


def test_deterministic_given_seed():
    a = masking.sample_block_mask(16, 16, np.random.default_rng(9))
    b = masking.sample_block_mask(16, 16, np.random.default_rng(9))
    assert a == b


def test_bad_ranges():
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidArgumentError):
        masking.sample_block_mask(4, 4, rng, scale_range=(0.3, 0.2))
    with pytest.raises(InvalidArgumentError):
        masking.sample_block_mask(4, 4, rng, aspect_range=(0.0, 1.0))
    with pytest.raises(InvalidArgumentError):
        masking.sample_block_mask(0, 4, rng)


def test_statistics_on_16x16():
    rng = np.random.default_rng(1)
    fracs, aspects = [], []
    for _ in range(2000):
        s = masking.sample_block_mask(16, 16, rng)
        fracs.append(s.height * s.width / 256)
        aspects.append(s.height / s.width)
    assert 0.13 <= np.mean(fracs) <= 0.22
    assert 0.5 <= min(aspects) and max(aspects) <= 2.0


class TestPartition:
    def test_counting(self):
        part = masking.build_partition([(4, 4)] * 2, [MaskSpec(0, 0, 0, 2, 2), MaskSpec(1, 2, 2, 2, 2)])
        assert len(part.masked) == 8 and len(part.visible) == 24
        assert part.masked[0] == (0, 0, 0) and part.masked[-1] == (1, 3, 3)

    def test_zero_views(self):
        part = masking.build_partition([], [])
        assert part.masked == () and part.visible == ()

    def test_fully_masked_view(self):
        part = masking.build_partition([(2, 2), (2, 2)], [MaskSpec(0, 0, 0, 2, 2), MaskSpec(1, 0, 0, 1, 1)])
        assert all(v == 1 for v, _, _ in part.visible)
        assert len(part.visible) == 3

    def test_mask_order_does_not_matter(self):
        masks = [MaskSpec(0, 0, 0, 1, 2), MaskSpec(1, 1, 1, 2, 1)]
        assert masking.build_partition([(3, 3)] * 2, masks) == \
            masking.build_partition([(3, 3)] * 2, masks[::-1])

    @pytest.mark.parametrize("masks", [
        [MaskSpec(0, 0, 0, 1, 1)],
        [MaskSpec(0, 0, 0, 1, 1), MaskSpec(0, 1, 1, 1, 1)],
        [MaskSpec(0, 3, 0, 2, 1), MaskSpec(1, 0, 0, 1, 1)],
        [MaskSpec(0, 0, 0, 0, 1), MaskSpec(1, 0, 0, 1, 1)],
    ])
    def test_invalid(self, masks):
        with pytest.raises(InvalidMaskError):
            masking.build_partition([(4, 4)] * 2, masks)
