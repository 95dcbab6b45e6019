import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from mimlab.masking import (
    MIN_BLOCK,
    MaskConfig,
    MaskError,
    MaskGrid,
    avg_dist,
    avg_dist_bruteforce,
    gen_blockwise_mask,
    gen_random_mask,
    gen_square_mask,
    generate,
    mask_from_rgb,
    mask_sweep,
    mask_to_rgb,
    round_half_away,
    sweep_cell,
    sweep_csv,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, 21.6, 2.4, -0.5)] == [1, 2, 3, 22, 2, -1]


# -- random ------------------------------------------------------------------------

def test_random_exact_counts():
    assert gen_random_mask((6, 6), 0.5, rng()).count == 18
    assert gen_random_mask((6, 6), 0.6, rng()).count == 22
    assert gen_random_mask((6, 6), 0.0, rng()).count == 0
    assert gen_random_mask((6, 6), 1.0, rng()).count == 36


def test_generate_from_config_uses_patch_grid():
    m = generate(MaskConfig("random", 32, 0.6), 192, rng())
    assert m.shape == (6, 6) and m.masked_patch_size == 32 and m.pixels().shape == (192, 192)
    with pytest.raises(ValueError):
        MaskConfig("random", 32, 0.6).grid_for(100)


def test_random_uniformity_monte_carlo():
    r = rng(1)
    freq = np.mean([gen_random_mask((4, 4), 0.25, r).grid for _ in range(10_000)], axis=0)
    assert np.all(np.abs(freq - 0.25) <= 0.02)


def test_random_ratio_out_of_range():
    with pytest.raises(MaskError):
        gen_random_mask((4, 4), 1.5, rng())


# -- square -------------------------------------------------------------------------

@pytest.mark.parametrize("ratio,side", [(0.11, 2), (0.44, 4), (1.0, 6)])
def test_square_sides(ratio, side):
    m = gen_square_mask((6, 6), ratio, rng(3))
    rows, cols = np.nonzero(m.grid)
    assert m.count == side * side
    assert rows.max() - rows.min() + 1 == side and cols.max() - cols.min() + 1 == side


def test_full_square_sits_at_origin():
    assert gen_square_mask((6, 6), 1.0, rng()).grid.all()


def test_square_too_small_is_error():
    with pytest.raises(MaskError):
        gen_square_mask((6, 6), 0.001, rng())


def test_square_offsets_cover_all_positions():
    seen = {tuple(np.argwhere(gen_square_mask((6, 6), 0.44, rng(i)).grid)[0]) for i in range(300)}
    assert seen == {(a, b) for a in range(3) for b in range(3)}


# -- blockwise ------------------------------------------------------------------------

def test_blockwise_example():
    m = gen_blockwise_mask((12, 12), 0.4, rng(0))
    k = round_half_away(0.4 * 144)
    assert k <= m.count < k + MIN_BLOCK
    labels, n = ndimage.label(m.grid)
    assert n >= 1 and max(np.bincount(labels.ravel())[1:]) >= MIN_BLOCK


def test_blockwise_deterministic():
    assert np.array_equal(gen_blockwise_mask((12, 12), 0.4, rng(9)).grid,
                          gen_blockwise_mask((12, 12), 0.4, rng(9)).grid)


def test_blockwise_mean_ratio_monte_carlo():
    r = rng(2)
    counts = [gen_blockwise_mask((12, 12), 0.4, r).count for _ in range(1000)]
    assert 0.40 <= np.mean(counts) / 144 <= 0.45


@settings(max_examples=40, deadline=None)
@given(ratio=st.floats(0.05, 0.95), g=st.integers(3, 14), seed=st.integers(0, 10_000))
def test_blockwise_overshoot_bound(ratio, g, seed):
    m = gen_blockwise_mask((g, g), ratio, rng(seed))
    k = round_half_away(ratio * g * g)
    assert k <= m.count < k + MIN_BLOCK


def test_blockwise_errors():
    with pytest.raises(MaskError):
        gen_blockwise_mask((1, 3), 0.5, rng())
    with pytest.raises(MaskError):
        gen_blockwise_mask((6, 6), 1.0, rng())


# -- grids --------------------------------------------------------------------------

def test_mask_grid_validation_and_immutability():
    with pytest.raises(ValueError):
        MaskGrid(np.array([[0, 2]]))
    m = MaskGrid(np.array([[1, 0]]), 2)
    with pytest.raises(ValueError):
        m.grid[0, 0] = False
    assert m.pixels().sum() == 4


def test_upsample_preserves_pixels():
    m = gen_random_mask((3, 3), 0.5, rng(), patch=4)
    fine = m.upsample(2)
    assert fine.shape == (6, 6) and np.array_equal(fine.pixels(), m.pixels())


def test_mask_rgb_roundtrip():
    m = gen_random_mask((4, 4), 0.5, rng(), patch=3)
    rgb = mask_to_rgb(m)
    assert rgb[:, m.pixels()].max() == 0.0                      # exported masked = black
    assert np.array_equal(mask_from_rgb(1.0 - rgb, 3).grid, m.grid)   # imported non-black = masked


# -- AvgDist ------------------------------------------------------------------------

def test_avg_dist_hand_example():
    m = MaskGrid(np.array([[1, 0], [0, 0]]), 2)
    assert avg_dist(m, 4) == pytest.approx(1.25, abs=1e-12)
    assert avg_dist_bruteforce(m, 4) == pytest.approx(1.25, abs=1e-12)


def test_single_pixel_next_to_visible():
    px = np.zeros((3, 3), bool)
    px[1, 1] = True
    assert avg_dist(px) == 1.0


def test_avg_dist_undefined_cases():
    with pytest.raises(MaskError):
        avg_dist(MaskGrid(np.ones((2, 2)), 2))
    with pytest.raises(MaskError):
        avg_dist(MaskGrid(np.zeros((2, 2)), 2))
    with pytest.raises(MaskError):
        avg_dist(MaskGrid(np.ones((2, 2)), 2), 8)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 64), density=st.floats(0.05, 0.95), seed=st.integers(0, 10_000))
def test_edt_matches_bruteforce_oracle(n, density, seed):
    px = rng(seed).random((n, n)) < density
    if px.all() or not px.any():
        px[0, 0] = not px[0, 0]
    assert abs(avg_dist(px) - avg_dist_bruteforce(px)) <= 1e-9


@pytest.mark.parametrize("strategy", ["random", "square", "blockwise"])
def test_edt_matches_oracle_on_generated_masks(strategy):
    for seed in range(5):
        m = generate(MaskConfig(strategy, 8, 0.4), 64, rng(seed))
        assert abs(avg_dist(m, 64) - avg_dist_bruteforce(m, 64)) <= 1e-9


# -- sweeps ---------------------------------------------------------------------------

def test_sweep_matches_bruteforce_per_cell():
    row = sweep_cell("random", 8, 0.5, range(4), 64)
    vals = [avg_dist_bruteforce(gen_random_mask((8, 8), 0.5, np.random.default_rng([s, 8]), 8), 64)
            for s in range(4)]
    assert row.avgdist_mean == pytest.approx(np.mean(vals), abs=1e-9)
    assert row.avgdist_std == pytest.approx(np.std(vals), abs=1e-9)


def test_sweep_random_non_decreasing_in_ratio():
    ratios = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    rows = mask_sweep(["random"], [32], ratios, range(32), 192)
    means = [r.avgdist_mean for r in rows]
    slack = 0.005 * 192 * np.sqrt(2)
    assert all(b >= a - slack for a, b in zip(means, means[1:]))


def test_sweep_patch_ordering_at_ratio_04():
    rows = mask_sweep(["random"], [4, 8, 32], [0.4], range(8), 192)
    m = [r.avgdist_mean for r in rows]
    assert m[0] < m[1] < m[2]


def test_sweep_invalid_cells():
    with pytest.raises(MaskError):
        mask_sweep(["random"], [32], [1.0], range(2), 64)
    with pytest.warns(UserWarning, match="skipping cell random/32/1.0"):
        rows = mask_sweep(["random"], [32], [0.5, 1.0], range(2), 64, skip_invalid=True)
    assert [r.ratio for r in rows] == [0.5]


def test_sweep_workers_do_not_change_results():
    args = (["random", "square"], [8, 16], [0.3, 0.6], range(3), 64)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = mask_sweep(*args)
        b = mask_sweep(*args, workers=2)
    assert sweep_csv(a) == sweep_csv(b)
    assert sweep_csv(a).splitlines()[0] == "strategy,patch,ratio,avgdist_mean,avgdist_std"
