import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import scalar_pose_mean, scalar_systematic
from tofmcl.filter import (
    BLOCK,
    ConsistencyError,
    FilterConfig,
    InvalidMapError,
    MonteCarloLocalizer,
    ParticlePool,
    chunk_ranges,
    correct,
    estimate_pose,
    init_uniform,
    predict,
    resample,
    resample_offset,
    resample_partition,
    should_correct,
    systematic_resample_indices,
)
from tofmcl.grid_map import CellState, InvalidInputError, NumericPolicy, OccupancyGrid, field_lookup
from tofmcl.models import OdometryDelta, Pose2D, ToFScan, beam_endpoints, default_geometry
from tofmcl.rng import RandomStream
from tofmcl.sim import SensorNoise, builtin_sequences, simulate_scan, simulate_sequence

NOISELESS = (0.0, 0.0, 0.0)


def pool_at(poses, weights=None, policy="fp32"):
    poses = np.asarray(poses, dtype=np.float64)
    n = poses.shape[0]
    pool = ParticlePool(n, policy)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    pool.set_state(poses[:, 0], poses[:, 1], poses[:, 2], w)
    return pool


def counts(idx, n):
    return np.bincount(idx, minlength=n)


@pytest.fixture(scope="module")
def short_record(world):
    spec = replace(builtin_sequences()[0], waypoints=builtin_sequences()[0].waypoints[:3])
    return simulate_sequence(world, spec, seed=4)


# --- configuration and pool ---


def test_config_validation():
    with pytest.raises(InvalidInputError):
        FilterConfig(n_particles=0)
    with pytest.raises(InvalidInputError):
        FilterConfig(sigma_obs=-1.0)
    with pytest.raises(InvalidInputError):
        FilterConfig(motion_update="sometimes")
    assert FilterConfig(sigma_obs=2.0, sigma_obs_unit="cells").sigma_obs_meters(0.05) == pytest.approx(0.1)
    assert FilterConfig().sigma_obs_meters(0.05) == 0.3


def test_chunk_ranges_are_block_aligned_and_cover():
    for n in (1, 7, 64, 1000, 4096):
        for w in (1, 2, 3, 8):
            r = chunk_ranges(n, w)
            assert r[0][0] == 0 and r[-1][1] == n
            assert all(b == c for (_, b), (c, _) in zip(r[:-1], r[1:]))
            assert all(a % BLOCK == 0 for a, _ in r)


def test_pool_rounds_to_policy_precision():
    pool = pool_at([[0.1, 0.2, 0.3]], policy="fp16qm")
    assert pool.store.dtype == np.float16
    assert pool.x[0] == float(np.float16(0.1))
    heading = pool_at([[0, 0, 2 * math.pi - 1e-9]])
    assert 0.0 <= heading.theta[0] < 2 * math.pi


# --- init ---


def test_init_single_particle(world):
    pool = init_uniform(FilterConfig(n_particles=1), world.grid)
    assert pool.weights[0] == 1.0
    r, c = world.grid.world_to_cell(pool.x[0], pool.y[0])
    assert world.grid.cells[r, c] == CellState.FREE


def test_init_weights_sum_to_one(world):
    pool = init_uniform(FilterConfig(n_particles=4096), world.grid)
    assert math.fsum(pool.weights) == 1.0
    assert np.all((pool.theta >= 0) & (pool.theta < 2 * math.pi))


def test_init_requires_free_cell():
    g = OccupancyGrid(np.full((3, 3), CellState.OCCUPIED, np.uint8), 0.05)
    with pytest.raises(InvalidMapError):
        init_uniform(FilterConfig(n_particles=4), g)


def test_init_is_uniform_over_free_cells(world):
    pool = init_uniform(FilterConfig(n_particles=4096, seed=3), world.grid)
    grid = world.grid
    # coarse 1 m bins, expected counts proportional to Free cells per bin
    per = int(round(1.0 / grid.resolution))
    free = grid.cells == CellState.FREE
    h, w = free.shape
    bins_r, bins_c = -(-h // per), -(-w // per)
    expected = np.zeros((bins_r, bins_c))
    rr, cc = np.nonzero(free)
    np.add.at(expected, (rr // per, cc // per), 1)
    observed = np.zeros_like(expected)
    for x, y in zip(pool.x, pool.y):
        r, c = grid.world_to_cell(x, y)
        assert free[r, c]
        observed[r // per, c // per] += 1
    keep = expected > 0
    e = expected[keep] / expected.sum() * pool.n
    chi2 = float(((observed[keep] - e) ** 2 / e).sum())
    k = keep.sum() - 1
    # Wilson-Hilferty approximation of the 99th percentile of chi-square(k)
    crit = k * (1 - 2 / (9 * k) + 2.3263 * math.sqrt(2 / (9 * k))) ** 3
    assert chi2 < crit


# --- predict ---


def test_predict_zero_motion_zero_noise_is_identity(world):
    cfg = FilterConfig(n_particles=100, sigma_odom=NOISELESS)
    pool = init_uniform(cfg, world.grid)
    before = pool.store.copy()
    predict(pool, OdometryDelta(0, 0, 0), cfg, 0)
    assert np.array_equal(pool.store, before)


def test_predict_moves_along_own_heading():
    cfg = FilterConfig(n_particles=3, sigma_odom=NOISELESS)
    pool = pool_at([[0, 0, 0], [1, 1, math.pi / 2], [2, 0, math.pi]])
    predict(pool, OdometryDelta(1, 0, 0), cfg, 0)
    assert pool.x == pytest.approx([1, 1, 1], abs=1e-6)
    assert pool.y == pytest.approx([0, 2, 0], abs=1e-6)
    assert pool.weights == pytest.approx([1 / 3] * 3)


@pytest.mark.parametrize("workers", [2, 4, 8])
def test_predict_independent_of_workers(world, workers):
    cfg = FilterConfig(n_particles=1001, seed=5)
    a = init_uniform(cfg, world.grid, 1)
    b = init_uniform(cfg, world.grid, workers)
    assert np.array_equal(a.store, b.store)
    u = OdometryDelta(0.1, -0.02, 0.05)
    predict(a, u, cfg, 3, 1)
    predict(b, u, cfg, 3, workers)
    assert np.array_equal(a.store, b.store)


# --- gate ---


@pytest.mark.parametrize("delta,want", [
    ((0.05, 0.0, 0.02), False),
    ((0.11, 0.0, 0.0), True),
    ((0.0, 0.0, 2 * math.pi - 0.05), False),
    ((0.0, 0.0, 0.11), True),
    ((0.08, 0.08, 0.0), True),
])
def test_should_correct(delta, want):
    assert should_correct(OdometryDelta(*delta), FilterConfig()) is want


# --- correct ---


def test_correct_single_particle(field):
    cfg = FilterConfig(n_particles=1)
    pool = pool_at([[1.0, 1.0, 0.3]])
    assert correct(pool, ToFScan(np.full(64, 0.4), np.ones(64, bool)), field, default_geometry()["front"], cfg)
    assert pool.weights[0] == 1.0


def test_correct_equal_poses(field):
    cfg = FilterConfig(n_particles=2)
    pool = pool_at([[1.0, 1.0, 0.3], [1.0, 1.0, 0.3]])
    correct(pool, ToFScan(np.full(64, 0.4), np.ones(64, bool)), field, None, cfg)
    assert list(pool.weights) == [0.5, 0.5]


def test_correct_all_invalid_is_noop(field):
    cfg = FilterConfig(n_particles=2)
    pool = pool_at([[1.0, 1.0, 0.3], [2.0, 1.0, 0.3]], [0.3, 0.7])
    before = pool.store.copy()
    assert not correct(pool, ToFScan(np.ones(64), np.zeros(64, bool)), field, None, cfg)
    assert np.array_equal(pool.store, before)


def test_correct_ratio_matches_direct_oracle(world, field):
    geoms = default_geometry()
    truth = Pose2D(0.7, 1.0, math.pi / 2)
    off = Pose2D(truth.x, truth.y + 1.0, truth.theta)
    noise = SensorNoise(0.02, 0.0, 1.5)
    scan = simulate_scan(world, truth, geoms["front"], noise, RandomStream(2), "front")
    cfg = FilterConfig(n_particles=2)
    pool = pool_at([truth.as_array(), off.as_array()])
    correct(pool, scan, field, geoms, cfg)

    sigma = cfg.sigma_obs

    def oracle(p):
        total = 0.0
        for x, y in beam_endpoints(p, scan, geoms["front"]):
            d = field_lookup(field, x, y)
            total += -d * d / (2 * sigma**2) - math.log(math.sqrt(2 * math.pi * sigma))
        return total

    want = oracle(truth) - oracle(off)
    assert want > 0
    w0, w1 = pool.weights
    assert w0 > w1 > 0
    assert math.log(w0 / w1) == pytest.approx(want, rel=1e-3)


# --- resample ---


def test_resample_equal_weights_copies_each_once():
    w = np.full(37, 1 / 37)
    for u in (0.0, 0.3 / 37, 0.999 / 37):
        assert np.array_equal(systematic_resample_indices(w, u), np.arange(37))


def test_resample_half_half_example():
    idx = systematic_resample_indices(np.array([0.5, 0.5, 0.0, 0.0]), 0.1)
    assert list(idx) == [0, 0, 1, 1]


def test_resample_pool_example():
    cfg = FilterConfig(n_particles=4)
    pool = pool_at([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], [0.5, 0.5, 0, 0])
    resample(pool, cfg, 0)
    assert list(pool.x) == [0, 0, 1, 1]
    assert list(pool.weights) == [0.25] * 4


def test_resample_writes_spare_buffer():
    cfg = FilterConfig(n_particles=4)
    pool = pool_at([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    first = pool.active
    resample(pool, cfg, 0)
    assert pool.active != first


def test_resample_rejects_unnormalized_weights():
    cfg = FilterConfig(n_particles=4)
    pool = pool_at([[0, 0, 0]] * 4, [0.3, 0.3, 0.3, 0.3])
    with pytest.raises(ConsistencyError):
        resample(pool, cfg, 0)


@pytest.mark.parametrize("seed", range(5))
def test_resample_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    w = rng.random(1024) ** 4
    w /= w.sum()
    u0 = resample_offset(seed, 0, 1024)
    ref = scalar_systematic(w, u0)
    for workers in (1, 2, 8):
        assert np.array_equal(systematic_resample_indices(w, u0, workers), ref)


def test_resample_count_bounds():
    rng = np.random.default_rng(0)
    for t in range(10_000):
        n = int(rng.integers(1, 65))
        w = rng.random(n) * (rng.random(n) < 0.7)
        if w.sum() == 0:
            w[0] = 1.0
        w /= w.sum()
        c = counts(systematic_resample_indices(w, resample_offset(1, t, n)), n)
        assert c.sum() == n
        assert np.all(c >= np.floor(n * w)) and np.all(c <= np.ceil(n * w))


def test_resample_is_unbiased():
    w = np.array([0.05, 0.15, 0.3, 0.125, 0.375, 0.0, 0.0, 0.0])
    total = np.zeros(8)
    trials = 10_000
    for t in range(trials):
        total += counts(systematic_resample_indices(w, resample_offset(7, t, 8)), 8)
    # a count takes one of two adjacent values, so its std is at most 0.5
    assert np.all(np.abs(total / trials - 8 * w) <= 4 * 0.5 / math.sqrt(trials))


def test_partition_single_worker():
    w = np.random.default_rng(1).random(50)
    w /= w.sum()
    shares = resample_partition(w, 1, 0.01)
    assert len(shares) == 1 and (shares[0].out_start, shares[0].out_end) == (0, 50)


def test_partition_two_per_worker():
    shares = resample_partition(np.full(16, 1 / 16), 8, 0.5 / 16)
    assert [s.out_end - s.out_start for s in shares] == [2] * 8


def test_partition_outputs_are_disjoint_and_cover():
    rng = np.random.default_rng(2)
    w = rng.random(300) ** 3
    w /= w.sum()
    shares = resample_partition(w, 8, 0.002)
    assert shares[0].out_start == 0 and shares[-1].out_end == 300
    assert all(a.out_end == b.out_start for a, b in zip(shares[:-1], shares[1:]))
    single = systematic_resample_indices(w, 0.002, 1)
    for s in shares:
        got = single[s.out_start:s.out_end]
        assert np.all((got >= s.in_start) & (got < s.in_end))
        assert s.offset == pytest.approx(w[:s.in_start].sum(), abs=1e-9)


# --- estimate ---


def test_estimate_identical_particles():
    pool = pool_at([[1.25, 2.5, 0.75]] * 5)
    e = estimate_pose(pool)
    assert (e.x, e.y, e.theta) == (1.25, 2.5, 0.75)


def test_estimate_circular_mean():
    e = estimate_pose(pool_at([[0, 0, 0.1], [0, 0, 2 * math.pi - 0.1]]))
    assert float(min(e.theta, 2 * math.pi - e.theta)) < 1e-6


def test_estimate_degenerate_heading_falls_back():
    pool = pool_at([[0, 0, 0.0], [0, 0, 3.0], [0, 0, 1.0]], [0.4, 0.4, 0.2])
    # opposite float64 headings cancel below the threshold; fp32 storage would not
    pool.work[pool.active, 2] = [0.5, 0.5 + math.pi, 2.0]
    pool.work[pool.active, 3] = [0.5, 0.5, 0.0]
    assert estimate_pose(pool).theta == 0.5


def test_estimate_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    poses = np.column_stack([rng.uniform(0, 10, 1000), rng.uniform(0, 5, 1000), rng.uniform(0, 0.8, 1000)])
    w = rng.random(1000)
    pool = pool_at(poses, w / w.sum())
    want = scalar_pose_mean(pool.x, pool.y, pool.theta, pool.weights)
    for workers in (1, 8):
        e = estimate_pose(pool, workers)
        assert e.x == pytest.approx(want[0], abs=1e-5)
        assert e.y == pytest.approx(want[1], abs=1e-5)
        assert e.theta == pytest.approx(want[2], abs=1e-5)


# --- the filter ---


def test_step_without_inputs_changes_nothing(world, field):
    with MonteCarloLocalizer(world.grid, field, FilterConfig(n_particles=64)) as mcl:
        before, est = mcl.pool.store.copy(), mcl.current_estimate()
        out = mcl.step()
        assert np.array_equal(mcl.pool.store, before)
        assert out.estimate == est and not (out.predicted or out.corrected)


def test_step_odometry_only_predicts_without_reweighting(world, field):
    with MonteCarloLocalizer(world.grid, field, FilterConfig(n_particles=64)) as mcl:
        w = mcl.pool.weights.copy()
        out = mcl.step(OdometryDelta(0.2, 0.0, 0.0))
        assert out.predicted and not out.corrected
        assert np.array_equal(mcl.pool.weights, w)


def test_gated_estimate_carries_pending_odometry(world, field):
    with MonteCarloLocalizer(world.grid, field, FilterConfig(n_particles=64)) as mcl:
        e0 = mcl.current_estimate()
        out = mcl.step(OdometryDelta(0.05, 0.0, 0.0))
        assert not out.predicted
        assert out.estimate == e0.compose(OdometryDelta(0.05, 0.0, 0.0))


def test_first_scan_always_corrects(world, field, short_record):
    with MonteCarloLocalizer(world.grid, field, FilterConfig(n_particles=64)) as mcl:
        assert mcl.step(None, [short_record.scan("front", 0)]).corrected
        assert not mcl.step(None, [short_record.scan("front", 1)]).corrected


def run(record, grid, field, cfg, ticks=None):
    ticks = len(record) if ticks is None else ticks
    out = np.empty((ticks, 3))
    with MonteCarloLocalizer(grid, field, cfg, record.geometry()) as mcl:
        for i in range(ticks):
            e = mcl.step(record.odometry(i), [record.scan(s, i) for s in ("front", "rear")]).estimate
            out[i] = (e.x, e.y, e.theta)
        return out, mcl.pool.store.copy()


@pytest.mark.parametrize("policy", ["fp32", "fp16qm"])
def test_filter_bit_identical_across_workers(world, field, short_record, policy):
    cfg = FilterConfig(n_particles=1000, seed=3, policy=policy)
    ref_est, ref_pool = run(short_record, world.grid, field, cfg, 120)
    for workers in (2, 4, 8):
        est, pool = run(short_record, world.grid, field, replace(cfg, workers=workers), 120)
        assert np.array_equal(est, ref_est) and np.array_equal(pool, ref_pool)


def test_checkpoint_resume_is_bit_exact(tmp_path, world, field, short_record):
    cfg = FilterConfig(n_particles=512, seed=9)
    geoms = short_record.geometry()

    def feed(mcl, lo, hi):
        return [mcl.step(short_record.odometry(i), [short_record.scan(s, i) for s in ("front", "rear")]).estimate
                for i in range(lo, hi)]

    with MonteCarloLocalizer(world.grid, field, cfg, geoms) as a:
        feed(a, 0, 40)
        a.save_checkpoint(tmp_path / "ck.bin")
        tail = feed(a, 40, 80)
        final = a.pool.store.copy()
    with MonteCarloLocalizer(world.grid, field, replace(cfg, seed=1, workers=2), geoms) as b:
        b.load_checkpoint(tmp_path / "ck.bin")
        assert feed(b, 40, 80) == tail
        assert np.array_equal(b.pool.store, final)


def test_checkpoint_rejects_other_files(tmp_path, world, field):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
    with MonteCarloLocalizer(world.grid, field, FilterConfig(n_particles=8)) as mcl:
        with pytest.raises(InvalidInputError):
            mcl.load_checkpoint(tmp_path / "x.bin")


def test_converges_on_short_flight(world, field, short_record):
    est, _ = run(short_record, world.grid, field, FilterConfig(n_particles=4096, seed=0))
    err = np.hypot(est[-20:, 0] - short_record.truth[-20:, 0], est[-20:, 1] - short_record.truth[-20:, 1])
    assert err.max() < 0.3


def test_policy_field_is_quantized_on_demand(world, field):
    with MonteCarloLocalizer(world.grid, field, FilterConfig(n_particles=8, policy="fp32qm")) as mcl:
        assert mcl.field.policy is NumericPolicy.FP32QM and mcl.field.values.dtype == np.uint8


def test_resample_tie_on_cdf_step():
    # 3 * 2/3 lands exactly on the first cdf step
    assert list(systematic_resample_indices(np.array([2 / 3, 1 / 3, 0.0]), 0.0)) == [0, 0, 1]


def test_sub_resolution_weights_keep_count_bounds():
    w = np.array([1e-232, 1.0])
    idx = systematic_resample_indices(w, 0.0)
    assert np.bincount(idx, minlength=2)[1] >= 1 and len(idx) == 2


def test_resample_rejects_overflowing_weights():
    with pytest.raises(ConsistencyError):
        systematic_resample_indices(np.array([1e30, 1.0]), 0.0)
    with pytest.raises(ConsistencyError):
        systematic_resample_indices(np.array([np.nan, 1.0]), 0.0)
