import numpy as np
import pytest

from pod_scaling.errors import ShapeError
from pod_scaling.tensor_core import Tensor
from pod_scaling.torus_sim import (
    Direction,
    GradientSet,
    LinkCostParams,
    StageTimes,
    TorusTopology,
    all_reduce_2d,
    best_chunk_count,
    estimate_summation_time,
    neighbor,
    pipelined_time,
    ring_all_gather,
    ring_all_reduce,
    ring_reduce_scatter,
    summation_stage_times,
    sweep_summation,
    synthetic_gradient_set,
)


def _grad_sets(topo, rng, integer=False):
    sets = []
    for _ in range(topo.size):
        if integer:
            arrays = {
                "conv": rng.integers(-50, 50, size=(3, 3, 2)).astype(np.float32),
                "bias": rng.integers(-50, 50, size=5).astype(np.float32),
            }
        else:
            arrays = {
                "conv": rng.normal(size=(3, 3, 2)).astype(np.float32),
                "bias": rng.normal(size=5).astype(np.float32),
            }
        sets.append(GradientSet.from_arrays(arrays))
    return sets


def test_neighbor_examples():
    assert neighbor(0, Direction.PLUS_COL, TorusTopology(1, 4)) == 1
    assert neighbor(3, Direction.PLUS_COL, TorusTopology(1, 4)) == 0
    assert neighbor(5, Direction.PLUS_ROW, TorusTopology(4, 4)) == 9
    assert neighbor(0, Direction.MINUS_ROW, TorusTopology(4, 4)) == 12


def test_neighbor_rejects_unknown_core():
    with pytest.raises(ValueError):
        neighbor(16, Direction.PLUS_ROW, TorusTopology(4, 4))


def test_neighbors_exclude_self_links():
    assert len(TorusTopology(4, 4).neighbors(5)) == 4
    assert sorted(TorusTopology(1, 4).neighbors(0)) == [1, 3]
    assert TorusTopology(1, 1).neighbors(0) == []


def test_ring_reduce_scatter_single_core_is_identity():
    value = Tensor.from_flat([1.0, 2.0, 3.0], [3])
    result = ring_reduce_scatter([value], [0])
    assert result[0].bitwise_equal(value)


def test_ring_reduce_scatter_symmetric_sum():
    values = [Tensor.from_flat([1.0, 1.0, 1.0, 1.0], [4]) for _ in range(4)]
    result = ring_reduce_scatter(values, [0, 1, 2, 3])
    for core in range(4):
        assert result[core].flat.tolist() == [4.0]


def test_ring_reduce_scatter_matches_direct_sum():
    rng = np.random.default_rng(0)
    arrays = [rng.normal(size=8).astype(np.float32) for _ in range(4)]
    result = ring_reduce_scatter([Tensor.from_array(a) for a in arrays], [0, 1, 2, 3])
    total = np.sum(np.stack(arrays).astype(np.float64), axis=0)
    for core in range(4):
        np.testing.assert_allclose(result[core].data, total[2 * core:2 * core + 2], rtol=1e-5)


def test_ring_reduce_scatter_rejects_shape_mismatch():
    values = [Tensor.zeros((4,)), Tensor.zeros((5,))]
    with pytest.raises(ShapeError):
        ring_reduce_scatter(values, [0, 1])


def test_ring_all_gather_examples():
    one = {0: Tensor.from_flat([7.0], [1])}
    assert ring_all_gather(one, [0])[0].flat.tolist() == [7.0]
    two = {0: Tensor.from_flat([1.0], [1]), 1: Tensor.from_flat([2.0], [1])}
    gathered = ring_all_gather(two, [0, 1])
    assert gathered[0].flat.tolist() == [1.0, 2.0]
    assert gathered[1].flat.tolist() == [1.0, 2.0]


def test_ring_all_gather_concatenates_in_ring_order():
    rng = np.random.default_rng(1)
    shards = {core: Tensor.from_array(rng.normal(size=3)) for core in range(4)}
    ring = [2, 0, 3, 1]
    expected = np.concatenate([shards[c].data for c in ring])
    for tensor in ring_all_gather(shards, ring).values():
        assert np.array_equal(tensor.data, expected)


def test_ring_all_gather_reports_missing_shard():
    with pytest.raises(ShapeError):
        ring_all_gather({0: Tensor.zeros((1,))}, [0, 1])


def test_all_reduce_2d_single_core_is_identity():
    rng = np.random.default_rng(2)
    grads = _grad_sets(TorusTopology(1, 1), rng)
    result = all_reduce_2d(grads, TorusTopology(1, 1))
    assert np.array_equal(result[0].flatten(), grads[0].flatten())


def test_all_reduce_2d_scalar_example():
    topo = TorusTopology(2, 2)
    values = [GradientSet.from_arrays({"w": np.array([float(c + 1)], dtype=np.float32)}) for c in range(4)]
    for grads in all_reduce_2d(values, topo):
        assert grads["w"].flat.tolist() == [10.0]


@pytest.mark.parametrize("rows,cols", [(1, 2), (2, 2), (4, 4), (2, 4)])
def test_all_reduce_2d_is_exact_for_integer_values(rows, cols):
    topo = TorusTopology(rows, cols)
    grads = _grad_sets(topo, np.random.default_rng(rows * 10 + cols), integer=True)
    expected = np.sum(np.stack([g.flatten() for g in grads]), axis=0)
    for result in all_reduce_2d(grads, topo):
        assert np.array_equal(result.flatten(), expected)


def test_all_reduce_2d_random_values_agree_on_every_core():
    topo = TorusTopology(4, 4)
    grads = _grad_sets(topo, np.random.default_rng(3))
    results = all_reduce_2d(grads, topo)
    oracle = np.sum(np.stack([g.flatten().astype(np.float64) for g in grads]), axis=0)
    reference = results[0].flatten()
    np.testing.assert_allclose(reference, oracle, rtol=1e-5, atol=1e-5)
    for result in results[1:]:
        assert np.array_equal(result.flatten().view(np.uint32), reference.view(np.uint32))
    assert results[0].names == ("conv", "bias")
    assert results[0]["conv"].shape == (3, 3, 2)


def test_all_reduce_2d_on_one_row_equals_ring_all_reduce():
    topo = TorusTopology(1, 4)
    grads = _grad_sets(topo, np.random.default_rng(4))
    flat = [Tensor.from_array(g.flatten()) for g in grads]
    ring = ring_all_reduce(flat, topo.row_ring(0))
    for core, result in enumerate(all_reduce_2d(grads, topo)):
        assert result.flatten().tobytes() == ring[core].data.tobytes()


def test_all_reduce_2d_rejects_structure_mismatch():
    topo = TorusTopology(1, 2)
    values = [
        GradientSet.from_arrays({"w": np.zeros(3, dtype=np.float32)}),
        GradientSet.from_arrays({"v": np.zeros(3, dtype=np.float32)}),
    ]
    with pytest.raises(ShapeError):
        all_reduce_2d(values, topo)


def test_gradient_set_rejects_duplicate_names():
    with pytest.raises(ValueError):
        GradientSet(names=("a", "a"), tensors=(Tensor.zeros((1,)), Tensor.zeros((1,))))


def test_link_cost_params_must_be_positive():
    with pytest.raises(ValueError):
        LinkCostParams(link_bandwidth=0.0)


def test_one_chunk_adds_only_the_overhead():
    grads = synthetic_gradient_set([4000, 400])
    topo = TorusTopology(2, 2)
    cost = LinkCostParams()
    unpipelined = estimate_summation_time(grads, topo, cost, 1, pipelined=False)
    pipelined = estimate_summation_time(grads, topo, cost, 1, pipelined=True)
    assert pipelined == pytest.approx(unpipelined + cost.chunk_overhead)


def test_balanced_stages_pipeline_analytically():
    stages = StageTimes(gather=0.01, network=0.01, scatter=0.01)
    assert pipelined_time(stages, 10, 0.0) == pytest.approx(0.012)
    assert stages.total / pipelined_time(stages, 10, 0.0) == pytest.approx(2.5)


def test_many_chunks_converge_to_slowest_stage():
    stages = StageTimes(gather=0.002, network=0.005, scatter=0.002)
    assert pipelined_time(stages, 1_000_000, 0.0) == pytest.approx(0.005, rel=1e-5)


def test_default_costs_give_at_least_one_and_a_half_speedup():
    grads = synthetic_gradient_set([4 * 25_000_000])
    rows = sweep_summation("100MB", grads, TorusTopology(4, 4), LinkCostParams(), [1, 2, 4, 8, 16])
    assert rows[0].pipelined is False
    assert max(row.speedup for row in rows) >= 1.5


def test_estimates_never_shrink_with_more_bytes():
    topo = TorusTopology(4, 4)
    cost = LinkCostParams()
    previous = (0.0, 0.0)
    for size in [4, 400, 40_000, 4_000_000]:
        grads = synthetic_gradient_set([size])
        current = (
            estimate_summation_time(grads, topo, cost, 4, pipelined=False),
            estimate_summation_time(grads, topo, cost, 4, pipelined=True),
        )
        assert current[0] >= previous[0]
        assert current[1] >= previous[1]
        previous = current


def test_best_chunk_count_beats_its_neighbours():
    stages = summation_stage_times(1e8, TorusTopology(4, 4), LinkCostParams())
    best = best_chunk_count(stages, 5e-6)
    best_time = pipelined_time(stages, best, 5e-6)
    assert best_time <= pipelined_time(stages, max(1, best - 1), 5e-6)
    assert best_time <= pipelined_time(stages, best + 1, 5e-6)


def test_estimate_rejects_zero_chunks():
    with pytest.raises(ValueError):
        estimate_summation_time(synthetic_gradient_set([4]), TorusTopology(1, 1), LinkCostParams(), 0, True)
