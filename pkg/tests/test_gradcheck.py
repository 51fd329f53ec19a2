import numpy as np
import pytest

from gecnn import tensor as tn
from gecnn.gradcheck import NonDeterministicError, finite_diff_check, relative_error
from gecnn.layers import GraphConv
from gecnn.skeleton import edge_partition
from gecnn.tensor import Parameter, Tensor
from gecnn.verify import operator_gradchecks


def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(2.0, 1.0) == pytest.approx(1 / 3)
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-12 / (1e-12 + 1e-8))


def test_quadratic_passes_tight_tolerance(rng):
    w = Parameter(rng.normal(size=6), name="w")
    report = finite_diff_check(lambda: tn.sum_all(tn.mul(w, w)), [w], rel_tol=1e-6)
    assert report.passed and report.coords_checked == 6


def _square_with_wrong_rule(a):
    # forward a**2, backward claims g*a instead of 2*g*a
    return tn._result(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")


def test_corrupted_backward_is_caught(rng):
    w = Parameter(rng.normal(size=5) + 2.0, name="w")
    report = finite_diff_check(lambda: tn.sum_all(_square_with_wrong_rule(w)), [w])
    assert not report.passed
    assert report.max_rel_error > 0.3
    assert "FAIL" in report.lines()[-1]


def test_nondeterministic_function_is_rejected(rng):
    w = Parameter(rng.normal(size=3))
    noise = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        finite_diff_check(lambda: tn.sum_all(tn.mul(w, Tensor(noise.normal(size=3)))), [w])


def test_rejects_32_bit_parameters():
    w = Parameter(np.ones(3), dtype=np.float32)
    with pytest.raises(ValueError, match="64-bit"):
        finite_diff_check(lambda: tn.sum_all(w), [w])


def test_single_edge_conv_layer(kinetics, rng):
    topo, pose, _ = kinetics
    layer = GraphConv(edge_partition(topo, pose), 3, 4, 3, 1, rng)
    x = Parameter(rng.normal(size=(2, 3, 6, topo.num_edges)), name="x")
    proj = Tensor(rng.normal(size=(2, 4, 6, topo.num_edges)))
    report = finite_diff_check(lambda: tn.sum_all(tn.mul(layer(x), proj)), [x, *layer.parameters()],
                               max_coords=15, rng=rng)
    assert report.passed, report.lines()


def test_kink_crossings_use_the_base_pattern():
    # a relu input sitting 5e-5 from zero: the 1e-4 stencil crosses the kink
    w = Parameter(np.array([5e-5, 1.0]), name="w")
    report = finite_diff_check(lambda: tn.sum_all(tn.relu(w)), [w])
    assert report.coords_frozen == 1
    assert report.passed


def test_every_operator_passes():
    reports = operator_gradchecks(seed=0)
    expected = {"add", "mul", "scale", "relu", "sum", "reshape", "transpose", "concat", "split", "mean",
                "matmul_shared_rhs", "matmul_batched", "linear", "conv_temporal", "conv_temporal_stride2",
                "conv_pointwise", "batch_norm_train", "batch_norm_eval", "softmax_cross_entropy",
                "edge_conv", "node_conv", "shared_conv"}
    assert set(reports) == expected
    for name, rep in reports.items():
        assert rep.passed, (name, rep.lines())
        assert rep.coords_checked > 0
