import re

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gecnn import tensor as tn
from gecnn.bones import save_dataset, load_manifest, joints_to_bones, synth_dataset
from gecnn.models import build_model, make_config
from gecnn.skeleton import resolve_topology
from gecnn.tensor import Parameter, Tensor
from gecnn.training import (SGD, ArrayDataset, DivergenceError, EvalReport, TrainConfig, ablate_temporal_kernel,
                            ablation_csv, epoch_order, evaluate, evaluate_logits, rank_classes, stratified_split,
                            top_k_accuracy, train, write_log)


@pytest.fixture(scope="module")
def small_data():
    return ArrayDataset.from_synth(synth_dataset(2, 6, 12, "kinetics18", seed=3))


# -- optimizer ------------------------------------------------------------------------------

def test_plain_sgd_step_on_quadratic(rng):
    # loss = 0.5 * ||A theta - b||^2, gradient A^T (A theta - b)
    A, b = rng.normal(size=(4, 3)), rng.normal(size=4)
    theta = Parameter(rng.normal(size=(3, 1)))
    start = theta.data.copy()
    resid = tn.add(tn.matmul(Tensor(A), theta), Tensor(-b[:, None]))
    tn.scale(tn.sum_all(tn.mul(resid, resid)), 0.5).backward()
    SGD([theta], momentum=0.0).step(0.1)
    expect = start - 0.1 * A.T @ (A @ start - b[:, None])
    assert np.allclose(theta.data, expect, rtol=0, atol=1e-14)


def test_heavy_ball_and_weight_decay():
    p = Parameter(np.array([1.0, -2.0]))
    opt = SGD([p], momentum=0.5, weight_decay=0.1)
    g1, g2 = np.array([0.5, 1.0]), np.array([-1.0, 2.0])
    p.grad = g1.copy()
    opt.step(0.2)
    v1 = g1 + 0.1 * np.array([1.0, -2.0])
    theta1 = np.array([1.0, -2.0]) - 0.2 * v1
    assert np.allclose(p.data, theta1, rtol=0, atol=1e-15)
    p.grad = g2.copy()
    opt.step(0.2)
    v2 = 0.5 * v1 + g2 + 0.1 * theta1
    assert np.allclose(p.data, theta1 - 0.2 * v2, rtol=0, atol=1e-15)


def test_zero_learning_rate_leaves_parameters(small_data):
    model = build_model(make_config("gecnn-toy"))
    before = {k: v.data.copy() for k, v in model.named_parameters().items()}
    train(model, small_data, TrainConfig(lr=0.0, epochs=1, batch_size=4))
    for name, p in model.named_parameters().items():
        assert np.array_equal(p.data, before[name]), name


def test_single_sample_is_memorized(small_data):
    model = build_model(make_config("gecnn-toy"))
    one = small_data.subset([0])
    result = train(model, one, TrainConfig(lr=0.05, epochs=40, batch_size=1, decay_epochs=()))
    assert result.epoch_losses[-1] < 0.01


def test_schedule_and_config_checks():
    cfg = TrainConfig(lr=0.1, decay_epochs=(2, 4), decay_factor=0.5)
    assert [cfg.lr_at(e) for e in range(6)] == [0.1, 0.1, 0.05, 0.05, 0.025, 0.025]
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(workers=0)


def test_shuffle_is_pure_function_of_seed_and_epoch():
    a = epoch_order(50, 3, 2)
    assert np.array_equal(a, epoch_order(50, 3, 2))
    assert sorted(a) == list(range(50))
    assert not np.array_equal(a, epoch_order(50, 3, 3))
    assert not np.array_equal(a, epoch_order(50, 4, 2))


# -- training runs --------------------------------------------------------------------------

def _run(small_data, **kw):
    model = build_model(make_config("gecnn-toy", seed=1))
    result = train(model, small_data, TrainConfig(epochs=2, batch_size=4, seed=5, **kw))
    return result, model


def test_reference_mode_is_bitwise_repeatable(small_data):
    (r1, m1), (r2, m2) = _run(small_data), _run(small_data)
    assert np.array(r1.step_losses).tobytes() == np.array(r2.step_losses).tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(m1.state().values(), m2.state().values()))
    assert r1.log_lines == r2.log_lines


def test_parallel_mode_is_deterministic(small_data):
    (r1, m1), (r2, m2) = _run(small_data, workers=2), _run(small_data, workers=2)
    assert r1.step_losses == r2.step_losses
    assert all(a.tobytes() == b.tobytes() for a, b in zip(m1.state().values(), m2.state().values()))
    assert all(np.isfinite(r1.step_losses))
    # running statistics were updated from the deferred per-shard records
    fresh = build_model(make_config("gecnn-toy", seed=1))
    assert not np.array_equal(m1.stream.input_norm.running_mean, fresh.stream.input_norm.running_mean)


def test_parallel_mode_with_one_sample_shards_matches_manual_average(small_data):
    # batch of two split into two single-sample shards
    model = build_model(make_config("gecnn-toy", seed=1))
    twin = build_model(make_config("gecnn-toy", seed=1))
    data = small_data.subset([0, 7])
    train(model, data, TrainConfig(lr=0.1, momentum=0.0, epochs=1, batch_size=2, workers=2, seed=0))
    order = epoch_order(2, 0, 0)
    grads = []
    for i in order:
        twin.zero_grad()
        tn.softmax_cross_entropy(twin(data.batch([i]), training=True), data.labels[[i]]).backward()
        grads.append({k: p.grad.copy() for k, p in twin.named_parameters().items()})
    start = build_model(make_config("gecnn-toy", seed=1)).named_parameters()
    for name, p in model.named_parameters().items():
        expect = start[name].data - 0.1 * (0.5 * grads[0][name] + 0.5 * grads[1][name])
        assert np.allclose(p.data, expect, rtol=0, atol=1e-12), name


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard(small_data):
    model = build_model(make_config("gecnn-toy"))
    with pytest.raises(DivergenceError, match="epoch"):
        train(model, small_data, TrainConfig(lr=1e200, momentum=0.0, epochs=3, batch_size=4))


def test_empty_dataset_rejected(small_data):
    with pytest.raises(ValueError, match="empty"):
        train(build_model(make_config("gecnn-toy")), small_data.subset([]), TrainConfig())


def test_log_lines_format(tmp_path, small_data):
    result, _ = _run(small_data)
    write_log(tmp_path / "train.log", result.log_lines)
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert len(lines) == 2 * 3
    for line in lines:
        assert re.fullmatch(r"epoch=\d+ step=\d+ loss=\d+\.\d{6} lr=[0-9.e-]+", line)


# -- metrics --------------------------------------------------------------------------------

def test_ties_go_to_lower_class_index():
    logits = np.zeros((3, 4))
    assert rank_classes(logits)[0].tolist() == [0, 1, 2, 3]
    assert top_k_accuracy(logits, np.array([0, 1, 2]), 1) == pytest.approx(1 / 3)
    assert top_k_accuracy(logits, np.array([0, 1, 2]), 2) == pytest.approx(2 / 3)
    logits = np.array([[1.0, 3.0, 3.0, 0.0]])
    assert rank_classes(logits)[0].tolist() == [1, 2, 0, 3]


def test_k_outside_range_raises():
    with pytest.raises(ValueError):
        top_k_accuracy(np.zeros((2, 4)), np.zeros(2, dtype=int), 5)
    with pytest.raises(ValueError):
        top_k_accuracy(np.zeros((2, 4)), np.zeros(2, dtype=int), 0)


def test_random_logits_hit_chance():
    rng = np.random.default_rng(0)
    C, n = 5, 20000
    acc = top_k_accuracy(rng.uniform(size=(n, C)), rng.integers(0, C, n), 1)
    assert abs(acc - 1 / C) < 0.02


def test_perfect_classifier_and_saturated_top5():
    labels = np.array([0, 1, 2, 3, 3, 1])
    report = evaluate_logits(np.eye(4)[labels], labels, list("abcd"))
    assert report.top1 == 1.0 and report.top5 == 1.0
    assert report.confusion == np.diag([1, 2, 1, 2]).tolist()
    wrong = evaluate_logits(-np.eye(4)[labels] * 0 + np.eye(4)[(labels + 1) % 4], labels, list("abcd"))
    assert wrong.top1 == 0.0 and wrong.top5 == 1.0


@given(st.integers(2, 8), st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_report_invariants(C, n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, C, n)
    report = evaluate_logits(rng.normal(size=(n, C)).round(1), labels, [str(c) for c in range(C)])
    assert report.top5 >= report.top1
    assert all(0.0 <= a <= 1.0 for a in report.per_class)
    assert np.array_equal(np.sum(report.confusion, axis=1), np.bincount(labels, minlength=C))
    assert EvalReport.from_json(report.to_json()) == report


def test_report_file_errors_and_table():
    report = evaluate_logits(np.eye(3)[[0, 1, 1]], np.array([0, 1, 2]), ["wave", "clap", "jump"])
    doc = report.to_json()
    with pytest.raises(ValueError, match="version"):
        EvalReport.from_json(doc.replace('"version": 1', '"version": 2'))
    with pytest.raises(ValueError, match="not an evaluation"):
        EvalReport.from_json('{"schema": "other"}')
    assert report.per_class_table().splitlines() == [
        "class,name,samples,accuracy", "0,wave,1,1.0000", "1,clap,1,1.0000", "2,jump,1,0.0000"]


def test_stratified_split():
    labels = np.repeat(np.arange(4), 50)
    train_idx, test_idx = stratified_split(labels, 0.25, 0)
    assert not set(train_idx) & set(test_idx)
    assert sorted(np.concatenate([train_idx, test_idx])) == list(range(200))
    assert np.all(np.bincount(labels[test_idx]) == round(0.25 * 50))
    again = stratified_split(labels, 0.25, 0)
    assert np.array_equal(again[1], test_idx)
    assert not np.array_equal(stratified_split(labels, 0.25, 1)[1], test_idx)
    with pytest.raises(ValueError):
        stratified_split(labels, 1.0, 0)


def test_evaluate_matches_logits(small_data):
    model = build_model(make_config("gecnn-toy"))
    report = evaluate(model, small_data, batch_size=5)
    assert sum(map(sum, report.confusion)) == len(small_data)


# -- datasets -------------------------------------------------------------------------------

def test_dataset_from_saved_joints_and_bones(tmp_path):
    ds = synth_dataset(2, 2, 8, "kinetics18", seed=1)
    topo = resolve_topology("kinetics18")[0]
    m_j = save_dataset(tmp_path / "j", ds.sequences, ds.class_names, "kinetics18", "kinetics2d")
    bones = [joints_to_bones(s, topo) for s in ds.sequences]
    m_b = save_dataset(tmp_path / "b", bones, ds.class_names, "kinetics18", "kinetics2d")
    a = ArrayDataset.from_manifest(load_manifest(tmp_path / "j"))
    b = ArrayDataset.from_manifest(load_manifest(tmp_path / "b"))
    direct = ArrayDataset.from_synth(ds)
    assert a.joints.tobytes() == direct.joints.tobytes() and a.bones.tobytes() == direct.bones.tobytes()
    # sequence files store 32-bit values
    assert b.joints is None and np.allclose(b.bones, direct.bones, rtol=1e-6, atol=1e-7)
    assert np.array_equal(b.labels, direct.labels) and len(m_j) == len(m_b) == 4


# -- ablation -------------------------------------------------------------------------------

def test_ablation_table_and_errors(small_data):
    cfg = TrainConfig(epochs=1, batch_size=6)
    rows = ablate_temporal_kernel([3], make_config("gecnn-toy"), small_data, small_data, cfg)
    assert len(rows) == 1 and rows[0].kernel_size == 3
    lines = ablation_csv(rows).splitlines()
    assert lines[0] == "temporal_kernel_size,top1,top5"
    assert re.fullmatch(r"3,\d\.\d{4},1\.0000", lines[1])
    with pytest.raises(ValueError, match="odd"):
        ablate_temporal_kernel([3, 4], make_config("gecnn-toy"), small_data, small_data, cfg)
