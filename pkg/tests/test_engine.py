import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from p2at import ModelConfig, Parameter, Tensor, build
from p2at.data import synth_generate
from p2at.engine import (CSV_HEADER, ConfusionMatrix, EpochRecord, TrainConfig, confusion_update, evaluate, miou,
                         poly_lr, sgd_step, train, write_history)
from p2at.errors import ConfigError, MetricError, NumericalError

from oracles import iou_from_pixels, pixel_confusion


def test_poly_lr_endpoints_and_midpoint():
    assert poly_lr(0.01, 0, 100) == 0.01
    assert poly_lr(0.01, 100, 100) == 0.0
    assert abs(poly_lr(1e-2, 50, 100, 0.9) - 1e-2 * 0.5**0.9) < 1e-12
    assert abs(poly_lr(1e-2, 50, 100, 0.9) - 5.359e-3) < 1e-6


def test_poly_lr_errors():
    with pytest.raises(ConfigError):
        poly_lr(0.1, 0, 0)
    with pytest.raises(ConfigError):
        poly_lr(0.1, 11, 10)


@given(st.integers(1, 500), st.floats(0.1, 3.0))
def test_poly_lr_non_increasing(max_iter, power):
    lrs = [poly_lr(1.0, i, max_iter, power) for i in range(max_iter + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def _param(value, grad=None):
    p = Parameter(np.array(value, dtype=np.float64))
    p.grad = None if grad is None else np.array(grad, dtype=np.float64)
    return p


def test_plain_sgd_step():
    p = _param([1.0, -2.0], [0.5, 1.0])
    sgd_step([p], 0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p.data, [0.95, -2.1])
    assert p.grad is None


def test_decay_only_step_with_missing_grad():
    p = _param([2.0, -4.0])
    sgd_step([p], 0.1, momentum=0.0, weight_decay=0.01)
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.01))


def test_two_momentum_steps_unroll():
    p = _param([0.0], [1.0])
    from p2at.engine import SGD

    opt = SGD([p], momentum=0.9, weight_decay=0.0)
    opt.step(0.1)
    p.grad = np.array([1.0])
    opt.step(0.1)
    np.testing.assert_allclose(p.data, [-0.1 * 1.0 * (1 + 1.9)])


def test_zero_lr_is_bitwise_noop():
    rng = np.random.default_rng(0)
    ps = [Parameter(rng.standard_normal(5).astype(np.float32)) for _ in range(3)]
    for p in ps:
        p.grad = rng.standard_normal(5).astype(np.float32)
    before = [p.data.copy() for p in ps]
    sgd_step(ps, 0.0)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, ps))


def test_confusion_examples():
    cm = ConfusionMatrix(3).update(np.array([0, 1, 2, 2]), np.array([0, 1, 2, 2]))
    assert np.array_equal(cm.counts, np.diag([1, 1, 2]))
    confusion_update(cm, np.array([1, 2]), np.array([255, 255]))
    assert cm.total == 4


def test_confusion_argmax_lowest_index_ties():
    logits = np.zeros((1, 3, 1, 2))
    logits[0, 1, 0, 1] = logits[0, 2, 0, 1] = 1.0
    cm = confusion_update(ConfusionMatrix(3), Tensor(logits), np.array([[[0, 1]]]))
    assert cm.counts[0, 0] == 1 and cm.counts[1, 1] == 1


@given(st.integers(0, 2**20))
def test_confusion_matches_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 3, (4, 4))
    target = rng.integers(0, 3, (4, 4))
    target[rng.random((4, 4)) < 0.2] = 255
    cm = ConfusionMatrix(3).update(pred, target)
    assert np.array_equal(cm.counts, pixel_confusion(pred, target, 3))
    assert cm.total == int((target != 255).sum())


def test_miou_examples():
    iou, mean = miou(np.diag([3, 4]))
    assert iou.tolist() == [1.0, 1.0] and mean == 1.0
    iou, mean = miou(np.array([[2, 1], [1, 2]]))
    assert iou.tolist() == [0.5, 0.5] and mean == 0.5
    iou, mean = miou(np.array([[2, 0, 1], [0, 0, 0], [0, 0, 3]]))
    assert math.isnan(iou[1]) and mean == (2 / 3 + 3 / 4) / 2
    with pytest.raises(MetricError):
        miou(np.zeros((3, 3), dtype=int))


@given(st.integers(0, 2**20))
def test_miou_matches_pixel_sets(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    pred, target = rng.integers(0, k, 30), rng.integers(0, k, 30)
    iou, mean = miou(ConfusionMatrix(k).update(pred, target))
    ref = iou_from_pixels(pred, target, k)
    np.testing.assert_array_equal(iou, ref)
    defined = [v for v in ref if not math.isnan(v)]
    assert mean == pytest.approx(sum(defined) / len(defined), rel=0, abs=1e-15)


@given(st.integers(0, 2**20))
def test_miou_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    cm = rng.integers(0, 10, (4, 4))
    perm = rng.permutation(4)
    assert miou(cm)[1] == pytest.approx(miou(cm[np.ix_(perm, perm)])[1], abs=1e-15)


def test_confusion_merge_is_order_independent():
    rng = np.random.default_rng(1)
    parts = [ConfusionMatrix(3).update(rng.integers(0, 3, 9), rng.integers(0, 3, 9)) for _ in range(3)]
    a = ConfusionMatrix(3).merge(parts[0]).merge(parts[1]).merge(parts[2])
    b = ConfusionMatrix(3).merge(parts[2]).merge(parts[0]).merge(parts[1])
    assert np.array_equal(a.counts, b.counts)


@pytest.fixture(scope="module")
def small_corpus():
    return synth_generate(0, 4, 32, 32, 3)


def _tiny(seed=0):
    return build(ModelConfig.preset("tiny", 3), seed=seed)


def test_one_epoch_four_samples_batch_two_is_two_steps(small_corpus):
    cfg = TrainConfig(epochs=1, batch_size=2, crop_h=32, crop_w=32, eval_every=0)
    hist = train(_tiny(), small_corpus, cfg)
    assert [(r.epoch, r.iter) for r in hist] == [(1, 2)]


def test_training_is_bitwise_reproducible(small_corpus):
    cfg = TrainConfig(epochs=2, batch_size=3, crop_h=32, crop_w=32, seed=5, eval_every=1)
    a = [(r.loss, r.miou) for r in train(_tiny(1), small_corpus, cfg)]
    b = [(r.loss, r.miou) for r in train(_tiny(1), small_corpus, cfg)]
    assert a == b


def test_history_csv_format(tmp_path):
    path = tmp_path / "h.csv"
    write_history([EpochRecord(1, 8, 0.0123456789, 1.5, float("nan")), EpochRecord(2, 16, 0.0, 0.25, 0.5)], path)
    assert path.read_text().splitlines() == [CSV_HEADER, "1,8,0.012346,1.500000,nan", "2,16,0.000000,0.250000,0.500000"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_diagnostic(small_corpus):
    model = _tiny()
    model.head.weight.data[...] = np.inf
    with pytest.raises(NumericalError, match="epoch 1, iteration 0"):
        train(model, small_corpus, TrainConfig(epochs=1, crop_h=32, crop_w=32))


def test_train_config_validation(small_corpus):
    with pytest.raises(ConfigError):
        train(_tiny(), small_corpus, TrainConfig(base_lr=0))
    with pytest.raises(ConfigError):
        train(_tiny(), [], TrainConfig())


def test_evaluate_restores_mode(small_corpus):
    model = _tiny()
    model.train()
    cm = evaluate(model, small_corpus)
    assert model.training and cm.total == 4 * 32 * 32


def test_memorize_recipe_disables_augmentation():
    cfg = TrainConfig.memorize(seed=3)
    assert cfg.hflip_prob == 0 and cfg.scale_min == cfg.scale_max == 1.0 and cfg.seed == 3
