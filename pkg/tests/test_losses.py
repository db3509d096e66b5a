import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from multinet_vit.nn import functional as F
from multinet_vit.tensor import ShapeError, Tensor
from multinet_vit.train.losses import DistillMode, cross_entropy, distillation_loss, kl_soft, one_hot

# -(log(1/8) + 7 log(7/8)), evaluated once by hand from the per-class binary form
LITERAL_UNIFORM_8 = 3.014161290051494


def test_uniform_categorical_is_ln8(f64):
    loss = cross_entropy(Tensor(np.zeros((4, 8))), one_hot([0, 3, 5, 7], 8))
    assert abs(float(loss.data) - math.log(8)) < 1e-9


def test_uniform_literal_matches_frozen_constant(f64):
    loss = cross_entropy(Tensor(np.zeros((3, 8))), one_hot([1, 2, 6], 8), "eq3-literal")
    assert abs(float(loss.data) - LITERAL_UNIFORM_8) < 1e-9


def test_literal_matches_direct_formula(f64, rng):
    logits = rng.normal(size=(5, 8))
    y = np.eye(8)[rng.integers(0, 8, 5)]
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    direct = np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p)).sum(axis=1))
    assert_allclose(float(cross_entropy(Tensor(logits), Tensor(y), "eq3-literal").data), direct, rtol=1e-12)


def test_confident_correct_prediction_has_near_zero_loss(f64):
    logits = np.full((1, 8), -50.0)
    logits[0, 2] = 50.0
    assert float(cross_entropy(Tensor(logits), one_hot([2], 8)).data) < 1e-12


def test_both_forms_prefer_the_true_class(f64, rng):
    for _ in range(100):
        k = int(rng.integers(0, 8))
        y = one_hot([k], 8)
        values = {}
        for form in ("categorical", "eq3-literal"):
            scores = []
            for guess in range(8):
                logits = np.zeros((1, 8))
                logits[0, guess] = 5.0
                scores.append(float(cross_entropy(Tensor(logits), y, form).data))
            values[form] = int(np.argmin(scores))
        assert values["categorical"] == values["eq3-literal"] == k


def test_target_validation():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), Tensor(np.array([[0.5, 0.5, 0.0]])))
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((1, 3))), one_hot([0], 4))
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), one_hot([0], 3), "hinge")


def test_kl_matches_direct_computation(f64, rng):
    t, s = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    pt, ps = F.softmax_np(t), F.softmax_np(s)
    direct = np.mean((pt * (np.log(pt) - np.log(ps))).sum(axis=1))
    assert_allclose(float(kl_soft(t, Tensor(s), 1.0).data), direct, rtol=1e-12)


def test_soft_kl_vanishes_when_teacher_equals_student(f64, rng):
    s = rng.normal(size=(4, 8))
    assert abs(float(kl_soft(s, Tensor(s), 3.0).data)) < 1e-9


def test_hard_mode_with_matching_teacher_is_two_ce(f64, rng):
    labels = rng.integers(0, 8, 6)
    y = one_hot(labels, 8)
    teacher = np.eye(8)[labels] * 4.0
    student = {"class_logits": Tensor(rng.normal(size=(6, 8))), "distill_logits": Tensor(rng.normal(size=(6, 8)))}
    total = float(distillation_loss(student, y, teacher, "hard").data)
    expected = float(cross_entropy(student["class_logits"], y).data) + float(
        cross_entropy(student["distill_logits"], y).data)
    assert abs(total - expected) < 1e-9


def test_distill_mode_parsing():
    assert DistillMode.parse("soft:2.5") == DistillMode("soft", 2.5)
    assert DistillMode.parse("soft(4)").temperature == 4.0
    assert DistillMode.parse("HARD").kind == "hard"
    for bad in ("warm", "soft:-1", "soft:x"):
        with pytest.raises(ValueError):
            DistillMode.parse(bad)
