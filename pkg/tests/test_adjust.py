"""Semantic adjustment algebra and adjusted sampling."""

import numpy as np
import pytest

from uvap import rng
from uvap.adjust import (AdjustmentSpec, InferenceRequest, combine_attributes,
                         personalized_sample, semantic_adjust)
from uvap.errors import ShapeMismatchError, ValidationError


def test_lambda_zero_identity():
    v = np.array([0.3, -1.2, 4.0])
    w = np.array([1.0, 1.0, 1.0])
    assert np.array_equal(semantic_adjust(v, w, 0.0), v)


def test_substitution_example():
    out = semantic_adjust(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.3)
    assert np.allclose(out, [1.3, -0.3], atol=1e-12)


def test_equal_vectors_fixed_point():
    v = np.array([2.0, -3.0, 0.5])
    for lam in (-1.0, 0.0, 0.3, 5.0):
        assert np.allclose(semantic_adjust(v, v, lam), v, atol=1e-12)


def test_bilinearity():
    gen = rng.stream(1, "bilinear")
    a, b, c = (gen.normal(size=4) for _ in range(3))
    lam = 0.4
    left = semantic_adjust(2 * a + b, c, lam)
    right = 2 * semantic_adjust(a, c, lam) + semantic_adjust(b, c, lam) \
        - 2 * semantic_adjust(np.zeros(4), c, lam)
    assert np.allclose(left, right, atol=1e-12)
    # Linear in v_ngt as well.
    left2 = semantic_adjust(a, 2 * b + c, lam)
    right2 = 2 * semantic_adjust(a, b, lam) + semantic_adjust(a, c, lam) \
        - 2 * semantic_adjust(a, np.zeros(4), lam)
    assert np.allclose(left2, right2, atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        semantic_adjust(np.zeros(3), np.zeros(4), 0.1)


def test_cosine_to_ngt_nonincreasing_in_lambda():
    # Dense lambda grid over random unit-vector pairs.
    gen = rng.stream(7, "cosine-mono")
    lambdas = np.linspace(0.0, 1.0, 21)
    for _ in range(1000):
        v = gen.normal(size=6)
        w = gen.normal(size=6)
        v /= np.linalg.norm(v)
        w /= np.linalg.norm(w)
        if np.allclose(v, w):
            continue
        cosines = []
        for lam in lambdas:
            s = semantic_adjust(v, w, lam)
            cosines.append(s @ w / (np.linalg.norm(s) * np.linalg.norm(w)))
        assert all(c2 <= c1 + 1e-9 for c1, c2 in zip(cosines, cosines[1:]))


def test_normalized_direction_variant():
    v, w = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    out = semantic_adjust(v, w, 0.5, normalize_direction=True)
    d = (v - w) / np.linalg.norm(v - w)
    assert np.allclose(out, v + 0.5 * d)


# ---------------------------------------------------------------------------
# Sampling

def test_lambda_zero_equals_literal_tgt(tiny_base):
    req = InferenceRequest(prompt="a photo of a sks color circle",
                           specs=[AdjustmentSpec(lam=0.0)], steps=5, seed=9,
                           count=2)
    adjusted = personalized_sample(req, tiny_base)
    literal = personalized_sample(
        InferenceRequest(prompt="a photo of a tgt color circle", specs=[],
                         steps=5, seed=9, count=2), tiny_base)
    assert np.array_equal(adjusted, literal)


def test_personalized_sample_deterministic(tiny_base):
    req = InferenceRequest(prompt="a photo of a sks color circle",
                           specs=[AdjustmentSpec(lam=0.3)], steps=5, seed=4,
                           count=2)
    a = personalized_sample(req, tiny_base)
    b = personalized_sample(req, tiny_base)
    assert np.array_equal(a, b)


def test_placeholder_without_spec_rejected(tiny_base):
    req = InferenceRequest(prompt="a photo of a sks color circle", specs=[],
                           steps=5, seed=1, count=1)
    with pytest.raises(ValidationError, match="sks"):
        personalized_sample(req, tiny_base)


def test_unknown_token_rejected(tiny_base):
    from uvap.errors import TokenizationError
    req = InferenceRequest(prompt="a photo of a sks color zeppelin",
                           specs=[AdjustmentSpec(lam=0.0)], steps=5, seed=1,
                           count=1)
    with pytest.raises(TokenizationError):
        personalized_sample(req, tiny_base)


def test_lambda_outside_range_warns(tiny_base):
    req = InferenceRequest(prompt="a photo of a sks color circle",
                           specs=[AdjustmentSpec(lam=1.5)], steps=5, seed=1,
                           count=1)
    with pytest.warns(UserWarning, match="lambda"):
        personalized_sample(req, tiny_base)


def test_combine_two_placeholders(tiny_base):
    specs = [AdjustmentSpec(placeholder="sks1", tgt_token="tgt1",
                            ngt_token="ngt1", lam=0.0),
             AdjustmentSpec(placeholder="sks2", tgt_token="tgt2",
                            ngt_token="ngt2", lam=0.0)]
    req = InferenceRequest(prompt="a photo of a sks1 pattern sks2 star",
                           specs=specs, steps=5, seed=2, count=1)
    out = combine_attributes(req, tiny_base)
    literal = personalized_sample(
        InferenceRequest(prompt="a photo of a tgt1 pattern tgt2 star",
                         specs=[], steps=5, seed=2, count=1), tiny_base)
    assert np.array_equal(out, literal)


def test_combine_swapped_specs_differ(tiny_base):
    base_specs = [AdjustmentSpec(placeholder="sks1", tgt_token="tgt1",
                                 ngt_token="ngt1", lam=0.2),
                  AdjustmentSpec(placeholder="sks2", tgt_token="tgt2",
                                 ngt_token="ngt2", lam=0.2)]
    swapped = [AdjustmentSpec(placeholder="sks1", tgt_token="tgt2",
                              ngt_token="ngt2", lam=0.2),
               AdjustmentSpec(placeholder="sks2", tgt_token="tgt1",
                              ngt_token="ngt1", lam=0.2)]
    prompt = "a photo of a sks1 pattern sks2 star"
    a = combine_attributes(InferenceRequest(prompt=prompt, specs=base_specs,
                                            steps=5, seed=3, count=1), tiny_base)
    b = combine_attributes(InferenceRequest(prompt=prompt, specs=swapped,
                                            steps=5, seed=3, count=1), tiny_base)
    assert not np.array_equal(a, b)


def test_combine_single_placeholder_degenerates(tiny_base):
    req = InferenceRequest(prompt="a photo of a sks color circle",
                           specs=[AdjustmentSpec(lam=0.3)], steps=5, seed=5,
                           count=1)
    assert np.array_equal(combine_attributes(req, tiny_base),
                          personalized_sample(req, tiny_base))


def test_combine_overlapping_identifiers_rejected(tiny_base):
    specs = [AdjustmentSpec(placeholder="sks1", tgt_token="tgt", ngt_token="ngt"),
             AdjustmentSpec(placeholder="sks2", tgt_token="tgt", ngt_token="ngt2")]
    req = InferenceRequest(prompt="a photo of a sks1 pattern sks2 star",
                           specs=specs, steps=5, seed=1, count=1)
    with pytest.raises(ValidationError, match="shared"):
        combine_attributes(req, tiny_base)


def test_adjustment_never_baked_into_checkpoint(tiny_base):
    before = {k: v.copy() for k, v in tiny_base.params.items()}
    req = InferenceRequest(prompt="a photo of a sks color circle",
                           specs=[AdjustmentSpec(lam=0.5)], steps=5, seed=1,
                           count=1)
    personalized_sample(req, tiny_base)
    for name in before:
        assert np.array_equal(tiny_base.params[name], before[name])
