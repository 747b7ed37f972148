"""Pre-learning and dual-training contracts."""

import json

import numpy as np
import pytest

from uvap.augment import CuratedSet
from uvap.errors import ConfigError, ValidationError
from uvap.personalize import (DualTrainConfig, PrelearnConfig, dual_train,
                              make_prior_set, prelearn)


def _prelearn_cfg(**kw):
    defaults = dict(steps=6, n_prior=2, batch_size=2, sample_steps=5)
    defaults.update(kw)
    return PrelearnConfig(**defaults)


def _curated(tag, token, images):
    captions = [f"a photo of a {token} color circle"] * len(images) if tag == "plus" \
        else [f"a photo of a green {token} star"] * len(images)
    return CuratedSet(tag=tag, captions=captions,
                      image_paths=[""] * len(images), m=len(images),
                      images=images)


def test_make_prior_set_counts_and_determinism(tiny_base):
    empty = make_prior_set(tiny_base, "star", 0, seed=1)
    assert empty.shape == (0, 32, 32, 3)
    a = make_prior_set(tiny_base, "star", 3, seed=1, steps=5)
    b = make_prior_set(tiny_base, "star", 3, seed=1, steps=5)
    assert a.shape == (3, 32, 32, 3)
    assert np.array_equal(a, b)


def test_make_prior_set_unknown_class_word(tiny_base):
    from uvap.errors import TokenizationError
    with pytest.raises(TokenizationError):
        make_prior_set(tiny_base, "backpack", 1, seed=1, steps=5)


def test_prelearn_steps_zero_identity(tiny_base, reference_images):
    out = prelearn(tiny_base, reference_images, _prelearn_cfg(steps=0), seed=2)
    for name in tiny_base.params:
        assert np.array_equal(out.params[name], tiny_base.params[name]), name


def test_prelearn_alpha_zero_equals_refs_only(tiny_base, reference_images):
    # Independent random streams per term: with alpha = 0 the trajectory is
    # bit-identical to training with no prior set at all.
    with_prior = prelearn(tiny_base, reference_images,
                          _prelearn_cfg(alpha=0.0, n_prior=4), seed=3,
                          prior_images=make_prior_set(tiny_base, "star", 4,
                                                      seed=9, steps=5))
    no_prior = prelearn(tiny_base, reference_images,
                        _prelearn_cfg(alpha=0.0, n_prior=0), seed=3)
    for name in with_prior.params:
        assert np.array_equal(with_prior.params[name], no_prior.params[name]), name


def test_prelearn_loss_decomposition(tiny_base, reference_images, tmp_path):
    log = tmp_path / "pl.jsonl"
    prelearn(tiny_base, reference_images, _prelearn_cfg(alpha=0.7), seed=4,
             log_path=log)
    for line in log.read_text().splitlines():
        r = json.loads(line)
        assert r["loss_total"] == pytest.approx(
            r["loss_recon"] + 0.7 * r["loss_prior_or_minus"], abs=1e-6)


def test_prelearn_determinism(tiny_base, reference_images):
    a = prelearn(tiny_base, reference_images, _prelearn_cfg(), seed=5)
    b = prelearn(tiny_base, reference_images, _prelearn_cfg(), seed=5)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()


def test_prelearn_empty_refs_rejected(tiny_base):
    with pytest.raises(ConfigError):
        prelearn(tiny_base, np.zeros((0, 32, 32, 3)), _prelearn_cfg(), seed=1)


def test_prelearn_wrong_ref_size_rejected(tiny_base):
    from uvap.errors import ShapeMismatchError
    with pytest.raises(ShapeMismatchError):
        prelearn(tiny_base, np.zeros((2, 16, 16, 3)), _prelearn_cfg(), seed=1)


def test_dual_steps_zero_identity(tiny_base, reference_images):
    d_plus = _curated("plus", "tgt", reference_images[:2])
    d_minus = _curated("minus", "ngt", reference_images[:2])
    out = dual_train(tiny_base, d_plus, d_minus, DualTrainConfig(steps=0), seed=1)
    for name in tiny_base.params:
        assert np.array_equal(out.params[name], tiny_base.params[name])


def test_dual_embedding_only_touches_two_rows(tiny_base, reference_images):
    d_plus = _curated("plus", "tgt", reference_images[:2])
    d_minus = _curated("minus", "ngt", reference_images[:2])
    cfg = DualTrainConfig(steps=6, mode="embedding-only", batch_size=2)
    out = dual_train(tiny_base, d_plus, d_minus, cfg, seed=2)
    table = tiny_base.table
    rows = {table.token_id("tgt"), table.token_id("ngt")}
    for name in tiny_base.params:
        if name == "tok.emb":
            continue
        assert out.params[name].tobytes() == tiny_base.params[name].tobytes(), name
    emb_before, emb_after = tiny_base.params["tok.emb"], out.params["tok.emb"]
    for row in range(emb_before.shape[0]):
        if row in rows:
            assert not np.array_equal(emb_after[row], emb_before[row])
        else:
            assert emb_after[row].tobytes() == emb_before[row].tobytes()


def test_dual_identifier_locality(tiny_base, reference_images):
    # Embedding-only training leaves encodings of identifier-free prompts
    # untouched.
    d_plus = _curated("plus", "tgt", reference_images[:2])
    d_minus = _curated("minus", "ngt", reference_images[:2])
    cfg = DualTrainConfig(steps=6, mode="embedding-only", batch_size=2)
    out = dual_train(tiny_base, d_plus, d_minus, cfg, seed=3)
    prompt = "a photo of a red solid circle"
    assert np.array_equal(out.encode(prompt), tiny_base.encode(prompt))
    assert not np.array_equal(out.encode("a photo of a tgt color circle"),
                              tiny_base.encode("a photo of a tgt color circle"))


def test_dual_caption_missing_identifier_rejected(tiny_base, reference_images):
    bad = CuratedSet(tag="plus", captions=["a photo of a red solid circle"],
                     image_paths=[""], m=1, images=reference_images[:1])
    d_minus = _curated("minus", "ngt", reference_images[:1])
    with pytest.raises(ValidationError, match="sample 0"):
        dual_train(tiny_base, bad, d_minus, DualTrainConfig(steps=1), seed=1)


def test_dual_determinism(tiny_base, reference_images):
    d_plus = _curated("plus", "tgt", reference_images[:2])
    d_minus = _curated("minus", "ngt", reference_images[:2])
    cfg = DualTrainConfig(steps=4, batch_size=2)
    a = dual_train(tiny_base, d_plus, d_minus, cfg, seed=7)
    b = dual_train(tiny_base, d_plus, d_minus, cfg, seed=7)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()


def test_dual_config_validation():
    with pytest.raises(ConfigError):
        DualTrainConfig(target_identifier="tgt", nontarget_identifier="tgt")
    with pytest.raises(ConfigError):
        DualTrainConfig(mode="half")
    with pytest.raises(ConfigError):
        DualTrainConfig(interleave=(0, 1))
