"""Shared fixtures: a miniature corpus and checkpoints trained once per session."""

from __future__ import annotations

import numpy as np
import pytest

from uvap import synthdata as sd
from uvap.denoiser import ModelDims
from uvap.diffusion import build_schedule
from uvap.training import BaseTrainConfig, new_checkpoint, train_base

REFERENCE = sd.AttributeTuple("star", "red_blue", "hstripes")


def small_corpus(n: int = 48, seed: int = 0):
    """Deterministic slice of the attribute grid, reference tuple excluded."""
    tuples = [a for a in sd.all_attribute_tuples() if a != REFERENCE]
    picked = tuples[::
                    max(1, len(tuples) // n)][:n]
    images = np.stack([sd.render_scene(a, seed, 32) for a in picked])
    captions = [sd.caption_of(a) for a in picked]
    return images, captions


@pytest.fixture(scope="session")
def fresh_checkpoint():
    """Untrained checkpoint with the full vocabulary; fast to build."""
    return new_checkpoint(ModelDims(image_size=32),
                          build_schedule(100, 1e-4, 0.02), seed=11)


@pytest.fixture(scope="session")
def tiny_base():
    """A briefly trained base model shared by downstream module tests."""
    images, captions = small_corpus()
    cfg = BaseTrainConfig(seed=3, steps=60, batch_size=8, t_train=100)
    return train_base(images, captions, cfg)


@pytest.fixture(scope="session")
def reference_images():
    return np.stack([sd.render_scene(REFERENCE, s, 32) for s in range(5)])


def tiny_run_config(seed: int = 7):
    """A pipeline config small enough to run every stage in seconds."""
    from uvap.config import (AugmentSection, BaseSection, CorpusSection,
                             DualSection, EvalSection, InferenceSection,
                             PrelearnSection, RunConfig, ScheduleSection)
    return RunConfig(
        seed=seed, image_size=32,
        schedule=ScheduleSection(t_train=100),
        corpus=CorpusSection(seeds_per_tuple=1, reference_seeds=4,
                             shapes=["star", "circle", "square"],
                             colors=["red", "green", "red_blue"],
                             patterns=["solid", "hstripes"]),
        base=BaseSection(steps=25, batch_size=8),
        prelearn=PrelearnSection(steps=10, n_prior=4, batch_size=2),
        augment=AugmentSection(n_each=2, per_prompt=10, fraction=0.5),
        dual=DualSection(steps=10, m=4, batch_size=2),
        inference=InferenceSection(steps=10),
        eval=EvalSection(seeds_per_condition=4, lambda_grid=[0.0, 0.3],
                         m_grid=[4, 8]),
    )


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A completed tiny pipeline run shared by pipeline and server tests."""
    from uvap.pipeline import Run, run_pipeline
    root = tmp_path_factory.mktemp("runs")
    run = Run(root, "tiny")
    run_pipeline(run, tiny_run_config())
    return run
