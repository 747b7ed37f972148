"""Run directories, stage state machine, and the end-to-end pipeline.

A run directory is a pure function of (config, seeds, decisions file): every
derived artifact can be deleted and reproduced byte-identically. Each stage
records a fingerprint of the config sections it depends on; changing any of
those sections invalidates that stage and everything after it, while stages
whose inputs are untouched are skipped on re-runs.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng, synthdata
from .adjust import AdjustmentSpec
from .augment import (AttributeQuery, auto_filter, finalize_sets,
                      generate_candidates, load_decisions, load_pool, score_pool,
                      synthesize_prompts, write_pool, ExternalPromptClient)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .denoiser import ModelDims
from .errors import StageError, UvapError
from .evalharness import (eval_prompt_family, evaluate_condition, lambda_sweep,
                          sample_condition, sample_count_ablation, write_reports)
from .personalize import (DualTrainConfig, PrelearnConfig, dual_train,
                          make_prior_set, prelearn)
from .synthdata import AttributeTuple, CorpusSpec, load_image, load_manifest
from .training import BaseTrainConfig, train_base

STAGES = ("created", "base_trained", "prelearned", "candidates_ready",
          "curated", "dual_trained", "evaluated")

# Config sections each stage's artifacts depend on (cumulative).
STAGE_SECTIONS: dict[str, tuple[str, ...]] = {
    "base_trained": ("seed", "image_size", "schedule", "corpus", "base"),
    "prelearned": ("seed", "image_size", "schedule", "corpus", "base", "prelearn"),
    "candidates_ready": ("seed", "image_size", "schedule", "corpus", "base",
                         "prelearn", "augment", "inference"),
    "curated": ("seed", "image_size", "schedule", "corpus", "base", "prelearn",
                "augment", "inference", "dual"),
    "dual_trained": ("seed", "image_size", "schedule", "corpus", "base",
                     "prelearn", "augment", "inference", "dual"),
    "evaluated": ("seed", "image_size", "schedule", "corpus", "base", "prelearn",
                  "augment", "inference", "dual", "eval"),
}


def stage_rank(stage: str) -> int:
    return STAGES.index(stage)


@dataclass
class RunState:
    run_id: str
    stage: str = "created"
    stage_hashes: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), sort_keys=True,
                                   indent=2))

    @staticmethod
    def load(path: Path) -> "RunState":
        return RunState(**json.loads(path.read_text()))


class Run:
    """Handle to one run directory."""

    def __init__(self, root: str | Path, run_id: str):
        self.run_id = run_id
        self.dir = Path(root) / run_id

    # -- paths ------------------------------------------------------------
    @property
    def config_path(self): return self.dir / "config.json"
    @property
    def state_path(self): return self.dir / "state.json"
    @property
    def decisions_path(self): return self.dir / "decisions.jsonl"
    @property
    def lock_path(self): return self.dir / ".lock"

    def exists(self) -> bool:
        return self.config_path.exists()

    def create(self, config: RunConfig) -> None:
        config.validate()
        self.dir.mkdir(parents=True, exist_ok=True)
        config.save(self.config_path)
        if not self.state_path.exists():
            RunState(run_id=self.run_id).save(self.state_path)

    def config(self) -> RunConfig:
        return RunConfig.load(self.config_path)

    def state(self) -> RunState:
        if not self.state_path.exists():
            return RunState(run_id=self.run_id)
        return RunState.load(self.state_path)

    def effective_stage(self, config: RunConfig | None = None) -> str:
        """Highest completed stage whose config fingerprints still match."""
        config = config or self.config()
        state = self.state()
        effective = "created"
        for stage in STAGES[1:]:
            if stage_rank(state.stage) < stage_rank(stage):
                break
            want = config.section_hash(STAGE_SECTIONS[stage])
            if state.stage_hashes.get(stage) != want:
                break
            effective = stage
        return effective

    def require_stage(self, stage: str) -> None:
        if stage_rank(self.effective_stage()) < stage_rank(stage):
            raise StageError(stage)

    def mark_stage(self, stage: str, config: RunConfig, **artifacts) -> None:
        state = self.state()
        state.stage = stage
        state.stage_hashes[stage] = config.section_hash(STAGE_SECTIONS[stage])
        # Drop recorded hashes of stages after this one: they are stale.
        for later in STAGES[stage_rank(stage) + 1:]:
            state.stage_hashes.pop(later, None)
        state.artifacts.update(artifacts)
        state.save(self.state_path)

    def is_locked(self) -> bool:
        if not self.lock_path.exists():
            return False
        try:
            pid = int(self.lock_path.read_text().strip())
            os.kill(pid, 0)
            return True
        except (ValueError, ProcessLookupError, PermissionError):
            return False

    def acquire_lock(self) -> None:
        if self.is_locked():
            raise UvapError(f"run {self.run_id!r} is locked by a running server")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.lock_path.write_text(str(os.getpid()))

    def release_lock(self) -> None:
        if self.lock_path.exists():
            self.lock_path.unlink()

    # -- derived loads ------------------------------------------------------
    def load_corpus(self):
        records = load_manifest(self.dir / "corpus" / "manifest.jsonl")
        images = np.stack([load_image(self.dir / "corpus" / r.path) for r in records])
        return records, images

    def load_refs(self) -> np.ndarray:
        refs = load_manifest(self.dir / "corpus" / "refs.jsonl")
        return np.stack([load_image(self.dir / "corpus" / r.path) for r in refs])

    def checkpoint(self, name: str) -> Checkpoint:
        return load_checkpoint(self.dir / "checkpoints" / f"{name}.uvap")

    def best_checkpoint(self) -> Checkpoint:
        for name, stage in (("dual", "dual_trained"), ("g0", "prelearned")):
            if stage_rank(self.effective_stage()) >= stage_rank(stage):
                return self.checkpoint(name)
        raise StageError("prelearned")

    def query(self, config: RunConfig | None = None) -> AttributeQuery:
        config = config or self.config()
        return AttributeQuery(target_axis=config.augment.target_axis,
                              reference=AttributeTuple(*config.corpus.reference))


# ---------------------------------------------------------------------------
# Stage implementations

def _guard(run: Run, stage: str, config: RunConfig) -> bool:
    """True when the stage is already done under the current config."""
    return stage_rank(run.effective_stage(config)) >= stage_rank(stage)


def stage_synth(run: Run, config: RunConfig, force: bool = False) -> None:
    fp_path = run.dir / "corpus" / ".fingerprint"
    fp = config.section_hash(("image_size", "corpus"))
    if not force and fp_path.exists() and fp_path.read_text() == fp:
        return
    c = config.corpus
    spec = CorpusSpec(
        shapes=tuple(c.shapes) if c.shapes else synthdata.SHAPES,
        colors=tuple(c.colors) if c.colors else synthdata.COLOR_SCHEMES,
        patterns=tuple(c.patterns) if c.patterns else synthdata.PATTERNS,
        seeds_per_tuple=c.seeds_per_tuple,
        reference=AttributeTuple(*c.reference),
        reference_seeds=c.reference_seeds,
        size=config.image_size)
    synthdata.build_corpus(spec, run.dir / "corpus")
    fp_path.write_text(fp)


def stage_train_base(run: Run, config: RunConfig) -> None:
    if _guard(run, "base_trained", config):
        return
    stage_synth(run, config)
    records, images = run.load_corpus()
    cfg = BaseTrainConfig(
        seed=rng.derive_seed(config.seed, "base"),
        steps=config.base.steps, lr=config.base.lr,
        batch_size=config.base.batch_size, p_uncond=config.base.p_uncond,
        p_drop_attr=config.base.p_drop_attr,
        t_train=config.schedule.t_train, beta_start=config.schedule.beta_start,
        beta_end=config.schedule.beta_end, image_size=config.image_size)
    ckpt = train_base(images, [r.caption for r in records], cfg,
                      log_path=run.dir / "logs" / "base.jsonl")
    ckpt.metadata["config_hash"] = config.config_hash()
    save_checkpoint(ckpt, run.dir / "checkpoints" / "base.uvap")
    run.mark_stage("base_trained", config, base="checkpoints/base.uvap")


def stage_prelearn(run: Run, config: RunConfig) -> None:
    if _guard(run, "prelearned", config):
        return
    run.require_stage("base_trained")
    base = run.checkpoint("base")
    refs = run.load_refs()
    class_word = config.corpus.reference[0]
    cfg = PrelearnConfig(
        identifier=config.prelearn.identifier, class_word=class_word,
        alpha=config.prelearn.alpha, steps=config.prelearn.steps,
        lr=config.prelearn.lr, lr_multiplier=config.prelearn.lr_multiplier,
        n_prior=config.prelearn.n_prior, batch_size=config.prelearn.batch_size,
        sample_steps=config.inference.steps, guidance=config.inference.guidance)
    prior = make_prior_set(base, class_word, cfg.n_prior,
                           rng.derive_seed(config.seed, "prior-set"),
                           cfg.sample_steps, cfg.guidance)
    for i, img in enumerate(prior):
        synthdata.save_image(img, run.dir / "priors" / f"{i:03d}.png")
    ckpt = prelearn(base, refs, cfg, seed=rng.derive_seed(config.seed, "prelearn"),
                    prior_images=prior, log_path=run.dir / "logs" / "prelearn.jsonl")
    ckpt.metadata["config_hash"] = config.config_hash()
    save_checkpoint(ckpt, run.dir / "checkpoints" / "g0.uvap")
    run.mark_stage("prelearned", config, g0="checkpoints/g0.uvap")


def stage_augment(run: Run, config: RunConfig) -> None:
    if _guard(run, "candidates_ready", config):
        return
    run.require_stage("prelearned")
    g0 = run.checkpoint("g0")
    query = run.query(config)
    client = (ExternalPromptClient(config.augment.external_url)
              if config.augment.source == "external" else None)
    prompts = synthesize_prompts(query, g0.vocab, config.augment.n_each,
                                 source=config.augment.source, client=client)
    pool, skipped = generate_candidates(
        g0, prompts, config.augment.per_prompt,
        seed=rng.derive_seed(config.seed, "candidates"),
        out_dir=run.dir, steps=config.inference.steps,
        guidance=config.inference.guidance)
    refs = run.load_refs()
    score_pool(pool, refs, run.dir)
    pool = auto_filter(pool, config.augment.fraction)
    write_pool(pool, run.dir / "candidates" / "pool.jsonl")
    if skipped:
        (run.dir / "candidates" / "skipped.json").write_text(json.dumps(skipped))
    run.mark_stage("candidates_ready", config, pool="candidates/pool.jsonl")


def stage_curate(run: Run, config: RunConfig) -> None:
    if _guard(run, "curated", config):
        return
    run.require_stage("candidates_ready")
    pool = load_pool(run.dir / "candidates" / "pool.jsonl")
    decisions = load_decisions(run.decisions_path)
    d_plus, d_minus = finalize_sets(pool, decisions, config.dual.m, run.query(config))
    for cur in (d_plus, d_minus):
        payload = {"tag": cur.tag, "captions": cur.captions,
                   "image_paths": cur.image_paths, "m": cur.m}
        (run.dir / "curated").mkdir(parents=True, exist_ok=True)
        (run.dir / "curated" / f"{cur.tag}.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2))
    run.mark_stage("curated", config, plus="curated/plus.json",
                   minus="curated/minus.json")


def load_curated(run: Run, tag: str):
    from .augment import CuratedSet
    d = json.loads((run.dir / "curated" / f"{tag}.json").read_text())
    return CuratedSet(tag=d["tag"], captions=d["captions"],
                      image_paths=d["image_paths"], m=d["m"])


def _dual_cfg(config: RunConfig) -> DualTrainConfig:
    return DualTrainConfig(
        steps=config.dual.steps, lr=config.dual.lr,
        lr_multiplier=config.dual.lr_multiplier, mode=config.dual.mode,
        interleave=tuple(config.dual.interleave),
        batch_size=config.dual.batch_size)


def stage_dual(run: Run, config: RunConfig) -> None:
    if _guard(run, "dual_trained", config):
        return
    run.require_stage("curated")
    g0 = run.checkpoint("g0")
    ckpt = dual_train(g0, load_curated(run, "plus"), load_curated(run, "minus"),
                      _dual_cfg(config), seed=rng.derive_seed(config.seed, "dual"),
                      root=run.dir, log_path=run.dir / "logs" / "dual.jsonl")
    ckpt.metadata["config_hash"] = config.config_hash()
    save_checkpoint(ckpt, run.dir / "checkpoints" / "dual.uvap")
    run.mark_stage("dual_trained", config, dual="checkpoints/dual.uvap")


def stage_eval(run: Run, config: RunConfig) -> None:
    if _guard(run, "evaluated", config):
        return
    run.require_stage("dual_trained")
    dual = run.checkpoint("dual")
    g0 = run.checkpoint("g0")
    refs = run.load_refs()
    query = run.query(config)
    n = config.eval.seeds_per_condition
    seeds = [rng.derive_seed(config.seed, "eval", i) for i in range(n)]
    steps, guidance = config.inference.steps, config.inference.guidance

    reports = lambda_sweep(dual, query, refs, config.eval.lambda_grid, seeds,
                           steps, guidance)

    for method, ckpt, ident in (("prelearn-only", g0, config.prelearn.identifier),
                                ("tgt-literal", dual, "tgt"),
                                ("ngt-literal", dual, "ngt")):
        family = eval_prompt_family(query, identifier=ident)
        images, prompts = sample_condition(ckpt, family, seeds, steps, guidance)
        reports.append(evaluate_condition(images, prompts, query, refs,
                                          condition={"method": method},
                                          seeds=seeds))

    pool = load_pool(run.dir / "candidates" / "pool.jsonl")
    decisions = load_decisions(run.decisions_path)
    reports.extend(sample_count_ablation(
        g0, pool, decisions, query, refs, _dual_cfg(config),
        seed=rng.derive_seed(config.seed, "dual"), m_values=config.eval.m_grid,
        eval_seeds=seeds, candidates_root=run.dir, steps=steps,
        guidance=guidance, lam=config.inference.lam))

    write_reports(reports, run.dir / "reports" / "latest.json",
                  run.dir / "reports" / "latest.md")
    run.mark_stage("evaluated", config, reports="reports/latest.json")


PIPELINE_STAGES = (
    ("base_trained", stage_train_base),
    ("prelearned", stage_prelearn),
    ("candidates_ready", stage_augment),
    ("curated", stage_curate),
    ("dual_trained", stage_dual),
    ("evaluated", stage_eval),
)


def run_pipeline(run: Run, config: RunConfig) -> None:
    """All stages in order, headless; completed stages are skipped."""
    run.create(config)
    for _, fn in PIPELINE_STAGES:
        fn(run, config)
