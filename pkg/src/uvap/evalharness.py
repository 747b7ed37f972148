"""Quantitative evaluation: fidelity, diversity, exact accuracy and leakage.

All metrics are computed from the pixel oracle, so evaluation is exactly
reproducible: prompt fidelity and image fidelity are cosines in the fixed
attribute-feature space, the diversity score is an inception-style
exp(mean KL) over softened oracle posteriors, and accuracy/leakage compare
oracle labels against the queried reference values directly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synthdata
from .adjust import AdjustmentSpec, InferenceRequest, personalized_sample
from .augment import AttributeQuery, CuratedSet, axis_of_value
from .checkpoint import Checkpoint
from .errors import EvaluationError
from .synthdata import (AttributeReading, AttributeTuple, attribute_embedding,
                        classify_attributes, partial_attribute_embedding)

POSTERIOR_TEMPERATURE = 0.1


# ---------------------------------------------------------------------------
# Prompt handling

def parse_partial_prompt(prompt: str) -> tuple[str | None, str | None, str | None]:
    """Extract (shape, color, pattern) words from a caption-grammar prompt.

    Grammar filler words are ignored; any other unknown word, or a second
    word on an already-bound axis, is an evaluation error.
    """
    found: dict[str, str] = {}
    for w in prompt.split():
        if w in ("a", "photo", "of"):
            continue
        axis = axis_of_value(w)
        if axis is None:
            raise EvaluationError(f"cannot interpret word {w!r} in {prompt!r}")
        if axis in found:
            raise EvaluationError(f"duplicate {axis} word in {prompt!r}")
        found[axis] = w
    return found.get("shape"), found.get("color"), found.get("pattern")


def resolve_eval_prompt(prompt: str, query: AttributeQuery,
                        identifiers: tuple[str, ...] = ("sks", "tgt", "ngt")) -> str:
    """Substitute '<identifier> <descriptor>' with the queried ground truth.

    A bare identifier (no descriptor following) is dropped; the remainder
    must parse under the caption grammar.
    """
    words = prompt.split()
    out: list[str] = []
    i = 0
    while i < len(words):
        w = words[i]
        if w in identifiers:
            if i + 1 < len(words) and words[i + 1] == query.descriptor:
                out.append(query.reference_value(query.target_axis))
                i += 2
                continue
            i += 1
            continue
        out.append(w)
        i += 1
    return " ".join(out)


def eval_prompt_family(query: AttributeQuery, identifier: str = "sks") -> list[str]:
    """Novel-concept prompts requesting the reference value on the target axis."""
    novel = [v for v in
             {"shape": synthdata.SHAPES, "color": synthdata.COLOR_SCHEMES,
              "pattern": synthdata.PATTERNS}[query.novel_axis]
             if v != query.reference_value(query.novel_axis)]
    return [f"a photo of a {identifier} {query.descriptor} {v}" for v in novel]


# ---------------------------------------------------------------------------
# Per-image metrics

def prompt_fidelity(img: np.ndarray, prompt: str) -> float:
    """Cosine between oracle features and the prompt's requested attributes."""
    requested = parse_partial_prompt(prompt)
    p_emb = partial_attribute_embedding(*requested)
    i_emb = attribute_embedding(img)
    n1, n2 = np.linalg.norm(i_emb), np.linalg.norm(p_emb)
    if n1 == 0 or n2 == 0:
        return 0.0
    return float(i_emb @ p_emb / (n1 * n2))


def image_fidelity(img: np.ndarray, refs: np.ndarray) -> float:
    """Cosine between oracle features and the mean reference features."""
    ref_emb = np.stack([attribute_embedding(r) for r in refs]).mean(axis=0)
    i_emb = attribute_embedding(img)
    n1, n2 = np.linalg.norm(i_emb), np.linalg.norm(ref_emb)
    if n1 == 0 or n2 == 0:
        return 0.0
    return float(i_emb @ ref_emb / (n1 * n2))


def _softmax(x: np.ndarray, temperature: float) -> np.ndarray:
    z = x / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def attribute_posterior(reading: AttributeReading,
                        temperature: float = POSTERIOR_TEMPERATURE) -> np.ndarray:
    """Factored joint posterior over the 240 attribute tuples."""
    ps = _softmax(reading.shape_scores, temperature)
    pc = _softmax(reading.scheme_scores, temperature)
    pp = _softmax(reading.pattern_scores, temperature)
    return np.einsum("i,j,k->ijk", ps, pc, pp).reshape(-1)


def diversity_score(images: np.ndarray | list[np.ndarray],
                    readings: list[AttributeReading] | None = None) -> float:
    """exp(mean KL(p(y|x) || mean posterior)); 1.0 for an identical set."""
    if readings is None:
        readings = [classify_attributes(img) for img in images]
    if len(readings) < 2:
        raise EvaluationError("diversity needs at least 2 images")
    posts = np.stack([attribute_posterior(r) for r in readings])
    marginal = posts.mean(axis=0)
    kls = (posts * (np.log(posts) - np.log(marginal))).sum(axis=1)
    return float(np.exp(kls.mean()))


def attribute_rates(readings: list[AttributeReading], query: AttributeQuery,
                    reference: AttributeTuple) -> tuple[float, float]:
    """(target_accuracy, leakage_rate) under a novel-concept prompt family.

    Accuracy: the target-axis reading equals the reference value. Leakage:
    a reading on an axis the prompts requested a novel value for (the novel
    axis) still equals the reference value.
    """
    ref_target = query.reference_value(query.target_axis)
    ref_novel = {"shape": reference.shape, "color": reference.color,
                 "pattern": reference.pattern}[query.novel_axis]
    axis_label = {"shape": lambda r: r.shape_label,
                  "color": lambda r: r.color_label,
                  "pattern": lambda r: r.pattern_label}
    n = len(readings)
    if n == 0:
        return 0.0, 0.0
    acc = sum(axis_label[query.target_axis](r) == ref_target for r in readings) / n
    leak = sum(axis_label[query.novel_axis](r) == ref_novel for r in readings) / n
    return float(acc), float(leak)


# ---------------------------------------------------------------------------
# Reports

@dataclass
class EvalReport:
    """Metrics for one evaluated condition."""

    condition: dict
    n_images: int
    target_accuracy: float
    leakage_rate: float
    prompt_fidelity_mean: float
    prompt_fidelity_sd: float
    image_fidelity_mean: float
    image_fidelity_sd: float
    diversity: float
    seeds: list[int]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(**d)


def evaluate_condition(images: np.ndarray, prompts: list[str],
                       query: AttributeQuery, refs: np.ndarray,
                       condition: dict, seeds: list[int]) -> EvalReport:
    """Compute every metric for one set of generated images."""
    readings = [classify_attributes(img) for img in images]
    acc, leak = attribute_rates(readings, query, query.reference)
    resolved = [resolve_eval_prompt(p, query) for p in prompts]
    pf = np.array([prompt_fidelity(img, rp) for img, rp in zip(images, resolved)])
    fi = np.array([image_fidelity(img, refs) for img in images])
    return EvalReport(
        condition=condition, n_images=len(images),
        target_accuracy=acc, leakage_rate=leak,
        prompt_fidelity_mean=float(pf.mean()), prompt_fidelity_sd=float(pf.std()),
        image_fidelity_mean=float(fi.mean()), image_fidelity_sd=float(fi.std()),
        diversity=diversity_score(images, readings), seeds=list(seeds),
    )


def write_reports(reports: list[EvalReport], json_path: str | Path,
                  md_path: str | Path | None = None,
                  readings_path: str | Path | None = None) -> None:
    p = Path(json_path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps([r.to_dict() for r in reports], sort_keys=True,
                            indent=2))
    if md_path is not None:
        Path(md_path).write_text(render_markdown(reports))


def load_reports(path: str | Path) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(Path(path).read_text())]


def render_markdown(reports: list[EvalReport]) -> str:
    head = ("| condition | n | target_acc | leakage | prompt_fid | image_fid "
            "| diversity |\n|---|---|---|---|---|---|---|\n")
    rows = []
    for r in reports:
        cond = " ".join(f"{k}={v}" for k, v in sorted(r.condition.items()))
        rows.append(
            f"| {cond} | {r.n_images} | {r.target_accuracy:.3f} "
            f"| {r.leakage_rate:.3f} "
            f"| {r.prompt_fidelity_mean:.3f}±{r.prompt_fidelity_sd:.3f} "
            f"| {r.image_fidelity_mean:.3f}±{r.image_fidelity_sd:.3f} "
            f"| {r.diversity:.3f} |")
    return head + "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Sweeps

def sample_condition(ckpt: Checkpoint, prompt_family: list[str], seeds: list[int],
                     steps: int, guidance: float,
                     specs: list[AdjustmentSpec] | None = None,
                     ) -> tuple[np.ndarray, list[str]]:
    """Sample len(seeds) images cycling through the prompt family.

    With specs, placeholders are adjusted; without, prompts are encoded
    literally. Returns (images, prompt per image).
    """
    prompts = [prompt_family[i % len(prompt_family)] for i in range(len(seeds))]
    if specs is None:
        conds = np.stack([ckpt.encode(p) for p in prompts])
        from .checkpoint import ddim_sample_batch
        images = ddim_sample_batch(ckpt, conds, steps, guidance, seeds)
    else:
        groups: dict[str, list[int]] = {}
        for i, p in enumerate(prompts):
            groups.setdefault(p, []).append(i)
        images = np.zeros((len(seeds), ckpt.dims.image_size,
                           ckpt.dims.image_size, 3))
        for p, idxs in groups.items():
            req = InferenceRequest(prompt=p, specs=specs, steps=steps,
                                   guidance=guidance, seed=0, count=1)
            # personalized_sample derives seeds from req.seed; sample each
            # group in one batch with explicit per-image seeds instead.
            overrides_imgs = _adjusted_batch(req, ckpt, [seeds[i] for i in idxs])
            for j, i in enumerate(idxs):
                images[i] = overrides_imgs[j]
    return images, prompts


def _adjusted_batch(req: InferenceRequest, ckpt: Checkpoint,
                    seeds: list[int]) -> np.ndarray:
    from .adjust import _resolve_overrides
    from .checkpoint import ddim_sample_batch
    overrides = _resolve_overrides(req, ckpt)
    cond = ckpt.encode(req.prompt, overrides)
    return ddim_sample_batch(ckpt, np.tile(cond, (len(seeds), 1)),
                             req.steps, req.guidance, seeds)


def lambda_sweep(ckpt: Checkpoint, query: AttributeQuery, refs: np.ndarray,
                 lambdas: list[float], seeds: list[int], steps: int = 50,
                 guidance: float = 7.5,
                 spec_base: AdjustmentSpec = AdjustmentSpec()) -> list[EvalReport]:
    """One report row per lambda; every row shares the same seeds."""
    if not lambdas:
        raise EvaluationError("lambda grid must be nonempty")
    family = eval_prompt_family(query, identifier=spec_base.placeholder)
    reports = []
    for lam in lambdas:
        spec = dataclasses.replace(spec_base, lam=lam)
        images, prompts = sample_condition(ckpt, family, seeds, steps, guidance,
                                           specs=[spec])
        reports.append(evaluate_condition(
            images, prompts, query, refs,
            condition={"method": "adjusted", "lambda": lam}, seeds=seeds))
    return reports


def sample_count_ablation(g0: Checkpoint, pool, decisions, query: AttributeQuery,
                          refs: np.ndarray, dual_cfg, seed: int,
                          m_values: list[int], eval_seeds: list[int],
                          candidates_root: str | Path, steps: int = 50,
                          guidance: float = 7.5, lam: float = 0.3) -> list[EvalReport]:
    """Re-finalize, re-train, and re-evaluate per curated-set size m."""
    from .augment import finalize_sets
    from .personalize import dual_train
    reports = []
    family = eval_prompt_family(query)
    for m in m_values:
        d_plus, d_minus = finalize_sets(pool, decisions, m, query)
        ckpt = dual_train(g0, d_plus, d_minus, dual_cfg,
                          seed=seed, root=candidates_root)
        spec = AdjustmentSpec(lam=lam)
        images, prompts = sample_condition(ckpt, family, eval_seeds, steps,
                                           guidance, specs=[spec])
        reports.append(evaluate_condition(
            images, prompts, query, refs,
            condition={"method": "adjusted", "lambda": lam, "m": m},
            seeds=eval_seeds))
    return reports
