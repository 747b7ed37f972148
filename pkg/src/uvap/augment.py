"""Decoupled self-augmentation: prompt sets, candidates, and curation.

Two caption sets are synthesized around an attribute query: one keeps the
queried attribute and swaps in novel concepts, the other keeps the concept
and varies the queried attribute. The concept-aware model samples candidate
images for both, candidates are ranked by attribute-feature similarity to
the reference images, the top fraction survives, and human keep/reject
decisions (when present) take precedence when the final m are picked.
"""

from __future__ import annotations

import dataclasses
import json
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synthdata
from .checkpoint import Checkpoint, ddim_sample_batch
from .errors import ConfigError, ShortfallError, TransportError, ValidationError
from .synthdata import AttributeTuple, attribute_embedding

AXES = ("shape", "color", "pattern")


def axis_values(axis: str) -> tuple[str, ...]:
    return {"shape": synthdata.SHAPES, "color": synthdata.COLOR_SCHEMES,
            "pattern": synthdata.PATTERNS}[axis]


def axis_of_value(word: str) -> str | None:
    for axis in AXES:
        if word in axis_values(axis):
            return axis
    return None


@dataclass(frozen=True)
class AttributeQuery:
    """What the user wants to extract from the reference concept."""

    target_axis: str
    reference: AttributeTuple
    descriptor: str = ""
    guidance: str = ""

    def __post_init__(self):
        if self.target_axis not in AXES:
            raise ConfigError(f"unknown target axis: {self.target_axis!r}")
        if not self.descriptor:
            object.__setattr__(self, "descriptor", self.target_axis)

    @property
    def class_word(self) -> str:
        return self.reference.shape

    @property
    def non_target_axes(self) -> tuple[str, ...]:
        return tuple(a for a in AXES if a != self.target_axis)

    @property
    def novel_axis(self) -> str:
        """The axis whose values enumerate 'novel concepts' in the plus set."""
        return "shape" if self.target_axis != "shape" else "color"

    def reference_value(self, axis: str) -> str:
        return getattr(self.reference, {"shape": "shape", "color": "color",
                                        "pattern": "pattern"}[axis])


@dataclass
class PromptSet:
    t_plus: list[str]
    t_minus: list[str]


def _plus_caption(q: AttributeQuery, novel_value: str) -> str:
    return f"a photo of a sks {q.descriptor} {novel_value}"


def _minus_caption(q: AttributeQuery, alt_value: str) -> str:
    if q.target_axis == "shape":
        return f"a photo of a sks {alt_value}"
    return f"a photo of a {alt_value} sks {q.class_word}"


def synthesize_prompts(q: AttributeQuery, vocab: tuple[str, ...], n_each: int,
                       source: str = "template",
                       client: "ExternalPromptClient | None" = None) -> PromptSet:
    """Build the two caption sets.

    The template source enumerates attribute vocabularies deterministically,
    excluding the reference value on each varied axis and cycling when
    n_each exceeds the pool. The external source asks a text-generation
    endpoint and keeps only lines that pass the same structural checks.
    """
    if n_each < 1:
        raise ConfigError("n_each must be >= 1")
    if q.descriptor not in vocab:
        raise ConfigError(f"descriptor {q.descriptor!r} not in vocabulary")

    if source == "template":
        novel = [v for v in axis_values(q.novel_axis)
                 if v != q.reference_value(q.novel_axis)]
        alts = [v for v in axis_values(q.target_axis)
                if v != q.reference_value(q.target_axis)]
        t_plus = [_plus_caption(q, novel[i % len(novel)]) for i in range(n_each)]
        t_minus = [_minus_caption(q, alts[i % len(alts)]) for i in range(n_each)]
        return PromptSet(t_plus=t_plus, t_minus=t_minus)

    if source == "external":
        if client is None:
            raise ConfigError("external source requires a client")
        raw = client.request(q.guidance, n_each)
        t_plus = [c for c in raw.get("t_plus", []) if _valid_plus(c, q, vocab)]
        t_minus = [c for c in raw.get("t_minus", []) if _valid_minus(c, q, vocab)]
        if not t_plus or not t_minus:
            raise ValidationError("external prompt source returned no valid captions")
        return PromptSet(t_plus=t_plus[:n_each], t_minus=t_minus[:n_each])

    raise ConfigError(f"unknown prompt source: {source!r}")


def _tokens_in_vocab(caption: str, vocab: tuple[str, ...]) -> bool:
    words = caption.split()
    return bool(words) and all(w in vocab for w in words)


def _valid_plus(caption: str, q: AttributeQuery, vocab) -> bool:
    words = caption.split()
    return (_tokens_in_vocab(caption, vocab) and "sks" in words
            and q.descriptor in words)


def _valid_minus(caption: str, q: AttributeQuery, vocab) -> bool:
    words = caption.split()
    if not (_tokens_in_vocab(caption, vocab) and "sks" in words):
        return False
    ref = q.reference_value(q.target_axis)
    return any(w in axis_values(q.target_axis) and w != ref for w in words)


class ExternalPromptClient:
    """HTTP adapter for an external text-generation endpoint.

    POSTs {"guidance": ..., "n_each": ...} as JSON and expects
    {"t_plus": [...], "t_minus": [...]} back.
    """

    def __init__(self, url: str, retries: int = 3, timeout: float = 10.0,
                 backoff: float = 0.2):
        self.url = url
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff

    def request(self, guidance: str, n_each: int) -> dict:
        body = json.dumps({"guidance": guidance, "n_each": n_each}).encode()
        last_error = None
        for attempt in range(self.retries):
            try:
                req = urllib.request.Request(
                    self.url, data=body, headers={"Content-Type": "application/json"})
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode())
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as e:
                last_error = e
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        raise TransportError(
            f"prompt endpoint unreachable after {self.retries} attempts: {last_error}")


# ---------------------------------------------------------------------------
# Candidates

@dataclass
class Candidate:
    id: int
    prompt: str
    seed: int
    image_path: str
    set: str                       # "plus" | "minus"
    similarity: float = 0.0
    auto_kept: bool = False
    human_decision: str = "undecided"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def write_pool(pool: list[Candidate], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for c in pool:
            f.write(c.to_json() + "\n")


def load_pool(path: str | Path) -> list[Candidate]:
    out = []
    with open(path) as f:
        for line in f:
            out.append(Candidate(**json.loads(line)))
    return out


def generate_candidates(g0: Checkpoint, prompts: PromptSet, per_prompt: int,
                        seed: int, out_dir: str | Path, steps: int = 50,
                        guidance: float = 7.5) -> tuple[list[Candidate], list[str]]:
    """Sample per_prompt images per caption with sequential derived seeds.

    Captions that fail tokenization are skipped (returned separately), not
    fatal. Candidate ids are global and sequential, plus set first.
    """
    if per_prompt < 1:
        raise ConfigError("per_prompt must be >= 1")
    out = Path(out_dir)
    table = g0.table
    pool: list[Candidate] = []
    skipped: list[str] = []
    next_id = 0
    next_seed = seed

    for set_tag, captions in (("plus", prompts.t_plus), ("minus", prompts.t_minus)):
        conds, metas = [], []
        for caption in captions:
            try:
                cond = g0.encode(caption)
            except Exception:
                skipped.append(caption)
                continue
            for _ in range(per_prompt):
                conds.append(cond)
                metas.append((next_id, caption, next_seed))
                next_id += 1
                next_seed += 1
        if not conds:
            continue
        images = ddim_sample_batch(g0, np.stack(conds), steps, guidance,
                                   [m[2] for m in metas])
        for (cid, caption, cseed), img in zip(metas, images):
            rel = f"candidates/{cid:04d}.png"
            synthdata.save_image(img, out / rel)
            pool.append(Candidate(id=cid, prompt=caption, seed=cseed,
                                  image_path=rel, set=set_tag))
    return pool, skipped


def reference_embedding(refs: np.ndarray) -> np.ndarray:
    """Mean attribute-feature embedding of the reference images."""
    if len(refs) == 0:
        raise ConfigError("reference set must be nonempty")
    return np.stack([attribute_embedding(r) for r in refs]).mean(axis=0)


def similarity_to_refs(img: np.ndarray, ref_emb: np.ndarray) -> float:
    """Cosine similarity in attribute-feature space; 0 for no-object images."""
    emb = attribute_embedding(img)
    n1, n2 = np.linalg.norm(emb), np.linalg.norm(ref_emb)
    if n1 == 0 or n2 == 0:
        return 0.0
    return float(emb @ ref_emb / (n1 * n2))


def score_similarity(candidate_img: np.ndarray, refs: np.ndarray) -> float:
    return similarity_to_refs(candidate_img, reference_embedding(refs))


def score_pool(pool: list[Candidate], refs: np.ndarray, root: str | Path) -> list[Candidate]:
    """Fill in similarity scores for every candidate in place."""
    ref_emb = reference_embedding(refs)
    for c in pool:
        img = synthdata.load_image(Path(root) / c.image_path)
        c.similarity = similarity_to_refs(img, ref_emb)
    return pool


def auto_filter(pool: list[Candidate], fraction: float) -> list[Candidate]:
    """Keep the top ceil(fraction * count) per set by similarity.

    Ties break by ascending candidate id. Returns a new pool with auto_kept
    set; an empty pool passes through with a no-op.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    out = []
    for set_tag in ("plus", "minus"):
        members = [c for c in pool if c.set == set_tag]
        k = int(np.ceil(fraction * len(members)))
        ranked = sorted(members, key=lambda c: (-c.similarity, c.id))
        kept_ids = {c.id for c in ranked[:k]}
        for c in members:
            out.append(dataclasses.replace(c, auto_kept=c.id in kept_ids))
    out.sort(key=lambda c: c.id)
    return out


# ---------------------------------------------------------------------------
# Decisions and finalization

@dataclass(frozen=True)
class CurationDecision:
    candidate_id: int
    decision: str          # "keep" | "reject"
    timestamp: float = 0.0
    operator: str = ""


def append_decision(path: str | Path, d: CurationDecision) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(dataclasses.asdict(d), sort_keys=True) + "\n")


def load_decisions(path: str | Path) -> list[CurationDecision]:
    p = Path(path)
    if not p.exists():
        return []
    out = []
    with open(p) as f:
        for line in f:
            if line.strip():
                out.append(CurationDecision(**json.loads(line)))
    return out


def effective_decisions(decisions: list[CurationDecision]) -> dict[int, str]:
    """Last decision per candidate id wins (file order is append order)."""
    eff: dict[int, str] = {}
    for d in decisions:
        eff[d.candidate_id] = d.decision
    return eff


@dataclass
class CuratedSet:
    """Final attribute-aware training set for one identifier."""

    tag: str                                 # "plus" | "minus"
    captions: list[str]
    image_paths: list[str]
    m: int
    images: np.ndarray | None = None         # optional in-memory pixels

    def load_images(self, root: str | Path) -> np.ndarray:
        if self.images is None:
            self.images = np.stack([synthdata.load_image(Path(root) / p)
                                    for p in self.image_paths])
        return self.images


def rewrite_identifier(caption: str, target_token: str) -> str:
    return " ".join(target_token if w == "sks" else w for w in caption.split())


def finalize_sets(pool: list[Candidate], decisions: list[CurationDecision],
                  m: int, q: AttributeQuery,
                  identifiers: tuple[str, str] = ("tgt", "ngt"),
                  ) -> tuple[CuratedSet, CuratedSet]:
    """Pick m candidates per set and rewrite their captions.

    Human keeps come first (by similarity), then undecided auto-kept
    candidates fill the remainder; rejected candidates never enter. Fewer
    than m available raises a shortfall error naming the gap.
    """
    if m < 1:
        raise ConfigError("m must be >= 1")
    eff = effective_decisions(decisions)
    known_ids = {c.id for c in pool if c.auto_kept}
    for cid in eff:
        if cid not in known_ids:
            raise ValidationError(
                f"decision references candidate {cid}, which is not auto-kept")

    results = []
    for set_tag, token in (("plus", identifiers[0]), ("minus", identifiers[1])):
        members = [c for c in pool if c.set == set_tag and c.auto_kept]
        keeps = [c for c in members if eff.get(c.id) == "keep"]
        undecided = [c for c in members if eff.get(c.id) is None]
        keeps.sort(key=lambda c: (-c.similarity, c.id))
        undecided.sort(key=lambda c: (-c.similarity, c.id))
        chosen = (keeps + undecided)[:m]
        if len(chosen) < m:
            raise ShortfallError(
                f"set {set_tag!r}: need {m} samples, only {len(chosen)} available "
                f"after rejections (short by {m - len(chosen)})")
        captions = [rewrite_identifier(c.prompt, token) for c in chosen]
        results.append(CuratedSet(tag=set_tag, captions=captions,
                                  image_paths=[c.image_path for c in chosen], m=m))
    return results[0], results[1]
