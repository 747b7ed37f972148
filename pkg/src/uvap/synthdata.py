"""Procedural attribute-factored scenes with exact analytic classifiers.

Every scene is a centered shape on a neutral gray background, filled with a
two-color pattern. The three factors (shape, color scheme, pattern) are
independent, the renderer is a pure function of (attributes, seed, size), and
`classify_attributes` recovers all three factors exactly on clean renders:

* shape  — best intersection-over-union against the renderer's own mask bank
           over the discrete scale grid;
* color  — foreground pixels quantized to the nearest palette entry, scheme
           scored against ideal hue signatures (the white pattern-contrast
           filler carries no hue information and is folded out);
* pattern — agreement with the renderer's absolute-phase pattern templates,
           maximized over the two color-role assignments.

Pattern phases and the scale grid are locked to absolute image coordinates,
which is what makes the oracle exact rather than merely accurate.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import rng
from .errors import ConfigError, InvalidAttributeError

SHAPES = ("circle", "square", "triangle", "star", "cross", "ring")
COLOR_SCHEMES = ("red", "green", "blue", "yellow", "purple", "orange",
                 "red_blue", "green_yellow")
PATTERNS = ("solid", "hstripes", "vstripes", "checker", "dots")

BASE_COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.10, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.10, 0.75),
    "orange": (0.95, 0.55, 0.05),
}
# Contrast filler for patterned single-color schemes; not a hue.
CONTRAST_COLOR = (0.97, 0.97, 0.97)
QUANT_NAMES = tuple(BASE_COLORS) + ("white",)
QUANT_RGB = np.array([BASE_COLORS[c] for c in BASE_COLORS] + [CONTRAST_COLOR],
                     dtype=np.float64)

BACKGROUND = (0.5, 0.5, 0.5)
FOREGROUND_THRESHOLD = 0.08
NO_OBJECT_FRACTION = 0.05

# Shape extent relative to the image side; 21 discrete steps inside [0.5, 0.7].
SCALE_GRID = np.linspace(0.5, 0.7, 21)

TWO_COLOR_SCHEMES = {"red_blue": ("red", "blue"),
                     "green_yellow": ("green", "yellow")}


@dataclass(frozen=True)
class AttributeTuple:
    """Ground-truth factors of one scene."""

    shape: str
    color: str
    pattern: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidAttributeError(f"unknown shape: {self.shape!r}")
        if self.color not in COLOR_SCHEMES:
            raise InvalidAttributeError(f"unknown color scheme: {self.color!r}")
        if self.pattern not in PATTERNS:
            raise InvalidAttributeError(f"unknown pattern: {self.pattern!r}")


def all_attribute_tuples() -> list[AttributeTuple]:
    return [AttributeTuple(s, c, p)
            for s in SHAPES for c in COLOR_SCHEMES for p in PATTERNS]


def scheme_hues(color: str) -> tuple[str, str]:
    """(primary, secondary) quantization-color names for a scheme."""
    if color in TWO_COLOR_SCHEMES:
        return TWO_COLOR_SCHEMES[color]
    return color, "white"


# ---------------------------------------------------------------------------
# Caption grammar

def caption_of(attrs: AttributeTuple) -> str:
    """Fixed grammar: 'a photo of a {color} {pattern} {shape}'."""
    return f"a photo of a {attrs.color} {attrs.pattern} {attrs.shape}"


def parse_caption(caption: str) -> AttributeTuple:
    words = caption.split()
    if len(words) != 7 or words[:4] != ["a", "photo", "of", "a"]:
        raise InvalidAttributeError(f"caption does not match grammar: {caption!r}")
    color, pattern, shape = words[4], words[5], words[6]
    return AttributeTuple(shape=shape, color=color, pattern=pattern)


# ---------------------------------------------------------------------------
# Rendering

def _shape_mask(shape: str, size: int, extent: float) -> np.ndarray:
    """Boolean mask of `shape` centered in a size x size grid.

    `extent` is the shape's bounding side as a fraction of the image side.
    Pixel centers are tested against exact inequalities; no antialiasing.
    """
    half = extent * size / 2.0
    c = size / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    u = (xs + 0.5 - c) / half
    v = (ys + 0.5 - c) / half

    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 1.0
    if shape == "triangle":
        return (v <= 1.0) & (v >= 2.0 * np.abs(u) - 1.0)
    if shape == "ring":
        rho2 = u * u + v * v
        return (rho2 <= 1.0) & (rho2 >= 0.6 * 0.6)
    if shape == "cross":
        return ((np.abs(u) <= 0.33) & (np.abs(v) <= 1.0)) | \
               ((np.abs(v) <= 0.33) & (np.abs(u) <= 1.0))
    if shape == "star":
        return _star_mask(u, v)
    raise InvalidAttributeError(f"unknown shape: {shape!r}")


def _star_mask(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # Five-point star, apex up: inner pentagon plus five spike triangles.
    outer, inner = 1.0, 0.45
    angles_out = -np.pi / 2 + 2 * np.pi * np.arange(5) / 5
    angles_in = angles_out + np.pi / 5
    pts_out = np.stack([outer * np.cos(angles_out), outer * np.sin(angles_out)], axis=1)
    pts_in = np.stack([inner * np.cos(angles_in), inner * np.sin(angles_in)], axis=1)

    def tri(a, b, c):
        def side(p, q):
            return (q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0])
        s1, s2, s3 = side(a, b), side(b, c), side(c, a)
        return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))

    mask = np.zeros(u.shape, dtype=bool)
    # Pentagon fan around the centroid.
    for i in range(5):
        mask |= tri(pts_in[i], pts_in[(i + 1) % 5], np.array([0.0, 0.0]))
    # Spikes: outer point i sits between inner points i-1 and i.
    for i in range(5):
        mask |= tri(pts_out[i], pts_in[i - 1], pts_in[i])
    return mask


def _pattern_template(pattern: str, size: int, two_color: bool = False) -> np.ndarray:
    """0/1 map over the full image: 1 where the secondary color goes.

    'solid' means an unpatterned fill: flat for single-color schemes, a
    single diagonal bisection for two-color schemes (otherwise the second
    hue would never appear and the scheme would be unrecoverable).
    """
    ys, xs = np.mgrid[0:size, 0:size]
    if pattern == "solid":
        if two_color:
            return (xs + ys >= size).astype(np.int8)
        return np.zeros((size, size), dtype=np.int8)
    if pattern == "hstripes":
        return ((ys // 3) % 2).astype(np.int8)
    if pattern == "vstripes":
        return ((xs // 3) % 2).astype(np.int8)
    if pattern == "checker":
        return (((ys // 3) + (xs // 3)) % 2).astype(np.int8)
    if pattern == "dots":
        # Dense pixel-aligned dots: mask clipping must never push either
        # color role of a two-color scheme below the scheme-detection margin.
        dx = (xs + 2) % 4 - 2
        dy = (ys + 2) % 4 - 2
        return (dx * dx + dy * dy <= 2).astype(np.int8)
    raise InvalidAttributeError(f"unknown pattern: {pattern!r}")


def render_scene(attrs: AttributeTuple, seed: int, size: int = 32) -> np.ndarray:
    """Render one scene; returns (size, size, 3) float64 in [0, 1].

    Deterministic in (attrs, seed, size). The seed only jitters the shape
    extent over the discrete scale grid.
    """
    if size < 16:
        raise ConfigError(f"size must be >= 16, got {size}")
    if not isinstance(attrs, AttributeTuple):
        attrs = AttributeTuple(*attrs)

    gen = rng.stream(seed, "render", attrs.shape, attrs.color, attrs.pattern, size)
    extent = float(SCALE_GRID[gen.integers(0, len(SCALE_GRID))])

    mask = _shape_mask(attrs.shape, size, extent)
    template = _pattern_template(attrs.pattern, size,
                                 two_color=attrs.color in TWO_COLOR_SCHEMES)
    primary, secondary = scheme_hues(attrs.color)
    rgb_a = np.array(BASE_COLORS[primary])
    rgb_b = np.array(CONTRAST_COLOR if secondary == "white" else BASE_COLORS[secondary])

    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = BACKGROUND
    fg = np.where(template[..., None] == 1, rgb_b, rgb_a)
    img[mask] = fg[mask]
    return img


# ---------------------------------------------------------------------------
# Classification

@dataclass
class AttributeReading:
    """Oracle output for one image.

    The per-axis score vectors are affinities in [0, 1]; labels are their
    argmaxes. A no-object reading has all scores zero and labels None.
    """

    shape_label: str | None
    shape_score: float
    shape_scores: np.ndarray      # (6,) IoU per shape
    color_label: str | None
    color_histogram: np.ndarray   # (7,) over base colors + white, sums to 1 on fg
    scheme_scores: np.ndarray     # (8,) signature match per scheme
    pattern_label: str | None
    pattern_score: float
    pattern_scores: np.ndarray    # (5,) template agreement per pattern
    foreground_fraction: float

    @property
    def is_no_object(self) -> bool:
        return self.shape_label is None

    def labels(self) -> tuple[str | None, str | None, str | None]:
        return self.shape_label, self.color_label, self.pattern_label


_MASK_BANKS: dict[int, dict[str, np.ndarray]] = {}
_TEMPLATES: dict[int, np.ndarray] = {}


def _mask_bank(size: int) -> dict[str, np.ndarray]:
    if size not in _MASK_BANKS:
        _MASK_BANKS[size] = {
            s: np.stack([_shape_mask(s, size, e) for e in SCALE_GRID])
            for s in SHAPES
        }
    return _MASK_BANKS[size]


def _templates(size: int) -> np.ndarray:
    # Solid contributes two variants (flat and diagonal); scored as one label.
    if size not in _TEMPLATES:
        flat = [_pattern_template(p, size) for p in PATTERNS]
        diag = _pattern_template("solid", size, two_color=True)
        _TEMPLATES[size] = np.stack(flat + [diag])
    return _TEMPLATES[size]


def _no_object_reading(fraction: float) -> AttributeReading:
    return AttributeReading(
        shape_label=None, shape_score=0.0, shape_scores=np.zeros(len(SHAPES)),
        color_label=None, color_histogram=np.zeros(len(QUANT_NAMES)),
        scheme_scores=np.zeros(len(COLOR_SCHEMES)),
        pattern_label=None, pattern_score=0.0,
        pattern_scores=np.zeros(len(PATTERNS)),
        foreground_fraction=fraction,
    )


def foreground_mask(img: np.ndarray) -> np.ndarray:
    """Pixels that are closer to some palette color than to the background.

    On clean renders this equals the distance-threshold mask; the nearest-
    center comparison additionally rejects noisy near-gray pixels.
    """
    d_gray = np.linalg.norm(img - np.array(BACKGROUND), axis=-1)
    d_pal = np.linalg.norm(img[..., None, :] - QUANT_RGB, axis=-1).min(axis=-1)
    return (d_gray > FOREGROUND_THRESHOLD) & (d_pal < d_gray)


def _scheme_signatures() -> np.ndarray:
    sigs = np.zeros((len(COLOR_SCHEMES), len(BASE_COLORS)))
    base_index = {c: i for i, c in enumerate(BASE_COLORS)}
    for si, scheme in enumerate(COLOR_SCHEMES):
        if scheme in TWO_COLOR_SCHEMES:
            a, b = TWO_COLOR_SCHEMES[scheme]
            sigs[si, base_index[a]] = 0.5
            sigs[si, base_index[b]] = 0.5
        else:
            sigs[si, base_index[scheme]] = 1.0
    return sigs


_SCHEME_SIGS = _scheme_signatures()


def classify_attributes(img: np.ndarray) -> AttributeReading:
    """Recover (shape, color scheme, pattern) from pixels.

    Exact on clean renders of any attribute tuple at any seed; degrades
    gracefully on noisy or generated images. Images whose foreground covers
    less than NO_OBJECT_FRACTION of the pixels get a no-object reading.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise ValueError("image values must lie in [0, 1]")
    size = img.shape[0]

    fg = foreground_mask(img)
    fraction = float(fg.mean())
    if fraction < NO_OBJECT_FRACTION:
        return _no_object_reading(fraction)

    # Color: quantize foreground to the nearest palette entry.
    dists = np.linalg.norm(img[fg][:, None, :] - QUANT_RGB, axis=-1)
    quant = dists.argmin(axis=-1)
    hist = np.bincount(quant, minlength=len(QUANT_NAMES)).astype(np.float64)
    hist /= hist.sum()
    base_mass = hist[:-1].sum()
    if base_mass > 0:
        g = hist[:-1] / base_mass
    else:
        g = np.zeros(len(BASE_COLORS))
    scheme_scores = 1.0 - 0.5 * np.abs(g[None, :] - _SCHEME_SIGS).sum(axis=1)
    color_label = COLOR_SCHEMES[int(scheme_scores.argmax())]

    # Shape: best IoU against the mask bank over the scale grid.
    bank = _mask_bank(size)
    shape_scores = np.zeros(len(SHAPES))
    for i, s in enumerate(SHAPES):
        inter = (bank[s] & fg).sum(axis=(1, 2))
        union = (bank[s] | fg).sum(axis=(1, 2))
        shape_scores[i] = (inter / np.maximum(union, 1)).max()
    shape_idx = int(shape_scores.argmax())

    # Pattern: agreement with absolute-phase templates under the best
    # assignment of the two dominant quantization colors to the roles.
    order = np.argsort(-hist, kind="stable")
    color_a, color_b = int(order[0]), int(order[1])
    quant_map = np.full((size, size), -1, dtype=np.int64)
    quant_map[fg] = quant
    templates = _templates(size)
    pattern_scores = np.zeros(len(PATTERNS))
    fg_count = fg.sum()
    for ti in range(templates.shape[0]):
        pi = min(ti, len(PATTERNS) - 1) if ti < len(PATTERNS) else 0
        t = templates[ti]
        for a, b in ((color_a, color_b), (color_b, color_a)):
            expected = np.where(t == 1, b, a)
            agree = ((quant_map == expected) & fg).sum() / fg_count
            pattern_scores[pi] = max(pattern_scores[pi], agree)
    pattern_idx = int(pattern_scores.argmax())

    return AttributeReading(
        shape_label=SHAPES[shape_idx],
        shape_score=float(shape_scores[shape_idx]),
        shape_scores=shape_scores,
        color_label=color_label,
        color_histogram=hist,
        scheme_scores=scheme_scores,
        pattern_label=PATTERNS[pattern_idx],
        pattern_score=float(pattern_scores[pattern_idx]),
        pattern_scores=pattern_scores,
        foreground_fraction=fraction,
    )


def attribute_embedding(img_or_reading) -> np.ndarray:
    """One-hot attribute-feature vector: shape (6) + scheme (8) + pattern (5).

    No-object readings embed to the zero vector. This is the fixed feature
    space used for candidate-to-reference similarity and for metric cosines.
    """
    reading = img_or_reading
    if not isinstance(reading, AttributeReading):
        reading = classify_attributes(img_or_reading)
    emb = np.zeros(len(SHAPES) + len(COLOR_SCHEMES) + len(PATTERNS))
    if reading.is_no_object:
        return emb
    emb[SHAPES.index(reading.shape_label)] = 1.0
    emb[len(SHAPES) + COLOR_SCHEMES.index(reading.color_label)] = 1.0
    emb[len(SHAPES) + len(COLOR_SCHEMES) + PATTERNS.index(reading.pattern_label)] = 1.0
    return emb


def partial_attribute_embedding(shape: str | None, color: str | None,
                                pattern: str | None) -> np.ndarray:
    """Embedding of a (possibly partial) attribute request; absent axes zero."""
    emb = np.zeros(len(SHAPES) + len(COLOR_SCHEMES) + len(PATTERNS))
    if shape is not None:
        emb[SHAPES.index(shape)] = 1.0
    if color is not None:
        emb[len(SHAPES) + COLOR_SCHEMES.index(color)] = 1.0
    if pattern is not None:
        emb[len(SHAPES) + len(COLOR_SCHEMES) + PATTERNS.index(pattern)] = 1.0
    return emb


# ---------------------------------------------------------------------------
# Image files and corpus

def save_image(img: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


@dataclass(frozen=True)
class SceneRecord:
    """One manifest line: factors, seed, caption, and the image location."""

    shape: str
    color: str
    pattern: str
    seed: int
    caption: str
    path: str

    @property
    def attrs(self) -> AttributeTuple:
        return AttributeTuple(self.shape, self.color, self.pattern)


def write_manifest(records: list[SceneRecord], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(dataclasses.asdict(r), sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> list[SceneRecord]:
    records = []
    with open(path) as f:
        for line in f:
            records.append(SceneRecord(**json.loads(line)))
    return records


@dataclass
class CorpusSpec:
    """What to render: attribute subsets, per-tuple seeds, held-out reference."""

    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = COLOR_SCHEMES
    patterns: tuple[str, ...] = PATTERNS
    seeds_per_tuple: int = 10
    reference: AttributeTuple = AttributeTuple("star", "red_blue", "hstripes")
    reference_seeds: int = 5
    size: int = 32


def build_corpus(spec: CorpusSpec, out_dir: str | Path) -> tuple[list[SceneRecord], list[SceneRecord]]:
    """Render the corpus and the held-out reference images.

    Returns (corpus records, reference records); also writes the images, a
    corpus manifest.jsonl, and a refs.jsonl next to them.
    """
    if not spec.shapes or not spec.colors or not spec.patterns:
        raise ConfigError("attribute subsets must be nonempty")
    if not (1 <= spec.reference_seeds):
        raise ConfigError("reference_seeds must be >= 1")
    out = Path(out_dir)

    records = []
    for shape in spec.shapes:
        for color in spec.colors:
            for pattern in spec.patterns:
                attrs = AttributeTuple(shape, color, pattern)
                if attrs == spec.reference:
                    continue
                for seed in range(spec.seeds_per_tuple):
                    rel = f"images/{shape}_{color}_{pattern}_s{seed}.png"
                    save_image(render_scene(attrs, seed, spec.size), out / rel)
                    records.append(SceneRecord(shape, color, pattern, seed,
                                               caption_of(attrs), rel))
    write_manifest(records, out / "manifest.jsonl")

    refs = []
    r = spec.reference
    for seed in range(spec.reference_seeds):
        rel = f"refs/{r.shape}_{r.color}_{r.pattern}_s{seed}.png"
        save_image(render_scene(r, seed, spec.size), out / rel)
        refs.append(SceneRecord(r.shape, r.color, r.pattern, seed,
                                caption_of(r), rel))
    write_manifest(refs, out / "refs.jsonl")
    return records, refs
