"""Synthetic small-target visual question answering.

Each sample is a flat-color scene: one small target glyph (a few pixels
on a side, at most ~2% of image area), small decoy glyphs that differ
from the target in the attribute the question keys on, and large
distractor glyphs. Glyphs are placed on a coarse layout grid, one per
cell, so boxes never overlap and the ground-truth box is exactly the
glyph's tight pixel bounding box. Generation is a pure function of
``(seed, config)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import BBox, normalize_box
from .errors import ConfigError

COLOR_VALUES: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "magenta": (0.85, 0.20, 0.80),
    "cyan": (0.10, 0.80, 0.85),
}

SHAPE_NAMES = ("square", "circle", "triangle", "cross")

TEMPLATES = ("color-of-shape", "shape-of-color", "color-at-relative-location")

# The relational template reserves one silhouette as the reference point the
# question talks about; (row, col) steps on the layout grid.
ANCHOR_SHAPE = "cross"
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "top": (-1, 0), "bottom": (1, 0)}

BACKGROUND = 0.12


@dataclass(frozen=True)
class SynthTaskConfig:
    image_px: int = 64
    layout_cells: int = 4
    colors: tuple[str, ...] = tuple(COLOR_VALUES)
    shapes: tuple[str, ...] = SHAPE_NAMES
    target_area_range: tuple[float, float] = (0.005, 0.02)
    distractor_range: tuple[int, int] = (4, 6)
    decoy_fraction: float = 0.5
    templates: tuple[str, ...] = ("color-of-shape",)
    snap_px: int = 1  # placement quantum; offsets inside a cell are multiples of this

    @property
    def cell_px(self) -> int:
        return self.image_px // self.layout_cells

    def target_side_range(self) -> tuple[int, int]:
        lo = math.ceil(self.image_px * math.sqrt(self.target_area_range[0]))
        hi = math.floor(self.image_px * math.sqrt(self.target_area_range[1]))
        return lo, hi

    def large_side_range(self) -> tuple[int, int]:
        _, small_hi = self.target_side_range()
        return max(small_hi + 2, int(self.cell_px * 0.68)), self.cell_px - 1

    def validate(self) -> None:
        if self.image_px % self.layout_cells != 0:
            raise ConfigError(
                f"image_px={self.image_px} not divisible by layout_cells={self.layout_cells}"
            )
        for c in self.colors:
            if c not in COLOR_VALUES:
                raise ConfigError(f"unknown color: {c!r}")
        for s in self.shapes:
            if s not in SHAPE_NAMES:
                raise ConfigError(f"unknown shape: {s!r}")
        if not self.colors or not self.shapes:
            raise ConfigError("need at least one color and one shape")
        a0, a1 = self.target_area_range
        if not (0.0 < a0 <= a1 < 1.0):
            raise ConfigError(f"bad target_area_range: {self.target_area_range}")
        lo, hi = self.target_side_range()
        if lo > hi:
            raise ConfigError(
                f"target_area_range {self.target_area_range} admits no integer side"
            )
        if lo < 3:
            raise ConfigError(f"smallest target side {lo}px cannot render all shapes")
        if hi > self.cell_px:
            raise ConfigError(
                f"largest target side {hi}px exceeds layout cell ({self.cell_px}px)"
            )
        large_lo, large_hi = self.large_side_range()
        if large_lo > large_hi:
            raise ConfigError("no room for large distractors inside a layout cell")
        d0, d1 = self.distractor_range
        if not (0 <= d0 <= d1):
            raise ConfigError(f"bad distractor_range: {self.distractor_range}")
        if d1 + 1 > self.layout_cells**2:
            raise ConfigError(
                f"{d1} distractors + target exceed {self.layout_cells**2} layout cells"
            )
        if not 0.0 <= self.decoy_fraction <= 1.0:
            raise ConfigError(f"bad decoy_fraction: {self.decoy_fraction}")
        if self.snap_px < 1:
            raise ConfigError(f"snap_px must be positive: {self.snap_px}")
        for t in self.templates:
            if t not in TEMPLATES:
                raise ConfigError(f"unknown template: {t!r}")
        if not self.templates:
            raise ConfigError("need at least one question template")
        if "color-of-shape" in self.templates and len(self.shapes) < 2:
            raise ConfigError("color-of-shape decoys need a second shape")
        if "shape-of-color" in self.templates and len(self.colors) < 2:
            raise ConfigError("shape-of-color decoys need a second color")
        if "color-at-relative-location" in self.templates:
            if ANCHOR_SHAPE not in self.shapes or len(self.shapes) < 2:
                raise ConfigError(
                    "relational template needs the anchor silhouette plus another shape"
                )
            if self.layout_cells < 2:
                raise ConfigError(
                    "relational template needs at least two layout cells per axis"
                )


@dataclass(frozen=True)
class Glyph:
    shape: str
    color: str
    x0: int
    y0: int
    side: int


@dataclass(frozen=True)
class SampleRecord:
    """Everything about one sample except the rendered pixels."""

    seed: int
    template: str
    question_text: str
    answer_text: str
    gt_boxes: tuple[BBox, ...]
    target: Glyph
    distractors: tuple[Glyph, ...] = field(repr=False, default=())


def glyph_mask(shape: str, side: int) -> np.ndarray:
    """Boolean (side, side) stencil; every glyph's tight bbox is the full square."""
    if side < 1:
        raise ConfigError(f"glyph side must be positive: {side}")
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape == "circle":
        c = (side - 1) / 2.0
        r = side / 2.0
        yy, xx = np.mgrid[0:side, 0:side]
        return (xx - c) ** 2 + (yy - c) ** 2 <= r * r
    if shape == "triangle":
        mask = np.zeros((side, side), dtype=bool)
        for y in range(side):
            w = y + 1
            start = (side - w) // 2
            mask[y, start : start + w] = True
        return mask
    if shape == "cross":
        t = max(1, round(side / 3))
        mask = np.zeros((side, side), dtype=bool)
        a = (side - t) // 2
        mask[:, a : a + t] = True
        mask[a : a + t, :] = True
        return mask
    raise ConfigError(f"unknown shape: {shape!r}")


def render_scene(glyphs: list[Glyph], image_px: int) -> np.ndarray:
    img = np.full((image_px, image_px, 3), BACKGROUND, dtype=np.float32)
    for g in glyphs:
        mask = glyph_mask(g.shape, g.side)
        patch = img[g.y0 : g.y0 + g.side, g.x0 : g.x0 + g.side]
        patch[mask] = np.asarray(COLOR_VALUES[g.color], dtype=np.float32)
    return img


def question_for(template: str, target: Glyph, direction: str | None = None) -> tuple[str, str]:
    if template == "color-of-shape":
        return f"what color is the small {target.shape} ?", target.color
    if template == "shape-of-color":
        return f"what shape is the small {target.color} object ?", target.shape
    if template == "color-at-relative-location":
        if direction not in DIRECTIONS:
            raise ConfigError(f"relational question needs a direction, got {direction!r}")
        return (
            f"what color is the object to the {direction} of the small {ANCHOR_SHAPE} ?",
            target.color,
        )
    raise ConfigError(f"unknown template: {template!r}")


def _place(rng: np.random.Generator, cell: int, side: int, cfg: SynthTaskConfig) -> tuple[int, int]:
    cy, cx = divmod(cell, cfg.layout_cells)
    steps = (cfg.cell_px - side) // cfg.snap_px
    ox = cfg.snap_px * int(rng.integers(0, steps + 1))
    oy = cfg.snap_px * int(rng.integers(0, steps + 1))
    return cx * cfg.cell_px + ox, cy * cfg.cell_px + oy


def _pick(rng: np.random.Generator, options: tuple[str, ...]) -> str:
    return options[int(rng.integers(len(options)))]


def _relational_sample(
    rng: np.random.Generator, seed: int, template: str, cfg: SynthTaskConfig
) -> tuple[np.ndarray, SampleRecord]:
    """Scene where the question names the target only through its position.

    One small anchor glyph (the reserved silhouette) sits somewhere on the
    layout grid; the target is the small glyph one layout cell away in the
    direction the question states. The anchor's other neighbours may hold
    small decoys (probability ``decoy_fraction`` each), so reading the
    direction word is the only way to pick the right one. Large clutter
    fills some of the remaining cells; none of it reuses the anchor's
    silhouette, keeping the reference unambiguous.
    """
    s_lo, s_hi = cfg.target_side_range()
    l_lo, l_hi = cfg.large_side_range()
    n = cfg.layout_cells

    direction = _pick(rng, tuple(DIRECTIONS))
    dr, dc = DIRECTIONS[direction]
    rows = [r for r in range(n) if 0 <= r + dr < n]
    cols = [c for c in range(n) if 0 <= c + dc < n]
    ar = rows[int(rng.integers(len(rows)))]
    ac = cols[int(rng.integers(len(cols)))]
    anchor_cell = ar * n + ac
    target_cell = (ar + dr) * n + (ac + dc)

    a_side = int(rng.integers(s_lo, s_hi + 1))
    ax, ay = _place(rng, anchor_cell, a_side, cfg)
    anchor = Glyph(ANCHOR_SHAPE, _pick(rng, cfg.colors), ax, ay, a_side)

    body_shapes = tuple(s for s in cfg.shapes if s != ANCHOR_SHAPE)
    t_side = int(rng.integers(s_lo, s_hi + 1))
    tx, ty = _place(rng, target_cell, t_side, cfg)
    target = Glyph(_pick(rng, body_shapes), _pick(rng, cfg.colors), tx, ty, t_side)

    distractors = [anchor]
    used = {anchor_cell, target_cell}
    for odr, odc in DIRECTIONS.values():
        r, c = ar + odr, ac + odc
        cell = r * n + c
        if not (0 <= r < n and 0 <= c < n) or cell in used:
            continue
        if rng.random() < cfg.decoy_fraction:
            d_side = int(rng.integers(s_lo, s_hi + 1))
            dx, dy = _place(rng, cell, d_side, cfg)
            distractors.append(
                Glyph(_pick(rng, body_shapes), _pick(rng, cfg.colors), dx, dy, d_side)
            )
            used.add(cell)

    free = [cell for cell in range(n * n) if cell not in used]
    d0, d1 = cfg.distractor_range
    n_large = min(int(rng.integers(d0, d1 + 1)), len(free))
    for cell in rng.choice(free, size=n_large, replace=False):
        d_side = int(rng.integers(l_lo, l_hi + 1))
        dx, dy = _place(rng, int(cell), d_side, cfg)
        distractors.append(
            Glyph(_pick(rng, body_shapes), _pick(rng, cfg.colors), dx, dy, d_side)
        )

    image = render_scene(distractors + [target], cfg.image_px)
    gt = normalize_box(
        (target.x0, target.y0, target.x0 + target.side, target.y0 + target.side),
        (cfg.image_px, cfg.image_px),
    )
    question, answer = question_for(template, target, direction)
    record = SampleRecord(
        seed=seed,
        template=template,
        question_text=question,
        answer_text=answer,
        gt_boxes=(gt,),
        target=target,
        distractors=tuple(distractors),
    )
    return image, record


def generate_sample(seed: int, cfg: SynthTaskConfig) -> tuple[np.ndarray, SampleRecord]:
    """Render one scene and its conversation facts. Pure in (seed, cfg)."""
    cfg.validate()
    rng = np.random.default_rng(seed)

    template = _pick(rng, cfg.templates)
    if template == "color-at-relative-location":
        return _relational_sample(rng, seed, template, cfg)
    target_shape = _pick(rng, cfg.shapes)
    target_color = _pick(rng, cfg.colors)
    s_lo, s_hi = cfg.target_side_range()
    l_lo, l_hi = cfg.large_side_range()

    n_distractors = int(rng.integers(cfg.distractor_range[0], cfg.distractor_range[1] + 1))
    cells = rng.choice(cfg.layout_cells**2, size=n_distractors + 1, replace=False)

    side = int(rng.integers(s_lo, s_hi + 1))
    x0, y0 = _place(rng, int(cells[0]), side, cfg)
    target = Glyph(target_shape, target_color, x0, y0, side)

    distractors = []
    for i in range(n_distractors):
        small = rng.random() < cfg.decoy_fraction
        if small:
            d_side = int(rng.integers(s_lo, s_hi + 1))
            if template == "color-of-shape":
                shape = _pick(rng, tuple(s for s in cfg.shapes if s != target_shape))
                color = _pick(rng, cfg.colors)
            else:
                shape = _pick(rng, cfg.shapes)
                color = _pick(rng, tuple(c for c in cfg.colors if c != target_color))
        else:
            d_side = int(rng.integers(l_lo, l_hi + 1))
            shape = _pick(rng, cfg.shapes)
            color = _pick(rng, cfg.colors)
        dx, dy = _place(rng, int(cells[i + 1]), d_side, cfg)
        distractors.append(Glyph(shape, color, dx, dy, d_side))

    image = render_scene(distractors + [target], cfg.image_px)
    gt = normalize_box(
        (target.x0, target.y0, target.x0 + target.side, target.y0 + target.side),
        (cfg.image_px, cfg.image_px),
    )
    question, answer = question_for(template, target)
    record = SampleRecord(
        seed=seed,
        template=template,
        question_text=question,
        answer_text=answer,
        gt_boxes=(gt,),
        target=target,
        distractors=tuple(distractors),
    )
    return image, record


def small_glyph_boxes(record: SampleRecord, cfg: SynthTaskConfig) -> tuple[BBox, ...]:
    """Tight boxes of every small glyph in the scene, target included.

    The cut between small and large is the top of the target size band, so
    this covers the target, any small decoys, and the relational anchor,
    but none of the large clutter. It is a scene property rather than an
    answer key: for relational questions the image alone does not say
    which small glyph the question will point at.
    """
    _, hi = cfg.target_side_range()
    glyphs = (record.target, *record.distractors)
    return tuple(
        normalize_box((g.x0, g.y0, g.x0 + g.side, g.y0 + g.side), (cfg.image_px, cfg.image_px))
        for g in glyphs
        if g.side <= hi
    )


def derive_sample_seed(dataset_seed: int, index: int) -> int:
    """Stable per-sample seed; disjoint streams for disjoint (seed, index)."""
    ss = np.random.SeedSequence([dataset_seed, index])
    return int(ss.generate_state(1, np.uint64)[0])
