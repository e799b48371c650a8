"""Deterministic synthetic scenes: colored shapes with instruction text.

Each sample is an RGB image of hard-edged shapes on a black background, an
instruction sentence naming one shape (referring) or one shape class
(semantic), and the matching binary mask. Everything is a pure function of
the sample seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pnm import write_mask, write_ppm
from .validation import MaskgenError, ValidationError
from .vocab import ATTRIBUTES, COLOR_RGB, COLORS, KINDS, TEMPLATES, fill_template

DEFAULT_CANVAS = (64, 64)
MAX_SHAPES = 6
MAX_RETRIES = 16
TASKS = ("semantic", "referring")


class AmbiguousSceneError(MaskgenError):
    """No phrase in the closed grammar uniquely identifies the referent."""


@dataclass(frozen=True)
class Shape:
    """One colored shape; ``params`` is geometry in pixel coordinates.

    circle: (cy, cx, r), covering (y-cy)^2 + (x-cx)^2 <= r^2
    rectangle: (y0, x0, y1, x1), covering the half-open box [y0,y1) x [x0,x1)
    triangle: (y0, x0, y1, x1, y2, x2), three vertices, edges inclusive
    """

    kind: str
    color: str
    params: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown shape kind {self.kind!r}")
        if self.color not in COLORS:
            raise ValidationError(f"unknown color {self.color!r}")
        n_expected = {"circle": 3, "rectangle": 4, "triangle": 6}[self.kind]
        if len(self.params) != n_expected:
            raise ValidationError(
                f"{self.kind} takes {n_expected} geometry parameters, got {len(self.params)}"
            )
        object.__setattr__(self, "params", tuple(int(p) for p in self.params))

    def bounding_box(self) -> tuple:
        """(y0, x0, y1, x1) half-open bounds containing every covered pixel."""
        p = self.params
        if self.kind == "circle":
            cy, cx, r = p
            return (cy - r, cx - r, cy + r + 1, cx + r + 1)
        if self.kind == "rectangle":
            return p
        ys, xs = p[0::2], p[1::2]
        return (min(ys), min(xs), max(ys) + 1, max(xs) + 1)

    def rasterize(self, canvas: tuple) -> np.ndarray:
        """Hard-edged binary mask of the shape on the given (H, W) canvas."""
        h, w = canvas
        yy, xx = np.ogrid[:h, :w]
        p = self.params
        if self.kind == "circle":
            cy, cx, r = p
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif self.kind == "rectangle":
            y0, x0, y1, x1 = p
            inside = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        else:
            ay, ax, by, bx, cy, cx = p
            # signed areas of the pixel against each directed edge; a pixel is
            # inside when all three share the orientation of the triangle
            d1 = (xx - bx) * (ay - by) - (ax - bx) * (yy - by)
            d2 = (xx - cx) * (by - cy) - (bx - cx) * (yy - cy)
            d3 = (xx - ax) * (cy - ay) - (cx - ax) * (yy - ay)
            inside = ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | (
                (d1 <= 0) & (d2 <= 0) & (d3 <= 0)
            )
        return inside.astype(np.uint8)


@dataclass(frozen=True)
class SceneSpec:
    """A fully determined scene plus which shape the instruction targets."""

    seed: int
    shapes: tuple
    task: str
    referent: int
    canvas: tuple = DEFAULT_CANVAS

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got {self.task!r}")
        shapes = tuple(self.shapes)
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "canvas", (int(self.canvas[0]), int(self.canvas[1])))
        if not 1 <= len(shapes) <= MAX_SHAPES:
            raise ValidationError(
                f"scenes hold 1..{MAX_SHAPES} shapes, got {len(shapes)}"
            )
        if self.task == "referring" and len(shapes) < 2:
            raise ValidationError("referring scenes need at least 2 shapes")
        if not 0 <= self.referent < len(shapes):
            raise ValidationError(f"referent index {self.referent} out of range")
        h, w = self.canvas
        if h < 8 or w < 8:
            raise ValidationError("canvas too small")
        for i, shape in enumerate(shapes):
            y0, x0, y1, x1 = shape.bounding_box()
            if y0 < 0 or x0 < 0 or y1 > h or x1 > w:
                raise ValidationError(f"shape {i} extends outside the canvas")


def _centroid(mask: np.ndarray) -> tuple:
    ys, xs = np.nonzero(mask)
    return (float(ys.mean()), float(xs.mean()))


def _phrase_selects(phrase_attr, color, kind, shapes, masks):
    """Indices of shapes the phrase '<attr> <color> <kind>' denotes."""
    matching = [i for i, s in enumerate(shapes) if s.color == color and s.kind == kind]
    if phrase_attr is None or len(matching) == 0:
        return matching
    if phrase_attr in ("largest", "smallest"):
        scores = [int(masks[i].sum()) for i in matching]
        best = max(scores) if phrase_attr == "largest" else min(scores)
    else:
        axis = 1 if phrase_attr in ("leftmost", "rightmost") else 0
        scores = [_centroid(masks[i])[axis] for i in matching]
        if phrase_attr in ("leftmost", "topmost"):
            best = min(scores)
        else:
            best = max(scores)
    return [i for i, s in zip(matching, scores) if s == best]


def referent_phrase(spec: SceneSpec) -> str:
    """Shortest grammar phrase that uniquely denotes the referent shape.

    Tries the bare ``<color> <kind>`` first, then each attribute in a fixed
    order; every candidate is checked against all shapes in the scene.
    Raises AmbiguousSceneError when no candidate isolates the referent.
    """
    if spec.task != "referring":
        raise ValidationError("referent phrases are defined for referring scenes")
    shapes = spec.shapes
    masks = [s.rasterize(spec.canvas) for s in shapes]
    target = shapes[spec.referent]
    base = f"{target.color} {target.kind}"
    if _phrase_selects(None, target.color, target.kind, shapes, masks) == [spec.referent]:
        return base
    for attr in ATTRIBUTES:
        if _phrase_selects(attr, target.color, target.kind, shapes, masks) == [
            spec.referent
        ]:
            return f"{attr} {base}"
    raise AmbiguousSceneError(
        f"no unique phrase for shape {spec.referent} in scene seed={spec.seed}"
    )


def class_phrase(spec: SceneSpec) -> str:
    """Class name used by semantic instructions: ``<color> <kind>``."""
    target = spec.shapes[spec.referent]
    return f"{target.color} {target.kind}"


def scene_masks(spec: SceneSpec):
    """Per-shape binary masks, rasterized back-to-front (list index = order)."""
    return [s.rasterize(spec.canvas) for s in spec.shapes]


def render_image(spec: SceneSpec) -> np.ndarray:
    """RGB uint8 image; later shapes paint over earlier ones."""
    h, w = spec.canvas
    image = np.zeros((h, w, 3), np.uint8)
    for shape, mask in zip(spec.shapes, scene_masks(spec)):
        image[mask.astype(bool)] = COLOR_RGB[shape.color]
    return image


def target_mask(spec: SceneSpec) -> np.ndarray:
    """Ground-truth mask: the referent's pixels, or the class union."""
    masks = scene_masks(spec)
    if spec.task == "referring":
        return masks[spec.referent]
    target = spec.shapes[spec.referent]
    out = np.zeros(spec.canvas, np.uint8)
    for shape, mask in zip(spec.shapes, masks):
        if shape.color == target.color and shape.kind == target.kind:
            out |= mask
    return out


def generate_sample(spec: SceneSpec):
    """(image, instruction, mask) for a scene; deterministic in the spec."""
    phrase = referent_phrase(spec) if spec.task == "referring" else class_phrase(spec)
    instruction = fill_template(spec.seed % len(TEMPLATES), phrase)
    return render_image(spec), instruction, target_mask(spec)


def _place_shapes(rng, canvas, n_shapes):
    """Draw shapes with pairwise-disjoint padded bounding boxes, or None."""
    h, w = canvas
    shapes = []
    boxes = []
    for _ in range(n_shapes):
        placed = None
        for _ in range(20):
            kind = KINDS[rng.integers(0, len(KINDS))]
            color = COLORS[rng.integers(0, len(COLORS))]
            side = min(h, w)
            if kind == "circle":
                r_lo = max(6, side // 10)
                r_hi = min(7 * side // 32, (side - 2) // 2)
                if r_hi < r_lo:
                    continue
                r = int(rng.integers(r_lo, r_hi + 1))
                cy = int(rng.integers(r, h - r))
                cx = int(rng.integers(r, w - r))
                candidate = Shape(kind, color, (cy, cx, r))
            else:
                lo = max(12, 3 * side // 16)
                hi = max(lo, 7 * side // 16)
                if side < lo:
                    continue
                sh = int(rng.integers(lo, min(hi, h) + 1))
                sw = int(rng.integers(lo, min(hi, w) + 1))
                y0 = int(rng.integers(0, h - sh + 1))
                x0 = int(rng.integers(0, w - sw + 1))
                if kind == "rectangle":
                    candidate = Shape(kind, color, (y0, x0, y0 + sh, x0 + sw))
                else:
                    apex = int(rng.integers(x0 + 2, x0 + sw - 2))
                    candidate = Shape(
                        kind,
                        color,
                        (y0 + sh - 1, x0, y0 + sh - 1, x0 + sw - 1, y0, apex),
                    )
            by0, bx0, by1, bx1 = candidate.bounding_box()
            padded = (by0 - 1, bx0 - 1, by1 + 1, bx1 + 1)
            if all(
                padded[2] <= b[0] or b[2] <= padded[0] or padded[3] <= b[1] or b[3] <= padded[1]
                for b in boxes
            ):
                placed = candidate
                boxes.append(padded)
                break
        if placed is None:
            return None
        shapes.append(placed)
    return tuple(shapes)


def sample_scene(seed: int, task: str = "referring", canvas=DEFAULT_CANVAS) -> SceneSpec:
    """Scene for a seed, retrying fresh layouts until the instruction is unique.

    Retry r draws from the independent stream ``default_rng([seed, r])`` so
    retries never replay another sample's stream; a scene whose referent
    cannot be named unambiguously is discarded. Gives up after MAX_RETRIES.
    """
    if task not in TASKS:
        raise ValidationError(f"task must be one of {TASKS}, got {task!r}")
    last_error = None
    for attempt in range(MAX_RETRIES):
        rng = np.random.default_rng([seed, attempt])
        lo = 2 if task == "referring" else 1
        n_shapes = int(rng.integers(lo, 5))
        shapes = _place_shapes(rng, canvas, n_shapes)
        if shapes is None:
            last_error = AmbiguousSceneError("shape placement failed")
            continue
        referent = int(rng.integers(0, n_shapes))
        spec = SceneSpec(seed=seed, shapes=shapes, task=task, referent=referent, canvas=canvas)
        if task == "semantic":
            return spec
        try:
            referent_phrase(spec)
            return spec
        except AmbiguousSceneError as err:
            last_error = err
    raise AmbiguousSceneError(
        f"seed {seed}: no valid scene after {MAX_RETRIES} attempts"
    ) from last_error


def generate_dataset(out_dir, n: int, task: str = "referring", seed0: int = 0,
                     canvas=DEFAULT_CANVAS) -> Path:
    """Write n samples (PPM image, PGM mask, JSONL manifest); returns manifest path."""
    if n < 1:
        raise ValidationError("dataset size must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for seed in range(seed0, seed0 + n):
        spec = sample_scene(seed, task=task, canvas=canvas)
        image, instruction, mask = generate_sample(spec)
        image_name = f"img_{seed:06d}.ppm"
        mask_name = f"msk_{seed:06d}.pgm"
        write_ppm(out / image_name, image)
        write_mask(out / mask_name, mask)
        records.append(
            {
                "image": image_name,
                "mask": mask_name,
                "instruction": instruction,
                "task": task,
                "seed": seed,
            }
        )
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return manifest


def load_manifest(manifest_path) -> list:
    """Parse a dataset manifest back into a list of record dicts."""
    records = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
