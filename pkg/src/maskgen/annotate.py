"""Two-stage mask annotation: box/mask matching and expression generation.

Stage one turns raw labeled detections plus class-agnostic mask proposals
into instance and semantic segmentation records, applying a fixed filter
chain (drop overpopulated labels, drop nested duplicate boxes, gate matches
on confidence and IoU). Stage two asks a captioning client for a referring
expression per instance, cross-checks the expression against same-label
siblings, and optionally collects reasoning-style expressions for labels
with exactly one instance.

Captioners are abstracted behind :class:`CaptionClient`; production runs
replay a recorded transcript, so the whole pipeline is a pure function of
its file inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .pnm import read_mask
from .validation import (
    MaskgenError,
    ValidationError,
    as_binary_mask,
    check_box,
    check_same_shape,
)

MAX_BOXES_PER_LABEL = 4
NESTED_IOU = 0.97
MIN_CONFIDENCE = 0.3
MULTI_BOX_IOU = 0.9
SINGLE_BOX_IOU = 0.85
GENERATE_COLOR = (0, 255, 0)
VERIFY_COLOR = (255, 128, 0)
CONTOUR_DILATION = 20

REASONS = (
    "too_many_boxes",
    "nested",
    "no_candidates",
    "unmatched_box",
    "low_confidence",
    "low_iou",
    "expression_ambiguous",
    "client_error",
)


class ClientError(MaskgenError):
    """The caption client could not answer a request."""


@dataclass(frozen=True)
class LabeledDetection:
    """One detector output: a labeled box with confidence."""

    label: str
    box: tuple
    confidence: float

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        check_box(self.box, "detection box")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(
                f"confidence must be in [0, 1], got {self.confidence}"
            )


@dataclass(frozen=True)
class MaskCandidate:
    """A class-agnostic mask proposal with its tight foreground bbox."""

    mask_id: str
    mask: np.ndarray = field(compare=False)
    bbox: tuple = None

    def __post_init__(self):
        mask = as_binary_mask(self.mask, f"mask {self.mask_id!r}")
        object.__setattr__(self, "mask", mask)
        if not mask.any():
            raise ValidationError(f"mask {self.mask_id!r} has no foreground pixels")
        ys, xs = np.nonzero(mask)
        tight = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        if self.bbox is None:
            object.__setattr__(self, "bbox", tight)
        elif tuple(float(v) for v in self.bbox) != tight:
            raise ValidationError(
                f"mask {self.mask_id!r}: declared bbox {self.bbox} is not the "
                f"tight foreground extent {tight}"
            )


@dataclass(frozen=True)
class AnnotatedInstance:
    """One output record; ``kind`` distinguishes the four data flavors."""

    mask_id: str
    label: str
    kind: str
    expression: str = None
    mask: np.ndarray = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("instance", "semantic", "referring", "reasoning"):
            raise ValidationError(f"unknown instance kind {self.kind!r}")
        if self.kind in ("referring", "reasoning") and not self.expression:
            raise ValidationError(f"{self.kind} records require an expression")

    def to_record(self) -> dict:
        return {
            "mask_id": self.mask_id,
            "label": self.label,
            "kind": self.kind,
            "expression": self.expression,
        }


@dataclass(frozen=True)
class Rejection:
    """Side-channel record explaining why an item was dropped."""

    reason: str
    label: str
    mask_id: str = None
    detail: str = ""

    def __post_init__(self):
        if self.reason not in REASONS:
            raise ValidationError(f"unknown rejection reason {self.reason!r}")

    def to_record(self) -> dict:
        return {
            "reason": self.reason,
            "label": self.label,
            "mask_id": self.mask_id,
            "detail": self.detail,
        }


def box_area(box) -> float:
    x0, y0, x1, y1 = box
    return (x1 - x0) * (y1 - y0)


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax1, bx1), min(ay1, by1)
    if ix0 >= ix1 or iy0 >= iy1:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    return inter / (box_area(a) + box_area(b) - inter)


def box_encloses(outer, inner) -> bool:
    """True when ``inner`` lies fully within ``outer`` (boundaries allowed)."""
    ox0, oy0, ox1, oy1 = outer
    ix0, iy0, ix1, iy1 = inner
    return ix0 >= ox0 and iy0 >= oy0 and ix1 <= ox1 and iy1 <= oy1


def intersection_over_smaller(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax1, bx1), min(ay1, by1)
    if ix0 >= ix1 or iy0 >= iy1:
        return 0.0
    return (ix1 - ix0) * (iy1 - iy0) / min(box_area(a), box_area(b))


def group_by_label(detections) -> dict:
    """Partition detections by label, keeping input order inside each group."""
    groups: dict = {}
    for det in detections:
        groups.setdefault(det.label, []).append(det)
    return groups


def filter_overpopulated(groups: dict, max_boxes: int = MAX_BOXES_PER_LABEL):
    """Drop labels with more than ``max_boxes`` detections; keep the rest as-is.

    Returns (surviving groups, rejections for the dropped labels).
    """
    kept = {}
    rejections = []
    for label, dets in groups.items():
        if len(dets) > max_boxes:
            rejections.append(
                Rejection("too_many_boxes", label, detail=f"{len(dets)} boxes")
            )
        else:
            kept[label] = dets
    return kept, rejections


def filter_nested(group, rule: str = "enclosed-iou"):
    """Remove near-duplicate boxes nested inside a larger same-label box.

    The default rule removes A when A is fully enclosed in B, box-IoU(A, B)
    exceeds 0.97, and A has strictly smaller area — all three at once, which
    only near-identical boxes satisfy. The "over-smaller" rule instead tests
    intersection(A, B) / area(A) > 0.97, which fires for any deeply contained
    box. Removals are decided against the original group, then applied.

    Returns (survivors, rejections).
    """
    if rule not in ("enclosed-iou", "over-smaller"):
        raise ValidationError(f"unknown nested-box rule {rule!r}")
    doomed = set()
    for i, a in enumerate(group):
        for j, b in enumerate(group):
            if i == j or box_area(a.box) >= box_area(b.box):
                continue
            if rule == "enclosed-iou":
                nested = box_encloses(b.box, a.box) and box_iou(a.box, b.box) > NESTED_IOU
            else:
                nested = intersection_over_smaller(a.box, b.box) > NESTED_IOU
            if nested:
                doomed.add(i)
                break
    survivors = [d for i, d in enumerate(group) if i not in doomed]
    rejections = [
        Rejection("nested", group[i].label, detail=f"box {group[i].box} nested")
        for i in sorted(doomed)
    ]
    return survivors, rejections


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching one label's boxes against mask candidates."""

    label: str
    matches: tuple  # of (LabeledDetection, MaskCandidate, iou)
    rejection: Rejection = None

    @property
    def accepted(self) -> bool:
        return self.rejection is None


def match_masks(group, candidates, *, min_confidence: float = MIN_CONFIDENCE,
                multi_iou: float = MULTI_BOX_IOU, single_iou: float = SINGLE_BOX_IOU
                ) -> MatchResult:
    """Greedily pair one label's boxes with mask candidates, then apply gates.

    Pairs are assigned in order of descending box-IoU (ties broken by box
    then candidate input position), one candidate per box. A multi-box label
    must clear min confidence > 0.3 and min matched IoU > 0.9; a single-box
    label needs confidence > 0.3 and IoU > 0.85. Failing any gate rejects
    the label as a whole.
    """
    if not group:
        raise ValidationError("match_masks needs a non-empty group")
    label = group[0].label
    if not candidates:
        return MatchResult(label, (), Rejection("no_candidates", label))

    scored = []
    for bi, det in enumerate(group):
        for ci, cand in enumerate(candidates):
            scored.append((box_iou(det.box, cand.bbox), bi, ci))
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    box_match: dict = {}
    used_candidates: set = set()
    for score, bi, ci in scored:
        if bi in box_match or ci in used_candidates:
            continue
        box_match[bi] = (ci, score)
        used_candidates.add(ci)

    if len(box_match) < len(group):
        return MatchResult(
            label,
            (),
            Rejection(
                "unmatched_box",
                label,
                detail=f"{len(group) - len(box_match)} box(es) left without a mask",
            ),
        )

    matches = tuple(
        (group[bi], candidates[ci], score)
        for bi, (ci, score) in sorted(box_match.items())
    )
    min_conf = min(det.confidence for det in group)
    min_iou = min(score for _, _, score in matches)
    iou_gate = multi_iou if len(group) > 1 else single_iou
    if not min_conf > min_confidence:
        rejection = Rejection(
            "low_confidence", label, detail=f"min confidence {min_conf:.4g}"
        )
        return MatchResult(label, (), rejection)
    if not min_iou > iou_gate:
        rejection = Rejection(
            "low_iou", label, detail=f"min IoU {min_iou:.4g} vs gate {iou_gate}"
        )
        return MatchResult(label, (), rejection)
    return MatchResult(label, matches)


def run_filter_chain(detections, candidates, *, nested_rule: str = "enclosed-iou"):
    """Stage-one chain: group → drop overpopulated → drop nested → match.

    Returns (accepted, rejections) where accepted maps each surviving label
    to its MatchResult. Idempotent: re-running on the accepted detections
    reproduces the same matches.
    """
    groups = group_by_label(detections)
    groups, rejections = filter_overpopulated(groups)
    accepted = {}
    for label, group in groups.items():
        survivors, nested_rejections = filter_nested(group, rule=nested_rule)
        rejections.extend(nested_rejections)
        if not survivors:
            continue
        result = match_masks(survivors, candidates)
        if result.accepted:
            accepted[label] = result
        else:
            rejections.append(result.rejection)
    return accepted, rejections


def annotate_image(detections, candidates, *, nested_rule: str = "enclosed-iou"):
    """Full stage one for one image.

    Returns (instances, rejections): instance records for every accepted
    box/mask pair, and the side-channel rejections from each filter step.
    """
    accepted, rejections = run_filter_chain(
        detections, candidates, nested_rule=nested_rule
    )
    instances = [
        AnnotatedInstance(cand.mask_id, label, "instance", mask=cand.mask)
        for label, result in accepted.items()
        for _, cand, _ in result.matches
    ]
    return instances, rejections


def merge_semantic(instances):
    """Union same-label instance masks into per-label semantic records.

    Instance records pass through untouched; one semantic record per label is
    appended (label-sorted, so output is independent of instance order).
    """
    by_label: dict = {}
    for inst in instances:
        if inst.kind != "instance":
            continue
        if inst.mask is None:
            raise ValidationError(f"instance {inst.mask_id!r} carries no mask pixels")
        by_label.setdefault(inst.label, []).append(inst)
    merged = list(instances)
    for label in sorted(by_label):
        group = by_label[label]
        union = np.zeros_like(group[0].mask)
        for inst in group:
            check_same_shape(union, inst.mask, "semantic masks")
            union |= inst.mask
        merged.append(
            AnnotatedInstance(f"semantic:{label}", label, "semantic", mask=union)
        )
    return merged


def disc_dilate(mask: np.ndarray, radius: float) -> np.ndarray:
    """Morphological dilation by a Euclidean disc of the given radius."""
    mask = as_binary_mask(mask)
    if radius < 0:
        raise ValidationError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0 or not mask.any():
        return mask.copy()
    dist = ndimage.distance_transform_edt(1 - mask)
    return (dist <= radius).astype(np.uint8)


def contour_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask."""
    mask = as_binary_mask(mask)
    padded = np.pad(mask, 1).astype(bool)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return (mask.astype(bool) & ~interior).astype(np.uint8)


def render_contour(image: np.ndarray, mask: np.ndarray, color=GENERATE_COLOR,
                   dilation: float = CONTOUR_DILATION) -> np.ndarray:
    """Paint the outline of the dilated mask onto a copy of the image."""
    image = np.asarray(image)
    mask = as_binary_mask(mask)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"image must be HxWx3, got shape {image.shape}")
    check_same_shape(image[..., 0], mask, "image and mask")
    outline = contour_pixels(disc_dilate(mask, dilation))
    out = image.copy()
    out[outline.astype(bool)] = np.asarray(color, np.uint8)
    return out


def request_key(kind: str, image: np.ndarray, payload: str) -> str:
    """Stable content hash identifying one client request."""
    h = hashlib.sha256()
    h.update(kind.encode())
    h.update(b"\x00")
    h.update(payload.encode())
    h.update(b"\x00")
    h.update(str(image.shape).encode())
    h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()


class CaptionClient:
    """Interface to the captioning model: expression generation + verification."""

    def generate(self, image: np.ndarray, label: str, style: str = "referring") -> str:
        raise NotImplementedError

    def verify(self, image: np.ndarray, expression: str) -> str:
        """Answer "yes" if the expression applies to the outlined object."""
        raise NotImplementedError


class ReplayClient(CaptionClient):
    """Replays a recorded transcript; any unrecorded request is an error.

    Transcript: JSON list of {"kind": "generate"|"verify", "key": sha256-hex,
    "response": str}. Lookups are single-flight and deterministic.
    """

    def __init__(self, transcript):
        if isinstance(transcript, (str, Path)):
            with open(transcript) as fh:
                transcript = json.load(fh)
        self._responses = {}
        for entry in transcript:
            if entry["kind"] not in ("generate", "verify"):
                raise ValidationError(f"unknown transcript kind {entry['kind']!r}")
            self._responses[(entry["kind"], entry["key"])] = entry["response"]

    def _lookup(self, kind: str, key: str) -> str:
        try:
            return self._responses[(kind, key)]
        except KeyError:
            raise ClientError(
                f"transcript has no {kind} response for key {key[:12]}…"
            ) from None

    def generate(self, image, label, style="referring"):
        return self._lookup("generate", request_key("generate", image, f"{style}:{label}"))

    def verify(self, image, expression):
        return self._lookup("verify", request_key("verify", image, expression))


class StubClient(CaptionClient):
    """Deterministic rule-based client for tests and offline smoke runs.

    Generated expressions embed the label; verification answers "no" by
    default (every expression is specific), or a fixed alternative supplied
    at construction. All requests are logged on ``self.calls``.
    """

    def __init__(self, verify_response: str = "no"):
        self.verify_response = verify_response
        self.calls = []

    def generate(self, image, label, style="referring"):
        self.calls.append(("generate", style, label))
        if style == "reasoning":
            return f"the object you would call a {label}"
        return f"the outlined {label}"

    def verify(self, image, expression):
        self.calls.append(("verify", expression))
        return self.verify_response


def record_transcript_entry(kind: str, image, payload: str, response: str) -> dict:
    """Build a replayable transcript row for a live-client exchange."""
    return {"kind": kind, "key": request_key(kind, image, payload), "response": response}


def run_referring_pipeline(image, instances, client: CaptionClient, *,
                           verify: bool = True, reasoning: bool = True,
                           dilation: float = CONTOUR_DILATION):
    """Stage two: attach referring (and reasoning) expressions to instances.

    For every instance record, the client sees the image with the instance
    outlined in green and proposes an expression. When the label has other
    instances, the expression is shown against each sibling (outlined in
    orange) and kept only if the client answers "no" every time; labels with
    a single instance skip verification. Reasoning expressions are requested
    only for labels with exactly one instance.

    Returns (new records, rejections); input records are not repeated.
    """
    image = np.asarray(image)
    base = [inst for inst in instances if inst.kind == "instance"]
    by_label: dict = {}
    for inst in base:
        by_label.setdefault(inst.label, []).append(inst)

    out = []
    rejections = []
    for inst in base:
        siblings = [s for s in by_label[inst.label] if s.mask_id != inst.mask_id]
        try:
            green = render_contour(image, inst.mask, GENERATE_COLOR, dilation)
            expression = client.generate(green, inst.label)
            valid = True
            if verify and siblings:
                for sib in siblings:
                    orange = render_contour(image, sib.mask, VERIFY_COLOR, dilation)
                    if client.verify(orange, expression).strip().lower() != "no":
                        valid = False
                        break
            if valid:
                out.append(
                    AnnotatedInstance(
                        inst.mask_id, inst.label, "referring",
                        expression=expression, mask=inst.mask,
                    )
                )
            else:
                rejections.append(
                    Rejection(
                        "expression_ambiguous", inst.label, mask_id=inst.mask_id,
                        detail=expression,
                    )
                )
            if reasoning and not siblings:
                reason_expr = client.generate(green, inst.label, style="reasoning")
                out.append(
                    AnnotatedInstance(
                        inst.mask_id, inst.label, "reasoning",
                        expression=reason_expr, mask=inst.mask,
                    )
                )
        except ClientError as err:
            rejections.append(
                Rejection("client_error", inst.label, mask_id=inst.mask_id, detail=str(err))
            )
    return out, rejections


def load_detections(path):
    """Read detections JSONL; returns (image path, detections) per the file.

    Every record must name the same image — one invocation annotates one
    image.
    """
    detections = []
    images = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            missing = [k for k in ("image", "label", "box", "confidence") if k not in rec]
            if missing:
                raise ValidationError(
                    f"detections line {lineno} is missing {', '.join(missing)}"
                )
            images.add(rec["image"])
            detections.append(
                LabeledDetection(rec["label"], tuple(rec["box"]), float(rec["confidence"]))
            )
    if len(images) > 1:
        raise ValidationError(
            f"detections reference {len(images)} images; annotate one image per run"
        )
    image = images.pop() if images else None
    return image, detections


def load_mask_candidates(mask_dir):
    """Read a per-image mask directory: index.json maps mask_id → PGM file."""
    mask_dir = Path(mask_dir)
    index_path = mask_dir / "index.json"
    if not index_path.exists():
        raise ValidationError(f"mask directory {mask_dir} has no index.json")
    with open(index_path) as fh:
        index = json.load(fh)
    candidates = []
    for mask_id in sorted(index):
        candidates.append(MaskCandidate(mask_id, read_mask(mask_dir / index[mask_id])))
    return candidates


def write_records_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record.to_record()) + "\n")
