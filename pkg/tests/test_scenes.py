import hashlib
import math

import numpy as np
import pytest

from maskgen.scenes import (
    AmbiguousSceneError,
    SceneSpec,
    Shape,
    class_phrase,
    generate_dataset,
    generate_sample,
    load_manifest,
    referent_phrase,
    render_image,
    sample_scene,
    scene_masks,
    target_mask,
)
from maskgen.validation import ValidationError
from maskgen.vocab import (
    ATTRIBUTES,
    COLOR_RGB,
    TEMPLATES,
    Vocabulary,
    detokenize_text,
    fill_template,
    normalize_text,
    tokenize_text,
)
from maskgen.pnm import read_image, read_mask


class TestVocabulary:
    def test_id_layout(self):
        v = Vocabulary(1024)
        assert v.boi_id == 1024
        assert v.bom_id == 1025
        assert v.text_base == 1026
        assert v.total_tokens == 1026 + v.text_vocab_size
        assert v.pad_id == v.total_tokens

    def test_closed_vocab_is_small(self):
        v = Vocabulary(16)
        assert v.text_vocab_size <= 64
        assert len(set(v.words)) == v.text_vocab_size

    def test_encode_offsets(self):
        v = Vocabulary(8)
        ids = v.encode_text("red circle")
        assert len(ids) == 2
        assert all(i >= v.text_base for i in ids)
        assert ids[0] == v.text_base + v.words.index("red")

    def test_encode_empty(self):
        assert Vocabulary(8).encode_text("") == []

    def test_out_of_vocabulary_named(self):
        with pytest.raises(ValidationError, match="'zebra'"):
            Vocabulary(8).encode_text("segment the zebra")

    def test_round_trip_all_templates(self):
        v = Vocabulary(32)
        for tid in range(len(TEMPLATES)):
            for phrase in ("red circle", "leftmost blue triangle"):
                s = fill_template(tid, phrase)
                assert detokenize_text(tokenize_text(s, v), v) == normalize_text(s)

    def test_mask_token_range(self):
        v = Vocabulary(4)
        assert v.is_mask_token(0) and v.is_mask_token(3)
        assert not v.is_mask_token(4)

    def test_decode_rejects_non_text_ids(self):
        v = Vocabulary(4)
        with pytest.raises(ValidationError):
            v.decode_text([0])


class TestTemplates:
    def test_exactly_ten(self):
        assert len(TEMPLATES) == 10

    def test_slot_appears_exactly_once(self):
        for t in TEMPLATES:
            assert t.count("{object name}") == 1

    def test_fill(self):
        s = fill_template(0, "red circle")
        assert s == "Produce a segmentation mask for the red circle."

    def test_bad_id(self):
        with pytest.raises(ValidationError):
            fill_template(10, "x")


class TestShape:
    def test_circle_count_near_area(self):
        # lattice-point count of a disc stays within the classic O(r) band
        for r in (4, 6, 8):
            mask = Shape("circle", "red", (32, 32, r)).rasterize((64, 64))
            count = int(mask.sum())
            assert abs(count - math.pi * r * r) <= 2 * math.pi * r + 8

    def test_circle_matches_pixel_loop(self):
        shape = Shape("circle", "red", (10, 20, 5))
        mask = shape.rasterize((32, 32))
        for y in range(32):
            for x in range(32):
                inside = (y - 10) ** 2 + (x - 20) ** 2 <= 25
                assert bool(mask[y, x]) == inside

    def test_rectangle_half_open(self):
        mask = Shape("rectangle", "blue", (2, 3, 5, 7)).rasterize((8, 8))
        assert mask.sum() == 3 * 4
        assert mask[2, 3] == 1 and mask[4, 6] == 1
        assert mask[5, 3] == 0 and mask[2, 7] == 0

    def test_triangle_contains_vertices_and_half_box(self):
        shape = Shape("triangle", "green", (11, 2, 11, 10, 3, 6))
        mask = shape.rasterize((16, 16))
        assert mask[11, 2] == 1 and mask[11, 10] == 1 and mask[3, 6] == 1
        assert mask[3, 2] == 0  # top-left corner of the bbox is outside
        area = 0.5 * abs((10 - 2) * (3 - 11))
        assert abs(int(mask.sum()) - area) <= 3 * 8 + 6  # perimeter slack

    def test_bounding_boxes(self):
        assert Shape("circle", "red", (10, 10, 4)).bounding_box() == (6, 6, 15, 15)
        assert Shape("rectangle", "red", (1, 2, 3, 4)).bounding_box() == (1, 2, 3, 4)
        assert Shape("triangle", "red", (5, 0, 5, 6, 1, 3)).bounding_box() == (1, 0, 6, 7)

    def test_invalid_kind_color(self):
        with pytest.raises(ValidationError):
            Shape("hexagon", "red", (1, 1, 1))
        with pytest.raises(ValidationError):
            Shape("circle", "purple", (1, 1, 1))


class TestSceneSpec:
    def make(self, **kw):
        defaults = dict(
            seed=0,
            shapes=(
                Shape("circle", "red", (16, 16, 5)),
                Shape("rectangle", "blue", (40, 40, 50, 55)),
            ),
            task="referring",
            referent=0,
        )
        defaults.update(kw)
        return SceneSpec(**defaults)

    def test_valid(self):
        assert self.make().canvas == (64, 64)

    def test_shape_outside_canvas(self):
        with pytest.raises(ValidationError, match="outside"):
            self.make(shapes=(Shape("circle", "red", (2, 2, 5)),) * 2)

    def test_referring_needs_two(self):
        with pytest.raises(ValidationError, match="at least 2"):
            self.make(shapes=(Shape("circle", "red", (16, 16, 5)),))

    def test_referent_bounds(self):
        with pytest.raises(ValidationError, match="referent"):
            self.make(referent=2)

    def test_max_shapes(self):
        shape = Shape("circle", "red", (16, 16, 4))
        with pytest.raises(ValidationError):
            self.make(shapes=(shape,) * 7)


class TestReferentPhrase:
    def test_bare_phrase_when_class_unique(self):
        spec = SceneSpec(
            seed=0,
            shapes=(
                Shape("circle", "red", (16, 16, 5)),
                Shape("circle", "blue", (40, 40, 5)),
            ),
            task="referring",
            referent=0,
        )
        assert referent_phrase(spec) == "red circle"

    def test_attribute_disambiguates_duplicates(self):
        spec = SceneSpec(
            seed=0,
            shapes=(
                Shape("circle", "red", (16, 10, 5)),
                Shape("circle", "red", (16, 40, 5)),
            ),
            task="referring",
            referent=0,
        )
        assert referent_phrase(spec) == "leftmost red circle"
        right = SceneSpec(
            seed=0, shapes=spec.shapes, task="referring", referent=1
        )
        assert referent_phrase(right) == "rightmost red circle"

    def test_size_attribute(self):
        spec = SceneSpec(
            seed=0,
            shapes=(
                Shape("circle", "red", (16, 16, 7)),
                Shape("circle", "red", (16, 40, 4)),
                Shape("circle", "red", (40, 16, 5)),
                Shape("circle", "red", (40, 40, 6)),
            ),
            task="referring",
            referent=1,
        )
        # neither leftmost/rightmost nor topmost/bottommost isolates shape 1,
        # but it is strictly the smallest
        assert referent_phrase(spec) == "smallest red circle"

    def test_semantic_task_rejected(self):
        spec = SceneSpec(
            seed=0,
            shapes=(Shape("circle", "red", (16, 16, 5)),),
            task="semantic",
            referent=0,
        )
        with pytest.raises(ValidationError):
            referent_phrase(spec)


class TestGenerateSample:
    def test_deterministic_bytes(self):
        spec = sample_scene(7, task="referring")
        a = generate_sample(spec)
        b = generate_sample(sample_scene(7, task="referring"))
        assert a[1] == b[1]
        assert (a[0] == b[0]).all() and (a[2] == b[2]).all()

    def test_semantic_unions_class(self):
        spec = SceneSpec(
            seed=0,
            shapes=(
                Shape("circle", "red", (16, 16, 5)),
                Shape("circle", "red", (40, 40, 5)),
                Shape("rectangle", "blue", (2, 40, 12, 55)),
            ),
            task="semantic",
            referent=0,
        )
        masks = scene_masks(spec)
        assert (target_mask(spec) == (masks[0] | masks[1])).all()
        assert class_phrase(spec) == "red circle"

    def test_referring_mask_is_single_shape(self):
        spec = sample_scene(3, task="referring")
        assert (target_mask(spec) == scene_masks(spec)[spec.referent]).all()

    def test_instruction_uses_seed_template(self):
        for seed in (0, 1, 13, 29):
            spec = sample_scene(seed, task="referring")
            _, instruction, _ = generate_sample(spec)
            template = TEMPLATES[seed % 10]
            prefix = template.split("{object name}")[0]
            assert instruction.startswith(prefix)

    def test_mask_pixels_carry_referent_color(self):
        for seed in range(20):
            spec = sample_scene(seed, task="referring")
            image, _, mask = generate_sample(spec)
            color = COLOR_RGB[spec.shapes[spec.referent].color]
            assert (image[mask.astype(bool)] == color).all()

    def test_background_is_black(self):
        spec = sample_scene(11, task="semantic")
        image = render_image(spec)
        union = np.zeros(spec.canvas, bool)
        for m in scene_masks(spec):
            union |= m.astype(bool)
        assert (image[~union] == 0).all()


class TestSampleScene:
    def test_phrase_always_unique_over_seeds(self):
        for seed in range(60):
            spec = sample_scene(seed, task="referring")
            phrase = referent_phrase(spec)
            words = phrase.split()
            if len(words) == 3:
                assert words[0] in ATTRIBUTES
            masks = scene_masks(spec)
            color, kind = words[-2], words[-1]
            matches = [
                i
                for i, s in enumerate(spec.shapes)
                if s.color == color and s.kind == kind
            ]
            if len(words) == 2:
                assert matches == [spec.referent]
            else:
                assert spec.referent in matches and len(matches) > 1

    def test_distinct_scenes_across_seeds(self):
        digests = set()
        for seed in range(200):
            image, instruction, mask = generate_sample(sample_scene(seed, "referring"))
            digest = hashlib.sha256(
                image.tobytes() + mask.tobytes() + instruction.encode()
            ).hexdigest()
            digests.add(digest)
        assert len(digests) == 200

    def test_retries_bounded_on_impossible_canvas(self):
        with pytest.raises(AmbiguousSceneError, match="16 attempts"):
            sample_scene(0, task="referring", canvas=(16, 16))

    def test_bad_task(self):
        with pytest.raises(ValidationError):
            sample_scene(0, task="panoptic")


class TestGenerateDataset:
    def test_writes_readable_artifacts(self, tmp_path):
        manifest = generate_dataset(tmp_path, n=5, task="referring", seed0=100)
        records = load_manifest(manifest)
        assert len(records) == 5
        for record in records:
            image = read_image(tmp_path / record["image"])
            mask = read_mask(tmp_path / record["mask"])
            assert image.shape == (64, 64, 3)
            assert mask.shape == (64, 64)
            assert set(np.unique(mask)) <= {0, 1}
            assert record["task"] == "referring"
        assert [r["seed"] for r in records] == list(range(100, 105))

    def test_round_trip_matches_generation(self, tmp_path):
        manifest = generate_dataset(tmp_path, n=3, task="semantic", seed0=0)
        records = load_manifest(manifest)
        for record in records:
            spec = sample_scene(record["seed"], task="semantic")
            image, instruction, mask = generate_sample(spec)
            assert record["instruction"] == instruction
            assert (read_image(tmp_path / record["image"]) == image).all()
            assert (read_mask(tmp_path / record["mask"]) == mask).all()

    def test_rejects_empty(self, tmp_path):
        with pytest.raises(ValidationError):
            generate_dataset(tmp_path, n=0)
