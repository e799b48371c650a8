import copy
import json
import math
import struct

import numpy as np
import pytest
import torch

from maskgen.codec import Codebook, train_codebook
from maskgen.model import MaskTransformer, ModelConfig
from maskgen.pnm import write_pgm, write_ppm
from maskgen.training import (
    CHECKPOINT_MAGIC,
    PRESETS,
    Sample,
    TrainConfig,
    build_samples,
    grad_check,
    load_checkpoint,
    preset_config,
    save_checkpoint,
    train,
    warmup_cosine_lambda,
)
from maskgen.validation import ValidationError
from maskgen.vocab import Vocabulary

CONFIG = ModelConfig(layers=2, hidden=32, heads=2, seed=0, patch_dim=12)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(8)


def make_samples(vocab, n=6, seed=0, n_mask=4):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        text = tuple(
            int(vocab.text_base + rng.integers(0, vocab.text_vocab_size))
            for _ in range(int(rng.integers(1, 4)))
        )
        patches = rng.normal(size=(3, CONFIG.patch_dim)).astype(np.float32)
        tokens = rng.integers(0, vocab.n_mask_codes, size=n_mask).astype(np.int64)
        out.append(Sample(text_ids=text, patches=patches, mask_tokens=tokens))
    return out


class TestPresets:
    def test_pretrain_values(self):
        cfg = preset_config("pretrain")
        assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay) == (2e-4, 0.9, 0.95, 0.05)

    def test_finetune_values(self):
        cfg = preset_config("finetune")
        assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay) == (1e-4, 0.9, 0.99, 0.0)

    def test_overrides(self):
        cfg = preset_config("finetune", epochs=3, batch_size=4)
        assert cfg.epochs == 3 and cfg.batch_size == 4
        assert cfg.lr == PRESETS["finetune"]["lr"]

    def test_unknown_preset(self):
        with pytest.raises(ValidationError, match="preset"):
            preset_config("warmstart")

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(epochs=0)
        with pytest.raises(ValidationError):
            TrainConfig(warmup_frac=1.0)

    def test_to_dict_round_trip(self):
        cfg = preset_config("pretrain", seed=7)
        assert TrainConfig(**cfg.to_dict()) == cfg


class TestSchedule:
    def test_linear_ramp_then_peak(self):
        factor = warmup_cosine_lambda(200, 0.05)  # warmup = 10 steps
        assert factor(0) == pytest.approx(0.1)
        assert factor(4) == pytest.approx(0.5)
        assert factor(9) == pytest.approx(1.0)

    def test_cosine_tail_reaches_zero(self):
        factor = warmup_cosine_lambda(200, 0.05)
        # halfway through the decay the cosine sits at exactly one half
        assert factor(10 + 95) == pytest.approx(0.5)
        assert factor(200) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_decreasing_after_warmup(self):
        factor = warmup_cosine_lambda(100, 0.01)
        values = [factor(s) for s in range(1, 100)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_one_percent_rounds_to_one_step_minimum(self):
        factor = warmup_cosine_lambda(10, 0.01)  # 0.1 steps rounds up to 1
        assert factor(0) == pytest.approx(1.0)

    def test_zero_fraction_skips_warmup(self):
        factor = warmup_cosine_lambda(50, 0.0)
        assert factor(0) == pytest.approx(1.0)

    def test_needs_a_step(self):
        with pytest.raises(ValidationError):
            warmup_cosine_lambda(0, 0.01)


class TestTrain:
    def test_zero_lr_leaves_parameters_untouched(self, vocab):
        model = MaskTransformer(CONFIG, vocab)
        before = copy.deepcopy(model.state_dict())
        cfg = TrainConfig(lr=0.0, epochs=2, batch_size=3, seed=0)
        result = train(model, cfg, make_samples(vocab))
        assert not result.aborted
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, before[name]), name

    def test_same_seed_identical_loss_curves(self, vocab):
        samples = make_samples(vocab)
        cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=2, seed=5)
        curves = []
        for _ in range(2):
            model = MaskTransformer(CONFIG, vocab)
            curves.append(train(model, cfg, samples).loss_curve)
        assert curves[0] == curves[1]

    def test_loss_decreases_on_learnable_task(self, vocab):
        # one fixed sample repeated: the model can simply memorize it
        samples = make_samples(vocab, n=1) * 8
        model = MaskTransformer(CONFIG, vocab)
        cfg = TrainConfig(lr=3e-3, epochs=10, batch_size=8, seed=0)
        result = train(model, cfg, samples)
        assert not result.aborted
        assert result.loss_curve[-1] < result.loss_curve[0]
        assert result.steps == 10

    def test_step_count_includes_ragged_final_batch(self, vocab):
        model = MaskTransformer(CONFIG, vocab)
        cfg = TrainConfig(lr=1e-4, epochs=2, batch_size=4, seed=0)
        result = train(model, cfg, make_samples(vocab, n=6))
        assert result.steps == 2 * math.ceil(6 / 4)
        assert len(result.step_losses) == result.steps
        assert len(result.loss_curve) == 2

    def test_nan_poison_aborts_and_restores(self, vocab):
        model = MaskTransformer(CONFIG, vocab)
        samples = make_samples(vocab)

        def poison(epoch, loss):
            if epoch == 1:
                with torch.no_grad():
                    model.token_embedding.weight[0, 0] = float("nan")

        cfg = TrainConfig(lr=1e-4, epochs=5, batch_size=3, seed=0)
        result = train(model, cfg, samples, log=poison)
        assert result.aborted
        assert "epoch 2 step 0" in result.abort_reason
        assert len(result.loss_curve) == 2
        for tensor in model.state_dict().values():
            assert torch.isfinite(tensor).all()

    def test_empty_dataset_rejected(self, vocab):
        model = MaskTransformer(CONFIG, vocab)
        with pytest.raises(ValidationError):
            train(model, TrainConfig(), [])

    def test_log_callback_sees_every_epoch(self, vocab):
        model = MaskTransformer(CONFIG, vocab)
        seen = []
        cfg = TrainConfig(lr=1e-4, epochs=3, batch_size=3, seed=0)
        result = train(model, cfg, make_samples(vocab), log=lambda e, l: seen.append((e, l)))
        assert [e for e, _ in seen] == [0, 1, 2]
        assert [l for _, l in seen] == result.loss_curve


class TestBuildSamples:
    def test_from_written_files(self, tmp_path, vocab):
        rng = np.random.default_rng(0)
        image = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
        mask = np.zeros((32, 32), np.uint8)
        mask[4:20, 8:28] = 1
        write_ppm(tmp_path / "img.ppm", image)
        write_pgm(tmp_path / "msk.pgm", mask * 255)
        codebook = train_codebook(
            rng.integers(0, 2, size=(64, 256)).astype(np.float64), n_codes=8, seed=0
        )
        records = [{"image": "img.ppm", "mask": "msk.pgm",
                    "instruction": "segment the red circle.", "task": "referring",
                    "seed": 0}]
        samples = build_samples(records, tmp_path, codebook, vocab)
        assert len(samples) == 1
        s = samples[0]
        assert s.patches.shape == (4, 16 * 16 * 3)
        assert s.mask_tokens.shape == (4,)
        assert all(0 <= t < 8 for t in s.mask_tokens)
        assert len(s.text_ids) == 4


class TestCheckpoint:
    def test_forward_bit_identical_after_round_trip(self, tmp_path, vocab):
        model = MaskTransformer(CONFIG, vocab)
        train(model, TrainConfig(lr=1e-3, epochs=1, batch_size=3, seed=0),
              make_samples(vocab))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, extra={"note": "round-trip"})
        bundle = load_checkpoint(path)

        rng = np.random.default_rng(1)
        text = [vocab.text_base]
        patches = rng.normal(size=(2, CONFIG.patch_dim)).astype(np.float32)
        emb, _ = model.build_sequence(text, patches, [1, 2])
        with torch.no_grad():
            want, _ = model.forward(emb)
            got, _ = bundle.model.forward(emb)
        assert torch.equal(want, got)
        assert bundle.extra == {"note": "round-trip"}
        assert bundle.config == CONFIG
        assert bundle.vocab == vocab

    def test_embedded_codebook_round_trip(self, tmp_path, vocab):
        model = MaskTransformer(CONFIG, vocab)
        vectors = np.random.default_rng(2).random((8, 256)).astype(np.float32)
        codebook = Codebook(vectors, seed=3, iterations=17, sample_count=420)
        path = tmp_path / "with_codes.ckpt"
        save_checkpoint(path, model, codebook=codebook)
        bundle = load_checkpoint(path)
        assert bundle.codebook is not None
        assert np.array_equal(bundle.codebook.vectors, vectors)
        assert bundle.codebook.seed == 3
        assert bundle.codebook.iterations == 17
        assert bundle.codebook.sample_count == 420

    def test_no_codebook_when_not_embedded(self, tmp_path, vocab):
        model = MaskTransformer(CONFIG, vocab)
        path = tmp_path / "bare.ckpt"
        save_checkpoint(path, model)
        assert load_checkpoint(path).codebook is None

    def test_save_load_save_byte_identical(self, tmp_path, vocab):
        model = MaskTransformer(CONFIG, vocab)
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(first, model, extra={"k": [1, 2]})
        bundle = load_checkpoint(first)
        save_checkpoint(second, bundle.model, extra=bundle.extra)
        assert first.read_bytes() == second.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(ValidationError, match="magic"):
            load_checkpoint(path)

    def test_header_is_inspectable_json(self, tmp_path, vocab):
        model = MaskTransformer(CONFIG, vocab)
        path = tmp_path / "inspect.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        assert raw.startswith(CHECKPOINT_MAGIC)
        (header_len,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
        header = json.loads(raw[len(CHECKPOINT_MAGIC) + 4 :][:header_len])
        assert header["format"] == 1
        assert header["vocab"]["n_mask_codes"] == 8
        names = {entry["name"] for entry in header["tensors"]}
        assert "token_embedding.weight" in names
        # offsets are contiguous byte positions
        entries = sorted(header["tensors"], key=lambda e: e["offset"])
        pos = 0
        for entry in entries:
            assert entry["offset"] == pos
            pos += int(np.prod(entry["shape"] or [1])) * 4


class TestGradCheck:
    def test_tiny_transformer_matches_numeric(self, vocab):
        model = MaskTransformer(ModelConfig(layers=1, hidden=16, heads=2, seed=0,
                                            patch_dim=12), vocab)
        samples = make_samples(vocab, n=2, n_mask=3)
        err = grad_check(model, samples, n_coords=150, seed=0)
        # coordinates with near-zero true gradient bottom out around
        # h^2 / denominator_floor = 1e-4; a genuine gradient bug reads ~1.0
        assert err < 1e-3

    def test_deterministic(self, vocab):
        model = MaskTransformer(ModelConfig(layers=1, hidden=16, heads=2, seed=0,
                                            patch_dim=12), vocab)
        samples = make_samples(vocab, n=2, n_mask=3)
        a = grad_check(model, samples, n_coords=40, seed=3)
        b = grad_check(model, samples, n_coords=40, seed=3)
        assert a == b

    def test_does_not_mutate_model(self, vocab):
        model = MaskTransformer(CONFIG, vocab)
        before = copy.deepcopy(model.state_dict())
        grad_check(model, make_samples(vocab, n=1), n_coords=10)
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, before[name]), name

    def test_oversized_n_coords_checks_everything(self, vocab):
        model = MaskTransformer(ModelConfig(layers=1, hidden=8, heads=2, seed=0,
                                            patch_dim=6), vocab)
        sample = Sample(
            text_ids=(vocab.text_base,),
            patches=np.random.default_rng(0).normal(size=(1, 6)).astype(np.float32),
            mask_tokens=np.array([0, 1], dtype=np.int64),
        )
        err = grad_check(model, [sample], n_coords=10**9, seed=0)
        assert err < 1e-3

    def test_empty_samples_rejected(self, vocab):
        model = MaskTransformer(CONFIG, vocab)
        with pytest.raises(ValidationError):
            grad_check(model, [])
