"""End-to-end text-conditioned segmenter with a scikit-learn estimator face.

``MaskSegmenter.fit`` takes (image, instruction) pairs plus target masks,
trains the mask codebook and the autoregressive transformer, and ``predict``
decodes masks for new pairs. The heavy lifting lives in :mod:`codec`,
:mod:`model`, :mod:`training`, and :mod:`decoding`; this class only wires
them together behind one object with ``get_params``/``set_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .codec import (
    decode_tokens,
    encode_mask,
    flatten_tokens,
    patchify,
    patchify_image,
    train_codebook,
    unflatten_tokens,
)
from .decoding import generate, parse_strategy
from .metrics import iou
from .model import MaskTransformer, ModelConfig
from .training import Sample, TrainConfig, preset_config, train
from .validation import ValidationError, as_binary_mask, check_divisible
from .vocab import Vocabulary


class MaskSegmenter(BaseEstimator):
    """Instruction-conditioned mask generator.

    Parameters mirror the underlying pieces: codebook size and patch size for
    the mask codec, transformer dimensions for the model, an optimizer preset
    (optionally overridden) for training, and a decoding strategy string for
    prediction.
    """

    def __init__(
        self,
        n_codes: int = 1024,
        patch_size: int = 16,
        layers: int = 4,
        hidden: int = 128,
        heads: int = 4,
        preset: str = "finetune",
        epochs: int = 30,
        batch_size: int = 16,
        lr: float = None,
        decode: str = "greedy",
        seed: int = 0,
    ):
        self.n_codes = n_codes
        self.patch_size = patch_size
        self.layers = layers
        self.hidden = hidden
        self.heads = heads
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.decode = decode
        self.seed = seed

    def _split_pairs(self, X):
        pairs = list(X)
        if not pairs:
            raise ValidationError("expected at least one (image, instruction) pair")
        images, instructions = [], []
        for item in pairs:
            if len(item) != 2:
                raise ValidationError("each item must be an (image, instruction) pair")
            image, instruction = item
            image = np.asarray(image)
            if image.ndim != 3 or image.shape[2] != 3:
                raise ValidationError(f"images must be HxWx3, got {image.shape}")
            images.append(image)
            instructions.append(str(instruction))
        shape = images[0].shape
        for image in images:
            if image.shape != shape:
                raise ValidationError(
                    f"all images must share dimensions, got {shape} and {image.shape}"
                )
        check_divisible(shape[0], shape[1], self.patch_size)
        return images, instructions

    def _to_sample(self, image, instruction, mask_tokens) -> Sample:
        patches = patchify_image(image, self.patch_size)
        return Sample(
            text_ids=tuple(self.vocab_.encode_text(instruction)),
            patches=patches.reshape(-1, patches.shape[-1]),
            mask_tokens=np.asarray(mask_tokens, dtype=np.int64),
        )

    def fit(self, X, y):
        """Train codebook and transformer on (image, instruction) pairs -> masks."""
        images, instructions = self._split_pairs(X)
        masks = [as_binary_mask(m) for m in y]
        if len(masks) != len(images):
            raise ValidationError(
                f"got {len(images)} pairs but {len(masks)} target masks"
            )
        shape = images[0].shape[:2]
        for mask in masks:
            if mask.shape != shape:
                raise ValidationError(
                    f"mask dimensions {mask.shape} do not match images {shape}"
                )

        vectors = np.concatenate(
            [patchify(m, self.patch_size).reshape(-1, self.patch_size**2) for m in masks]
        )
        self.codebook_ = train_codebook(vectors, self.n_codes, seed=self.seed)
        self.vocab_ = Vocabulary(self.n_codes)
        self.grid_shape_ = (shape[0] // self.patch_size, shape[1] // self.patch_size)
        self.image_shape_ = shape

        config = ModelConfig(
            layers=self.layers,
            hidden=self.hidden,
            heads=self.heads,
            seed=self.seed,
            patch_dim=self.patch_size**2 * 3,
        )
        self.model_ = MaskTransformer(config, self.vocab_)

        overrides = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }
        if self.lr is not None:
            overrides["lr"] = self.lr
        train_config = (
            preset_config(self.preset, **overrides)
            if self.preset
            else TrainConfig(**overrides)
        )

        samples = [
            self._to_sample(
                image,
                instruction,
                flatten_tokens(encode_mask(mask, self.codebook_, self.patch_size)),
            )
            for image, instruction, mask in zip(images, instructions, masks)
        ]
        self.train_result_ = train(self.model_, train_config, samples)
        return self

    def predict(self, X, decode: str = None, seed: int = None) -> np.ndarray:
        """Decode one mask per (image, instruction) pair."""
        check_is_fitted(self, "model_")
        images, instructions = self._split_pairs(X)
        if images[0].shape[:2] != self.image_shape_:
            raise ValidationError(
                f"images are {images[0].shape[:2]} but the model was fit on "
                f"{self.image_shape_}"
            )
        strategy = parse_strategy(decode if decode is not None else self.decode)
        seed = self.seed if seed is None else seed
        h, w = self.grid_shape_
        out = []
        for image, instruction in zip(images, instructions):
            patches = patchify_image(image, self.patch_size)
            tokens = generate(
                self.model_,
                self.vocab_.encode_text(instruction),
                patches.reshape(-1, patches.shape[-1]),
                n_tokens=h * w,
                strategy=strategy,
                seed=seed,
            )
            out.append(
                decode_tokens(unflatten_tokens(tokens, h, w), self.codebook_,
                              self.patch_size)
            )
        return np.stack(out)

    def score(self, X, y) -> float:
        """Mean IoU of predictions against target masks (higher is better)."""
        predictions = self.predict(X)
        targets = [as_binary_mask(m) for m in y]
        if len(targets) != len(predictions):
            raise ValidationError(
                f"got {len(predictions)} predictions but {len(targets)} targets"
            )
        return float(np.mean([iou(p, t) for p, t in zip(predictions, targets)]))
