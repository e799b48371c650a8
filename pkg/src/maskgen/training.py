"""Training loop, optimizer presets, checkpoints, and gradient checking.

Training uses AdamW with a linear-warmup/cosine-decay schedule (warmup over
1% of total steps, decay to zero). Two presets are built in:

    pretrain: lr 2e-4, betas (0.9, 0.95), weight decay 0.05
    finetune: lr 1e-4, betas (0.9, 0.99), weight decay 0.0

Checkpoints are a single self-contained file: a magic string, a JSON header
(model config, vocabulary, tensor manifest, free-form extras), then raw
little-endian float32 tensor data. The mask codebook can be embedded so
inference needs nothing but the checkpoint.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, replace

import numpy as np
import torch

from .codec import Codebook, encode_mask, flatten_tokens, patchify_image
from .model import MaskTransformer, ModelConfig, NonFiniteError, batched_loss
from .pnm import read_image, read_mask
from .validation import ValidationError
from .vocab import Vocabulary

CHECKPOINT_MAGIC = b"ARSEG1\x00"

PRESETS = {
    "pretrain": {"lr": 2e-4, "beta1": 0.9, "beta2": 0.95, "weight_decay": 0.05},
    "finetune": {"lr": 1e-4, "beta1": 0.9, "beta2": 0.99, "weight_decay": 0.0},
}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 16
    grad_clip: float = 1.0
    warmup_frac: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("lr must be >= 0, epochs and batch_size >= 1")
        if not 0 <= self.warmup_frac < 1:
            raise ValidationError(f"warmup fraction must be in [0, 1), got {self.warmup_frac}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "grad_clip": self.grad_clip,
            "warmup_frac": self.warmup_frac,
            "seed": self.seed,
        }


def preset_config(name: str, **overrides) -> TrainConfig:
    """TrainConfig from a named preset, with field overrides."""
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(TrainConfig(**PRESETS[name]), **overrides)


@dataclass(frozen=True)
class Sample:
    """One training item, already numeric."""

    text_ids: tuple
    patches: np.ndarray  # (n_patches, patch_dim) float32
    mask_tokens: np.ndarray  # (h*w,) int64


def build_samples(records, data_dir, codebook: Codebook, vocab: Vocabulary,
                  patch_size: int = 16):
    """Turn dataset manifest records into model-ready samples."""
    from pathlib import Path

    data_dir = Path(data_dir)
    samples = []
    for rec in records:
        image = read_image(data_dir / rec["image"])
        mask = read_mask(data_dir / rec["mask"])
        patches = patchify_image(image, patch_size)
        patches = patches.reshape(-1, patches.shape[-1])
        tokens = flatten_tokens(encode_mask(mask, codebook, patch_size))
        samples.append(
            Sample(
                text_ids=tuple(vocab.encode_text(rec["instruction"])),
                patches=patches,
                mask_tokens=tokens.astype(np.int64),
            )
        )
    return samples


def warmup_cosine_lambda(total_steps: int, warmup_frac: float):
    """Multiplier for step s: linear ramp over the warmup, cosine to zero after."""
    if total_steps < 1:
        raise ValidationError("schedule needs at least one step")
    warmup = max(1, round(total_steps * warmup_frac)) if warmup_frac > 0 else 0

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        if total_steps == warmup:
            return 1.0
        progress = (step - warmup) / (total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return factor


@dataclass
class TrainResult:
    loss_curve: list  # one mean loss per completed epoch
    step_losses: list
    steps: int
    aborted: bool = False
    abort_reason: str = None


def _batch_forward(model: MaskTransformer, batch):
    """Right-pad a batch to one length and return (logits, layouts).

    Padding uses the dedicated pad embedding row and sits after each
    sample's last real token, so causal attention keeps real positions
    independent of it.
    """
    built = [
        model.build_sequence(s.text_ids, s.patches, s.mask_tokens) for s in batch
    ]
    max_len = max(emb.shape[0] for emb, _ in built)
    pad_vec = model.pad_embedding()
    rows = []
    for emb, _ in built:
        short = max_len - emb.shape[0]
        if short:
            emb = torch.cat([emb, pad_vec[None].expand(short, -1)], dim=0)
        rows.append(emb)
    logits, _ = model.forward(torch.stack(rows))
    return logits, [layout for _, layout in built]


def train(model: MaskTransformer, config: TrainConfig, samples,
          log=None) -> TrainResult:
    """Optimize the model in place; deterministic given config.seed.

    Shuffles are drawn from per-epoch substreams of the config seed. If a
    loss or activation goes non-finite the loop restores the parameters from
    the end of the last finite step and aborts, reporting where.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError("training needs a non-empty dataset")
    torch.manual_seed(config.seed)
    params = list(model.parameters())
    optimizer = torch.optim.AdamW(
        params,
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    batches_per_epoch = math.ceil(len(samples) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    schedule = torch.optim.lr_scheduler.LambdaLR(
        optimizer, warmup_cosine_lambda(total_steps, config.warmup_frac)
    )

    last_good = copy.deepcopy(model.state_dict())
    result = TrainResult(loss_curve=[], step_losses=[], steps=0)

    def abort(reason: str) -> TrainResult:
        model.load_state_dict(last_good)
        result.aborted = True
        result.abort_reason = reason
        return result

    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
        epoch_losses = []
        for b in range(batches_per_epoch):
            batch = [samples[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            try:
                logits, layouts = _batch_forward(model, batch)
                loss = batched_loss(logits, layouts, [s.mask_tokens for s in batch])
            except NonFiniteError as err:
                return abort(f"epoch {epoch} step {b}: {err}")
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                return abort(f"epoch {epoch} step {b}: non-finite loss")
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip and config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            schedule.step()
            last_good = copy.deepcopy(model.state_dict())
            result.steps += 1
            result.step_losses.append(loss_value)
            epoch_losses.append(loss_value)
        result.loss_curve.append(float(np.mean(epoch_losses)))
        if log is not None:
            log(epoch, result.loss_curve[-1])
    return result


def save_checkpoint(path, model: MaskTransformer, extra: dict = None,
                    codebook: Codebook = None) -> None:
    """Write a self-contained single-file checkpoint.

    Layout: magic, u32 header length, JSON header, then each tensor's raw
    little-endian float32 bytes at the offset its manifest entry declares.
    """
    state = model.state_dict()
    manifest = []
    blobs = []
    offset = 0
    def add_tensor(name, array):
        nonlocal offset
        arr = np.ascontiguousarray(array, dtype=np.float32)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    for name, tensor in state.items():
        add_tensor(name, tensor.detach().cpu().numpy())
    if codebook is not None:
        add_tensor("codebook", codebook.vectors)

    header = {
        "format": 1,
        "config": model.config.to_dict(),
        "vocab": {
            "n_mask_codes": model.vocab.n_mask_codes,
            "words": list(model.vocab.words),
        },
        "tensors": manifest,
        "extra": extra or {},
    }
    if codebook is not None:
        header["codebook"] = {
            "seed": codebook.seed,
            "iterations": codebook.iterations,
            "sample_count": codebook.sample_count,
        }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


@dataclass
class CheckpointBundle:
    model: MaskTransformer
    config: ModelConfig
    vocab: Vocabulary
    extra: dict
    codebook: Codebook = None


def load_checkpoint(path) -> CheckpointBundle:
    """Rebuild the model (and embedded codebook) from a checkpoint file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path} is not a model checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos : pos + header_len].decode())
    payload = data[pos + header_len :]

    config = ModelConfig(**header["config"])
    vocab = Vocabulary(header["vocab"]["n_mask_codes"], tuple(header["vocab"]["words"]))
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(
            payload, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()

    codebook = None
    if "codebook" in tensors:
        meta = header.get("codebook", {})
        codebook = Codebook(
            tensors.pop("codebook"),
            seed=meta.get("seed", 0),
            iterations=meta.get("iterations", 0),
            sample_count=meta.get("sample_count", 0),
        )

    model = MaskTransformer(config, vocab)
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return CheckpointBundle(model, config, vocab, header.get("extra", {}), codebook)


def grad_check(model: MaskTransformer, samples, n_coords: int = 200,
               h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a double-precision copy of the model so the finite differences
    are meaningful at h = 1e-5. The checked coordinates are drawn without
    replacement across all parameters.
    """
    work = copy.deepcopy(model).double()
    samples = list(samples)
    if not samples:
        raise ValidationError("grad_check needs at least one sample")

    def compute_loss():
        logits, layouts = _batch_forward(work, samples)
        return batched_loss(logits, layouts, [s.mask_tokens for s in samples])

    loss = compute_loss()
    work.zero_grad()
    loss.backward()

    named = [(name, p) for name, p in work.named_parameters()]
    sizes = np.array([p.numel() for _, p in named])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    with torch.no_grad():
        for flat in sorted(int(c) for c in chosen):
            pi = int(np.searchsorted(bounds, flat, side="right"))
            local = flat - (bounds[pi - 1] if pi else 0)
            param = named[pi][1]
            view = param.view(-1)
            analytic = float(param.grad.view(-1)[local])
            original = float(view[local])
            view[local] = original + h
            plus = float(compute_loss())
            view[local] = original - h
            minus = float(compute_loss())
            view[local] = original
            numeric = (plus - minus) / (2 * h)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
