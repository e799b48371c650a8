"""Causal transformer over [text] <BOI> [image] <BOM> [mask] sequences.

The decoder-only architecture uses pre-norm blocks with RMSNorm, causal
multi-head attention with rotary position embeddings applied to queries and
keys, and a SwiGLU feed-forward. Text tokens and the two
separators come from a learned embedding table; image patches enter through
a trainable adaptor (linear, GELU, linear). The head produces logits over
the full joint vocabulary, and the loss is cross-entropy on mask positions
only: the <BOM> position predicts the first mask token, each mask position
predicts its successor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .validation import MaskgenError, ValidationError
from .vocab import Vocabulary

RMS_EPS = 1e-6


class NonFiniteError(MaskgenError):
    """Forward pass produced NaN/Inf activations; ``layer`` says where."""

    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"non-finite activations after layer {layer}")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    rope_base: float = 10000.0
    seed: int = 0
    patch_dim: int = 768  # flattened 16x16 RGB patch

    def __post_init__(self):
        if self.layers < 1:
            raise ValidationError(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1:
            raise ValidationError(f"heads must be >= 1, got {self.heads}")
        if self.hidden % self.heads != 0:
            raise ValidationError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if (self.hidden // self.heads) % 2 != 0:
            raise ValidationError("head dimension must be even for rotary embeddings")
        if self.patch_dim < 1:
            raise ValidationError(f"patch_dim must be positive, got {self.patch_dim}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "rope_base": self.rope_base,
            "seed": self.seed,
            "patch_dim": self.patch_dim,
        }


@dataclass(frozen=True)
class SequenceLayout:
    """Index spans of one [text]<BOI>[image]<BOM>[mask] sequence."""

    text_span: tuple
    boi_pos: int
    image_span: tuple
    bom_pos: int
    mask_span: tuple

    def __post_init__(self):
        t0, t1 = self.text_span
        i0, i1 = self.image_span
        m0, m1 = self.mask_span
        ok = (
            t0 == 0
            and t1 >= t0
            and self.boi_pos == t1
            and i0 == self.boi_pos + 1
            and i1 >= i0
            and self.bom_pos == i1
            and m0 == self.bom_pos + 1
            and m1 >= m0
        )
        if not ok:
            raise ValidationError(f"sequence spans out of order: {self}")

    @property
    def total_len(self) -> int:
        return self.mask_span[1]

    @property
    def mask_len(self) -> int:
        return self.mask_span[1] - self.mask_span[0]

    @property
    def supervised_positions(self) -> range:
        """Positions whose next-token prediction is a mask token.

        Position bom_pos predicts mask token 1; the position of mask token t
        predicts token t+1. The final mask position predicts nothing.
        """
        return range(self.bom_pos, self.bom_pos + self.mask_len)


def make_layout(n_text: int, n_image: int, n_mask: int) -> SequenceLayout:
    boi = n_text
    bom = boi + 1 + n_image
    return SequenceLayout(
        text_span=(0, n_text),
        boi_pos=boi,
        image_span=(boi + 1, bom),
        bom_pos=bom,
        mask_span=(bom + 1, bom + 1 + n_mask),
    )


def rope_cos_sin(positions, head_dim: int, base: float, dtype=torch.float32):
    """cos/sin tables for rotary embeddings at the given absolute positions."""
    if head_dim % 2 != 0:
        raise ValidationError("rotary embeddings need an even head dimension")
    positions = torch.as_tensor(positions, dtype=torch.float64)
    exponents = torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim
    inv_freq = base ** (-exponents)
    angles = positions[..., None] * inv_freq  # (..., T, head_dim/2)
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate (even, odd) feature pairs of q/k by the positional angles.

    ``x`` has shape (..., T, head_dim); cos/sin have shape (T, head_dim/2)
    and broadcast over leading dimensions.
    """
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class RMSNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + RMS_EPS)
        return x * scale * self.weight


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.wq = nn.Linear(config.hidden, config.hidden, bias=False)
        self.wk = nn.Linear(config.hidden, config.hidden, bias=False)
        self.wv = nn.Linear(config.hidden, config.hidden, bias=False)
        self.wo = nn.Linear(config.hidden, config.hidden, bias=False)

    def forward(self, x, cos, sin, return_weights: bool = False):
        b, t, _ = x.shape
        shape = (b, t, self.heads, self.head_dim)
        q = self.wq(x).view(shape).transpose(1, 2)
        k = self.wk(x).view(shape).transpose(1, 2)
        v = self.wv(x).view(shape).transpose(1, 2)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        causal = torch.triu(
            torch.full((t, t), float("-inf"), dtype=scores.dtype), diagonal=1
        )
        weights = torch.softmax(scores + causal, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, t, -1)
        out = self.wo(out)
        return (out, weights) if return_weights else (out, None)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, inner: int):
        super().__init__()
        self.w_gate = nn.Linear(dim, inner, bias=False)
        self.w_up = nn.Linear(dim, inner, bias=False)
        self.w_down = nn.Linear(inner, dim, bias=False)

    def forward(self, x):
        return self.w_down(torch.nn.functional.silu(self.w_gate(x)) * self.w_up(x))


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(config.hidden)
        self.attn = CausalSelfAttention(config)
        self.ffn_norm = RMSNorm(config.hidden)
        self.ffn = SwiGLU(config.hidden, 4 * config.hidden)

    def forward(self, x, cos, sin, return_weights=False):
        attn_out, weights = self.attn(self.attn_norm(x), cos, sin, return_weights)
        x = x + attn_out
        x = x + self.ffn(self.ffn_norm(x))
        return x, weights


class MaskTransformer(nn.Module):
    """The full decoder: embeddings, adaptor, blocks, vocabulary head."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.config = config
        self.vocab = vocab
        # one extra embedding row is the batch-padding slot; it has no logit
        self.token_embedding = nn.Embedding(vocab.total_tokens + 1, config.hidden)
        self.patch_in = nn.Linear(config.patch_dim, config.hidden)
        self.patch_out = nn.Linear(config.hidden, config.hidden)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.final_norm = RMSNorm(config.hidden)
        self.head = nn.Linear(config.hidden, vocab.total_tokens, bias=False)
        self._init_params(config.seed)

    def _init_params(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, param in self.named_parameters():
            if param.dim() >= 2:
                with torch.no_grad():
                    param.normal_(0.0, 0.02, generator=gen)
            elif "bias" in name:
                with torch.no_grad():
                    param.zero_()
            # RMSNorm weights keep their ones init

    def adapt_patches(self, patches: torch.Tensor) -> torch.Tensor:
        """Image patch vectors → hidden states (two linear maps, GELU between)."""
        if patches.shape[-1] != self.config.patch_dim:
            raise ValidationError(
                f"patch vectors have dim {patches.shape[-1]}, "
                f"model expects {self.config.patch_dim}"
            )
        return self.patch_out(torch.nn.functional.gelu(self.patch_in(patches)))

    def build_sequence(self, text_ids, image_patches, mask_tokens):
        """Embed one sample; returns (embedded (T, hidden), SequenceLayout).

        ``mask_tokens`` may be empty (an inference prefix ending at <BOM>).
        """
        vocab = self.vocab
        text_ids = [int(t) for t in text_ids]
        for t in text_ids:
            if not vocab.text_base <= t < vocab.total_tokens:
                raise ValidationError(f"id {t} is not a text token")
        mask_tokens = [int(t) for t in mask_tokens]
        for t in mask_tokens:
            if not 0 <= t < vocab.n_mask_codes:
                raise ValidationError(
                    f"mask token {t} outside [0, {vocab.n_mask_codes})"
                )
        arr = np.asarray(image_patches, dtype=np.float32)
        if arr.size:
            arr = arr.reshape(-1, arr.shape[-1])

        def embed_ids(ids):
            return self.token_embedding(torch.tensor(ids, dtype=torch.long))

        pieces = []
        if text_ids:
            pieces.append(embed_ids(text_ids))
        pieces.append(embed_ids([vocab.boi_id]))
        n_image = 0
        if arr.size:
            patches = torch.from_numpy(arr).to(self.token_embedding.weight.dtype)
            adapted = self.adapt_patches(patches)
            n_image = adapted.shape[0]
            pieces.append(adapted)
        pieces.append(embed_ids([vocab.bom_id]))
        if mask_tokens:
            pieces.append(embed_ids(mask_tokens))
        layout = make_layout(len(text_ids), n_image, len(mask_tokens))
        return torch.cat(pieces, dim=0), layout

    def forward(self, embedded: torch.Tensor, positions=None,
                return_attention: bool = False):
        """Logits for a batch of embedded sequences.

        ``embedded`` is (T, hidden) or (B, T, hidden). Returns (logits,
        attention) where attention is a per-layer list of post-softmax
        weights (B, heads, T, T) when requested, else None.
        """
        squeeze = embedded.dim() == 2
        x = embedded[None] if squeeze else embedded
        if x.shape[1] < 1:
            raise ValidationError("forward needs at least one position")
        t = x.shape[1]
        if positions is None:
            positions = torch.arange(t)
        cos, sin = rope_cos_sin(positions, self.config.head_dim, self.config.rope_base,
                                dtype=x.dtype)
        attention = [] if return_attention else None
        for i, block in enumerate(self.blocks):
            x, weights = block(x, cos, sin, return_weights=return_attention)
            if not torch.isfinite(x).all():
                raise NonFiniteError(i)
            if return_attention:
                attention.append(weights)
        x = self.final_norm(x)
        logits = self.head(x)
        if not torch.isfinite(logits).all():
            raise NonFiniteError("head")
        if squeeze:
            logits = logits[0]
            if return_attention:
                attention = [a[0] for a in attention]
        return logits, attention

    def pad_embedding(self) -> torch.Tensor:
        return self.token_embedding.weight[self.vocab.pad_id]


def sequence_loss(logits: torch.Tensor, layout: SequenceLayout, targets) -> torch.Tensor:
    """Mean cross-entropy over the supervised (next-is-mask-token) positions.

    Positions outside {bom_pos, …, bom_pos+mask_len−1} contribute exactly
    zero — they never enter the computation.
    """
    targets = torch.as_tensor(
        np.asarray(targets, dtype=np.int64), dtype=torch.long
    ).reshape(-1)
    if targets.shape[0] != layout.mask_len:
        raise ValidationError(
            f"got {targets.shape[0]} targets for a mask span of {layout.mask_len}"
        )
    if layout.mask_len == 0:
        raise ValidationError("loss undefined for an empty mask span")
    rows = logits[layout.bom_pos : layout.bom_pos + layout.mask_len]
    return torch.nn.functional.cross_entropy(rows, targets)


def batched_loss(logits: torch.Tensor, layouts, target_lists) -> torch.Tensor:
    """Pooled cross-entropy over the supervised positions of a padded batch."""
    rows = []
    targets = []
    for b, (layout, tl) in enumerate(zip(layouts, target_lists)):
        tl = torch.as_tensor(np.asarray(tl, dtype=np.int64), dtype=torch.long)
        if tl.shape[0] != layout.mask_len:
            raise ValidationError(
                f"sample {b}: {tl.shape[0]} targets for mask span {layout.mask_len}"
            )
        rows.append(logits[b, layout.bom_pos : layout.bom_pos + layout.mask_len])
        targets.append(tl)
    return torch.nn.functional.cross_entropy(torch.cat(rows), torch.cat(targets))


def attention_matrix(model: MaskTransformer, embedded: torch.Tensor,
                     layout: SequenceLayout, layer: int = -1) -> np.ndarray:
    """Head-averaged post-softmax attention for mask-token query rows.

    Returns (mask_len, total_len) float64. ``layer`` indexes the blocks;
    negative indices count from the end (Fig-style probes use the last).
    """
    n_layers = model.config.layers
    if not -n_layers <= layer < n_layers:
        raise ValidationError(f"layer {layer} outside [0, {n_layers})")
    _, attention = model.forward(embedded, return_attention=True)
    weights = attention[layer]  # (heads, T, T) for unbatched input
    if weights.dim() == 4:
        weights = weights[0]
    averaged = weights.mean(dim=0).detach().cpu().numpy().astype(np.float64)
    m0, m1 = layout.mask_span
    return averaged[m0:m1, :]


def attention_heatmap(matrix: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Log-transform attention weights and min-max scale to uint8 [0, 255]."""
    arr = np.asarray(matrix, dtype=np.float64)
    logged = np.log(arr + eps)
    lo, hi = logged.min(), logged.max()
    if hi == lo:
        return np.zeros(arr.shape, np.uint8)
    scaled = (logged - lo) / (hi - lo) * 255.0
    return np.round(scaled).astype(np.uint8)
