"""Token-selection strategies for autoregressive mask generation.

All strategies operate on logits restricted to the mask-token range [0, K):
the model is never allowed to emit text or separator ids mid-mask, so every
generation is decodable by construction. Greedy and beam are deterministic;
top-k, top-p and random draw from a seeded generator. Ties break toward the
lowest token id (greedy/sampling shortlists) or lexicographically smallest
token sequence (beam).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import MaskTransformer, SequenceLayout
from .validation import ValidationError

DEFAULT_BEAM_WIDTH = 3
DEFAULT_TOP_K = 3
DEFAULT_TOP_P = 0.9

STRATEGY_KINDS = ("greedy", "beam", "topk", "topp", "random")


@dataclass(frozen=True)
class Strategy:
    kind: str
    param: float = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValidationError(f"unknown decoding strategy {self.kind!r}")
        if self.kind == "beam" and (self.param is None or int(self.param) < 1):
            raise ValidationError("beam width must be a positive integer")
        if self.kind == "topk" and (self.param is None or int(self.param) < 1):
            raise ValidationError("top-k needs k >= 1")
        if self.kind == "topp" and not (self.param is not None and 0 < self.param <= 1):
            raise ValidationError("top-p needs 0 < p <= 1")

    def spec_string(self) -> str:
        if self.kind in ("greedy", "random"):
            return self.kind
        if self.kind in ("beam", "topk"):
            return f"{self.kind}:{int(self.param)}"
        return f"{self.kind}:{self.param:g}"


def parse_strategy(spec: str) -> Strategy:
    """Parse CLI strategy syntax: greedy | beam:3 | topk:3 | topp:0.9 | random."""
    spec = spec.strip().lower()
    kind, sep, arg = spec.partition(":")
    defaults = {"beam": DEFAULT_BEAM_WIDTH, "topk": DEFAULT_TOP_K, "topp": DEFAULT_TOP_P}
    if kind in ("greedy", "random"):
        if sep:
            raise ValidationError(f"{kind} takes no parameter, got {spec!r}")
        return Strategy(kind)
    if kind in defaults:
        if not sep:
            return Strategy(kind, defaults[kind])
        if not arg:
            raise ValidationError(f"bad strategy parameter in {spec!r}")
        try:
            value = int(arg) if kind in ("beam", "topk") else float(arg)
        except ValueError:
            raise ValidationError(f"bad strategy parameter in {spec!r}") from None
        return Strategy(kind, value)
    raise ValidationError(f"unknown decoding strategy {spec!r}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def _descending_order(probs: np.ndarray) -> np.ndarray:
    """Indices by decreasing probability; equal probabilities keep id order."""
    return np.argsort(-probs, kind="stable")


def _greedy_pick(logits: np.ndarray) -> int:
    return int(np.argmax(logits))


def _sample_pick(logits: np.ndarray, strategy: Strategy, rng, temperature: float) -> int:
    if temperature < 0:
        raise ValidationError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return _greedy_pick(logits)
    probs = _softmax(logits / temperature)
    order = _descending_order(probs)
    if strategy.kind == "topk":
        keep = order[: int(strategy.param)]
    elif strategy.kind == "topp":
        cum = np.cumsum(probs[order])
        cut = int(np.searchsorted(cum, strategy.param, side="left"))
        keep = order[: min(cut, len(order) - 1) + 1]
    else:  # random: the full restricted distribution
        keep = order
    weights = probs[keep]
    weights = weights / weights.sum()
    return int(rng.choice(keep, p=weights))


def _last_logits(model: MaskTransformer, embedded: torch.Tensor) -> np.ndarray:
    logits, _ = model.forward(embedded)
    k = model.vocab.n_mask_codes
    return logits[-1, :k].detach().cpu().numpy().astype(np.float64)


def _append_token(model: MaskTransformer, embedded: torch.Tensor, token: int):
    emb = model.token_embedding(torch.tensor([token], dtype=torch.long))
    return torch.cat([embedded, emb.to(embedded.dtype)], dim=0)


def _beam_search(model, prefix, n_tokens: int, width: int) -> np.ndarray:
    """Fixed-length beam search by summed log-probability, no length penalty.

    Candidate ties are broken by lexicographic token order, which makes the
    search a pure function of the logits.
    """
    beams = [((), 0.0, prefix)]
    for _ in range(n_tokens):
        candidates = []
        for tokens, score, emb in beams:
            logits = _last_logits(model, emb)
            logp = logits - logits.max()
            logp = logp - np.log(np.exp(logp).sum())
            for token in range(len(logp)):
                candidates.append((tokens + (token,), score + float(logp[token]), emb))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = [
            (tokens, score, _append_token(model, emb, tokens[-1]))
            for tokens, score, emb in candidates[:width]
        ]
    best = min(beams, key=lambda c: (-c[1], c[0]))
    return np.array(best[0], dtype=np.int64)


def generate_from_prefix(model: MaskTransformer, prefix: torch.Tensor,
                         layout: SequenceLayout, n_tokens: int,
                         strategy="greedy", seed: int = 0,
                         temperature: float = 1.0) -> np.ndarray:
    """Emit exactly ``n_tokens`` mask tokens from a prefix ending at <BOM>."""
    if isinstance(strategy, str):
        strategy = parse_strategy(strategy)
    if layout.mask_len != 0:
        raise ValidationError(
            "generation prefix must end at <BOM>; got a non-empty mask span"
        )
    if prefix.shape[0] != layout.total_len:
        raise ValidationError(
            f"prefix length {prefix.shape[0]} does not match layout {layout.total_len}"
        )
    if n_tokens < 1:
        raise ValidationError(f"n_tokens must be >= 1, got {n_tokens}")

    with torch.no_grad():
        if strategy.kind == "beam":
            return _beam_search(model, prefix, n_tokens, int(strategy.param))
        rng = np.random.default_rng(seed)
        tokens = []
        emb = prefix
        for _ in range(n_tokens):
            logits = _last_logits(model, emb)
            if strategy.kind == "greedy":
                token = _greedy_pick(logits)
            else:
                token = _sample_pick(logits, strategy, rng, temperature)
            tokens.append(token)
            emb = _append_token(model, emb, token)
    return np.array(tokens, dtype=np.int64)


def generate(model: MaskTransformer, text_ids, image_patches, n_tokens: int,
             strategy="greedy", seed: int = 0, temperature: float = 1.0) -> np.ndarray:
    """Build the [text]<BOI>[image]<BOM> prefix and decode a mask sequence."""
    with torch.no_grad():
        prefix, layout = model.build_sequence(text_ids, image_patches, [])
    return generate_from_prefix(
        model, prefix, layout, n_tokens, strategy=strategy, seed=seed,
        temperature=temperature,
    )
