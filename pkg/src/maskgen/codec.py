"""Patch-based vector-quantized codec for binary masks.

A mask is cut into non-overlapping patches, each patch mapped to a ±1-valued
vector, and every vector replaced by the index of its nearest codebook entry
(squared Euclidean distance, ties to the lowest index). Decoding looks the
vectors back up and thresholds the reassembled grid at zero. The codebook is
trained with seeded k-means++ / Lloyd iterations on patch vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .validation import ValidationError, as_binary_mask, check_divisible, check_finite

DEFAULT_PATCH_SIZE = 16
DEFAULT_CODEBOOK_SIZE = 1024

_TEXT_MAGIC = "MASKCB v1"
_BINARY_MAGIC = b"MSKCB1\x00".ljust(16, b"\x00")

# Cap pairwise-distance blocks at ~32MB of float64 scratch.
_DIST_BLOCK = 4_000_000


def patchify(mask, patch_size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Cut a mask into a (h, w, patch_size²) grid of ±1 vectors.

    Patch (i, j) holds the mask block at rows [i*p, (i+1)*p), cols
    [j*p, (j+1)*p), flattened row-major, with pixel 0 -> -1.0 and 1 -> +1.0.
    """
    m = as_binary_mask(mask)
    check_divisible(m.shape[0], m.shape[1], patch_size)
    h = m.shape[0] // patch_size
    w = m.shape[1] // patch_size
    blocks = m.reshape(h, patch_size, w, patch_size).transpose(0, 2, 1, 3)
    grid = blocks.reshape(h, w, patch_size * patch_size).astype(np.float32)
    return grid * 2.0 - 1.0


def patchify_image(image, patch_size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Cut an RGB uint8 image into a (h, w, patch_size²·3) grid in [-1, 1].

    Same tiling as :func:`patchify`; each patch is flattened row-major with
    the channel axis last and intensities rescaled by x/255*2-1.
    """
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"image must be HxWx3, got shape {arr.shape}")
    check_divisible(arr.shape[0], arr.shape[1], patch_size)
    h = arr.shape[0] // patch_size
    w = arr.shape[1] // patch_size
    blocks = arr.reshape(h, patch_size, w, patch_size, 3).transpose(0, 2, 1, 3, 4)
    grid = blocks.reshape(h, w, patch_size * patch_size * 3).astype(np.float32)
    return grid / 255.0 * 2.0 - 1.0


def unpatchify(grid: np.ndarray, patch_size: int | None = None) -> np.ndarray:
    """Reassemble a (h, w, p²) grid into the (H, W) real-valued mask image."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValidationError(f"patch grid must be (h, w, d), got shape {grid.shape}")
    if patch_size is None:
        patch_size = int(round(grid.shape[2] ** 0.5))
    if patch_size * patch_size != grid.shape[2]:
        raise ValidationError(
            f"patch dimension {grid.shape[2]} is not a square patch of size {patch_size}"
        )
    h, w, _ = grid.shape
    blocks = grid.reshape(h, w, patch_size, patch_size).transpose(0, 2, 1, 3)
    return blocks.reshape(h * patch_size, w * patch_size)


def binarize(grid: np.ndarray, patch_size: int | None = None) -> np.ndarray:
    """Threshold a decoded patch grid at zero: pixel = 1 where value >= 0."""
    image = unpatchify(grid, patch_size)
    check_finite(image, "decoded mask values")
    return (image >= 0.0).astype(np.uint8)


def flatten_tokens(tokens: np.ndarray) -> np.ndarray:
    """Row-major flatten of an (h, w) token grid to a 1D sequence."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValidationError(f"token grid must be 2D, got shape {tokens.shape}")
    return tokens.reshape(-1).copy()


def unflatten_tokens(seq, h: int, w: int) -> np.ndarray:
    """Inverse of flatten_tokens; the fragment length must equal h*w."""
    seq = np.asarray(seq)
    if seq.ndim != 1 or seq.size != h * w:
        raise ValidationError(
            f"token fragment of length {seq.size} does not fill a {h}x{w} grid"
        )
    return seq.reshape(h, w).copy()


@dataclass(frozen=True)
class Codebook:
    """K learned d_vq-dimensional vectors shared by encode and decode."""

    vectors: np.ndarray  # (K, d_vq) float32
    seed: int = 0
    iterations: int = 0
    sample_count: int = 0

    def __post_init__(self):
        vectors = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        object.__setattr__(self, "vectors", vectors)
        if vectors.ndim != 2 or vectors.shape[0] < 2:
            raise ValidationError(
                f"codebook needs at least 2 vectors in a 2D array, got shape {vectors.shape}"
            )
        check_finite(vectors, "codebook vectors")
        if np.unique(vectors, axis=0).shape[0] != vectors.shape[0]:
            raise ValidationError("codebook contains duplicate vectors")

    @property
    def n_codes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances (n, K) via the expansion trick, float64."""
    x2 = np.einsum("ij,ij->i", x, x)[:, None]
    c2 = np.einsum("ij,ij->i", centers, centers)[None, :]
    d = x2 + c2 - 2.0 * (x @ centers.T)
    np.maximum(d, 0.0, out=d)
    return d


def _nearest_codes(x: np.ndarray, centers: np.ndarray, refine: bool) -> np.ndarray:
    """Index of the nearest center per row; ties broken by lowest index.

    With `refine`, rows whose expanded distances are nearly tied are settled
    by exact per-candidate recomputation, so results match a direct linear
    scan bit-for-bit.
    """
    n = len(x)
    out = np.empty(n, dtype=np.int64)
    block = max(1, _DIST_BLOCK // max(1, len(centers)))
    for start in range(0, n, block):
        xs = x[start : start + block]
        d = _sq_dists(xs, centers)
        idx = np.argmin(d, axis=1)
        if refine:
            best = d[np.arange(len(xs)), idx]
            tol = 1e-7 * (1.0 + best)
            near_counts = (d <= (best + tol)[:, None]).sum(axis=1)
            for r in np.flatnonzero(near_counts > 1):
                cand = np.flatnonzero(d[r] <= best[r] + tol[r])
                exact = ((xs[r] - centers[cand]) ** 2).sum(axis=1)
                idx[r] = cand[np.argmin(exact)]
        out[start : start + len(xs)] = idx
    return out


def quantize(grid: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Map each patch vector to its nearest codebook index (ties -> lowest)."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValidationError(f"patch grid must be (h, w, d), got shape {grid.shape}")
    if grid.shape[2] != codebook.dim:
        raise ValidationError(
            f"patch dimension {grid.shape[2]} does not match codebook dimension {codebook.dim}"
        )
    h, w, d = grid.shape
    flat = grid.reshape(-1, d).astype(np.float64)
    centers = codebook.vectors.astype(np.float64)
    codes = _nearest_codes(flat, centers, refine=True)
    return codes.reshape(h, w)


def dequantize(tokens: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Look each token index up in the codebook, reproducing vectors exactly."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValidationError(f"token grid must be 2D, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= codebook.n_codes):
        bad = np.argwhere((tokens < 0) | (tokens >= codebook.n_codes))[0]
        raise ValidationError(
            f"token {int(tokens[tuple(bad)])} at position {tuple(int(v) for v in bad)} "
            f"is outside [0, {codebook.n_codes})"
        )
    return codebook.vectors[tokens.astype(np.int64)]


def _kmeans_pp_init(x, weights, n_codes, rng):
    """Weighted k-means++ seeding over unique points."""
    n = len(x)
    centers = np.empty((n_codes, x.shape[1]), dtype=np.float64)
    probs = weights / weights.sum()
    first = rng.choice(n, p=probs)
    centers[0] = x[first]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, n_codes):
        scores = weights * closest
        centers[j] = x[rng.choice(n, p=scores / scores.sum())]
        np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1), out=closest)
    return centers


def train_codebook(
    patch_vectors,
    n_codes: int = DEFAULT_CODEBOOK_SIZE,
    max_iters: int = 100,
    seed: int = 0,
) -> Codebook:
    """Train a codebook with seeded k-means on patch vectors.

    Duplicated training vectors are collapsed to weighted unique points, which
    leaves assignments, centroid updates, and the stopping rule unchanged.
    Empty (or duplicated) clusters are reseeded with the points farthest from
    their current centroid. Iteration stops when no assignment changes or at
    `max_iters`. Deterministic for a given seed.
    """
    x_all = np.asarray(patch_vectors, dtype=np.float64)
    if x_all.ndim != 2 or x_all.size == 0:
        raise ValidationError(f"training vectors must be a nonempty (n, d) array, got {x_all.shape}")
    check_finite(x_all, "training vectors")
    if n_codes < 2:
        raise ValidationError(f"n_codes must be at least 2, got {n_codes}")
    x, weights = np.unique(x_all, axis=0, return_counts=True)
    if len(x) < n_codes:
        raise ValidationError(
            f"need at least {n_codes} distinct vectors to train, got {len(x)} distinct of {len(x_all)}"
        )
    weights = weights.astype(np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, weights, n_codes, rng)

    assign = np.full(len(x), -1, dtype=np.int64)
    iterations = 0
    for _ in range(max_iters):
        new_assign = _nearest_codes(x, centers, refine=False)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        iterations += 1
        counts = np.bincount(assign, weights=weights, minlength=n_codes)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x * weights[:, None])
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        # Reseed empty clusters (and exact duplicates) with worst-fit points.
        needy = list(np.flatnonzero(~nonempty))
        _, first_pos = np.unique(centers, axis=0, return_index=True)
        dup = sorted(set(range(n_codes)) - set(int(i) for i in first_pos) - set(needy))
        needy.extend(dup)
        if needy:
            errs = ((x - centers[assign]) ** 2).sum(axis=1)
            for k in needy:
                worst = int(np.argmax(errs))
                centers[k] = x[worst]
                errs[worst] = -1.0

    return Codebook(
        vectors=centers.astype(np.float32),
        seed=seed,
        iterations=iterations,
        sample_count=len(x_all),
    )


def encode_mask(mask, codebook: Codebook, patch_size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    return quantize(patchify(mask, patch_size), codebook)


def decode_tokens(tokens, codebook: Codebook, patch_size: int | None = None) -> np.ndarray:
    return binarize(dequantize(tokens, codebook), patch_size)


@dataclass(frozen=True)
class ReconstructionReport:
    total_iou: float
    mahd: float
    n_masks: int


def reconstruction_report(
    masks, codebook: Codebook, patch_size: int = DEFAULT_PATCH_SIZE
) -> ReconstructionReport:
    """Round-trip a mask set through the codec and score the reconstructions.

    total_iou is the cumulative IoU over all (reconstruction, original) pairs;
    mahd is the mean resolution-normalized AHD over all pairs with no IoU
    threshold filter applied.
    """
    masks = [as_binary_mask(m) for m in masks]
    if not masks:
        raise ValidationError("reconstruction_report requires at least one mask")
    recon = [decode_tokens(encode_mask(m, codebook, patch_size), codebook, patch_size) for m in masks]
    total = metrics.c_iou(zip(recon, masks))
    ahds = [metrics.pair_ahd(r, m) for r, m in zip(recon, masks)]
    return ReconstructionReport(total_iou=total, mahd=float(np.mean(ahds)), n_masks=len(masks))


def save_codebook_text(path, codebook: Codebook) -> None:
    """Write `MASKCB v1 K d_vq seed` plus one row of decimal floats per vector."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{_TEXT_MAGIC} {codebook.n_codes} {codebook.dim} {codebook.seed}\n")
        for row in codebook.vectors:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def load_codebook_text(path) -> Codebook:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if header[:2] != _TEXT_MAGIC.split():
            raise ValidationError(f"not a {_TEXT_MAGIC} file: {path}")
        n_codes, dim, seed = int(header[2]), int(header[3]), int(header[4])
        vectors = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if vectors.shape != (n_codes, dim):
        raise ValidationError(
            f"codebook payload shape {vectors.shape} does not match header ({n_codes}, {dim})"
        )
    return Codebook(vectors=vectors.astype(np.float32), seed=seed)


def save_codebook_binary(path, codebook: Codebook) -> None:
    """16-byte magic, u32 K, u32 d_vq, then little-endian f32 vectors."""
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<II", codebook.n_codes, codebook.dim))
        fh.write(codebook.vectors.astype("<f4").tobytes())


def load_codebook_binary(path) -> Codebook:
    data = open(path, "rb").read()
    if data[:16] != _BINARY_MAGIC:
        raise ValidationError(f"not a mask-codebook binary file: {path}")
    n_codes, dim = struct.unpack_from("<II", data, 16)
    vectors = np.frombuffer(data, dtype="<f4", count=n_codes * dim, offset=24)
    return Codebook(vectors=vectors.reshape(n_codes, dim).astype(np.float32))


def load_codebook(path) -> Codebook:
    """Load either the text or the binary codebook form, sniffing the magic."""
    head = open(path, "rb").read(16)
    if head == _BINARY_MAGIC:
        return load_codebook_binary(path)
    if head.startswith(_TEXT_MAGIC.encode("ascii")):
        return load_codebook_text(path)
    raise ValidationError(f"unrecognized codebook file: {path}")


def save_tokens(path, tokens: np.ndarray) -> None:
    tokens = np.asarray(tokens)
    payload = {"h": int(tokens.shape[0]), "w": int(tokens.shape[1]),
               "tokens": [int(t) for t in tokens.reshape(-1)]}
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh)


def load_tokens(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        payload = json.load(fh)
    return unflatten_tokens(np.asarray(payload["tokens"], dtype=np.int64),
                            payload["h"], payload["w"])


class MaskTokenizer(TransformerMixin, BaseEstimator):
    """Mask <-> token-sequence codec with a k-means codebook, estimator-style.

    fit() trains the codebook on patch vectors from the training masks,
    transform() encodes masks to (n, h*w) token rows, and inverse_transform()
    decodes token rows back to binary masks.
    """

    def __init__(
        self,
        n_codes: int = DEFAULT_CODEBOOK_SIZE,
        patch_size: int = DEFAULT_PATCH_SIZE,
        max_iters: int = 100,
        seed: int = 0,
    ):
        self.n_codes = n_codes
        self.patch_size = patch_size
        self.max_iters = max_iters
        self.seed = seed

    def _validate_masks(self, X) -> list[np.ndarray]:
        masks = [as_binary_mask(m) for m in X]
        if not masks:
            raise ValidationError("expected at least one mask")
        shape = masks[0].shape
        for m in masks:
            if m.shape != shape:
                raise ValidationError(f"all masks must share dimensions, got {shape} and {m.shape}")
        check_divisible(shape[0], shape[1], self.patch_size)
        return masks

    def fit(self, X, y=None):
        masks = self._validate_masks(X)
        vectors = np.concatenate(
            [patchify(m, self.patch_size).reshape(-1, self.patch_size**2) for m in masks]
        )
        self.codebook_ = train_codebook(vectors, self.n_codes, self.max_iters, self.seed)
        self.mask_shape_ = masks[0].shape
        self.grid_shape_ = (
            self.mask_shape_[0] // self.patch_size,
            self.mask_shape_[1] // self.patch_size,
        )
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "codebook_")
        masks = self._validate_masks(X)
        return np.stack(
            [flatten_tokens(encode_mask(m, self.codebook_, self.patch_size)) for m in masks]
        )

    def inverse_transform(self, X) -> np.ndarray:
        check_is_fitted(self, "codebook_")
        h, w = self.grid_shape_
        rows = np.asarray(X)
        if rows.ndim == 1:
            rows = rows[None, :]
        out = [
            decode_tokens(unflatten_tokens(row, h, w), self.codebook_, self.patch_size)
            for row in rows
        ]
        return np.stack(out)

    def reconstruction_report(self, X) -> ReconstructionReport:
        check_is_fitted(self, "codebook_")
        return reconstruction_report(self._validate_masks(X), self.codebook_, self.patch_size)
