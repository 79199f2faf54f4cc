"""2D and 3D patch tokenizers feeding the shared backbone.

Every token carries provenance: a modality tag, the slice (or slab) it came
from and its index within that slice. Sequences are batched; provenance arrays
are (B, T) so masked views, whose kept tokens differ per sample, stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import ParamRegistry, trunc_normal
from .tensor import Tensor


class Modality(IntEnum):
    TWO_D = 0
    THREE_D = 1
    SLICE = 2  # 2D slice taken from a 3D volume
    CLS = 3


@dataclass(frozen=True)
class Geometry:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 16
    slab_depth: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.depth % self.slab_depth:
            raise ValueError(f"depth {self.depth} not divisible by slab depth {self.slab_depth}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens_per_slice(self) -> int:
        return self.grid * self.grid

    @property
    def num_slabs(self) -> int:
        return self.depth // self.slab_depth

    @property
    def tokens_3d(self) -> int:
        return self.num_slabs * self.tokens_per_slice


@dataclass
class TokenSequence:
    embeddings: Tensor  # (B, T, D)
    modality: np.ndarray  # (B, T) int
    slice_index: np.ndarray  # (B, T) int, -1 for [CLS]
    token_index: np.ndarray  # (B, T) int, -1 for [CLS]

    def __post_init__(self):
        shape = self.embeddings.shape[:2]
        for arr in (self.modality, self.slice_index, self.token_index):
            if arr.shape != shape:
                raise T.ShapeError(f"provenance {arr.shape} does not match embeddings {self.embeddings.shape}")

    @property
    def batch_size(self) -> int:
        return self.embeddings.shape[0]

    def __len__(self) -> int:
        return self.embeddings.shape[1]

    @property
    def has_cls(self) -> bool:
        return len(self) > 0 and bool(np.all(self.modality[:, 0] == Modality.CLS))

    @property
    def num_patches(self) -> int:
        return len(self) - int(self.has_cls)

    def provenance(self, b: int = 0) -> list[tuple[int, int, int]]:
        return list(zip(self.modality[b].tolist(), self.slice_index[b].tolist(), self.token_index[b].tolist()))


def init_tokenizer_params(geometry: Geometry, model_dim: int, rng: np.random.Generator, prefix: str = "tok.", dtype=np.float64) -> ParamRegistry:
    p2 = geometry.patch_size**2
    d = model_dim

    def param(arr):
        return Tensor(arr, requires_grad=True, dtype=dtype)

    return {
        # fan-in scaling keeps patch tokens O(1) next to the small learned tables
        prefix + "patch2d.weight": param(trunc_normal(rng, (p2, d), std=p2**-0.5)),
        prefix + "patch2d.bias": param(np.zeros(d)),
        prefix + "patch3d.weight": param(trunc_normal(rng, (p2 * geometry.slab_depth, d), std=(p2 * geometry.slab_depth) ** -0.5)),
        prefix + "patch3d.bias": param(np.zeros(d)),
        prefix + "pos2d": param(trunc_normal(rng, (geometry.tokens_per_slice, d))),
        prefix + "pos3d": param(trunc_normal(rng, (geometry.tokens_3d, d))),
        prefix + "type": param(trunc_normal(rng, (3, d))),
        prefix + "cls": param(trunc_normal(rng, (d,))),
    }


# ---------------------------------------------------------------------------
# patch extraction (pure numpy; inputs are data, not parameters)


def extract_patches_2d(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W) -> (B, (H/p)(W/p), p*p), patches in row-major grid order."""
    b, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch)


def fold_patches_2d(patches: np.ndarray, token_index: np.ndarray, height: int, width: int, patch: int) -> np.ndarray:
    """Inverse of :func:`extract_patches_2d`, placing each patch by its provenance index."""
    b = patches.shape[0]
    nw = width // patch
    out = np.zeros((b, height, width), dtype=patches.dtype)
    for bi in range(b):
        for t, j in enumerate(token_index[bi]):
            r, c = divmod(int(j), nw)
            out[bi, r * patch : (r + 1) * patch, c * patch : (c + 1) * patch] = patches[bi, t].reshape(patch, patch)
    return out


def extract_blocks_3d(volumes: np.ndarray, patch: int, slab: int) -> np.ndarray:
    """(B, S, H, W) -> (B, (S/slab)(H/p)(W/p), slab*p*p), slab-major then row-major."""
    b, s, h, w = volumes.shape
    if h % patch or w % patch or s % slab:
        raise ValueError(f"volume {s}x{h}x{w} not divisible by slab {slab} / patch {patch}")
    x = volumes.reshape(b, s // slab, slab, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, (s // slab) * (h // patch) * (w // patch), slab * patch * patch)


def fold_blocks_3d(blocks: np.ndarray, slice_index: np.ndarray, token_index: np.ndarray, shape: tuple[int, int, int], patch: int, slab: int) -> np.ndarray:
    b = blocks.shape[0]
    s, h, w = shape
    nw = w // patch
    out = np.zeros((b, s, h, w), dtype=blocks.dtype)
    for bi in range(b):
        for t, (i, j) in enumerate(zip(slice_index[bi], token_index[bi])):
            r, c = divmod(int(j), nw)
            out[bi, i * slab : (i + 1) * slab, r * patch : (r + 1) * patch, c * patch : (c + 1) * patch] = blocks[bi, t].reshape(slab, patch, patch)
    return out


# ---------------------------------------------------------------------------
# tokenizers


def _broadcast_rows(vec: Tensor, b: int, t: int) -> Tensor:
    return T.add_trailing(Tensor(np.zeros((b, t, vec.shape[-1]), dtype=vec.dtype)), vec)


def _with_cls(tokens: Tensor, modality: np.ndarray, slices: np.ndarray, index: np.ndarray, cls: Tensor) -> TokenSequence:
    b = tokens.shape[0]
    emb = T.concat([_broadcast_rows(cls, b, 1), tokens], axis=1)
    head = np.full((b, 1), -1)
    return TokenSequence(
        emb,
        np.concatenate([np.full((b, 1), int(Modality.CLS)), modality], axis=1),
        np.concatenate([head, slices], axis=1),
        np.concatenate([head, index], axis=1),
    )


def _as_batch(x: np.ndarray, ndim: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == ndim:
        x = x[None]
    if x.ndim != ndim + 1:
        raise T.ShapeError(f"expected {ndim}-D sample(s), got array of shape {x.shape}")
    return x


def _project_2d(images: np.ndarray, params: ParamRegistry, geometry: Geometry, prefix: str, modality: Modality) -> Tensor:
    w = params[prefix + "patch2d.weight"]
    patches = extract_patches_2d(images.astype(w.dtype, copy=False), geometry.patch_size)
    x = T.linear(Tensor(patches), w, params[prefix + "patch2d.bias"])
    return T.add_trailing(T.add_trailing(x, params[prefix + "pos2d"]), params[prefix + "type"][int(modality)])


def tokenize_2d(images: np.ndarray, params: ParamRegistry, geometry: Geometry, prefix: str = "tok.") -> TokenSequence:
    """[CLS] + one token per non-overlapping patch of each (H, W) image."""
    images = _as_batch(images, 2)
    if images.shape[1:] != (geometry.image_size, geometry.image_size):
        raise ValueError(f"image shape {images.shape[1:]} does not match geometry {geometry.image_size}")
    b = images.shape[0]
    n = geometry.tokens_per_slice
    x = _project_2d(images, params, geometry, prefix, Modality.TWO_D)
    return _with_cls(x, np.full((b, n), int(Modality.TWO_D)), np.zeros((b, n), int), np.tile(np.arange(n), (b, 1)), params[prefix + "cls"])


def tokenize_3d(volumes: np.ndarray, params: ParamRegistry, geometry: Geometry, prefix: str = "tok.") -> TokenSequence:
    """[CLS] + one token per patch x patch x slab block; slice index = slab index."""
    volumes = _as_batch(volumes, 3)
    g = geometry
    if volumes.shape[1:] != (g.depth, g.image_size, g.image_size):
        raise ValueError(f"volume shape {volumes.shape[1:]} does not match geometry")
    b = volumes.shape[0]
    w = params[prefix + "patch3d.weight"]
    blocks = extract_blocks_3d(volumes.astype(w.dtype, copy=False), g.patch_size, g.slab_depth)
    x = T.linear(Tensor(blocks), w, params[prefix + "patch3d.bias"])
    x = T.add_trailing(T.add_trailing(x, params[prefix + "pos3d"]), params[prefix + "type"][int(Modality.THREE_D)])
    n = g.tokens_per_slice
    slabs = np.repeat(np.arange(g.num_slabs), n)
    within = np.tile(np.arange(n), g.num_slabs)
    return _with_cls(
        x,
        np.full((b, g.tokens_3d), int(Modality.THREE_D)),
        np.tile(slabs, (b, 1)),
        np.tile(within, (b, 1)),
        params[prefix + "cls"],
    )


def tokenize_selected_slices(volumes: np.ndarray, selected, params: ParamRegistry, geometry: Geometry, prefix: str = "tok.") -> TokenSequence:
    """Tokenize chosen original slices with the 2D path; no [CLS] is added.

    ``selected`` is (B, k) original-slice indices (or a flat list for one volume).
    """
    volumes = _as_batch(volumes, 3)
    sel = np.asarray(selected, dtype=np.intp)
    if sel.ndim == 1:
        sel = sel[None]
    b, k = sel.shape
    if b != volumes.shape[0]:
        raise T.ShapeError(f"{b} selections for {volumes.shape[0]} volumes")
    depth = volumes.shape[1]
    if sel.size and (sel.min() < 0 or sel.max() >= depth):
        raise IndexError(f"slice index out of range [0, {depth})")
    for row in sel:
        if len(set(row.tolist())) != len(row):
            raise ValueError(f"duplicate slice indices in selection {row.tolist()}")
    n = geometry.tokens_per_slice
    d = params[prefix + "cls"].shape[0]
    if k == 0:
        empty = np.zeros((b, 0), int)
        return TokenSequence(Tensor(np.zeros((b, 0, d), dtype=params[prefix + "cls"].dtype)), empty, empty.copy(), empty.copy())
    slices = volumes[np.arange(b)[:, None], sel]  # (B, k, H, W)
    flat = slices.reshape(b * k, volumes.shape[2], volumes.shape[3])
    x = _project_2d(flat, params, geometry, prefix, Modality.SLICE)
    x = T.reshape(x, (b, k * n, d))
    return TokenSequence(
        x,
        np.full((b, k * n), int(Modality.SLICE)),
        np.repeat(sel, n, axis=1),
        np.tile(np.arange(n), (b, k)),
    )


def assemble_sequence(parts: Sequence[TokenSequence]) -> TokenSequence:
    """One [CLS] up front, then every part's non-[CLS] tokens in the given order."""
    if not parts:
        raise ValueError("nothing to assemble")
    if len(parts) == 1:
        return parts[0]
    d = {p.embeddings.shape[2] for p in parts}
    b = {p.batch_size for p in parts}
    if len(d) != 1 or len(b) != 1:
        raise T.ShapeError("parts disagree on batch size or model dimension")
    with_cls = [p for p in parts if p.has_cls]
    if len(with_cls) > 1:
        raise ValueError("more than one part carries a [CLS] token")
    pieces, mods, slices, idx = [], [], [], []
    if with_cls:
        c = with_cls[0]
        pieces.append(c.embeddings[:, :1])
        mods.append(c.modality[:, :1])
        slices.append(c.slice_index[:, :1])
        idx.append(c.token_index[:, :1])
    for p in parts:
        start = 1 if p.has_cls else 0
        if len(p) - start == 0:
            continue
        pieces.append(p.embeddings[:, start:] if start else p.embeddings)
        mods.append(p.modality[:, start:])
        slices.append(p.slice_index[:, start:])
        idx.append(p.token_index[:, start:])
    return TokenSequence(
        T.concat(pieces, axis=1) if len(pieces) > 1 else pieces[0],
        np.concatenate(mods, axis=1),
        np.concatenate(slices, axis=1),
        np.concatenate(idx, axis=1),
    )


def gather_tokens(seq: TokenSequence, keep: np.ndarray) -> TokenSequence:
    """Keep tokens at positions ``keep`` (B, K) per sample; dropped tokens leave the sequence."""
    keep = np.asarray(keep, dtype=np.intp)
    rows = np.arange(seq.batch_size)[:, None]
    return TokenSequence(
        seq.embeddings[rows, keep],
        seq.modality[rows, keep],
        seq.slice_index[rows, keep],
        seq.token_index[rows, keep],
    )
