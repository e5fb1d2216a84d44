"""Canvas assembly, frozen patch embedding and quadrant slicing.

The input canvas is a 2x2 tile of sub-images: prompt image (TL), prompt
label (TR), query image (BL) and query label or mask fill (BR). Features
carry absolute canvas positions so a quadrant's role is visible to the
backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MASK_FILL = 0.5

QUADRANTS = ("tl", "tr", "bl", "br")


def _quadrant_offset(quadrant: str, h: int, w: int) -> tuple:
    try:
        row, col = {"tl": (0, 0), "tr": (0, w), "bl": (h, 0), "br": (h, w)}[quadrant]
    except KeyError:
        raise ValueError(f"unknown quadrant {quadrant!r}") from None
    return row, col


def assemble_canvas(prompt_img: np.ndarray, prompt_lbl: np.ndarray,
                    query_img: np.ndarray, query_lbl: np.ndarray | None = None) -> np.ndarray:
    """Tile four S x S sub-images into the 2S canvas; None BR gets the mask fill."""
    side = prompt_img.shape[0]
    quads = [prompt_img, prompt_lbl, query_img]
    if query_lbl is not None:
        quads.append(query_lbl)
    for q in quads:
        if q.shape != (side, side, 3):
            raise ShapeError(f"sub-image shape {q.shape} != ({side}, {side}, 3)")
    canvas = np.empty((2 * side, 2 * side, 3), dtype=np.float64)
    canvas[:side, :side] = prompt_img
    canvas[:side, side:] = prompt_lbl
    canvas[side:, :side] = query_img
    canvas[side:, side:] = query_lbl if query_lbl is not None else MASK_FILL
    return canvas


def slice_quadrant(grid, quadrant: str):
    """Named quadrant of a full grid; accepts pixel/token arrays and Tensors."""
    shape = grid.shape
    if shape[0] % 2 or shape[1] % 2:
        raise ShapeError(f"grid dims {shape[:2]} must be even to slice quadrants")
    h, w = shape[0] // 2, shape[1] // 2
    r, c = _quadrant_offset(quadrant, h, w)
    if isinstance(grid, Tensor):
        return ad.slice_block(grid, r, r + h, c, c + w)
    return np.ascontiguousarray(grid[r:r + h, c:c + w])


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """Rearrange [S, S, 3] pixels into [h*w, patch*patch*3] row-major patches."""
    side = img.shape[0]
    if side % patch:
        raise ShapeError(f"side {side} not divisible by patch {patch}")
    g = side // patch
    tiles = img.reshape(g, patch, g, patch, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(g * g, patch * patch * 3)


def sincos_positions(h_full: int, w_full: int, dim: int) -> np.ndarray:
    """2-D sine/cosine table over absolute grid positions, [h_full, w_full, dim]."""
    if dim % 4:
        raise ShapeError(f"positional dim {dim} must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter - 1, 1)))
    rows = np.arange(h_full)[:, None] * freqs[None, :]
    cols = np.arange(w_full)[:, None] * freqs[None, :]
    table = np.empty((h_full, w_full, dim))
    table[:, :, 0 * quarter:1 * quarter] = np.sin(rows)[:, None, :]
    table[:, :, 1 * quarter:2 * quarter] = np.cos(rows)[:, None, :]
    table[:, :, 2 * quarter:3 * quarter] = np.sin(cols)[None, :, :]
    table[:, :, 3 * quarter:4 * quarter] = np.cos(cols)[None, :, :]
    return table


@dataclass
class PatchEmbedding:
    """Frozen seeded projection plus an absolute positional table."""

    projection: Tensor      # [(P*P*3), D], requires_grad stays False
    positional: Tensor      # [2h, 2w, D]
    patch: int
    dim: int
    seed: int

    @property
    def grid(self) -> int:
        return self.positional.shape[0] // 2


def make_patch_embedding(seed: int, side: int, patch: int, dim: int) -> PatchEmbedding:
    if side % patch:
        raise ShapeError(f"side {side} not divisible by patch {patch}")
    g = side // patch
    rng = ad.derive_rng(seed, "patch_embedding")
    projection = ad.xavier_uniform(rng, patch * patch * 3, dim, dtype=np.float64)
    # Structured base plus a seeded jitter keeps positions distinguishable and
    # the table seed-dependent.
    positional = sincos_positions(2 * g, 2 * g, dim)
    positional = positional + rng.uniform(-0.05, 0.05, size=positional.shape)
    return PatchEmbedding(
        projection=ad.constant(projection, dtype=np.float32),
        positional=ad.constant(positional, dtype=np.float32),
        patch=patch,
        dim=dim,
        seed=seed,
    )


def _positional_slice(emb: PatchEmbedding, quadrant: str, dtype) -> Tensor:
    g = emb.grid
    r, c = _quadrant_offset(quadrant, g, g)
    block = emb.positional.data[r:r + g, c:c + g].reshape(g * g, emb.dim)
    return ad.constant(block, dtype=dtype)


def embed_quadrant(img: np.ndarray, emb: PatchEmbedding, quadrant: str,
                   dtype=np.float32) -> Tensor:
    """Project patches to D features and add the quadrant's positional entries."""
    patches = ad.constant(patchify(img, emb.patch), dtype=dtype)
    proj = ad.constant(emb.projection.data, dtype=dtype)
    flat = ad.add(ad.matmul(patches, proj), _positional_slice(emb, quadrant, dtype))
    g = emb.grid
    return ad.reshape(flat, (g, g, emb.dim))


def embed_quadrant_stack(imgs: list, emb: PatchEmbedding, quadrant: str,
                         dtype=np.float32) -> Tensor:
    """Embed K same-quadrant sub-images as one [K, h, w, D] tensor."""
    if not imgs:
        raise ShapeError("cannot embed an empty image stack")
    patches = np.stack([patchify(im, emb.patch) for im in imgs], axis=0)
    proj = ad.constant(emb.projection.data, dtype=dtype)
    flat = ad.add(ad.matmul(ad.constant(patches, dtype=dtype), proj),
                  _positional_slice(emb, quadrant, dtype))
    g = emb.grid
    return ad.reshape(flat, (len(imgs), g, g, emb.dim))
