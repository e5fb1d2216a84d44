"""Frozen seeded stand-ins for the inpainting backbone.

Three pieces: a patch-local nearest-centroid tokenizer (encoder role), a
small pre-norm transformer that maps embedded canvases to token
probabilities (inpainting role), and centroid pasting as the decoder role.
Parameters never receive updates outside the explicit pre-fit mode, but
gradients flow through the transformer to its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .canvas import PatchEmbedding, patchify, slice_quadrant, assemble_canvas
from .condenser import AttentionParams, CondensedPrompt, NormParams, self_attention


@dataclass
class Codebook:
    centroids: Tensor      # [N_t, P*P*3], frozen
    patch: int

    @property
    def n_tokens(self) -> int:
        return self.centroids.shape[0]


def make_codebook(seed: int, n_tokens: int, patch: int) -> Codebook:
    rng = ad.derive_rng(seed, "codebook")
    dim = patch * patch * 3
    while True:
        rows = rng.uniform(0.0, 1.0, size=(n_tokens, dim))
        if len(np.unique(rows, axis=0)) == n_tokens:
            break
    return Codebook(centroids=ad.constant(rows, dtype=np.float32), patch=patch)


def fit_codebook(samples: list, n_tokens: int, patch: int, seed: int,
                 iters: int = 12, max_patches: int = 20000) -> Codebook:
    """Seeded Lloyd k-means over dataset image and label patches.

    A uniform-random codebook reconstructs task labels so poorly that even
    perfect token prediction scores near chance, so the frozen codebook is
    fitted once to the patch distribution instead. Deterministic per
    (samples, seed); rows are kept distinct.
    """
    rng = ad.derive_rng(seed, "codebook_fit")
    pools = []
    for s in samples:
        pools.append(patchify(s.image, patch))
        pools.append(patchify(s.label, patch))
    data = np.concatenate(pools, axis=0)
    if len(data) > max_patches:
        data = data[rng.choice(len(data), size=max_patches, replace=False)]

    # unique rows as candidate seeds; top up with uniform noise if scarce
    uniq = np.unique(data, axis=0)
    if len(uniq) >= n_tokens:
        cents = uniq[rng.choice(len(uniq), size=n_tokens, replace=False)].copy()
    else:
        extra = rng.uniform(0.0, 1.0, size=(n_tokens - len(uniq), data.shape[1]))
        cents = np.concatenate([uniq, extra], axis=0)

    for _ in range(iters):
        d2 = (cents * cents).sum(axis=1)[None, :] - 2.0 * (data @ cents.T)
        assign = np.argmin(d2, axis=1)
        for j in range(n_tokens):
            members = data[assign == j]
            if len(members):
                cents[j] = members.mean(axis=0)
            else:
                cents[j] = data[rng.integers(len(data))]
    cents = np.clip(cents, 0.0, 1.0)
    # pull duplicates slightly toward mid-gray (stays in [0,1]) so
    # nearest-centroid ties cannot occur
    while len(np.unique(cents, axis=0)) < n_tokens:
        _, first = np.unique(cents, axis=0, return_index=True)
        dupes = np.setdiff1d(np.arange(n_tokens), first)
        pull = rng.uniform(1e-4, 1e-3, size=(len(dupes), cents.shape[1]))
        cents[dupes] += pull * (0.5 - cents[dupes])
    return Codebook(centroids=ad.constant(cents, dtype=np.float32), patch=patch)


def tokenize(canvas_pixels: np.ndarray, cb: Codebook) -> np.ndarray:
    """Per-patch nearest centroid, ties to the smallest index; 1-based tokens."""
    side = canvas_pixels.shape[0]
    if side % cb.patch:
        raise ShapeError(f"canvas side {side} not divisible by patch {cb.patch}")
    g = side // cb.patch
    patches = patchify(canvas_pixels, cb.patch)
    cents = cb.centroids.data.astype(np.float64)
    # argmin of |p - c|^2 = |c|^2 - 2 p.c up to the constant |p|^2 term
    dists = (cents * cents).sum(axis=1)[None, :] - 2.0 * (patches @ cents.T)
    tokens = np.argmin(dists, axis=1).astype(np.int32) + 1
    return tokens.reshape(g, g)


def detokenize(tokens: np.ndarray, cb: Codebook) -> np.ndarray:
    """Paste each token's centroid patch back into pixel space."""
    if tokens.min() < 1 or tokens.max() > cb.n_tokens:
        raise IndexError(f"token outside codebook range 1..{cb.n_tokens}")
    g = tokens.shape[0]
    p = cb.patch
    cents = cb.centroids.data.astype(np.float64)
    img = np.empty((g * p, g * p, 3))
    for r in range(g):
        for c in range(tokens.shape[1]):
            img[r * p:(r + 1) * p, c * p:(c + 1) * p] = \
                cents[tokens[r, c] - 1].reshape(p, p, 3)
    return img


@dataclass
class BackboneLayer:
    ln1: NormParams
    attn: AttentionParams
    ln2: NormParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class FrozenBackbone:
    layers: list
    final_ln: NormParams
    head: Tensor           # [D, N_t]
    mask_token: Tensor     # [D]
    dim: int
    n_tokens: int
    seed: int

    def named(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            base = f"backbone/layer{i}"
            out[f"{base}/ln1/gain"] = layer.ln1.gain
            out[f"{base}/ln1/bias"] = layer.ln1.bias
            for n in ("w_q", "w_k", "w_v", "w_o"):
                out[f"{base}/attn/{n}"] = getattr(layer.attn, n)
            out[f"{base}/ln2/gain"] = layer.ln2.gain
            out[f"{base}/ln2/bias"] = layer.ln2.bias
            out[f"{base}/mlp/w1"] = layer.w1
            out[f"{base}/mlp/b1"] = layer.b1
            out[f"{base}/mlp/w2"] = layer.w2
            out[f"{base}/mlp/b2"] = layer.b2
        out["backbone/final_ln/gain"] = self.final_ln.gain
        out["backbone/final_ln/bias"] = self.final_ln.bias
        out["backbone/head/w"] = self.head
        out["backbone/mask_token"] = self.mask_token
        return out

    def set_trainable(self, trainable: bool) -> None:
        for t in self.named().values():
            t.requires_grad = trainable
            if not trainable:
                t.grad = None


def make_backbone(seed: int, dim: int, n_tokens: int, n_layers: int = 2) -> FrozenBackbone:
    """Seeded init; parameters start frozen (pre-fit flips them on, then off)."""
    rng = ad.derive_rng(seed, "backbone")
    hidden = 2 * dim

    def mat(rows, cols):
        return ad.constant(ad.xavier_uniform(rng, rows, cols, dtype=np.float64),
                           dtype=np.float32)

    def norm():
        return NormParams(ad.constant(np.ones(dim), dtype=np.float32),
                          ad.constant(np.zeros(dim), dtype=np.float32))

    layers = []
    for _ in range(n_layers):
        layers.append(BackboneLayer(
            ln1=norm(),
            attn=AttentionParams(mat(dim, dim), mat(dim, dim), mat(dim, dim), mat(dim, dim)),
            ln2=norm(),
            w1=mat(dim, hidden),
            b1=ad.constant(np.zeros(hidden), dtype=np.float32),
            w2=mat(hidden, dim),
            b2=ad.constant(np.zeros(dim), dtype=np.float32),
        ))
    return FrozenBackbone(
        layers=layers,
        final_ln=norm(),
        head=mat(dim, n_tokens),
        mask_token=ad.constant(rng.uniform(-0.5, 0.5, size=dim), dtype=np.float32),
        dim=dim,
        n_tokens=n_tokens,
        seed=seed,
    )


def assemble_contextual_features(cp: CondensedPrompt, query_feats: Tensor,
                                 bb: FrozenBackbone, emb: PatchEmbedding) -> Tensor:
    """Feature canvas: condensed prompt at TL/TR, query at BL, mask token at BR.

    The BR quadrant is the broadcast mask-token embedding plus that
    quadrant's positional entries.
    """
    h, w, d = query_feats.shape
    if cp.image.shape != (h, w, d) or cp.label.shape != (h, w, d):
        raise ShapeError(f"condensed prompt {cp.image.shape} vs query {query_feats.shape}")
    g = emb.grid
    pos_br = ad.constant(emb.positional.data[g:, g:], dtype=np.float32)
    br = ad.add(pos_br, ad.reshape(bb.mask_token, (1, 1, d)))
    return ad.block_2x2(cp.image, cp.label, query_feats, br)


def backbone_forward(feats: Tensor, bb: FrozenBackbone) -> Tensor:
    """Transformer layers over the flattened grid, then token probabilities."""
    hf, wf, d = feats.shape
    if d != bb.dim:
        raise ShapeError(f"feature width {d} != backbone width {bb.dim}")
    x = ad.reshape(feats, (hf * wf, d))
    for layer in bb.layers:
        attended = self_attention(ad.layer_norm(x, layer.ln1.gain, layer.ln1.bias), layer.attn)
        x = ad.add(x, attended)
        normed = ad.layer_norm(x, layer.ln2.gain, layer.ln2.bias)
        hidden = ad.gelu(ad.add(ad.matmul(normed, layer.w1), layer.b1))
        x = ad.add(x, ad.add(ad.matmul(hidden, layer.w2), layer.b2))
    x = ad.layer_norm(x, bb.final_ln.gain, bb.final_ln.bias)
    probs = ad.softmax_lastdim(ad.matmul(x, bb.head))
    return ad.reshape(probs, (hf, wf, bb.n_tokens))


def build_labeled_targets(prompt, query_img: np.ndarray, query_lbl: np.ndarray,
                          cb: Codebook) -> np.ndarray:
    """BR token grid of the fully labeled canvas for one candidate prompt."""
    canvas = assemble_canvas(prompt.image, prompt.label, query_img, query_lbl)
    return slice_quadrant(tokenize(canvas, cb), "br")
