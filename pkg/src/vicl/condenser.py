"""The trainable prompt condenser.

Per-stream self-attention (one layer for the query stream, one layer shared
between prompt images and prompt labels), permutation to patch-major layout,
then patch-wise cross-attention that fuses the K candidates into a single
prompt-sized feature pair. Both attention-score maps key off prompt IMAGE
features; only the value stream differs between the image and label heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .canvas import PatchEmbedding, embed_quadrant, embed_quadrant_stack
from .config import ConfigError


@dataclass
class AttentionParams:
    """Single-head self-attention block: query/key/value/output projections."""
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class CrossAttnParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


@dataclass
class CondenserParams:
    sa1: AttentionParams            # query stream
    sa2: AttentionParams            # prompt streams, shared image/label
    ln: tuple                       # NormParams, ln[0] is LN1 ... ln[5] is LN6
    pca_i: CrossAttnParams
    pca_l: CrossAttnParams
    dim: int

    def named(self) -> dict:
        out = {}
        for tag, blk in (("sa1", self.sa1), ("sa2", self.sa2)):
            for name in ("w_q", "w_k", "w_v", "w_o"):
                out[f"condenser/{tag}/{name}"] = getattr(blk, name)
        for i, norm in enumerate(self.ln, start=1):
            out[f"condenser/ln{i}/gain"] = norm.gain
            out[f"condenser/ln{i}/bias"] = norm.bias
        for tag, blk in (("pca_i", self.pca_i), ("pca_l", self.pca_l)):
            for name in ("w_q", "w_k", "w_v"):
                out[f"condenser/{tag}/{name}"] = getattr(blk, name)
        return out


@dataclass
class CondensedPrompt:
    image: Tensor     # [h, w, D]
    label: Tensor     # [h, w, D]


OUTPUT_INIT_SCALE = 0.05


def init_condenser_params(seed: int, dim: int, dtype=np.float32,
                          output_scale: float = OUTPUT_INIT_SCALE) -> CondenserParams:
    """Xavier-uniform weights with quiet output projections, identity norms.

    The value/output projections (SA W_o, PCA W_V) start near zero so the
    initial condensed prompt is close to blank: training then ramps the
    output paths up instead of unlearning random feature mixing, which is
    what makes the fixed SGD budget sufficient.
    """
    rng = ad.derive_rng(seed, "condenser_init")

    def mat(scale=1.0):
        w = scale * ad.xavier_uniform(rng, dim, dim, dtype=np.float64)
        return ad.parameter(w, dtype=dtype)

    def attn():
        return AttentionParams(mat(), mat(), mat(), mat(output_scale))

    def norm():
        return NormParams(ad.parameter(np.ones(dim), dtype=dtype),
                          ad.parameter(np.zeros(dim), dtype=dtype))

    return CondenserParams(sa1=attn(), sa2=attn(),
                           ln=tuple(norm() for _ in range(6)),
                           pca_i=CrossAttnParams(mat(), mat(), mat(output_scale)),
                           pca_l=CrossAttnParams(mat(), mat(), mat(output_scale)),
                           dim=dim)


def params_from_named(named: dict, dim: int) -> CondenserParams:
    """Rebuild the parameter record from checkpoint tensors."""
    def attn(tag):
        return AttentionParams(*(named[f"condenser/{tag}/{n}"]
                                 for n in ("w_q", "w_k", "w_v", "w_o")))

    def cross(tag):
        return CrossAttnParams(*(named[f"condenser/{tag}/{n}"]
                                 for n in ("w_q", "w_k", "w_v")))

    ln = tuple(NormParams(named[f"condenser/ln{i}/gain"], named[f"condenser/ln{i}/bias"])
               for i in range(1, 7))
    return CondenserParams(sa1=attn("sa1"), sa2=attn("sa2"), ln=ln,
                           pca_i=cross("pca_i"), pca_l=cross("pca_l"), dim=dim)


def _project(x: Tensor, w: Tensor) -> Tensor:
    # Row vectors times W transposed realizes W·f for every feature vector f.
    return ad.linear(x, w)


def self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Single-head scaled dot-product self-attention over [..., T, D] tokens."""
    d = x.shape[-1]
    # the 1/sqrt(D) goes on q (cheaper than scaling the T x T logit grid)
    q = ad.scale(_project(x, p.w_q), 1.0 / np.sqrt(d))
    k = _project(x, p.w_k)
    v = _project(x, p.w_v)
    scores = ad.softmax_lastdim(ad.matmul(q, ad.swap_last2(k)))
    return _project(ad.matmul(scores, v), p.w_o)


def _sa_block(x: Tensor, attn: AttentionParams, pre: NormParams, post: NormParams) -> Tensor:
    """post_norm(self_attention(pre_norm(x)) + x)."""
    inner = self_attention(ad.layer_norm(x, pre.gain, pre.bias), attn)
    return ad.layer_norm(ad.add(inner, x), post.gain, post.bias)


def self_attend_streams(fq_i: Tensor, fc_i: Tensor, fc_l: Tensor,
                        params: CondenserParams):
    """First condenser stage: one SA layer per stream, SA2 shared across prompts.

    fq_i is [h, w, D]; fc_i and fc_l are [K, h, w, D] stacks processed per
    prompt over its h*w patches.
    """
    if fc_i.ndim != 4 or fc_l.ndim != 4:
        raise ShapeError("prompt stacks must be [K, h, w, D]")
    if fc_i.shape != fc_l.shape:
        raise ShapeError(f"prompt stacks disagree: {fc_i.shape} vs {fc_l.shape}")
    k, h, w, d = fc_i.shape
    if k < 1:
        raise ConfigError("prompt stack is empty (K must be >= 1)")
    if fq_i.shape != (h, w, d):
        raise ShapeError(f"query grid {fq_i.shape} incompatible with prompts {fc_i.shape}")

    ln = params.ln
    fq_flat = ad.reshape(fq_i, (h * w, d))
    fq_out = _sa_block(fq_flat, params.sa1, ln[0], ln[3])

    fc_i_flat = ad.reshape(fc_i, (k, h * w, d))
    fc_l_flat = ad.reshape(fc_l, (k, h * w, d))
    fc_i_out = _sa_block(fc_i_flat, params.sa2, ln[1], ln[4])
    fc_l_out = _sa_block(fc_l_flat, params.sa2, ln[2], ln[5])

    return (ad.reshape(fq_out, (h, w, d)),
            ad.reshape(fc_i_out, (k, h, w, d)),
            ad.reshape(fc_l_out, (k, h, w, d)))


def permute_prompts(f: Tensor) -> Tensor:
    """[K, h, w, D] -> [h, w, K, D]; a pure axis transpose."""
    if f.ndim != 4:
        raise ShapeError(f"expected a rank-4 prompt stack, got {f.shape}")
    return ad.transpose(f, (1, 2, 0, 3))


def _cross_scores(fq_flat: Tensor, keys: Tensor, d: int) -> Tensor:
    """softmax(q·keysᵀ/sqrt(D)) per patch; one distribution over K candidates."""
    hw = fq_flat.shape[0]
    q = ad.reshape(ad.scale(fq_flat, 1.0 / np.sqrt(d)), (hw, 1, d))
    return ad.softmax_lastdim(ad.matmul(q, ad.swap_last2(keys)))   # [hw, 1, K]


def pca_condense(fq_i1: Tensor, fc_i2: Tensor, fc_l2: Tensor,
                 params: CondenserParams, return_scores: bool = False):
    """Patch-wise cross-attention: each query patch attends only to the K
    prompt patches at the same spatial position.

    Both score maps use the query features against prompt IMAGE keys; the
    value streams distinguish the image and label outputs.
    """
    h, w, d = fq_i1.shape
    if fc_i2.shape[:2] != (h, w) or fc_l2.shape[:2] != (h, w) or fc_i2.shape != fc_l2.shape:
        raise ShapeError(f"PCA shapes disagree: {fq_i1.shape} / {fc_i2.shape} / {fc_l2.shape}")
    k = fc_i2.shape[2]
    hw = h * w

    fq_flat = ad.reshape(fq_i1, (hw, d))
    fci = ad.reshape(fc_i2, (hw, k, d))
    fcl = ad.reshape(fc_l2, (hw, k, d))

    scores_i = _cross_scores(_project(fq_flat, params.pca_i.w_q),
                             _project(fci, params.pca_i.w_k), d)
    out_i = ad.matmul(scores_i, _project(fci, params.pca_i.w_v))

    scores_l = _cross_scores(_project(fq_flat, params.pca_l.w_q),
                             _project(fci, params.pca_l.w_k), d)
    out_l = ad.matmul(scores_l, _project(fcl, params.pca_l.w_v))

    cp = CondensedPrompt(image=ad.reshape(out_i, (h, w, d)),
                         label=ad.reshape(out_l, (h, w, d)))
    if return_scores:
        return cp, (ad.reshape(scores_i, (h, w, k)), ad.reshape(scores_l, (h, w, k)))
    return cp


def full_cross_attention_condense(fq_i1: Tensor, fc_i2: Tensor, fc_l2: Tensor,
                                  params: CondenserParams, return_scores: bool = False):
    """Ablation: each query patch attends to every prompt patch position,
    softmax over all K*h*w candidates. Same parameter set as pca_condense."""
    h, w, d = fq_i1.shape
    if fc_i2.shape[:2] != (h, w) or fc_i2.shape != fc_l2.shape:
        raise ShapeError(f"full-CA shapes disagree: {fq_i1.shape} / {fc_i2.shape}")
    k = fc_i2.shape[2]
    hw = h * w

    fq_flat = ad.reshape(fq_i1, (hw, d))
    fci_all = ad.reshape(fc_i2, (hw * k, d))
    fcl_all = ad.reshape(fc_l2, (hw * k, d))

    def head(w_q, w_k, w_v, values):
        q = ad.scale(_project(fq_flat, w_q), 1.0 / np.sqrt(d))
        keys = _project(fci_all, w_k)
        scores = ad.softmax_lastdim(ad.matmul(q, ad.transpose(keys)))   # [hw, hw*K]
        return scores, ad.matmul(scores, _project(values, w_v))

    scores_i, out_i = head(params.pca_i.w_q, params.pca_i.w_k, params.pca_i.w_v, fci_all)
    scores_l, out_l = head(params.pca_l.w_q, params.pca_l.w_k, params.pca_l.w_v, fcl_all)

    cp = CondensedPrompt(image=ad.reshape(out_i, (h, w, d)),
                         label=ad.reshape(out_l, (h, w, d)))
    if return_scores:
        return cp, (scores_i, scores_l)
    return cp


def embed_prompt_streams(prompts: list, emb: PatchEmbedding, dtype=np.float32):
    """Embed candidate image/label stacks at their canvas quadrants (TL/TR)."""
    imgs = embed_quadrant_stack([p.image for p in prompts], emb, "tl", dtype=dtype)
    lbls = embed_quadrant_stack([p.label for p in prompts], emb, "tr", dtype=dtype)
    return imgs, lbls


def condense(query_img: np.ndarray, prompts: list, params: CondenserParams,
             emb: PatchEmbedding, variant: str = "condense",
             dtype=np.float32, return_scores: bool = False):
    """Full condenser forward over raw pixels: embed, self-attend, permute, fuse."""
    if len(prompts) < 1:
        raise ConfigError("condense needs at least one candidate prompt")
    fq = embed_quadrant(query_img, emb, "bl", dtype=dtype)
    fc_i, fc_l = embed_prompt_streams(prompts, emb, dtype=dtype)
    fq1, fc_i1, fc_l1 = self_attend_streams(fq, fc_i, fc_l, params)
    fc_i2 = permute_prompts(fc_i1)
    fc_l2 = permute_prompts(fc_l1)
    if variant == "full_ca":
        return full_cross_attention_condense(fq1, fc_i2, fc_l2, params,
                                             return_scores=return_scores)
    return pca_condense(fq1, fc_i2, fc_l2, params, return_scores=return_scores)


def mean_pool_condense(prompts: list, emb: PatchEmbedding,
                       dtype=np.float32) -> CondensedPrompt:
    """Parameter-free baseline: arithmetic mean of embedded prompt features."""
    if len(prompts) < 1:
        raise ConfigError("mean pooling needs at least one candidate prompt")
    fc_i, fc_l = embed_prompt_streams(prompts, emb, dtype=dtype)
    return CondensedPrompt(image=ad.mean_axis0(fc_i), label=ad.mean_axis0(fc_l))
