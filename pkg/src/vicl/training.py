"""Objectives, SGD with a cosine schedule, the training loops, persistence.

Only condenser parameters move during condenser training; the backbone,
codebook and patch embedding stay frozen (bitwise). The optional pre-fit
mode instead trains the backbone alone on labeled single-prompt canvases,
then freezes it for good.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .backbone import (Codebook, FrozenBackbone, assemble_contextual_features,
                       backbone_forward, build_labeled_targets, fit_codebook,
                       make_backbone, make_codebook)
from .canvas import (PatchEmbedding, embed_quadrant, make_patch_embedding,
                     slice_quadrant)
from .checkpoint import (CheckpointFormatError, load_checkpoint,
                         save_checkpoint, validate_names)
from .condenser import (CondensedPrompt, CondenserParams,
                        embed_prompt_streams, full_cross_attention_condense,
                        init_condenser_params, params_from_named, pca_condense,
                        permute_prompts, self_attend_streams)
from .config import ConfigError, Profile, PROFILES, TrainConfig
from .datagen import Dataset
from .retrieval import build_signatures, retrieve_topk


def loss_token_prediction(probs_br: Tensor, targets: list) -> Tensor:
    """Mean over the K per-candidate cross-entropies against the BR quadrant."""
    if not targets:
        raise ConfigError("token prediction needs at least one target grid")
    terms = [ad.cross_entropy_tokens(probs_br, t) for t in targets]
    return ad.scale(ad.add_n(terms), 1.0 / len(terms))


def loss_pre_alignment(cp: CondensedPrompt, fq_i: Tensor, fq_l: Tensor) -> Tensor:
    """Negative sum of the two patchwise-mean cosines; in [-2, 2]."""
    total = ad.add(ad.cosine_rows(cp.image, fq_i), ad.cosine_rows(cp.label, fq_l))
    return ad.scale(total, -1.0)


def total_loss(l_tp, l_pa, lam: float):
    """l_tp + lam * l_pa, for graph tensors or plain floats alike."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if isinstance(l_tp, Tensor) or isinstance(l_pa, Tensor):
        return ad.add(l_tp, ad.scale(l_pa, lam))
    return l_tp + lam * l_pa


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr(t) = lr0 * (1 + cos(pi * t / T)) / 2."""
    if total_steps <= 0:
        raise ConfigError("total step count must be positive")
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def sgd_step(tensors, lr: float) -> None:
    """In-place descent on every trainable tensor; frozen tensors untouched."""
    for t in tensors:
        if t.requires_grad and t.grad is not None:
            t.data -= (lr * t.grad).astype(t.data.dtype)
            t.grad = None


@dataclass
class FrozenState:
    """The non-trainable bundle: patch embedding, backbone, codebook."""

    emb: PatchEmbedding
    backbone: FrozenBackbone
    codebook: Codebook
    profile: Profile

    def named(self) -> dict:
        out = dict(self.backbone.named())
        out["codebook/centroids"] = self.codebook.centroids
        out["embedding/projection"] = self.emb.projection
        out["embedding/positional"] = self.emb.positional
        return out


def make_frozen_state(seed: int, profile: Profile,
                      codebook_samples: list | None = None) -> FrozenState:
    """Seeded frozen bundle; pass samples to fit the codebook to their patches."""
    if codebook_samples:
        codebook = fit_codebook(codebook_samples, profile.n_tokens, profile.patch, seed)
    else:
        codebook = make_codebook(seed, profile.n_tokens, profile.patch)
    return FrozenState(
        emb=make_patch_embedding(seed, profile.side, profile.patch, profile.dim),
        backbone=make_backbone(seed, profile.dim, profile.n_tokens, profile.layers),
        codebook=codebook,
        profile=profile,
    )


class _QueryCache:
    """Per-query candidate sets, targets and reference features, built once."""

    def __init__(self, ds: Dataset, frozen: FrozenState, k: int, backend: str, seed: int):
        self.ds = ds
        self.frozen = frozen
        self.k = k
        self.backend = backend
        self.seed = seed
        self.by_id = {s.id: s for s in ds.prompt_db}
        self.signatures = build_signatures(ds.prompt_db) if backend == "pixel" else None
        self._candidates = {}
        self._targets = {}
        self._refs = {}
        self._streams = {}

    def candidates(self, sample) -> list:
        if sample.id not in self._candidates:
            ranked = retrieve_topk(sample.image, self.ds.prompt_db, self.k,
                                   backend=self.backend, seed=self.seed,
                                   embedding=self.frozen.emb,
                                   signatures=self.signatures)
            self._candidates[sample.id] = [self.by_id[cid] for cid, _ in ranked]
        return self._candidates[sample.id]

    def targets(self, sample, prompts) -> list:
        if sample.id not in self._targets:
            self._targets[sample.id] = [
                build_labeled_targets(p, sample.image, sample.label, self.frozen.codebook)
                for p in prompts]
        return self._targets[sample.id]

    def alignment_refs(self, sample):
        # Reference pair embedded at the prompt quadrants (TL/TR) so a perfect
        # condensed prompt can reach cosine 1 on both streams.
        if sample.id not in self._refs:
            emb = self.frozen.emb
            self._refs[sample.id] = (embed_quadrant(sample.image, emb, "tl"),
                                     embed_quadrant(sample.label, emb, "tr"))
        return self._refs[sample.id]

    def embedded_streams(self, sample):
        """Constant input tensors (query BL grid, prompt TL/TR stacks)."""
        if sample.id not in self._streams:
            emb = self.frozen.emb
            prompts = self.candidates(sample)
            self._streams[sample.id] = (
                embed_quadrant(sample.image, emb, "bl"),
                *embed_prompt_streams(prompts, emb),
            )
        return self._streams[sample.id]


def _batches(order: np.ndarray, batch: int):
    for start in range(0, len(order), batch):
        yield order[start:start + batch]


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss at {where}; aborting the run")


def query_objective(sample, params: CondenserParams, frozen: FrozenState,
                    cache: _QueryCache, cfg: TrainConfig):
    """Forward one query through condense -> backbone -> losses.

    Input embeddings are frozen constants, so the cache reuses them across
    epochs; only the condenser stages rebuild graph nodes.
    """
    prompts = cache.candidates(sample)
    fq, fc_i, fc_l = cache.embedded_streams(sample)
    fq1, fc_i1, fc_l1 = self_attend_streams(fq, fc_i, fc_l, params)
    fuse = full_cross_attention_condense if cfg.variant == "full_ca" else pca_condense
    cp = fuse(fq1, permute_prompts(fc_i1), permute_prompts(fc_l1), params)
    feats = assemble_contextual_features(cp, fq, frozen.backbone, frozen.emb)
    probs = backbone_forward(feats, frozen.backbone)
    br = slice_quadrant(probs, "br")
    l_tp = loss_token_prediction(br, cache.targets(sample, prompts))
    ref_i, ref_l = cache.alignment_refs(sample)
    l_pa = loss_pre_alignment(cp, ref_i, ref_l)
    return l_tp, l_pa


def fit(cfg: TrainConfig, ds: Dataset, frozen: FrozenState,
        params: CondenserParams | None = None):
    """Train the condenser; returns (params, metrics records)."""
    # geometry travels with the frozen artifacts; the config names the profile
    prof = frozen.profile
    if prof.name != cfg.profile:
        raise ConfigError(f"frozen state profile {prof.name!r} != config {cfg.profile!r}")
    min_class = _min_class_coverage(ds)
    if min_class < cfg.k:
        raise ConfigError(
            f"prompt db covers some class only {min_class} times; k={cfg.k} needs more")
    if params is None:
        params = init_condenser_params(cfg.seed, prof.dim)
    trainable = list(params.named().values())

    cache = _QueryCache(ds, frozen, cfg.k, cfg.retrieval, cfg.seed)
    rng = ad.derive_rng(cfg.seed, "train_loop")
    queries = ds.train_queries
    steps_per_epoch = math.ceil(len(queries) / cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch

    metrics = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(queries))
        sums = {"tp": 0.0, "pa": 0.0, "total": 0.0}
        count = 0
        lr = cosine_lr(0, total_steps, cfg.lr0)
        for batch_idx in _batches(order, cfg.batch):
            tp_terms, pa_terms = [], []
            for qi in batch_idx:
                l_tp, l_pa = query_objective(queries[qi], params, frozen, cache, cfg)
                tp_terms.append(l_tp)
                pa_terms.append(l_pa)
            batch_tp = ad.scale(ad.add_n(tp_terms), 1.0 / len(tp_terms))
            batch_pa = ad.scale(ad.add_n(pa_terms), 1.0 / len(pa_terms))
            lam = 0.0 if cfg.variant == "no_pa" else cfg.lam
            if cfg.variant == "no_tp":
                objective = ad.scale(batch_pa, lam)
            else:
                objective = total_loss(batch_tp, batch_pa, lam)
            _check_finite(float(objective.data), f"epoch {epoch} step {step}")
            objective.backward()
            lr = cosine_lr(step, total_steps, cfg.lr0)
            sgd_step(trainable, lr)
            step += 1
            sums["tp"] += float(batch_tp.data) * len(batch_idx)
            sums["pa"] += float(batch_pa.data) * len(batch_idx)
            sums["total"] += float(total_loss(batch_tp, batch_pa, lam).data) * len(batch_idx)
            count += len(batch_idx)
        metrics.append({
            "epoch": epoch,
            "loss_tp": sums["tp"] / count,
            "loss_pa": sums["pa"] / count,
            "loss_total": sums["total"] / count,
            "lr": lr,
        })
    return params, metrics


def _min_class_coverage(ds: Dataset) -> int:
    query_tags = {s.class_tag for s in ds.train_queries + ds.test_queries}
    counts = {tag: 0 for tag in query_tags}
    for s in ds.prompt_db:
        if s.class_tag in counts:
            counts[s.class_tag] += 1
    return min(counts.values()) if counts else 0


def prefit_backbone(ds: Dataset, frozen: FrozenState, epochs: int, lr0: float,
                    batch: int, seed: int):
    """Fit the backbone alone on labeled top-1-prompt canvases, then freeze.

    The condenser is bypassed: the retrieved prompt's embedded features are
    pasted directly at TL/TR. Returns per-epoch metrics records.
    """
    frozen.backbone.set_trainable(True)
    trainable = list(frozen.backbone.named().values())
    cache = _QueryCache(ds, frozen, 1, "pixel", seed)
    rng = ad.derive_rng(seed, "prefit_loop")
    queries = ds.train_queries
    steps_per_epoch = math.ceil(len(queries) / batch)
    total_steps = epochs * steps_per_epoch

    emb = frozen.emb
    metrics = []
    step = 0
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(queries))
            loss_sum, count = 0.0, 0
            lr = cosine_lr(0, total_steps, lr0)
            for batch_idx in _batches(order, batch):
                terms = []
                for qi in batch_idx:
                    q = queries[qi]
                    prompt = cache.candidates(q)[0]
                    cp = CondensedPrompt(image=embed_quadrant(prompt.image, emb, "tl"),
                                         label=embed_quadrant(prompt.label, emb, "tr"))
                    qf = embed_quadrant(q.image, emb, "bl")
                    feats = assemble_contextual_features(cp, qf, frozen.backbone, emb)
                    probs = backbone_forward(feats, frozen.backbone)
                    br = slice_quadrant(probs, "br")
                    terms.append(loss_token_prediction(br, cache.targets(q, [prompt])))
                objective = ad.scale(ad.add_n(terms), 1.0 / len(terms))
                _check_finite(float(objective.data), f"prefit epoch {epoch} step {step}")
                objective.backward()
                lr = cosine_lr(step, total_steps, lr0)
                sgd_step(trainable, lr)
                step += 1
                loss_sum += float(objective.data) * len(batch_idx)
                count += len(batch_idx)
            metrics.append({"epoch": epoch, "loss_tp": loss_sum / count,
                            "loss_pa": 0.0, "loss_total": loss_sum / count, "lr": lr})
    finally:
        frozen.backbone.set_trainable(False)
    return metrics


# ------------------------------------------------------------ persistence

def _geometry_config(prof: Profile) -> dict:
    return {"side": prof.side, "patch": prof.patch, "dim": prof.dim,
            "n_tokens": prof.n_tokens, "layers": prof.layers}


def save_run_checkpoint(path: str, params: CondenserParams, frozen: FrozenState,
                        cfg: TrainConfig, epoch: int) -> None:
    tensors = dict(params.named())
    tensors.update(frozen.named())
    config = {"kind": "run", "train": cfg.to_dict(),
              "geometry": _geometry_config(frozen.profile),
              "profile": frozen.profile.name, "embedding_seed": frozen.emb.seed}
    save_checkpoint(path, tensors, config, cfg.seed, epoch)


def save_backbone_checkpoint(path: str, frozen: FrozenState, seed: int, epoch: int) -> None:
    config = {"kind": "backbone", "geometry": _geometry_config(frozen.profile),
              "profile": frozen.profile.name, "embedding_seed": frozen.emb.seed}
    save_checkpoint(path, frozen.named(), config, seed, epoch)


def _profile_from_config(config: dict) -> Profile:
    """Resolve the profile, trusting the geometry echo over the registry."""
    geo = config["geometry"]
    name = config["profile"]
    base = PROFILES.get(name)
    keys = ("side", "patch", "dim", "n_tokens", "layers")
    if base is not None and all(getattr(base, k) == geo[k] for k in keys):
        return base
    return Profile(name=name, side=geo["side"], patch=geo["patch"], dim=geo["dim"],
                   n_tokens=geo["n_tokens"], layers=geo["layers"],
                   epochs=base.epochs if base else 30,
                   batch=base.batch if base else 8)


def _frozen_from_tensors(tensors: dict, config: dict) -> FrozenState:
    prof = _profile_from_config(config)
    template = make_frozen_state(config.get("embedding_seed", 0), prof)
    for name, t in template.named().items():
        arr = tensors[name]
        if arr.shape != t.data.shape:
            raise CheckpointFormatError(
                f"tensor {name!r} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.copy()
        t.requires_grad = False
    return template


def load_backbone_state(path: str) -> FrozenState:
    tensors, config, _seed, _epoch = load_checkpoint(path)
    if config.get("kind") != "backbone":
        raise ConfigError(f"{path} is not a backbone checkpoint")
    prof = _profile_from_config(config)
    expected = set(make_frozen_state(0, prof).named())
    validate_names(tensors, expected, path)
    return _frozen_from_tensors(tensors, config)


def load_run_state(path: str):
    """Returns (params, frozen, train config, epoch) from a run checkpoint."""
    tensors, config, _seed, epoch = load_checkpoint(path)
    if config.get("kind") != "run":
        raise ConfigError(f"{path} is not a run checkpoint")
    cfg = TrainConfig.from_dict(config["train"])
    prof = _profile_from_config(config)
    template = make_frozen_state(0, prof)
    expected = set(template.named()) | set(init_condenser_params(0, prof.dim).named())
    validate_names(tensors, expected, path)
    frozen = _frozen_from_tensors(tensors, config)
    named_params = {name: ad.parameter(tensors[name])
                    for name in init_condenser_params(0, prof.dim).named()}
    params = params_from_named(named_params, prof.dim)
    return params, frozen, cfg, epoch


def write_metrics_jsonl(path: str, records: list, config: dict) -> None:
    """One JSON object per line; a leading config record for the audit trail."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config": config}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
