"""End-to-end inference, task metrics, ablation modes and the K benchmark."""

from __future__ import annotations

import json
import resource
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .backbone import (assemble_contextual_features, backbone_forward,
                       detokenize)
from .canvas import embed_quadrant, slice_quadrant
from .condenser import (CondensedPrompt, CondenserParams, condense,
                        mean_pool_condense)
from .config import ConfigError, EVAL_MODES, TrainConfig
from .datagen import Dataset, luminance
from .retrieval import build_signatures, retrieve_topk
from .training import FrozenState


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean of foreground and background IoU; prediction binarized at 0.5 luma.

    A class absent from both prediction and truth scores 1 (vacuous)."""
    if pred.size == 0 or gt.size == 0:
        raise ShapeError("miou of an empty image")
    if pred.shape != gt.shape:
        raise ShapeError(f"miou shapes disagree: {pred.shape} vs {gt.shape}")
    pred_fg = luminance(pred) >= 0.5
    gt_fg = luminance(gt) >= 0.5
    ious = []
    for cls_pred, cls_gt in ((pred_fg, gt_fg), (~pred_fg, ~gt_fg)):
        union = np.logical_or(cls_pred, cls_gt).sum()
        inter = np.logical_and(cls_pred, cls_gt).sum()
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def mse_color(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean squared pixel difference over all channels, in [0,1] units."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mse shapes disagree: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(np.mean(diff * diff))


METRICS = {"seg": ("miou", miou), "det": ("miou", miou), "color": ("mse", mse_color)}


def _single_prompt_features(prompt, frozen: FrozenState):
    emb = frozen.emb
    return CondensedPrompt(image=embed_quadrant(prompt.image, emb, "tl"),
                           label=embed_quadrant(prompt.label, emb, "tr"))


def _br_probs(cp: CondensedPrompt, query_feats, frozen: FrozenState) -> np.ndarray:
    feats = assemble_contextual_features(cp, query_feats, frozen.backbone, frozen.emb)
    probs = backbone_forward(feats, frozen.backbone)
    return slice_quadrant(probs, "br").data


def predict_query_label(query_img: np.ndarray, ds: Dataset, params: CondenserParams | None,
                        frozen: FrozenState, k: int, mode: str = "condense",
                        retrieval: str = "pixel", seed: int = 0,
                        signatures: dict | None = None) -> np.ndarray:
    """Predict the query's label image from K retrieved prompts.

    Condense-family modes run one backbone pass on the fused prompt;
    output_fusion runs one pass per candidate and averages BR probabilities.
    """
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode {mode!r}")
    if k > len(ds.prompt_db):
        raise ConfigError(f"k={k} exceeds prompt db size {len(ds.prompt_db)}")
    by_id = {s.id: s for s in ds.prompt_db}
    ranked = retrieve_topk(query_img, ds.prompt_db, k, backend=retrieval,
                           seed=seed, embedding=frozen.emb, signatures=signatures)
    prompts = [by_id[cid] for cid, _ in ranked]

    with ad.no_grad():
        qf = embed_quadrant(query_img, frozen.emb, "bl")
        if mode == "output_fusion":
            acc = None
            for p in prompts:
                br = _br_probs(_single_prompt_features(p, frozen), qf, frozen)
                acc = br if acc is None else acc + br
            br_probs = acc / len(prompts)
        else:
            if mode == "mean_pool":
                cp = mean_pool_condense(prompts, frozen.emb)
            else:
                if params is None:
                    raise ConfigError(f"mode {mode!r} needs condenser parameters")
                variant = "full_ca" if mode == "full_ca" else "condense"
                cp = condense(query_img, prompts, params, frozen.emb, variant=variant)
            br_probs = _br_probs(cp, qf, frozen)
    tokens = np.argmax(br_probs, axis=-1).astype(np.int32) + 1
    return detokenize(tokens, frozen.codebook)


@dataclass
class EvalReport:
    task: str
    metric_name: str
    records: list                  # per-query dicts: id, metric, ms
    mean_metric: float
    ms_per_query: float
    peak_rss_kb: int
    config: dict = field(default_factory=dict)


def run_eval(ds: Dataset, params: CondenserParams | None, frozen: FrozenState,
             k: int, mode: str = "condense", task: str = "seg",
             retrieval: str = "pixel", seed: int = 0,
             config_echo: dict | None = None) -> EvalReport:
    """Evaluate every test query; aggregates are plain means of the records."""
    metric_name, metric_fn = METRICS[task]
    signatures = build_signatures(ds.prompt_db) if retrieval == "pixel" else None
    records = []
    for q in ds.test_queries:
        t0 = time.perf_counter()
        pred = predict_query_label(q.image, ds, params, frozen, k, mode=mode,
                                   retrieval=retrieval, seed=seed, signatures=signatures)
        ms = (time.perf_counter() - t0) * 1000.0
        records.append({"id": q.id, "metric": metric_fn(pred, q.label), "ms": ms})
    mean_metric = float(np.mean([r["metric"] for r in records]))
    ms_per_query = float(np.mean([r["ms"] for r in records]))
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return EvalReport(task=task, metric_name=metric_name, records=records,
                      mean_metric=mean_metric, ms_per_query=ms_per_query,
                      peak_rss_kb=int(peak), config=config_echo or {})


def write_report_jsonl(report: EvalReport, path: str) -> None:
    """Per-query lines, then one aggregate line carrying the config echo."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({
            "aggregate": True,
            "task": report.task,
            "metric_name": report.metric_name,
            "mean_metric": report.mean_metric,
            "ms_per_query": report.ms_per_query,
            "peak_rss_kb": report.peak_rss_kb,
            "config": report.config,
        }, sort_keys=True) + "\n")


def bench_k_scaling(ds: Dataset, params: CondenserParams, frozen: FrozenState,
                    k_list, n_queries: int = 24, warmup: int = 2,
                    retrieval: str = "pixel", seed: int = 0) -> list:
    """Median ms/query for condense vs output fusion at each K, same inputs.

    Warmup predictions run first and never enter the medians.
    """
    if len(ds.test_queries) < n_queries:
        raise ConfigError(
            f"benchmark needs >= {n_queries} test queries, have {len(ds.test_queries)}")
    queries = ds.test_queries[:n_queries]
    signatures = build_signatures(ds.prompt_db)
    rows = []
    for k in sorted(k_list):
        for q in queries[:warmup]:
            predict_query_label(q.image, ds, params, frozen, k, mode="condense",
                                retrieval=retrieval, seed=seed, signatures=signatures)
            predict_query_label(q.image, ds, params, frozen, k, mode="output_fusion",
                                retrieval=retrieval, seed=seed, signatures=signatures)
        times = {"condense": [], "output_fusion": []}
        for mode in ("condense", "output_fusion"):
            for q in queries:
                t0 = time.perf_counter()
                predict_query_label(q.image, ds, params, frozen, k, mode=mode,
                                    retrieval=retrieval, seed=seed, signatures=signatures)
                times[mode].append((time.perf_counter() - t0) * 1000.0)
        rows.append({"k": k,
                     "condense_ms": float(np.median(times["condense"])),
                     "fusion_ms": float(np.median(times["output_fusion"]))})
    return rows


def write_bench_csv(rows: list, path: str, config_echo: dict | None = None) -> None:
    """CSV with the contracted header; config echo rides as a '#' trailer."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("k,condense_ms,fusion_ms\n")
        for r in rows:
            fh.write(f"{r['k']},{r['condense_ms']:.4f},{r['fusion_ms']:.4f}\n")
        if config_echo is not None:
            fh.write("# config=" + json.dumps(config_echo, sort_keys=True) + "\n")
