"""Candidate-prompt retrieval: pixel signatures, pooled features, random."""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import DomainError, derive_rng
from .canvas import PatchEmbedding, patchify
from .config import ConfigError
from .datagen import DatasetIOError, luminance

SIGNATURE_GRID = 16
_CACHE_MAGIC = b"SIGC1"


def _bilinear_resize(a: np.ndarray, g: int) -> np.ndarray:
    """Separable bilinear resample of a square grid to g x g (pixel centers)."""
    s = a.shape[0]
    if s == g:
        return a.copy()
    coords = (np.arange(g) + 0.5) * s / g - 0.5
    lo = np.clip(np.floor(coords).astype(int), 0, s - 1)
    hi = np.clip(lo + 1, 0, s - 1)
    frac = np.clip(coords - lo, 0.0, 1.0)
    rows = a[lo, :] * (1 - frac)[:, None] + a[hi, :] * frac[:, None]
    return rows[:, lo] * (1 - frac)[None, :] + rows[:, hi] * frac[None, :]


def signature(img: np.ndarray, grid: int = SIGNATURE_GRID) -> np.ndarray:
    """Unit-norm downsampled luminance; the pixel-level similarity key."""
    if img.size == 0:
        raise DomainError("signature of an empty image")
    small = _bilinear_resize(luminance(img), grid).reshape(-1)
    norm = np.linalg.norm(small)
    if norm == 0.0:
        raise DomainError("signature of an all-black image has zero norm")
    return small / norm


def pooled_feature(img: np.ndarray, emb: PatchEmbedding) -> np.ndarray:
    """Mean projected-patch feature (positions excluded: content only)."""
    feats = patchify(img, emb.patch) @ emb.projection.data.astype(np.float64)
    return feats.mean(axis=0)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine of a zero-norm vector")
    return float(a @ b / (na * nb))


def retrieve_topk(query_img: np.ndarray, prompt_db: list, k: int,
                  backend: str = "pixel", seed: int = 0,
                  embedding: PatchEmbedding | None = None,
                  signatures: dict | None = None) -> list:
    """Top-K prompts as (id, score) sorted by descending score, ties by id.

    The full db is ranked and truncated, so retrieve(K) is a prefix of
    retrieve(K') for K < K'.
    """
    if k > len(prompt_db):
        raise ConfigError(f"k={k} exceeds prompt db size {len(prompt_db)}")
    if backend == "pixel":
        q = signature(query_img)
        if signatures is None:
            scored = [(s.id, float(q @ signature(s.image))) for s in prompt_db]
        else:
            scored = [(s.id, float(q @ signatures[s.id])) for s in prompt_db]
    elif backend == "feature":
        if embedding is None:
            raise ConfigError("feature backend needs a patch embedding")
        q = pooled_feature(query_img, embedding)
        scored = [(s.id, _cosine(q, pooled_feature(s.image, embedding))) for s in prompt_db]
    elif backend == "random":
        rng = derive_rng(seed, "retrieval_random")
        order = rng.permutation(len(prompt_db))
        n = len(prompt_db)
        scored = [(prompt_db[j].id, (n - rank) / n) for rank, j in enumerate(order)]
    else:
        raise ConfigError(f"unknown retrieval backend {backend!r}")
    scored.sort(key=lambda e: (-e[1], e[0]))
    return scored[:k]


def build_signatures(prompt_db: list) -> dict:
    return {s.id: signature(s.image) for s in prompt_db}


def save_signature_cache(path: str, signatures: dict) -> None:
    """Binary sidecar: magic, u32 count, then (u32 id-len, id, u32 dim, f32 vec)."""
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<I", len(signatures)))
        for sid, vec in signatures.items():
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            v = np.asarray(vec, dtype="<f4")
            fh.write(struct.pack("<I", v.size))
            fh.write(v.tobytes())


def load_signature_cache(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DatasetIOError(f"cannot read signature cache {path}: {exc}") from exc
    if blob[:5] != _CACHE_MAGIC:
        raise DatasetIOError(f"bad signature cache magic in {path}")
    off = 5

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise DatasetIOError(f"truncated signature cache {path} while reading {what}")
        piece = blob[off:off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4, "count"))
    out = {}
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4, "id length"))
        sid = take(id_len, "id").decode("utf-8")
        (dim,) = struct.unpack("<I", take(4, "dim"))
        vec = np.frombuffer(take(4 * dim, "vector"), dtype="<f4").astype(np.float64)
        out[sid] = vec
    return out
