"""Procedural labeled tasks: foreground segmentation, box masks, colorization.

Scenes are one colored shape over a textured background, 12 classes
(3 shape kinds x 4 color families) assigned round-robin for balance. All
pixel values are byte-quantized at generation time so the PPM round trip
is exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import derive_rng
from .config import ConfigError


class DatasetIOError(IOError):
    """A dataset file is missing, truncated or malformed; message names it."""


SHAPE_KINDS = ("rect", "ellipse", "triangle")

# Family luminances are spread apart (about 0.17 / 0.36 / 0.60 / 0.80) so a
# luminance signature separates the color axis of the class space.
COLOR_FAMILIES = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.20, 0.85, 0.25),
    "blue": (0.10, 0.10, 0.75),
    "yellow": (0.90, 0.85, 0.15),
}

CLASS_TAGS = tuple(f"{s}-{c}" for s in SHAPE_KINDS for c in COLOR_FAMILIES)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Foreground area fraction the sampler must stay inside.
_AREA_LO, _AREA_HI = 0.04, 0.60


@dataclass
class Sample:
    id: str
    image: np.ndarray       # [S, S, 3] float in [0, 1], byte-quantized
    label: np.ndarray       # [S, S, 3] same convention
    class_tag: str


@dataclass
class Dataset:
    train_queries: list = field(default_factory=list)
    prompt_db: list = field(default_factory=list)
    test_queries: list = field(default_factory=list)

    def by_id(self) -> dict:
        out = {}
        for s in self.train_queries + self.prompt_db + self.test_queries:
            out[s.id] = s
        return out


def luminance(img: np.ndarray) -> np.ndarray:
    """Plain float luma of an RGB grid (no quantization)."""
    return img @ LUMA_WEIGHTS


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Byte-quantized luma of a byte-quantized RGB grid."""
    u8 = np.round(img * 255.0)
    lum = np.round(u8 @ LUMA_WEIGHTS)
    return np.clip(lum, 0, 255) / 255.0


def _shape_mask(kind: str, side: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one shape; resample until FG area lands in bounds."""
    yy, xx = np.mgrid[0:side, 0:side]
    for _ in range(64):
        cy = side / 2 + rng.uniform(-0.09, 0.09) * side
        cx = side / 2 + rng.uniform(-0.09, 0.09) * side
        ry = rng.uniform(0.22, 0.38) * side
        rx = rng.uniform(0.22, 0.38) * side
        if kind == "rect":
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        elif kind == "ellipse":
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        elif kind == "triangle":
            # Upright isoceles triangle inscribed in the (cx, cy, rx, ry) box.
            top = cy - ry
            inside_y = (yy >= top) & (yy <= cy + ry)
            half_width = rx * (yy - top) / (2.0 * ry)
            mask = inside_y & (np.abs(xx - cx) <= half_width)
        else:
            raise ValueError(f"unknown shape kind {kind!r}")
        frac = mask.mean()
        if _AREA_LO <= frac <= _AREA_HI:
            return mask
    raise RuntimeError(f"could not sample a {kind} within area bounds")


def _sample_scene(seed: int, stream: str, index: int, side: int):
    """One deterministic scene: image (u8), FG mask, bbox, class tag.

    The background carries solid color-blob distractors from the other
    families, sized like shape interior so local texture alone cannot tell
    foreground from distractor; the demonstration prompt disambiguates.
    """
    rng = derive_rng(seed, stream, index)
    tag = CLASS_TAGS[index % len(CLASS_TAGS)]
    kind, family = tag.split("-")

    base = rng.uniform(0.42, 0.52)
    tint = rng.uniform(-0.04, 0.04, size=3)
    noise = rng.uniform(-0.07, 0.07, size=(side, side, 1))
    bg = np.clip(base + tint[None, None, :] + noise, 0.0, 1.0)

    # Distractor blobs keep their family's chroma but are rescaled to the
    # background luminance, so luminance signatures barely see them while
    # full-color views cannot tell them from shape interior.
    others = [f for f in COLOR_FAMILIES if f != family]
    n_blobs = rng.integers(5, 9)
    blob_px = max(2, side // 8)
    for _ in range(n_blobs):
        h_sp = rng.integers(blob_px, 2 * blob_px)
        w_sp = rng.integers(blob_px, 2 * blob_px)
        r = rng.integers(0, side - h_sp)
        c = rng.integers(0, side - w_sp)
        col = np.asarray(COLOR_FAMILIES[others[rng.integers(len(others))]])
        col = col * (base / max(float(col @ LUMA_WEIGHTS), 1e-6))
        jitter = rng.uniform(-0.05, 0.05, size=3)
        jitter -= (jitter @ LUMA_WEIGHTS) * LUMA_WEIGHTS / (LUMA_WEIGHTS @ LUMA_WEIGHTS)
        bg[r:r + h_sp, c:c + w_sp] = np.clip(col + jitter, 0, 1)

    fg = np.clip(np.asarray(COLOR_FAMILIES[family]) + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
    mask = _shape_mask(kind, side, rng)

    img = bg.copy()
    img[mask] = fg
    img_u8 = np.round(img * 255.0).astype(np.uint8)

    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    bbox = (rows[0], rows[-1], cols[0], cols[-1])
    return img_u8, mask, bbox, tag


def _mask_label(mask: np.ndarray) -> np.ndarray:
    return np.repeat(mask[:, :, None].astype(np.float64), 3, axis=2)


def _validate_counts(n_queries: int, n_prompts: int, side: int) -> None:
    if side < 16:
        raise ConfigError(f"side must be >= 16, got {side}")
    if n_queries < 1 or n_prompts < 1:
        raise ConfigError("query and prompt counts must be >= 1")
    if n_prompts < len(CLASS_TAGS):
        raise ConfigError(
            f"prompt db of {n_prompts} cannot cover all {len(CLASS_TAGS)} classes")


def _gen_split(seed, stream, prefix, count, side, build_sample):
    out = []
    for i in range(count):
        scene = _sample_scene(seed, stream, i, side)
        out.append(build_sample(f"{prefix}{i:05d}", scene))
    return out


def _gen_set(seed, n_queries, n_prompts, side, n_test, build_sample) -> Dataset:
    _validate_counts(n_queries, n_prompts, side)
    if n_test is None:
        n_test = max(8, n_queries // 8)
    return Dataset(
        train_queries=_gen_split(seed, "query_train", "q", n_queries, side, build_sample),
        prompt_db=_gen_split(seed, "prompt", "p", n_prompts, side, build_sample),
        test_queries=_gen_split(seed, "query_test", "t", n_test, side, build_sample),
    )


def gen_segmentation_set(seed: int, n_queries: int, n_prompts: int, side: int,
                         n_test: int | None = None) -> Dataset:
    """Foreground segmentation: label is the binary shape mask."""
    def build(sid, scene):
        img_u8, mask, _bbox, tag = scene
        return Sample(sid, img_u8 / 255.0, _mask_label(mask), tag)
    return _gen_set(seed, n_queries, n_prompts, side, n_test, build)


def gen_detection_set(seed: int, n_queries: int, n_prompts: int, side: int,
                      n_test: int | None = None) -> Dataset:
    """Single-object boxes: label is the filled bounding box of the shape."""
    def build(sid, scene):
        img_u8, _mask, bbox, tag = scene
        r0, r1, c0, c1 = bbox
        box = np.zeros(_mask.shape, dtype=bool)
        box[r0:r1 + 1, c0:c1 + 1] = True
        return Sample(sid, img_u8 / 255.0, _mask_label(box), tag)
    return _gen_set(seed, n_queries, n_prompts, side, n_test, build)


def gen_colorization_set(seed: int, n_queries: int, n_prompts: int, side: int,
                         n_test: int | None = None) -> Dataset:
    """Colorization: label is the colored scene, image its replicated luma."""
    def build(sid, scene):
        img_u8, _mask, _bbox, tag = scene
        label = img_u8 / 255.0
        gray = to_grayscale(label)
        image = np.repeat(gray[:, :, None], 3, axis=2)
        return Sample(sid, image, label, tag)
    return _gen_set(seed, n_queries, n_prompts, side, n_test, build)


GENERATORS = {
    "seg": gen_segmentation_set,
    "det": gen_detection_set,
    "color": gen_colorization_set,
}


# ---------------------------------------------------------------- on-disk I/O

_SPLIT_NAMES = {
    "train_queries": "query_train",
    "prompt_db": "prompt",
    "test_queries": "query_test",
}
_SPLIT_FIELDS = {v: k for k, v in _SPLIT_NAMES.items()}


def _write_ppm(path: str, img: np.ndarray) -> None:
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def _read_ppm(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DatasetIOError(f"cannot read image file {path}: {exc}") from exc
    try:
        if not blob.startswith(b"P6"):
            raise ValueError("not a P6 file")
        # Header is exactly three whitespace-delimited fields after the magic.
        parts = blob[2:].split(maxsplit=3)
        w, h, maxval = int(parts[0]), int(parts[1]), int(parts[2])
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval}")
        pixels = parts[3] if len(parts) > 3 else b""
    except (ValueError, IndexError) as exc:
        raise DatasetIOError(f"malformed PPM header in {path}: {exc}") from exc
    expected = w * h * 3
    if len(pixels) < expected:
        raise DatasetIOError(
            f"truncated image file {path}: expected {expected} bytes, got {len(pixels)}")
    u8 = np.frombuffer(pixels[:expected], dtype=np.uint8).reshape(h, w, 3)
    return u8 / 255.0


def save_dataset(ds: Dataset, out_dir: str) -> None:
    """Lay out images/<id>.ppm, labels/<id>.ppm and manifest.jsonl."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for field_name, split in _SPLIT_NAMES.items():
            for s in getattr(ds, field_name):
                _write_ppm(os.path.join(out_dir, "images", f"{s.id}.ppm"), s.image)
                _write_ppm(os.path.join(out_dir, "labels", f"{s.id}.ppm"), s.label)
                fh.write(json.dumps({"id": s.id, "split": split, "class": s.class_tag}) + "\n")


def load_dataset(in_dir: str) -> Dataset:
    manifest = os.path.join(in_dir, "manifest.jsonl")
    if not os.path.isfile(manifest):
        raise DatasetIOError(f"missing manifest file {manifest}")
    ds = Dataset()
    with open(manifest, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                sid, split, tag = rec["id"], rec["split"], rec["class"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetIOError(f"malformed manifest record {manifest}:{lineno}") from exc
            if split not in _SPLIT_FIELDS:
                raise DatasetIOError(f"unknown split {split!r} at {manifest}:{lineno}")
            img_path = os.path.join(in_dir, "images", f"{sid}.ppm")
            lbl_path = os.path.join(in_dir, "labels", f"{sid}.ppm")
            if not os.path.isfile(img_path):
                raise DatasetIOError(f"manifest id {sid!r} references absent file {img_path}")
            if not os.path.isfile(lbl_path):
                raise DatasetIOError(f"manifest id {sid!r} references absent file {lbl_path}")
            sample = Sample(sid, _read_ppm(img_path), _read_ppm(lbl_path), tag)
            getattr(ds, _SPLIT_FIELDS[split]).append(sample)
    return ds
