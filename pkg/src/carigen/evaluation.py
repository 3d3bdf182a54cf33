"""Embedding-similarity scoring for identity/style fidelity and an edge-map
pipeline for shape fidelity, with batch report generation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

EDGE_EXTRACTOR_VERSION = "sobel-otsu-v1"


@dataclass
class EvalTuple:
    identity: str
    sketch: str
    caricature: str
    style: Optional[str] = None


class ToyProjectionEmbedder:
    """Fixed random projection of downscaled grayscale pixels.

    Deterministic and fast; used for pipeline tests, not for judging quality.
    Any embedder with ``embed(array) -> vector`` and a ``name`` slots in.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((dim, 32 * 32)).astype(np.float32)
        self.name = f"toy-projection-v1:d{dim}:s{seed}"

    def embed(self, image: np.ndarray) -> np.ndarray:
        gray = _to_gray(image)
        small = Image.fromarray((gray * 255).astype(np.uint8)).resize((32, 32), Image.BILINEAR)
        flat = np.asarray(small, dtype=np.float32).reshape(-1) / 255.0
        return self._proj @ flat


def _to_gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float32)
    if arr.max() > 1.0:
        arr = arr / 255.0
    if arr.ndim == 3:
        arr = arr @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return arr


def _load_array(source) -> np.ndarray:
    if isinstance(source, np.ndarray):
        return source
    with Image.open(source) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cannot score a zero embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def embedding_score(image_a, image_b, embedder) -> float:
    """Cosine similarity of the two images' embeddings, in [-1, 1]."""
    return _cosine(embedder.embed(_load_array(image_a)), embedder.embed(_load_array(image_b)))


def _otsu_threshold(values: np.ndarray) -> float:
    hist, edges = np.histogram(values, bins=256)
    centers = (edges[:-1] + edges[1:]) / 2.0
    weight1 = np.cumsum(hist)
    weight2 = weight1[-1] - weight1
    mean1 = np.cumsum(hist * centers) / np.maximum(weight1, 1)
    total_mean = (hist * centers).sum()
    mean2 = (total_mean - np.cumsum(hist * centers)) / np.maximum(weight2, 1)
    variance = weight1[:-1] * weight2[:-1] * (mean1[:-1] - mean2[:-1]) ** 2
    return float(centers[np.argmax(variance)])


def edge_map(image) -> np.ndarray:
    """Binary edge image at the input resolution, strokes = 1.

    Sobel gradient magnitude followed by an Otsu threshold; a constant image
    maps to all zeros.
    """
    gray = _to_gray(_load_array(image) if not isinstance(image, np.ndarray) else image)
    gx = ndimage.sobel(gray, axis=1, mode="reflect")
    gy = ndimage.sobel(gray, axis=0, mode="reflect")
    magnitude = np.hypot(gx, gy)
    if magnitude.max() == 0.0:
        return np.zeros_like(gray, dtype=np.float32)
    threshold = _otsu_threshold(magnitude)
    return (magnitude > threshold).astype(np.float32)


def evaluate_suite(tuples: list[EvalTuple], embedder) -> dict:
    """Score every tuple; failures are recorded per row and the suite continues.

    Shape fidelity compares the caricature's edge map against the conditioning
    sketch in embedding space.
    """
    if not tuples:
        raise ValueError("tuple list must be nonempty")
    rows = []
    for tup in tuples:
        row = {
            "identity": tup.identity,
            "style": tup.style,
            "sketch": tup.sketch,
            "caricature": tup.caricature,
            "id_score": None,
            "style_score": None,
            "shape_score": None,
            "error": None,
        }
        try:
            row["id_score"] = embedding_score(tup.caricature, tup.identity, embedder)
            if tup.style is not None:
                row["style_score"] = embedding_score(tup.caricature, tup.style, embedder)
            edges = edge_map(tup.caricature)
            sketch = _to_gray(_load_array(tup.sketch))
            row["shape_score"] = _cosine(embedder.embed(edges), embedder.embed(sketch))
        except Exception as exc:  # noqa: BLE001 - per-row failures must not kill the suite
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    def mean_of(key):
        values = [r[key] for r in rows if r["error"] is None and r[key] is not None]
        return float(np.mean(values)) if values else None

    return {
        "embedder": embedder.name,
        "edge_extractor": EDGE_EXTRACTOR_VERSION,
        "rows": rows,
        "means": {
            "id": mean_of("id_score"),
            "style": mean_of("style_score"),
            "shape": mean_of("shape_score"),
        },
    }


def render_text_table(report: dict) -> str:
    """Aligned-column text table: one row per tuple plus the means."""
    headers = ["caricature", "ID", "Style", "Shape"]
    lines = []

    def fmt(value):
        return "-" if value is None else f"{value:.3f}"

    body = [
        [row["caricature"], fmt(row["id_score"]), fmt(row["style_score"]), fmt(row["shape_score"])]
        + (["ERROR: " + row["error"]] if row["error"] else [])
        for row in report["rows"]
    ]
    means = report["means"]
    body.append(["mean", fmt(means["id"]), fmt(means["style"]), fmt(means["shape"])])
    widths = [
        max(len(headers[i]), max(len(r[i]) for r in body)) for i in range(len(headers))
    ]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(c.ljust(widths[i]) if i < len(widths) else c for i, c in enumerate(r)))
    return "\n".join(lines)


def load_manifest(path) -> list[EvalTuple]:
    """JSON manifest: a list of objects with identity/sketch/caricature paths."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("manifest must be a JSON list")
    return [
        EvalTuple(
            identity=item["identity"],
            sketch=item["sketch"],
            caricature=item["caricature"],
            style=item.get("style"),
        )
        for item in data
    ]
