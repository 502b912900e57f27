"""Exact L2 nearest-neighbour search over pre-classification embeddings."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import network as N
from .dataset import ORDINAL_CLASSES, ImageSample, binarize, preprocess

MAGIC = b"AESI"
FORMAT_VERSION = 1


@dataclass
class EmbeddingIndex:
    dim: int
    ids: list[str] = field(default_factory=list)
    embeddings: np.ndarray | None = None
    ordinals: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.embeddings is None:
            self.embeddings = np.zeros((0, self.dim))
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64).reshape(-1, self.dim)
        if len(set(self.ids)) != len(self.ids):
            dup = sorted({i for i in self.ids if self.ids.count(i) > 1})
            raise ValueError(f"duplicate ids in index: {dup}")
        if not (len(self.ids) == len(self.embeddings) == len(self.ordinals)):
            raise ValueError("ids, embeddings and labels must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def binaries(self) -> list[str]:
        return [binarize(o) for o in self.ordinals]

    def ordinal_of(self, sid: str) -> str:
        return self.ordinals[self.ids.index(sid)]


def build_index(model: N.NetworkModel, samples: list[ImageSample]) -> EmbeddingIndex:
    dim = model.config.embedding_dim
    if not samples:
        return EmbeddingIndex(dim)
    size = (model.config.height, model.config.width)
    images = np.stack([preprocess(s.pixels, size) for s in samples])
    emb = N.predict_batches(model, images)[3]
    return EmbeddingIndex(dim, [s.id for s in samples], emb, [s.ordinal_label for s in samples])


def query(index: EmbeddingIndex, q, k: int = 3) -> list[tuple[str, float]]:
    """The ``k`` nearest entries by L2 distance, ascending; ties broken by id."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != index.dim:
        raise ValueError(f"query dimension {q.size} != index dimension {index.dim}")
    if k < 1 or k > len(index):
        raise ValueError(f"k={k} outside [1, {len(index)}]")
    d = np.sqrt(np.sum((index.embeddings - q) ** 2, axis=1))
    order = np.lexsort((np.array(index.ids), d))[:k]
    return [(index.ids[i], float(d[i])) for i in order]


def _rank(ordinal: str) -> int:
    if ordinal not in ORDINAL_CLASSES:
        raise ValueError(f"missing or unknown ordinal label {ordinal!r}")
    return ORDINAL_CLASSES.index(ordinal)


def adjacency_score(index: EmbeddingIndex, queries, k: int = 3) -> float:
    """Fraction of (query, neighbour) pairs whose ordinal grades differ by at most one step.

    ``queries`` is an iterable of (embedding, ordinal label) pairs.
    """
    hits = total = 0
    for emb, ordinal in queries:
        rq = _rank(ordinal)
        for sid, _ in query(index, emb, k):
            hits += abs(rq - _rank(index.ordinal_of(sid))) <= 1
            total += 1
    if total == 0:
        raise ValueError("adjacency score needs at least one query")
    return hits / total


# ------------------------------------------------------------------------ IO

def to_bytes(index: EmbeddingIndex) -> bytes:
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, index.dim, len(index))]
    for sid, emb, o in zip(index.ids, index.embeddings, index.ordinals):
        b = sid.encode()
        parts += [struct.pack("<IB", len(b), _rank(o)), b, np.ascontiguousarray(emb, dtype="<f8").tobytes()]
    return b"".join(parts)


def from_bytes(blob: bytes) -> EmbeddingIndex:
    if blob[:4] != MAGIC:
        raise ValueError("not an aesnet embedding index (bad magic)")
    version, dim, count = struct.unpack_from("<III", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported index version {version}")
    off = 16
    ids, ords, embs = [], [], []
    for _ in range(count):
        ln, rank = struct.unpack_from("<IB", blob, off)
        off += 5
        ids.append(blob[off:off + ln].decode())
        off += ln
        embs.append(np.frombuffer(blob, dtype="<f8", count=dim, offset=off).astype(np.float64))
        off += 8 * dim
        ords.append(ORDINAL_CLASSES[rank])
    return EmbeddingIndex(dim, ids, np.array(embs).reshape(-1, dim), ords)


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(index))


def load_index(path: str | Path) -> EmbeddingIndex:
    return from_bytes(Path(path).read_bytes())


def render_grid(query_img: np.ndarray, query_label: str, neighbours: list[tuple[np.ndarray, str, float]],
                path: str | Path, heatmap: np.ndarray | None = None, scale: int = 3) -> None:
    """Query (and optional saliency overlay) beside its retrieved cases, labels underneath."""
    tiles = [(query_img, f"query: {query_label}")]
    if heatmap is not None:
        tiles.append((heatmap, "relevance"))
    tiles += [(img, f"{lab} d={dist:.3f}") for img, lab, dist in neighbours]
    h, w = query_img.shape[:2]
    th, tw, pad, text_h = h * scale, w * scale, 6, 14
    canvas = Image.new("RGB", (len(tiles) * (tw + pad) + pad, th + 2 * pad + text_h), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for n, (img, label) in enumerate(tiles):
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        tile = Image.fromarray(arr, mode="RGB").resize((tw, th), Image.NEAREST)
        x = pad + n * (tw + pad)
        canvas.paste(tile, (x, pad))
        draw.text((x, th + pad + 2), label, fill=(0, 0, 0))
    canvas.save(path)
