"""Layer-wise relevance propagation (epsilon rule) from the classifier logit to input pixels."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import network as N
from . import tensor as T
from .asymmetry import feature_jacobian
from .tensor import Tensor


@dataclass
class RelevanceMap:
    relevance: np.ndarray  # (H, W), channel-summed
    score: float  # pre-sigmoid logit the relevance started from
    eps: float

    @property
    def total(self) -> float:
        return float(self.relevance.sum())


def _stab(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def _lrp_linear(layer: N.Layer, model: N.NetworkModel, a: np.ndarray, z: np.ndarray,
                relevance: np.ndarray, eps: float) -> np.ndarray:
    """R_in = a * (W^T (R / (z + eps sign z))) via the autodiff backward of the layer."""
    s = relevance / _stab(z, eps)
    x = Tensor(a, requires_grad=True)
    w = model.params[layer.name + ".w"]
    b = model.params[layer.name + ".b"]
    wt, bt = Tensor(w.data), Tensor(b.data)
    if layer.kind == "conv":
        out = T.conv2d(x, wt, bt, 1, layer.padding)
    else:
        out = T.dense(x, wt, bt)
    out.backward(s)
    return a * x.grad


def _lrp_pool(a: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    b, c, h, w = a.shape
    arg = T.maxpool_argmax(a)
    rb = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(rb, arg[..., None], relevance[..., None], axis=-1)
    return rb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def lrp(model: N.NetworkModel, image: np.ndarray, eps: float = 1e-6) -> RelevanceMap:
    """Relevance of each input pixel for the classifier logit of one preprocessed CHW image."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"lrp expects one CHW image, got shape {x.shape}")
    frozen = dict(model.frozen)
    for g in N.GROUPS:
        model.frozen[g] = True
    record: list[Tensor] = []
    try:
        N.forward(model, x, record)
    finally:
        model.frozen.update(frozen)
    layers = model.layers
    acts = [x[None]] + [t.data for t in record]  # acts[i] is the input to layers[i]

    for i, layer in enumerate(layers):
        if layer.kind in ("flatten",) or (layer.group == "keypoint_head" and layer.kind == "relu"):
            if not np.any(acts[i + 1]):
                raise ValueError(f"degenerate model: all activations after layer {i} ({layer.kind}) are zero")

    # skip the output sigmoid; relevance starts at the logit
    relevance = acts[-2].copy()
    score = float(relevance.reshape(-1)[0])
    for i in range(len(layers) - 2, -1, -1):
        layer, a, z = layers[i], acts[i], acts[i + 1]
        if layer.kind in ("dense", "conv"):
            relevance = _lrp_linear(layer, model, a, z, relevance, eps)
        elif layer.kind == "relu":
            pass
        elif layer.kind == "pool":
            relevance = _lrp_pool(a, relevance)
        elif layer.kind == "flatten":
            relevance = relevance.reshape(a.shape)
        elif layer.kind == "asymmetry":
            # gradient x input; the features are 1-homogeneous so contributions sum to f
            jac = feature_jacobian(a)
            contrib = jac * a[:, None, :]
            relevance = np.einsum("bf,bfk->bk", relevance / _stab(z, eps), contrib)
        elif layer.kind == "clamp":
            relevance = relevance * ((a >= 0.0) & (a <= 1.0))
        else:
            raise ValueError(f"no relevance rule for layer kind {layer.kind!r}")
    rel = relevance[0].sum(axis=0)
    if not np.all(np.isfinite(rel)):
        raise ValueError("relevance map is not finite")
    return RelevanceMap(rel, score, eps)


def heat_colors(relevance: np.ndarray) -> np.ndarray:
    """Blue-white-red colouring symmetric about zero, scaled by max |relevance|."""
    m = np.max(np.abs(relevance)) if relevance.size else 0.0
    v = relevance / m if m > 0 else np.zeros_like(relevance)
    rgb = np.empty(v.shape + (3,))
    rgb[..., 0] = np.where(v >= 0, 1.0, 1.0 + v)
    rgb[..., 1] = 1.0 - np.abs(v)
    rgb[..., 2] = np.where(v <= 0, 1.0, 1.0 - v)
    return rgb


def overlay(rmap: RelevanceMap, pixels: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Heat colours blended over the greyscale image; HxWx3 in [0, 1]."""
    h, w = rmap.relevance.shape
    gray = np.asarray(pixels, dtype=np.float64)
    if gray.shape[:2] != (h, w):
        from .dataset import resize_bilinear
        gray = resize_bilinear(gray, h, w)
    gray = gray.mean(axis=2, keepdims=True)
    return np.clip(alpha * heat_colors(rmap.relevance) + (1 - alpha) * gray, 0.0, 1.0)


def render_heatmap(rmap: RelevanceMap, pixels: np.ndarray, path: str | Path, scale: int = 1) -> Path:
    arr = np.round(overlay(rmap, pixels) * 255).astype(np.uint8)
    img = Image.fromarray(arr, mode="RGB")
    if scale != 1:
        img = img.resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
    path = Path(path)
    img.save(path)
    return path


def dump_relevance(rmap: RelevanceMap, path: str | Path) -> None:
    """Row-major relevance values, one per line."""
    Path(path).write_text("".join(f"{v!r}\n" for v in rmap.relevance.reshape(-1).tolist()))


def positive_mass_fraction(rmap: RelevanceMap, mask: np.ndarray) -> float:
    """Share of positive relevance that falls inside ``mask``."""
    pos = np.clip(rmap.relevance, 0, None)
    tot = pos.sum()
    return float(pos[mask].sum() / tot) if tot > 0 else 0.0
