"""Breast asymmetry measures (LBC, BCE, UNR, BRA) from eight normalized keypoints.

Keypoint vector layout (image frame, x rightward, y downward, both in [0, 1])::

    0 xnl  1 ynl    left nipple
    2 xnr  3 ynr    right nipple
    4 xs   5 ys     sternal notch
    6 cll  7 clr    left / right inferior contour level (y only)

The inframammary-fold point of each side is modelled at (nipple x, contour
level). All four measures are positively 1-homogeneous and translation
invariant, and depend on the two sides only symmetrically.
"""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, _make

KEYPOINT_FIELDS = ("xnl", "ynl", "xnr", "ynr", "xs", "ys", "cll", "clr")
FEATURE_NAMES = ("lbc", "bce", "unr", "bra")
XNL, YNL, XNR, YNR, XS, YS, CLL, CLR = range(8)


@dataclass(frozen=True)
class KeypointSet:
    xnl: float
    ynl: float
    xnr: float
    ynr: float
    xs: float
    ys: float
    cll: float
    clr: float

    def __post_init__(self):
        for name, v in zip(KEYPOINT_FIELDS, astuple(self)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"keypoint {name}={v} outside [0, 1]")

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "KeypointSet":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1)
        if arr.size != 8:
            raise ValueError(f"expected 8 keypoint values, got {arr.size}")
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class AsymmetryFeatures:
    lbc: float
    bce: float
    unr: float
    bra: float

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


def _arr(k) -> np.ndarray:
    if isinstance(k, KeypointSet):
        return k.to_array()
    return np.asarray(k, dtype=np.float64)


def unr(k) -> float:
    a = _arr(k)
    return float(abs(a[YNL] - a[YNR]))


def lbc(k) -> float:
    a = _arr(k)
    return float(abs(a[CLL] - a[CLR]))


def fold_distances(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dl = np.hypot(a[..., XNL] - a[..., XS], a[..., CLL] - a[..., YS])
    dr = np.hypot(a[..., XNR] - a[..., XS], a[..., CLR] - a[..., YS])
    return dl, dr


def bce_feature(k) -> float:
    dl, dr = fold_distances(_arr(k))
    return float(abs(dl - dr))


def bra(k) -> float:
    a = _arr(k)
    dx = abs(a[XNL] - a[XS]) - abs(a[XNR] - a[XS])
    dy = abs(a[YNL] - a[YS]) - abs(a[YNR] - a[YS])
    return float(np.hypot(dx, dy))


def feature_values(k: np.ndarray) -> np.ndarray:
    """Vectorised (lbc, bce, unr, bra) for keypoint arrays of shape (..., 8)."""
    a = np.asarray(k, dtype=np.float64)
    dl, dr = fold_distances(a)
    dx = np.abs(a[..., XNL] - a[..., XS]) - np.abs(a[..., XNR] - a[..., XS])
    dy = np.abs(a[..., YNL] - a[..., YS]) - np.abs(a[..., YNR] - a[..., YS])
    return np.stack([
        np.abs(a[..., CLL] - a[..., CLR]),
        np.abs(dl - dr),
        np.abs(a[..., YNL] - a[..., YNR]),
        np.hypot(dx, dy),
    ], axis=-1)


def features(k) -> AsymmetryFeatures:
    return AsymmetryFeatures(*(float(v) for v in feature_values(_arr(k))))


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


def feature_jacobian(k: np.ndarray) -> np.ndarray:
    """Jacobian d(features)/d(keypoints), shape (..., 4, 8); subgradient 0 at kinks."""
    a = np.asarray(k, dtype=np.float64)
    jac = np.zeros(a.shape[:-1] + (4, 8))

    s = np.sign(a[..., CLL] - a[..., CLR])
    jac[..., 0, CLL] = s
    jac[..., 0, CLR] = -s

    dl, dr = fold_distances(a)
    s = np.sign(dl - dr)
    ul = _safe_div(a[..., XNL] - a[..., XS], dl)
    vl = _safe_div(a[..., CLL] - a[..., YS], dl)
    ur = _safe_div(a[..., XNR] - a[..., XS], dr)
    vr = _safe_div(a[..., CLR] - a[..., YS], dr)
    jac[..., 1, XNL] = s * ul
    jac[..., 1, CLL] = s * vl
    jac[..., 1, XNR] = -s * ur
    jac[..., 1, CLR] = -s * vr
    jac[..., 1, XS] = s * (-ul + ur)
    jac[..., 1, YS] = s * (-vl + vr)

    s = np.sign(a[..., YNL] - a[..., YNR])
    jac[..., 2, YNL] = s
    jac[..., 2, YNR] = -s

    sxl = np.sign(a[..., XNL] - a[..., XS])
    sxr = np.sign(a[..., XNR] - a[..., XS])
    syl = np.sign(a[..., YNL] - a[..., YS])
    syr = np.sign(a[..., YNR] - a[..., YS])
    dx = np.abs(a[..., XNL] - a[..., XS]) - np.abs(a[..., XNR] - a[..., XS])
    dy = np.abs(a[..., YNL] - a[..., YS]) - np.abs(a[..., YNR] - a[..., YS])
    r = np.hypot(dx, dy)
    gx = _safe_div(dx, r)
    gy = _safe_div(dy, r)
    jac[..., 3, XNL] = gx * sxl
    jac[..., 3, XNR] = -gx * sxr
    jac[..., 3, XS] = gx * (-sxl + sxr)
    jac[..., 3, YNL] = gy * syl
    jac[..., 3, YNR] = -gy * syr
    jac[..., 3, YS] = gy * (-syl + syr)
    return jac


def asymmetry_layer(keypoints: Tensor) -> Tensor:
    """Parameter-free layer mapping (..., 8) keypoints to (..., 4) features."""
    if keypoints.shape[-1] != 8:
        raise ValueError(f"asymmetry layer expects 8 keypoint values, got {keypoints.shape[-1]}")
    a = keypoints.data
    jac = feature_jacobian(a)

    def backward(g):
        keypoints._accumulate(np.einsum("...f,...fk->...k", g, jac))

    return _make(feature_values(a), (keypoints,), "asymmetry", backward)


def flip_keypoints(k: np.ndarray) -> np.ndarray:
    """Mirror horizontally (x -> 1 - x) and swap the left/right entries."""
    a = np.array(k, dtype=np.float64)
    out = a.copy()
    out[..., XNL] = 1.0 - a[..., XNR]
    out[..., YNL] = a[..., YNR]
    out[..., XNR] = 1.0 - a[..., XNL]
    out[..., YNR] = a[..., YNL]
    out[..., XS] = 1.0 - a[..., XS]
    out[..., CLL] = a[..., CLR]
    out[..., CLR] = a[..., CLL]
    return out


def translate_keypoints(k: np.ndarray, dx: float, dy: float, clamp: bool = True) -> np.ndarray:
    a = np.array(k, dtype=np.float64)
    a[..., [XNL, XNR, XS]] += dx
    a[..., [YNL, YNR, YS, CLL, CLR]] += dy
    return np.clip(a, 0.0, 1.0) if clamp else a


def write_keypoint_csv(path: str | Path, ids, keypoints: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id",) + KEYPOINT_FIELDS)
        for sid, row in zip(ids, np.asarray(keypoints)):
            w.writerow([sid] + [repr(float(v)) for v in row])


def read_keypoint_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["id"] for r in rows]
    arr = np.array([[float(r[f]) for f in KEYPOINT_FIELDS] for r in rows], dtype=np.float64)
    return ids, arr.reshape(-1, 8)
