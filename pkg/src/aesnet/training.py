"""Two-stage training: keypoint regression first, then keypoints + weighted classification."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import IO

import numpy as np
from scipy import ndimage

from . import network as N
from . import tensor as T
from .asymmetry import flip_keypoints, translate_keypoints
from .dataset import ImageSample, preprocess

log = logging.getLogger(__name__)

RECORD_FIELDS = ("stage", "epoch", "loss_kp", "loss_clf", "val_mse", "val_acc", "val_bacc")


@dataclass
class TrainConfig:
    stage1_epochs: int = 350
    stage2_epochs: int = 250
    batch_size: int = 16
    lambda_k: float = 1.0
    lambda_c: float = 1.0
    flip_prob: float = 0.5
    translate: float = 0.05
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("epoch counts must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.lambda_k < 0 or self.lambda_c < 0 or self.lambda_k + self.lambda_c == 0:
            raise ValueError("loss weights must be nonnegative and not both zero")


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    loss_kp: float
    loss_clf: float
    val_mse: float
    val_acc: float
    val_bacc: float

    def line(self) -> str:
        return ",".join([str(self.stage), str(self.epoch)] +
                        [repr(float(getattr(self, f))) for f in RECORD_FIELDS[2:]])


@dataclass
class Arrays:
    """Preprocessed stack ready for training."""

    images: np.ndarray  # (N, 3, H, W)
    keypoints: np.ndarray  # (N, 8)
    targets: np.ndarray  # (N,) in {0, 1}
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def prepare(samples: list[ImageSample], size: tuple[int, int]) -> Arrays:
    h, w = size
    images = np.stack([preprocess(s.pixels, size) for s in samples]) if samples else np.zeros((0, 3, h, w))
    return Arrays(images, np.array([s.keypoints for s in samples]).reshape(-1, 8),
                  np.array([s.target for s in samples], dtype=np.float64), [s.id for s in samples])


# ------------------------------------------------------------------- metrics

def accuracy(preds, labels) -> float:
    """Fraction correct; probabilities are thresholded at 0.5."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean((p >= 0.5).astype(int) == y))


def balanced_accuracy(preds, labels) -> float:
    """Mean per-class recall over the two classes."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    hat = (p >= 0.5).astype(int)
    recalls = []
    for c in (0, 1):
        mask = y == c
        if not mask.any():
            raise ValueError(f"balanced accuracy undefined: class {c} absent from labels")
        recalls.append(np.mean(hat[mask] == c))
    return float(np.mean(recalls))


def class_weights(labels) -> dict[int, float]:
    """Inverse-frequency weights ``N / (2 N_c)``."""
    y = np.asarray(labels).astype(int)
    n = y.size
    out = {}
    for c in (0, 1):
        nc = int(np.sum(y == c))
        if nc == 0:
            raise ValueError(f"class {c} has no training samples")
        out[c] = n / (2.0 * nc)
    return out


# -------------------------------------------------------------- augmentation

def augment_arrays(image: np.ndarray, keypoints: np.ndarray, rng: np.random.Generator,
                   flip_prob: float = 0.5, translate: float = 0.05):
    """Random horizontal flip and sub-pixel translation of a CHW image and its keypoints.

    Works on raw or standardized images: both transforms are per-channel
    convex combinations of pixels, so they commute with standardization.
    """
    img, kp = image, keypoints
    if rng.uniform() < flip_prob:
        img, kp = flip_image(img), flip_keypoints(kp)
    if translate > 0:
        dx, dy = rng.uniform(-translate, translate, 2)
        img = shift_image(img, dx, dy)
        kp = translate_keypoints(kp, dx, dy)
    return img, kp


def flip_image(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def shift_image(image: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Shift a CHW image by (dx, dy) normalized units with bilinear sampling and edge replication."""
    _, h, w = image.shape
    return ndimage.shift(image, (0.0, dy * h, dx * w), order=1, mode="nearest")


def augment(sample: ImageSample, rng: np.random.Generator, flip_prob: float = 0.5,
            translate: float = 0.05) -> ImageSample:
    img, kp = augment_arrays(sample.pixels.transpose(2, 0, 1), sample.keypoints, rng, flip_prob, translate)
    return ImageSample(sample.id, np.ascontiguousarray(img.transpose(1, 2, 0)), kp,
                       sample.ordinal_label, dict(sample.geometry))


def _batch(data: Arrays, idx: np.ndarray, config: TrainConfig, stage: int, epoch: int):
    imgs = np.empty((len(idx),) + data.images.shape[1:])
    kps = np.empty((len(idx), 8))
    for n, i in enumerate(idx):
        rng = np.random.default_rng([config.seed, stage, epoch, int(i)])
        imgs[n], kps[n] = augment_arrays(data.images[i], data.keypoints[i], rng,
                                         config.flip_prob, config.translate)
    return imgs, kps


# ------------------------------------------------------------------ training

def evaluate(model: N.NetworkModel, data: Arrays) -> dict:
    kp, feats, prob, emb = N.predict_batches(model, data.images)
    out = {"mse": float(np.mean((kp - data.keypoints) ** 2)) if len(data) else float("nan"),
           "probabilities": prob, "keypoints": kp, "features": feats, "embeddings": emb}
    try:
        out["acc"] = accuracy(prob, data.targets)
        out["bacc"] = balanced_accuracy(prob, data.targets)
    except ValueError:
        out["acc"] = out["bacc"] = float("nan")
    return out


def stage_loss(model: N.NetworkModel, images: np.ndarray, keypoints: np.ndarray, targets: np.ndarray,
               weights: dict[int, float] | None, lambda_k: float, lambda_c: float):
    """Weighted multitask loss; with ``weights=None`` only the keypoint term is built."""
    out = N.forward(model, images)
    kp_loss = T.mse_loss(out.keypoints, keypoints)
    if weights is None:
        return kp_loss, kp_loss, None
    w = np.array([weights[int(t)] for t in targets])
    clf_loss = T.weighted_bce_loss(out.probability, targets, w)
    total = T.add(T.scale(kp_loss, lambda_k), T.scale(clf_loss, lambda_c))
    return total, kp_loss, clf_loss


def _run_stage(model: N.NetworkModel, train: Arrays, val: Arrays, config: TrainConfig, stage: int,
               epochs: int, select, sink: IO[str] | None):
    if len(train) == 0:
        raise ValueError("empty training set")
    params = model.trainable()
    state = T.AdadeltaState.for_params(params, config.rho, config.eps, config.lr)
    weights = class_weights(train.targets) if stage == 2 else None
    lk, lc = (config.lambda_k, config.lambda_c) if stage == 2 else (1.0, 0.0)
    records: list[EpochRecord] = []
    best_key, best_state = None, None
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([config.seed, stage, epoch]).permutation(len(train))
        kp_losses, clf_losses = [], []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            imgs, kps = _batch(train, idx, config, stage, epoch)
            for p in model.params.values():
                p.grad = None
            total, kp_loss, clf_loss = stage_loss(model, imgs, kps, train.targets[idx], weights, lk, lc)
            total.backward()
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            T.adadelta_step(params, grads, state)
            kp_losses.append(float(kp_loss.data))
            clf_losses.append(float(clf_loss.data) if clf_loss is not None else 0.0)
        ev = evaluate(model, val)
        rec = EpochRecord(stage, epoch, float(np.mean(kp_losses)), float(np.mean(clf_losses)),
                          ev["mse"], ev["acc"], ev["bacc"])
        records.append(rec)
        if sink is not None:
            sink.write(rec.line() + "\n")
            sink.flush()
        log.debug("stage %d epoch %d: %s", stage, epoch, rec)
        key = select(rec)
        if best_key is None or key > best_key:
            best_key, best_state = key, model.state()
    for p in model.params.values():
        p.grad = None
    model.load_state(best_state)
    return model, records


def train_stage1(model: N.NetworkModel, train: Arrays, val: Arrays, config: TrainConfig,
                 sink: IO[str] | None = None):
    """Keypoint MSE only, classifier frozen; keeps the epoch with the lowest validation MSE."""
    N.set_frozen(model, "extractor", False)
    N.set_frozen(model, "keypoint_head", False)
    N.set_frozen(model, "classifier_head", True)
    return _run_stage(model, train, val, config, 1, config.stage1_epochs,
                      lambda r: (-r.val_mse, -r.epoch), sink)


def train_stage2(model: N.NetworkModel, train: Arrays, val: Arrays, config: TrainConfig,
                 sink: IO[str] | None = None):
    """Keypoints + weighted BCE with the extractor frozen; keeps the best validation balanced accuracy."""
    N.set_frozen(model, "extractor", True)
    N.set_frozen(model, "keypoint_head", False)
    N.set_frozen(model, "classifier_head", False)
    return _run_stage(model, train, val, config, 2, config.stage2_epochs,
                      lambda r: (_nan_low(r.val_bacc), _nan_low(r.val_acc), -r.epoch), sink)


def _nan_low(v: float) -> float:
    return -np.inf if np.isnan(v) else v


def train(model: N.NetworkModel, train_set: Arrays, val: Arrays, config: TrainConfig,
          out_dir: str | Path | None = None):
    """Both stages back to back; writes ``epochs.csv`` and per-stage checkpoints when ``out_dir`` is set."""
    sink = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sink = open(out_dir / "epochs.csv", "w")
        sink.write(",".join(RECORD_FIELDS) + "\n")
    try:
        model, rec1 = train_stage1(model, train_set, val, config, sink)
        if out_dir is not None:
            N.save(model, out_dir / "stage1.aesn")
        model, rec2 = train_stage2(model, train_set, val, config, sink)
        if out_dir is not None:
            N.save(model, out_dir / "stage2.aesn")
    finally:
        if sink is not None:
            sink.close()
    return model, rec1 + rec2


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
