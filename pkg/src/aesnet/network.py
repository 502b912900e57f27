"""Keypoint-supervised aesthetic classifier.

conv-conv-pool feature extractor -> keypoint MLP (8 outputs) -> clamp to [0, 1]
-> fixed asymmetry layer (4 features) -> classifier MLP -> sigmoid.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .asymmetry import asymmetry_layer
from .tensor import Tensor

log = logging.getLogger(__name__)

GROUPS = ("extractor", "keypoint_head", "classifier_head")
MAGIC = b"AESN"
FORMAT_VERSION = 1


@dataclass
class NetworkConfig:
    height: int = 96
    width: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    keypoint_widths: tuple[int, ...] = (64, 8)
    classifier_widths: tuple[int, ...] = (16, 1)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.keypoint_widths = tuple(int(c) for c in self.keypoint_widths)
        self.classifier_widths = tuple(int(c) for c in self.classifier_widths)
        if not self.channels:
            raise ValueError("network needs at least one conv-conv-pool block")
        if self.keypoint_widths[-1:] != (8,):
            raise ValueError(f"keypoint MLP must end in 8 outputs, got {self.keypoint_widths}")
        if self.classifier_widths[-1:] != (1,) or len(self.classifier_widths) < 2:
            raise ValueError(f"classifier MLP needs a hidden layer and 1 output, got {self.classifier_widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd (same padding)")
        h, w = self.height, self.width
        for i in range(len(self.channels)):
            if h % 2 or w % 2:
                raise ValueError(f"extent {h}x{w} before pool {i + 1} is odd")
            h, w = h // 2, w // 2

    @property
    def feature_extent(self) -> tuple[int, int]:
        n = len(self.channels)
        return self.height >> n, self.width >> n

    @property
    def embedding_dim(self) -> int:
        return self.classifier_widths[-2]

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def full_scale_config(seed: int = 0) -> NetworkConfig:
    """Configuration sized for 384x256 inputs."""
    return NetworkConfig(height=384, width=256, channels=(8, 16, 32, 32, 32),
                         keypoint_widths=(64, 8), classifier_widths=(16, 1), seed=seed)


@dataclass
class Layer:
    group: str
    kind: str  # conv | relu | pool | flatten | dense | clamp | asymmetry | sigmoid
    name: str = ""
    padding: int = 0


@dataclass
class NetworkModel:
    config: NetworkConfig
    layers: list[Layer]
    params: dict[str, Tensor]
    frozen: dict[str, bool] = field(default_factory=lambda: {g: False for g in GROUPS})

    def group_params(self, group: str) -> dict[str, Tensor]:
        names = {l.name for l in self.layers if l.group == group and l.name}
        return {k: p for k, p in self.params.items() if k.rsplit(".", 1)[0] in names}

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for g in GROUPS:
            if not self.frozen[g]:
                out.update(self.group_params(g))
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)


def _layers(config: NetworkConfig) -> list[Layer]:
    pad = config.kernel // 2
    out = []
    for i, _ in enumerate(config.channels, start=1):
        out += [Layer("extractor", "conv", f"conv{i}a", pad), Layer("extractor", "relu"),
                Layer("extractor", "conv", f"conv{i}b", pad), Layer("extractor", "relu"),
                Layer("extractor", "pool")]
    out.append(Layer("extractor", "flatten"))
    for j, _ in enumerate(config.keypoint_widths[:-1], start=1):
        out += [Layer("keypoint_head", "dense", f"kp{j}"), Layer("keypoint_head", "relu")]
    out.append(Layer("keypoint_head", "dense", "kp_out"))
    out += [Layer("features", "clamp"), Layer("features", "asymmetry")]
    for j, _ in enumerate(config.classifier_widths[:-1], start=1):
        out += [Layer("classifier_head", "dense", f"clf{j}"), Layer("classifier_head", "relu")]
    out.append(Layer("classifier_head", "dense", "clf_out"))
    out.append(Layer("classifier_head", "sigmoid"))
    return out


def build(config: NetworkConfig) -> NetworkModel:
    """Deterministically initialised model: He-uniform for hidden layers, Glorot for output layers."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    k = config.kernel

    def he(shape, fan_in):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, shape)

    def glorot(shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, shape)

    c_in = 3
    for i, c in enumerate(config.channels, start=1):
        for tag, cin in (("a", c_in), ("b", c)):
            params[f"conv{i}{tag}.w"] = T.parameter(he((c, cin, k, k), cin * k * k), f"conv{i}{tag}.w")
            params[f"conv{i}{tag}.b"] = T.parameter(np.zeros(c), f"conv{i}{tag}.b")
        c_in = c

    fh, fw = config.feature_extent
    for prefix, widths, n_in in (("kp", config.keypoint_widths, fh * fw * c_in),
                                 ("clf", config.classifier_widths, 4)):
        for j, m in enumerate(widths, start=1):
            last = j == len(widths)
            name = f"{prefix}_out" if last else f"{prefix}{j}"
            w = glorot((m, n_in), n_in, m) if last else he((m, n_in), n_in)
            params[f"{name}.w"] = T.parameter(w, f"{name}.w")
            params[f"{name}.b"] = T.parameter(np.zeros(m), f"{name}.b")
            n_in = m

    model = NetworkModel(config, _layers(config), params)
    log.info("built network with %d learnable parameters", param_count(model))
    return model


def param_count(model: NetworkModel) -> int:
    return sum(p.size for p in model.params.values())


def set_frozen(model: NetworkModel, group: str, flag: bool = True) -> None:
    if group not in GROUPS:
        raise ValueError(f"unknown layer group {group!r}; expected one of {GROUPS}")
    model.frozen[group] = bool(flag)


def _check_input(model: NetworkModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    want = (3, model.config.height, model.config.width)
    if xb.ndim != 4 or xb.shape[1:] != want:
        raise ValueError(f"expected preprocessed input of shape {want}, got {x.shape}")
    return xb


def run_layers(model: NetworkModel, x: Tensor, layers: list[Layer], record: list | None = None) -> Tensor:
    """Apply ``layers`` in order; frozen groups contribute no trainable leaves."""
    for layer in layers:
        if layer.kind == "conv":
            x = T.conv2d(x, model.params[layer.name + ".w"], model.params[layer.name + ".b"], 1, layer.padding)
        elif layer.kind == "dense":
            x = T.dense(x, model.params[layer.name + ".w"], model.params[layer.name + ".b"])
        elif layer.kind == "relu":
            x = T.relu(x)
        elif layer.kind == "pool":
            x = T.maxpool2d(x, 2)
        elif layer.kind == "flatten":
            x = T.flatten(x)
        elif layer.kind == "clamp":
            x = T.clamp01(x)
        elif layer.kind == "asymmetry":
            x = asymmetry_layer(x)
        elif layer.kind == "sigmoid":
            x = T.sigmoid(x)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        if record is not None:
            record.append(x)
    return x


def _sync_requires_grad(model: NetworkModel) -> None:
    for g in GROUPS:
        for p in model.group_params(g).values():
            p.requires_grad = not model.frozen[g]


@dataclass
class Outputs:
    keypoints: Tensor  # raw keypoint head output, (B, 8)
    features: Tensor  # (B, 4)
    logit: Tensor  # (B,)
    probability: Tensor  # (B,)
    embedding: Tensor  # (B, embedding_dim)


def _split_at(layers: list[Layer], kind: str) -> int:
    return next(i for i, l in enumerate(layers) if l.kind == kind)


def forward(model: NetworkModel, images: np.ndarray, record: list | None = None) -> Outputs:
    """Full forward pass on a preprocessed batch (B, 3, H, W) or single image."""
    xb = _check_input(model, images)
    _sync_requires_grad(model)
    layers = model.layers
    i_clamp = _split_at(layers, "clamp")
    kp = run_layers(model, Tensor(xb), layers[:i_clamp], record)
    feats = run_layers(model, kp, layers[i_clamp:i_clamp + 2], record)
    head = layers[i_clamp + 2:-1]
    emb = run_layers(model, feats, head[:-1], record)
    logit = run_layers(model, emb, head[-1:], record)
    prob = run_layers(model, logit, layers[-1:], record)
    return Outputs(kp, feats, T.reshape(logit, (-1,)), T.reshape(prob, (-1,)), emb)


def forward_keypoints(model: NetworkModel, images: np.ndarray) -> np.ndarray:
    xb = _check_input(model, images)
    _sync_requires_grad(model)
    i_clamp = _split_at(model.layers, "clamp")
    out = run_layers(model, Tensor(xb), model.layers[:i_clamp]).data
    return out[0] if np.ndim(images) == 3 else out


def forward_full(model: NetworkModel, image: np.ndarray):
    """(keypoints, features, probability, embedding) as numpy values.

    Keypoints are the raw head outputs; features use the clamped keypoints.
    """
    out = forward(model, image)
    vals = (out.keypoints.data, out.features.data, out.probability.data, out.embedding.data)
    if np.ndim(image) == 3:
        return vals[0][0], vals[1][0], float(vals[2][0]), vals[3][0]
    return vals


def predict_batches(model: NetworkModel, images: np.ndarray, batch: int = 64):
    """forward_full over a large stack without building a graph."""
    frozen = dict(model.frozen)
    for g in GROUPS:
        model.frozen[g] = True
    try:
        parts = [forward_full(model, images[i:i + batch]) for i in range(0, len(images), batch)]
    finally:
        model.frozen.update(frozen)
    if not parts:
        return np.zeros((0, 8)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, model.config.embedding_dim))
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(4))


# ---------------------------------------------------------------- checkpoints

def _header(model: NetworkModel) -> bytes:
    meta = {"config": asdict(model.config), "frozen": model.frozen}
    return json.dumps(meta, sort_keys=True).encode()


def to_bytes(model: NetworkModel) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    header = _header(model)
    parts += [struct.pack("<I", len(header)), header, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", p.data.ndim),
                  struct.pack(f"<{p.data.ndim}I", *p.shape),
                  np.ascontiguousarray(p.data, dtype="<f8").tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes) -> NetworkModel:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ValueError("not an aesnet checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ValueError("checkpoint CRC mismatch")
    off = 8
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off:off + n])
    off += n
    model = build(NetworkConfig.from_dict(meta["config"]))
    model.frozen.update(meta["frozen"])
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + ln].decode()
        off += ln
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        if name not in model.params or model.params[name].shape != tuple(shape):
            raise ValueError(f"checkpoint tensor {name!r} {shape} does not fit the configured network")
        model.params[name].data = data
    return model


def save(model: NetworkModel, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path: str | Path) -> NetworkModel:
    return from_bytes(Path(path).read_bytes())
