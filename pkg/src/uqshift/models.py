"""Mini U-Net with dropout after every 3x3 convolution, flattened to a ParamVector."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import load_tensor, save_tensor
from .errors import DimensionError, PathError, ValidationError

MODES = ("train", "eval_stochastic", "eval_deterministic")


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 3
    base_channels: int = 8
    depth: int = 2
    dropout_rate: float = 0.2
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValidationError("depth, base_channels and in_channels must be >= 1")


def architecture(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) for every parameter tensor; this is the ParamVector layout."""
    layout = []

    def conv(name, cin, cout, k=3):
        layout.append((f"{name}.w", (cout, cin, k, k)))
        layout.append((f"{name}.b", (cout,)))

    widths = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
    cin = cfg.in_channels
    for i in range(cfg.depth):
        conv(f"enc{i}.0", cin, widths[i])
        conv(f"enc{i}.1", widths[i], widths[i])
        cin = widths[i]
    conv("mid.0", cin, widths[-1])
    conv("mid.1", widths[-1], widths[-1])
    for i in reversed(range(cfg.depth)):
        conv(f"dec{i}.0", widths[i + 1] + widths[i], widths[i])
        conv(f"dec{i}.1", widths[i], widths[i])
    conv("head", widths[0], cfg.num_classes, k=1)
    return layout


class SegNet:
    def __init__(self, config: ModelConfig, params: list[np.ndarray] | None = None):
        self.config = config
        self.layout = architecture(config)
        if params is None:
            params = [np.zeros(shape) for _, shape in self.layout]
        self.params = params

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout)

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def unflatten(self, theta: np.ndarray) -> list[np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size != self.num_params:
            raise DimensionError(f"ParamVector has length {theta.size}, model needs {self.num_params}")
        out, start = [], 0
        for _, shape in self.layout:
            n = int(np.prod(shape))
            out.append(theta[start:start + n].reshape(shape).copy())
            start += n
        return out

    def load_flat(self, theta: np.ndarray) -> "SegNet":
        self.params = self.unflatten(theta)
        return self

    def with_params(self, theta: np.ndarray) -> "SegNet":
        return SegNet(self.config, self.unflatten(theta))

    def _graph(self, image, mode, rng, dropout_rate, leaves):
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
        x = np.asarray(image, dtype=np.float64)
        h, w = x.shape[-2:]
        f = 2**self.config.depth
        if h % f or w % f:
            raise DimensionError(f"spatial dims {h}x{w} must be divisible by 2^depth = {f}")
        if x.shape[-3] != self.config.in_channels:
            raise DimensionError(f"expected {self.config.in_channels} input channels, got {x.shape[-3]}")
        p = self.config.dropout_rate if dropout_rate is None else dropout_rate
        stochastic = mode != "eval_deterministic"
        named = dict(zip((n for n, _ in self.layout), leaves))

        def block(t, name, k_pad=1):
            t = ad.conv2d(t, named[f"{name}.w"], named[f"{name}.b"], padding=k_pad)
            return ad.dropout(ad.relu(t), p, stochastic, rng)

        t = ad.Tensor(x)
        skips = []
        for i in range(self.config.depth):
            t = block(block(t, f"enc{i}.0"), f"enc{i}.1")
            skips.append(t)
            t = ad.max_pool2d(t, 2)
        t = block(block(t, "mid.0"), "mid.1")
        for i in reversed(range(self.config.depth)):
            t = ad.concat([ad.upsample_nearest(t, 2), skips[i]])
            t = block(block(t, f"dec{i}.0"), f"dec{i}.1")
        return ad.conv2d(t, named["head.w"], named["head.b"])

    def forward(self, image, mode: str = "eval_deterministic", rng=None,
                dropout_rate: float | None = None) -> ad.Tensor:
        """Logits ``[C, H, W]`` (or ``[N, C, H, W]`` for a batch)."""
        return self._graph(image, mode, rng, dropout_rate, [ad.Tensor(q) for q in self.params])

    def loss_and_grad(self, images, labels, rng=None, mode: str = "train",
                      dropout_rate: float | None = None) -> tuple[float, np.ndarray]:
        """Mean pixel cross-entropy of a batch and its gradient as a flat vector."""
        leaves = [ad.Tensor(q, requires_grad=True) for q in self.params]
        logits = self._graph(images, mode, rng, dropout_rate, leaves)
        loss = ad.softmax_cross_entropy(logits, labels)
        loss.backward()
        grad = np.concatenate([(q.grad if q.grad is not None else np.zeros(q.shape)).ravel()
                               for q in leaves])
        return float(loss.data), grad


def init(config: ModelConfig) -> SegNet:
    """He fan-in initialisation seeded by ``config.seed``; biases start at zero."""
    rng = np.random.default_rng(config.seed)
    params = []
    for name, shape in architecture(config):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
        else:
            params.append(np.zeros(shape))
    return SegNet(config, params)


def forward(net: SegNet, image, mode: str = "eval_deterministic", rng=None,
            dropout_rate: float | None = None) -> ad.Tensor:
    return net.forward(image, mode, rng, dropout_rate)


def l2_penalty(theta, weight_decay: float) -> tuple[float, np.ndarray]:
    """``(lambda/2)*||theta||^2`` and its gradient ``lambda*theta``."""
    if weight_decay < 0:
        raise ValidationError("weight_decay must be >= 0")
    theta = np.asarray(theta, dtype=np.float64)
    return 0.5 * weight_decay * float(theta @ theta), weight_decay * theta


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(path, config: ModelConfig, theta: np.ndarray, extra: dict | None = None) -> Path:
    """Write ``<path>`` (tensor file) and ``<path minus suffix>.json`` (config + layout)."""
    path = Path(path)
    save_tensor(path, np.asarray(theta))
    sidecar = {"model": asdict(config),
               "layout": [{"name": n, "shape": list(s)} for n, s in architecture(config)]}
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[ModelConfig, np.ndarray]:
    path = Path(path)
    side = path.with_suffix(".json")
    if not path.exists() or not side.exists():
        raise PathError(f"checkpoint or sidecar missing: {path}")
    meta = json.loads(side.read_text())
    config = ModelConfig(**meta["model"])
    layout = [(e["name"], tuple(e["shape"])) for e in meta["layout"]]
    if layout != architecture(config):
        raise ValidationError(f"{side}: layout does not match the model config")
    theta = load_tensor(path)
    if theta.ndim != 1:
        raise DimensionError(f"{path}: ParamVector must be 1-D, got shape {theta.shape}")
    return config, theta
