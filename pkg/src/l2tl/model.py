"""Shared-encoder classifier with separate source and target heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the encoder and the two heads.

    ``encoder`` is ``"mlp"`` (ReLU layers of widths ``hidden``) or ``"lenet"``
    (conv5x5(6)-pool-conv5x5(16)-pool-fc120-fc84 on single-channel images).
    """

    input_shape: tuple[int, ...]
    num_source_classes: int
    num_target_classes: int
    encoder: str = "mlp"
    hidden: tuple[int, ...] = (64, 32)
    weight_decay: float = 0.0
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if self.encoder not in ("mlp", "lenet"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if not self.input_shape or min(self.input_shape) < 1:
            raise ValueError("input_shape must be non-empty with positive extents")
        if self.num_source_classes < 1 or self.num_target_classes < 1:
            raise ValueError("class counts must be positive")
        if self.encoder == "mlp" and (not self.hidden or min(self.hidden) < 1):
            raise ValueError("mlp encoder needs positive hidden widths")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.encoder == "mlp" else 84


def _image_shape(input_shape):
    if len(input_shape) == 2:
        return (1, *input_shape)
    if len(input_shape) == 3:
        return tuple(input_shape)
    raise ValueError(f"lenet encoder needs (H, W) or (C, H, W) inputs, got {input_shape}")


def _lenet_flat_dim(input_shape) -> int:
    _, h, w = _image_shape(input_shape)
    for _ in range(2):
        h, w = (h - 4) // 2, (w - 4) // 2
        if h < 1 or w < 1:
            raise ValueError(f"input {input_shape} too small for the lenet encoder")
    return 16 * h * w


class TwoHeadModel:
    """Parameters Ω (encoder) and ζ_S, ζ_T (heads) as named tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(config.init_seed))
        self.params = params

    # construction ---------------------------------------------------------------

    def _layer(self, rng, name, fan_in, shape, gain):
        bound = gain / np.sqrt(fan_in)
        return {
            f"{name}.weight": Tensor(rng.uniform(-bound, bound, size=shape), True, f"{name}.weight"),
            f"{name}.bias": Tensor(np.zeros(shape[0] if len(shape) == 4 else shape[-1]),
                                   True, f"{name}.bias"),
        }

    def _init_params(self, rng) -> dict[str, Tensor]:
        cfg = self.config
        relu_gain = np.sqrt(6.0)
        params: dict[str, Tensor] = {}
        if cfg.encoder == "mlp":
            width = int(np.prod(cfg.input_shape))
            for i, h in enumerate(cfg.hidden):
                params.update(self._layer(rng, f"encoder.fc{i}", width, (width, h), relu_gain))
                width = h
        else:
            c = _image_shape(cfg.input_shape)[0]
            params.update(self._layer(rng, "encoder.conv0", c * 25, (6, c, 5, 5), relu_gain))
            params.update(self._layer(rng, "encoder.conv1", 6 * 25, (16, 6, 5, 5), relu_gain))
            flat = _lenet_flat_dim(cfg.input_shape)
            params.update(self._layer(rng, "encoder.fc0", flat, (flat, 120), relu_gain))
            params.update(self._layer(rng, "encoder.fc1", 120, (120, 84), relu_gain))
        d = cfg.feature_dim
        params.update(self._layer(rng, "source_head", d, (d, cfg.num_source_classes), 1.0))
        params.update(self._layer(rng, "target_head", d, (d, cfg.num_target_classes), 1.0))
        return params

    def reinit_target_head(self, rng: np.random.Generator) -> None:
        d = self.config.feature_dim
        self.params.update(self._layer(rng, "target_head", d, (d, self.config.num_target_classes), 1.0))

    def copy(self) -> "TwoHeadModel":
        return TwoHeadModel(self.config, {k: Tensor(v.data.copy(), True, k)
                                          for k, v in self.params.items()})

    # parameter groups ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def encoder_params(self) -> list[Tensor]:
        return [v for k, v in self.params.items() if k.startswith("encoder.")]

    def head(self, which: str) -> tuple[Tensor, Tensor]:
        return self.params[f"{which}_head.weight"], self.params[f"{which}_head.bias"]

    # forward ------------------------------------------------------------------------

    def encode(self, x) -> Tensor:
        return encode(x, self)

    def source_logits(self, x) -> Tensor:
        return head_logits(encode(x, self), *self.head("source"))

    def target_logits(self, x) -> Tensor:
        return head_logits(encode(x, self), *self.head("target"))

    def weight_decay_term(self) -> Tensor | float:
        """``weight_decay * sum of squared parameters`` over encoder and both heads."""
        if self.config.weight_decay == 0:
            return 0.0
        total = None
        for p in self.params.values():
            sq = ad.sum(ad.mul(p, p))
            total = sq if total is None else ad.add(total, sq)
        return ad.mul(total, self.config.weight_decay)


def encode(x, model: TwoHeadModel) -> Tensor:
    """Map a batch of inputs to ``(batch, feature_dim)`` features."""
    cfg = model.config
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape[1:] != cfg.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match model input {cfg.input_shape}")
    p = model.params
    if cfg.encoder == "mlp":
        h = Tensor(x.reshape(x.shape[0], -1))
        for i in range(len(cfg.hidden)):
            h = ad.relu(ad.add(ad.matmul(h, p[f"encoder.fc{i}.weight"]), p[f"encoder.fc{i}.bias"]))
        return h
    h = Tensor(x.reshape(x.shape[0], *_image_shape(cfg.input_shape)))
    for i in range(2):
        h = ad.conv2d(h, p[f"encoder.conv{i}.weight"], p[f"encoder.conv{i}.bias"])
        h = ad.max_pool2d(ad.relu(h), 2)
    h = ad.flatten(h)
    for i in range(2):
        h = ad.relu(ad.add(ad.matmul(h, p[f"encoder.fc{i}.weight"]), p[f"encoder.fc{i}.bias"]))
    return h


def head_logits(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if features.data.ndim != 2 or features.shape[1] != weight.shape[0]:
        raise ValueError(f"features {features.shape} do not fit head weight {weight.shape}")
    return ad.add(ad.matmul(features, weight), bias)


def per_example_loss(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy per row; raises IndexError on invalid labels."""
    return ad.softmax_cross_entropy(logits, labels)


def save_model(path, model: TwoHeadModel) -> None:
    meta = {"config": asdict(model.config)}
    save_arrays(path, "model", {k: v.data for k, v in model.params.items()}, meta)


def load_model(path) -> TwoHeadModel:
    arrays, meta = load_arrays(path, "model")
    cfg = meta["config"]
    config = ModelConfig(**{**cfg, "input_shape": tuple(cfg["input_shape"]),
                            "hidden": tuple(cfg["hidden"])})
    model = TwoHeadModel(config)
    if set(arrays) != set(model.params):
        raise ValueError(f"{path}: parameter names do not match the stored config")
    for k, v in arrays.items():
        if v.shape != model.params[k].shape:
            raise ValueError(f"{path}: {k} has shape {v.shape}, expected {model.params[k].shape}")
        model.params[k] = Tensor(v, True, k)
    return model
