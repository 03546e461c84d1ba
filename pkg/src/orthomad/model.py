"""Two-headed detector: conv backbone -> (z1, z2) -> concat -> linear -> sigmoid."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .weights import FormatError, decode_weights, encode_weights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    input_size: int = 64
    conv_channels: Tuple[int, ...] = (8, 16, 32)
    use_residual: bool = True
    embed_dim: int = 32
    classifier_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        self.validate()

    def validate(self) -> None:
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigError("conv_channels must be a non-empty list of positive ints")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        factor = 2 ** len(self.conv_channels)
        if self.input_size < factor or self.input_size % factor:
            raise ConfigError(
                f"input_size {self.input_size} must be a multiple of {factor} "
                f"for {len(self.conv_channels)} stride-2 stages")

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    def to_header(self) -> Dict[str, str]:
        return {
            "input_channels": str(self.input_channels),
            "input_size": str(self.input_size),
            "conv_channels": ",".join(str(c) for c in self.conv_channels),
            "use_residual": str(self.use_residual).lower(),
            "embed_dim": str(self.embed_dim),
            "classifier_bias": str(self.classifier_bias).lower(),
        }

    @classmethod
    def from_header(cls, kv: Dict[str, str]) -> "ModelConfig":
        def flag(s: str) -> bool:
            if s not in ("true", "false"):
                raise ConfigError(f"bad boolean {s!r}")
            return s == "true"

        try:
            return cls(
                input_channels=int(kv["input_channels"]),
                input_size=int(kv["input_size"]),
                conv_channels=tuple(int(c) for c in kv["conv_channels"].split(",")),
                use_residual=flag(kv["use_residual"]),
                embed_dim=int(kv["embed_dim"]),
                classifier_bias=flag(kv["classifier_bias"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid config header: {exc}") from exc


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Names and shapes of every trainable tensor, in canonical order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    c_in = config.input_channels
    for i, c_out in enumerate(config.conv_channels):
        shapes[f"stage{i}.conv1"] = (c_out, c_in, 3, 3)
        shapes[f"stage{i}.conv2"] = (c_out, c_out, 3, 3)
        c_in = c_out
    d, f = config.embed_dim, config.feature_dim
    shapes["head1.weight"] = (d, f)
    shapes["head2.weight"] = (d, f)
    shapes["classifier.weight"] = (1, 2 * d)
    if config.classifier_bias:
        shapes["classifier.bias"] = (1,)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: Dict[str, Tensor]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Dict[str, np.ndarray],
                    dtype=None) -> "ModelParams":
        expected = parameter_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        tensors = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name])
            if arr.shape != shape:
                raise T.DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise T.NumericError(f"{name} contains non-finite values")
            tensors[name] = Tensor(arr.copy(), requires_grad=True, name=name,
                                   dtype=dtype or T.default_dtype())
        return cls(config, tensors)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_arrays(self.config, self.arrays(), dtype=dtype)


@dataclass
class IdentityEmbeddings:
    z1: Tensor
    z2: Tensor
    z: Tensor


@dataclass
class Prediction:
    y: Tensor
    logit: Tensor
    embeddings: IdentityEmbeddings


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in scaled uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases zero."""
    config.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("bias"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams.from_arrays(config, arrays)


def _backbone(config: ModelConfig, p: Dict[str, Tensor], x: Tensor) -> Tensor:
    h = x
    for i, c_out in enumerate(config.conv_channels):
        a = T.conv2d(h, p[f"stage{i}.conv1"], stride=1, padding=1)
        if config.use_residual:
            # zero-padded identity shortcut (no extra parameters)
            a = T.add(a, T.pad_channels(h, c_out))
        h = T.relu(a)
        h = T.relu(T.conv2d(h, p[f"stage{i}.conv2"], stride=2, padding=1))
    return T.global_avg_pool(h)


def forward(params: ModelParams, image: Union[Tensor, np.ndarray]) -> Prediction:
    """Score one image (C, H, W) or a batch (N, C, H, W).

    The returned tensors carry the graph; ``y`` has shape () for a single
    image and (N,) for a batch.
    """
    cfg = params.config
    x = image if isinstance(image, Tensor) else Tensor(image)
    single = x.ndim == 3
    if single:
        x = Tensor(x.data[None])
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise T.DimensionError(f"forward: image shape {image.shape} does not match {expected}")
    p = params.tensors
    feats = _backbone(cfg, p, x)
    z1 = T.dense(feats, p["head1.weight"])
    z2 = T.dense(feats, p["head2.weight"])
    z = T.concat(z1, z2)
    logit = T.dense(z, p["classifier.weight"], p.get("classifier.bias"))
    logit = T.reshape(logit, logit.shape[:-1])
    y = T.sigmoid(logit)
    if single:
        def unbatch(t: Tensor) -> Tensor:
            return T.reshape(t, t.shape[1:])

        return Prediction(unbatch(y), unbatch(logit),
                          IdentityEmbeddings(unbatch(z1), unbatch(z2), unbatch(z)))
    return Prediction(y, logit, IdentityEmbeddings(z1, z2, z))


# ---------------------------------------------------------------------------
# persistence


def save_model(params: ModelParams, path: Union[str, os.PathLike]) -> None:
    header = "".join(f"{k}={v}\n" for k, v in params.config.to_header().items()) + "\n"
    blob = header.encode("utf-8") + encode_weights(params.arrays())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_model(path: Union[str, os.PathLike]) -> Tuple[ModelConfig, ModelParams]:
    with open(path, "rb") as fh:
        buf = fh.read()
    end = buf.find(b"\n\n")
    if end < 0:
        if buf.startswith(b"OMAD"):
            raise FormatError("missing config header", 0)
        raise FormatError("bad magic" if b"=" not in buf[:64] else "unterminated config header", 0)
    kv = {}
    for line in buf[:end].decode("utf-8", errors="replace").split("\n"):
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed header line {line!r}", 0)
        kv[key.strip()] = value.strip()
    start = end + 2
    arrays = decode_weights(buf[start:], base_offset=start)
    try:
        config = ModelConfig.from_header(kv)
        params = ModelParams.from_arrays(config, arrays, dtype=np.float32)
    except (ConfigError, T.DimensionError) as exc:
        raise FormatError(str(exc), start) from exc
    return config, params
