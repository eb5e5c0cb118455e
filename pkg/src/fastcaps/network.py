"""Capsule network assembly: conv1 -> PrimaryCaps -> class capsules (+ decoder)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import decoder as dec
from .conv import conv_forward, conv_output_shape
from .routing import RoutingGrouping, predict_votes, route, squash
from .tensor import ShapeError, Tensor, as_tensor, get_dtype, norm, parameter, relu, reshape, transpose

VARIANTS = ("original-2d", "fast-2d", "fast-3d", "tiny-test")


@dataclass
class ModelConfig:
    variant: str
    input_shape: tuple[int, ...]
    conv1_filters: int = 256
    conv1_kernel: int = 9
    conv1_stride: int = 1
    caps_per_location: int = 1
    caps_dim: int = 256
    primary_kernel: int = 9
    primary_stride: int = 2
    num_classes: int = 2
    out_dim: int = 16
    routing_iters: int = 3
    routing: str = "original"  # or "consistent": share coefficients per location
    decoder: str = "conv"  # conv | ff | none
    decoder_filters: int = 16
    ff_hidden: tuple[int, ...] = (512, 1024)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.ff_hidden = tuple(int(h) for h in self.ff_hidden)
        self.validate()

    @property
    def ndim(self) -> int:
        return len(self.input_shape)

    @property
    def conv1_shape(self) -> tuple[int, ...]:
        return conv_output_shape(self.input_shape, self.conv1_kernel, self.conv1_stride)

    @property
    def grid(self) -> tuple[int, ...]:
        return conv_output_shape(self.conv1_shape, self.primary_kernel, self.primary_stride)

    @property
    def n_locations(self) -> int:
        return int(np.prod(self.grid))

    @property
    def n_primary(self) -> int:
        return self.n_locations * self.caps_per_location

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 1 <= self.ndim <= 3:
            raise ValueError(f"input must have 1-3 spatial axes, got {self.input_shape}")
        if self.variant.startswith("fast") and self.caps_per_location != 1:
            raise ValueError("fast variants allow only one capsule per location")
        if self.variant == "fast-3d" and self.ndim != 3:
            raise ValueError("fast-3d needs a 3-D input shape")
        if self.variant in ("original-2d", "fast-2d") and self.ndim != 2:
            raise ValueError(f"{self.variant} needs a 2-D input shape")
        if self.routing not in ("original", "consistent"):
            raise ValueError(f"unknown routing mode {self.routing!r}")
        if self.decoder not in ("conv", "ff", "none"):
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if self.routing_iters < 1:
            raise ValueError("routing_iters must be >= 1")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        for name in ("conv1_filters", "conv1_kernel", "conv1_stride", "caps_dim",
                     "primary_kernel", "primary_stride", "out_dim", "caps_per_location"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        try:
            self.grid
        except ShapeError as exc:
            raise ValueError(f"inconsistent config: {exc}") from None
        if self.decoder == "conv":
            out = dec.conv_decoder_output_shape(self.grid)
            if any(o < s for o, s in zip(out, self.input_shape)):
                raise ValueError(f"conv decoder output {out} smaller than input {self.input_shape}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["ff_hidden"] = list(self.ff_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def preset(variant: str, **overrides) -> ModelConfig:
    """Named architectures plus the small gradient-check model; ``overrides`` replace config fields."""
    base = {
        "original-2d": dict(input_shape=(32, 32), caps_per_location=32, caps_dim=8, decoder="ff"),
        "fast-2d": dict(input_shape=(32, 32)),
        "fast-3d": dict(input_shape=(32, 32, 32)),
        "tiny-test": dict(input_shape=(12, 12), conv1_filters=8, conv1_kernel=5, caps_dim=8,
                          primary_kernel=5, primary_stride=3, out_dim=4),
    }
    if variant not in base:
        raise ValueError(f"unknown variant {variant!r}")
    kwargs = dict(base[variant])
    kwargs.update(overrides)
    return ModelConfig(variant=variant, **kwargs)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ForwardResult:
    class_vectors: Tensor  # (B, J, D_out)
    lengths: Tensor  # (B, J)
    votes: Tensor  # (B, I, J, D_out)
    coefficients: np.ndarray  # (B, G, J) final routing coefficients
    primary: Tensor | None = None  # squashed u, (B, I, caps_dim)
    shapes: dict = field(default_factory=dict)


class CapsNet:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        if config.routing == "consistent":
            self.grouping = RoutingGrouping.by_location(config.n_locations, config.caps_per_location)
        else:
            self.grouping = RoutingGrouping.identity(config.n_primary)

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return expected_shapes(self.config)

    def encode(self, x, coefficients=None) -> ForwardResult:
        cfg = self.config
        p = self.params
        x = as_tensor(x)
        if x.ndim == cfg.ndim + 1:
            x = reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.shape[1:] != (1,) + cfg.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match input {cfg.input_shape}")
        b = x.shape[0]
        h = relu(conv_forward(x, p["conv1.weight"], cfg.conv1_stride, p["conv1.bias"]))
        pc = conv_forward(h, p["primary.weight"], cfg.primary_stride, p["primary.bias"])
        # channels (caps, dim) at each location -> location-major capsule list
        nd = cfg.ndim
        pc = reshape(pc, (b, cfg.caps_per_location, cfg.caps_dim) + cfg.grid)
        pc = transpose(pc, (0,) + tuple(range(3, 3 + nd)) + (1, 2))
        u = squash(reshape(pc, (b, cfg.n_primary, cfg.caps_dim)))
        votes = predict_votes(u, p["caps.W"])
        v, _, state = route(votes, self.grouping, cfg.routing_iters, coefficients=coefficients)
        lengths = norm(v, axis=-1)
        shapes = {"conv1": h.shape, "primary": (b, cfg.caps_dim * cfg.caps_per_location) + cfg.grid,
                  "capsules": u.shape, "votes": votes.shape, "class": v.shape}
        return ForwardResult(v, lengths, votes, state.coefficients, u, shapes)

    def decode(self, result: ForwardResult, classes) -> Tensor:
        cfg = self.config
        classes = np.asarray(classes)
        if cfg.decoder == "conv":
            d = dec.select_class_votes(result.votes, classes, cfg.grid)
            return dec.conv_decode(d, self.params, cfg.input_shape)
        if cfg.decoder == "ff":
            return dec.ff_decode(result.class_vectors, classes, self.params, cfg.input_shape)
        raise ValueError("model has no decoder")

    def forward(self, x, coefficients=None):
        """Returns ``(class_vectors, lengths, votes)``."""
        r = self.encode(x, coefficients)
        return r.class_vectors, r.lengths, r.votes

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    nd = cfg.ndim
    k1 = (cfg.conv1_kernel,) * nd
    kp = (cfg.primary_kernel,) * nd
    shapes = {
        "conv1.weight": (cfg.conv1_filters, 1) + k1,
        "conv1.bias": (cfg.conv1_filters,),
        "primary.weight": (cfg.caps_per_location * cfg.caps_dim, cfg.conv1_filters) + kp,
        "primary.bias": (cfg.caps_per_location * cfg.caps_dim,),
        "caps.W": (cfg.n_primary, cfg.num_classes, cfg.caps_dim, cfg.out_dim),
    }
    if cfg.decoder == "conv":
        in_ch = cfg.caps_per_location * cfg.out_dim + cfg.num_classes
        shapes.update(dec.conv_decoder_shapes(in_ch, cfg.decoder_filters, nd))
    elif cfg.decoder == "ff":
        n_out = int(np.prod(cfg.input_shape))
        shapes.update(dec.ff_decoder_shapes(cfg.num_classes * cfg.out_dim, cfg.ff_hidden, n_out))
    return shapes


def build_model(config: ModelConfig, seed: int = 0) -> CapsNet:
    """Allocate seeded parameters: fan-in scaled uniform weights, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name == "caps.W":
            arr = _uniform(rng, shape[2], shape)
        elif name.startswith("decoder.deconv"):
            # (in, out, *k): each output pixel sees in_ch * prod(k) / stride^nd inputs
            arr = _uniform(rng, shape[0] * int(np.prod(shape[2:])) // 2 ** config.ndim, shape)
        elif name.startswith("decoder.fc"):
            arr = _uniform(rng, shape[0], shape)
        else:
            arr = _uniform(rng, int(np.prod(shape[1:])), shape)
        params[name] = parameter(arr.astype(get_dtype()))
    return CapsNet(config, params)


def forward(model: CapsNet, batch, coefficients=None):
    return model.forward(batch, coefficients)


def predict(lengths) -> np.ndarray:
    """Index of the longest class capsule; ties go to the lowest index."""
    arr = lengths.data if isinstance(lengths, Tensor) else np.asarray(lengths)
    return np.argmax(arr, axis=-1)


def param_count(model_or_config) -> int:
    cfg = model_or_config.config if isinstance(model_or_config, CapsNet) else model_or_config
    return int(sum(np.prod(s) for s in expected_shapes(cfg).values()))
