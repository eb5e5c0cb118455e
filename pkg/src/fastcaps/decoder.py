"""Reconstruction heads.

The convolutional decoder rebuilds the input from the PrimaryCaps votes for
a single class, laid out on the capsule grid with the class one-hot
appended as extra channels. The feed-forward decoder is the classic
masked-class-capsule baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv_transpose_forward, conv_transpose_output_shape
from .tensor import (ShapeError, Tensor, as_tensor, center_crop, concat, matmul_batched, mul, record, relu,
                     reshape, sigmoid, square, sub, sum_, transpose)

DECONV_KERNEL = 4
DECONV_STRIDE = 2


def conv_decoder_output_shape(grid) -> tuple[int, ...]:
    mid = conv_transpose_output_shape(grid, DECONV_KERNEL, DECONV_STRIDE)
    return conv_transpose_output_shape(mid, DECONV_KERNEL, DECONV_STRIDE)


def conv_decoder_shapes(in_channels: int, filters: int, nd: int) -> dict[str, tuple[int, ...]]:
    k = (DECONV_KERNEL,) * nd
    return {
        "decoder.deconv1.weight": (in_channels, filters) + k,
        "decoder.deconv1.bias": (filters,),
        "decoder.deconv2.weight": (filters, 1) + k,
        "decoder.deconv2.bias": (1,),
    }


def ff_decoder_shapes(n_in: int, hidden, n_out: int) -> dict[str, tuple[int, ...]]:
    widths = [n_in, *hidden, n_out]
    shapes = {}
    for idx, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        shapes[f"decoder.fc{idx}.weight"] = (a, b)
        shapes[f"decoder.fc{idx}.bias"] = (b,)
    return shapes


def one_hot(classes, n: int, dtype) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    if np.any(classes < 0) or np.any(classes >= n):
        raise ValueError(f"class index out of range [0, {n})")
    out = np.zeros(classes.shape + (n,), dtype=dtype)
    np.put_along_axis(out, classes[..., None], 1, axis=-1)
    return out


def _take_parent(votes: Tensor, classes: np.ndarray) -> Tensor:
    """``votes[b, :, classes[b], :]`` for every sample."""
    b = np.arange(votes.shape[0])
    out = votes.data[b, :, classes, :]  # (B, I, D)

    def grad_fn(g):
        full = np.zeros(votes.shape, dtype=g.dtype)
        full[b, :, classes, :] = g
        return (full,)

    return record(np.ascontiguousarray(out), (votes,), grad_fn, "take_parent")


@dataclass
class DecoderInput:
    masked_votes: Tensor  # (B, *grid, channels) votes for the chosen class
    class_onehot: np.ndarray  # (B, J)

    def tensor(self) -> Tensor:
        """Channels-first ``(B, channels + J, *grid)`` with the one-hot replicated over the grid."""
        mv = self.masked_votes
        nd = mv.ndim - 2
        grid = mv.shape[1:-1]
        x = transpose(mv, (0, nd + 1) + tuple(range(1, nd + 1)))
        hot = np.broadcast_to(self.class_onehot.reshape(self.class_onehot.shape + (1,) * nd),
                              self.class_onehot.shape + grid)
        return concat([x, Tensor(np.ascontiguousarray(hot), dtype=mv.dtype)], axis=1)


def select_class_votes(votes, classes, grid) -> DecoderInput:
    """Votes of every PrimaryCaps capsule for class ``classes[b]``, arranged on ``grid``.

    ``votes`` is ``(B, I, J, D)`` with capsules ordered location-major; several
    capsules per location are stacked along the channel axis.
    """
    votes = as_tensor(votes)
    if votes.ndim == 3:
        votes = reshape(votes, (1,) + votes.shape)
    b, n, j, d = votes.shape
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (b,))
    hot = one_hot(classes, j, votes.dtype)
    grid = tuple(grid)
    n_loc = int(np.prod(grid))
    if n % n_loc:
        raise ShapeError(f"{n} capsules do not tile grid {grid}")
    picked = _take_parent(votes, classes)
    return DecoderInput(reshape(picked, (b,) + grid + (n // n_loc * d,)), hot)


def conv_decode(d: DecoderInput, params: dict[str, Tensor], output_shape) -> Tensor:
    """Two stride-2 transposed convolutions (ReLU, then sigmoid), center-cropped to ``output_shape``."""
    x = d.tensor()
    h = relu(conv_transpose_forward(x, params["decoder.deconv1.weight"], DECONV_STRIDE,
                                    params["decoder.deconv1.bias"]))
    y = conv_transpose_forward(h, params["decoder.deconv2.weight"], DECONV_STRIDE, params["decoder.deconv2.bias"])
    y = center_crop(y, tuple(output_shape))
    y = sigmoid(y)
    return reshape(y, (y.shape[0],) + tuple(output_shape))


def ff_decode(class_vectors, classes, params: dict[str, Tensor], output_shape) -> Tensor:
    """Dense decoder over the class capsules with all but ``classes[b]`` zeroed."""
    v = as_tensor(class_vectors)
    if v.ndim == 2:
        v = reshape(v, (1,) + v.shape)
    b, j, d = v.shape
    mask = one_hot(np.broadcast_to(np.asarray(classes), (b,)), j, v.dtype)[..., None]
    h = reshape(mul(v, mask), (b, j * d))
    idx = 1
    while f"decoder.fc{idx}.weight" in params:
        h = matmul_batched(h, params[f"decoder.fc{idx}.weight"]) + params[f"decoder.fc{idx}.bias"]
        idx += 1
        h = relu(h) if f"decoder.fc{idx}.weight" in params else sigmoid(h)
    return reshape(h, (b,) + tuple(output_shape))


def reconstruction_error(x, x_hat) -> Tensor:
    """Sum of squared differences over every element."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return sum_(square(sub(x_hat, x)))
