"""Squash, prediction vectors and routing-by-agreement.

Routing works on batched votes ``(batch, I children, J parents, D)``.
A :class:`RoutingGrouping` maps every child capsule to a group; all
children of one group share a single row of routing coefficients. The
identity grouping is plain dynamic routing, and grouping by pixel
location gives consistent routing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, matmul_batched, record, reshape, softmax_array, transpose

SQUASH_EPS = 1e-8


def squash_array(s: np.ndarray) -> np.ndarray:
    sq = np.sum(s * s, axis=-1, keepdims=True)
    return (sq / (1.0 + sq) / np.sqrt(sq + SQUASH_EPS)) * s


def squash(s) -> Tensor:
    """Scale each vector on the last axis to length ``|s|^2 / (1 + |s|^2)``."""
    s = as_tensor(s)
    sq = np.sum(s.data * s.data, axis=-1, keepdims=True)
    ne = np.sqrt(sq + SQUASH_EPS)
    scale = sq / (1.0 + sq) / ne
    out = scale * s.data

    def grad_fn(g):
        # d scale / d sq, then chain through sq = |s|^2
        dscale = 1.0 / ((1.0 + sq) ** 2 * ne) - 0.5 * sq / ((1.0 + sq) * ne**3)
        gs = scale * g + 2.0 * s.data * dscale * np.sum(g * s.data, axis=-1, keepdims=True)
        return (gs,)

    return record(out, (s,), grad_fn, "squash")


def predict_votes(u, W) -> Tensor:
    """Prediction vectors ``u_hat[b, i, j] = u[b, i] @ W[i, j]``.

    ``u`` is ``(batch, I, D_in)`` (or ``(I, D_in)``) and ``W`` is
    ``(I, J, D_in, D_out)``. Returns ``(batch, I, J, D_out)``, or
    ``(I, J, D_out)`` for unbatched input.
    """
    u, W = as_tensor(u), as_tensor(W)
    batched = u.ndim == 3
    if not batched:
        u = reshape(u, (1,) + u.shape)
    if W.ndim != 4:
        raise ShapeError(f"W must be (I, J, D_in, D_out), got {W.shape}")
    b, n_in, d_in = u.shape
    i, j, wd_in, d_out = W.shape
    if n_in != i or d_in != wd_in:
        raise ShapeError(f"u {u.shape} incompatible with W {W.shape}")
    # one (batch x D_in) @ (D_in x J*D_out) product per child capsule
    lhs = transpose(u, (1, 0, 2))
    rhs = reshape(W.transpose(0, 2, 1, 3), (i, d_in, j * d_out))
    votes = matmul_batched(lhs, rhs)  # (I, B, J*D_out)
    votes = transpose(reshape(votes, (i, b, j, d_out)), (1, 0, 2, 3))
    if not batched:
        votes = reshape(votes, (i, j, d_out))
    return votes


@dataclass(frozen=True)
class RoutingGrouping:
    """Child capsule -> coefficient-row assignment."""

    group_of: np.ndarray
    n_groups: int = field(init=False)

    def __post_init__(self):
        g = np.asarray(self.group_of, dtype=np.int64)
        if g.ndim != 1 or g.size == 0:
            raise ValueError("grouping must map at least one child")
        uniq = np.unique(g)
        if uniq[0] != 0 or uniq[-1] != uniq.size - 1:
            raise ValueError("group ids must be contiguous from 0")
        object.__setattr__(self, "group_of", g)
        object.__setattr__(self, "n_groups", int(uniq.size))

    @classmethod
    def identity(cls, n_children: int) -> "RoutingGrouping":
        return cls(np.arange(n_children))

    @classmethod
    def by_location(cls, n_locations: int, caps_per_location: int) -> "RoutingGrouping":
        """Children ordered location-major; all capsules at one location share coefficients."""
        return cls(np.repeat(np.arange(n_locations), caps_per_location))

    @property
    def n_children(self) -> int:
        return self.group_of.size

    @property
    def is_identity(self) -> bool:
        return self.n_groups == self.n_children and bool(np.all(self.group_of == np.arange(self.n_children)))

    def membership(self, dtype) -> np.ndarray:
        m = np.zeros((self.n_children, self.n_groups), dtype=dtype)
        m[np.arange(self.n_children), self.group_of] = 1
        return m


@dataclass
class RoutingState:
    logits: np.ndarray  # (batch, G, J)
    coefficients: np.ndarray  # (batch, G, J)
    iterations: int
    trace: list[dict] | None = None


def coefficient_count(n_children: int, n_parents: int, grouping: RoutingGrouping | None = None) -> int:
    """Number of distinct routing coefficients, ``G * J``."""
    if grouping is None:
        return n_children * n_parents
    if grouping.n_children != n_children:
        raise ValueError(f"grouping covers {grouping.n_children} children, expected {n_children}")
    return grouping.n_groups * n_parents


def weighted_sum_array(votes: np.ndarray, c_child: np.ndarray) -> np.ndarray:
    # s[b, j] = sum_i c[b, i, j] * votes[b, i, j]
    return np.einsum("bij,bijd->bjd", c_child, votes)


def weighted_sum(votes: Tensor, c_child: np.ndarray) -> Tensor:
    """``s_j = sum_i c_ij u_hat_j|i`` with ``c`` held constant."""
    return record(weighted_sum_array(votes.data, c_child), (votes,),
                  lambda g: (c_child[..., None] * g[:, None, :, :],), "weighted_sum")


def _expand(c: np.ndarray, grouping: RoutingGrouping) -> np.ndarray:
    if grouping.is_identity:
        return c
    return c[:, grouping.group_of, :]


def route(votes, grouping: RoutingGrouping | None = None, iterations: int = 3,
          coefficients: np.ndarray | None = None, trace: bool = False):
    """Routing by agreement on ``votes`` of shape ``(batch, I, J, D)`` or ``(I, J, D)``.

    Logits start at zero. Each iteration sets ``c = softmax_J(b)``,
    ``v = squash(sum_i c u_hat)`` and adds the summed agreement of every
    group's members to that group's logits. The returned ``v`` is
    differentiable w.r.t. the votes with the final coefficients treated as
    constants. Passing ``coefficients`` (``(batch, G, J)``) skips the
    iterations and uses them directly.

    Returns ``(v, s, state)``.
    """
    votes = as_tensor(votes)
    batched = votes.ndim == 4
    if not batched:
        votes = reshape(votes, (1,) + votes.shape)
    b, n, j, _ = votes.shape
    if grouping is None:
        grouping = RoutingGrouping.identity(n)
    if grouping.n_children != n:
        raise ValueError(f"grouping covers {grouping.n_children} children, votes have {n}")
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    u_hat = votes.data
    history = [] if trace else None

    if coefficients is None:
        logits = np.zeros((b, grouping.n_groups, j), dtype=u_hat.dtype)
        member = None if grouping.is_identity else grouping.membership(u_hat.dtype)
        for it in range(iterations):
            c = softmax_array(logits, axis=-1)
            if it == iterations - 1:
                break
            v = squash_array(weighted_sum_array(u_hat, _expand(c, grouping)))
            agreement = np.einsum("bijd,bjd->bij", u_hat, v)
            if member is not None:
                agreement = np.einsum("bij,ig->bgj", agreement, member)
            if trace:
                history.append({"iteration": it + 1, "logits": logits.copy(), "coefficients": c, "v": v})
            logits = logits + agreement
    else:
        c = np.asarray(coefficients, dtype=u_hat.dtype)
        if c.shape != (b, grouping.n_groups, j):
            raise ShapeError(f"coefficients shape {c.shape} != {(b, grouping.n_groups, j)}")
        logits = np.log(c)

    s = weighted_sum(votes, _expand(c, grouping))
    v = squash(s)
    if trace:
        history.append({"iteration": iterations, "logits": logits.copy(), "coefficients": c, "v": v.data})
    if not batched:
        s = reshape(s, s.shape[1:])
        v = reshape(v, v.shape[1:])
    return v, s, RoutingState(logits, c, iterations, history)


def write_trace_csv(state: RoutingState, path: str | Path) -> None:
    """Dump logits and coefficients per iteration as long-format CSV."""
    if not state.trace:
        raise ValueError("state carries no trace; call route(..., trace=True)")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "sample", "group", "parent", "logit", "coefficient"])
        for step in state.trace:
            lg, cf = step["logits"], step["coefficients"]
            for idx in np.ndindex(*cf.shape):
                w.writerow([step["iteration"], *idx, repr(float(lg[idx])), repr(float(cf[idx]))])
