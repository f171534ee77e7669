"""Differentiable KG operations and a small reverse-mode tape.

Every forward op has a matching ``*_vjp`` that maps an upstream gradient to
gradients of the inputs. :class:`GradTape` records the ops a forward pass
executes and replays their VJPs in reverse.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from .kgstore import ReifiedMatrices, ShardedMatrices

Matrices = ReifiedMatrices | ShardedMatrices


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


# -- follow --------------------------------------------------------------------


def _check_follow(x: np.ndarray, r: np.ndarray, m: Matrices) -> None:
    if x.shape != (m.n_entities,) or r.shape != (m.n_relations,):
        raise ShapeError(
            f"follow expects x of length {m.n_entities} and r of length {m.n_relations}, "
            f"got {x.shape} and {r.shape}"
        )


def _follow_one(x, r, m: ReifiedMatrices) -> np.ndarray:
    return m.m_o.rmatvec(m.m_s.matvec(x) * m.m_p.matvec(r))


def _ordered_sum(parts: Sequence[np.ndarray]) -> np.ndarray:
    out = parts[0].copy()
    for p in parts[1:]:
        out += p
    return out


def _map_shards(fn, shards, workers: int):
    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, shards))
    return [fn(s) for s in shards]


def follow(x: np.ndarray, r: np.ndarray, m: Matrices, workers: int = 1) -> np.ndarray:
    """``M_o^T (M_s x * M_p r)``.

    On sharded matrices, partial results are reduced in shard-range order
    regardless of how many workers computed them.
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    _check_follow(x, r, m)
    if isinstance(m, ShardedMatrices):
        return _ordered_sum(_map_shards(lambda s: _follow_one(x, r, s), m.shards, workers))
    return _follow_one(x, r, m)


def _follow_vjp_one(x, r, m: ReifiedMatrices, g):
    og = m.m_o.matvec(g)
    gx = m.m_s.rmatvec(og * m.m_p.matvec(r))
    gr = m.m_p.rmatvec(og * m.m_s.matvec(x))
    return gx, gr


def follow_vjp(x, r, m: Matrices, g, workers: int = 1):
    """Gradients ``(M_s^T(M_o g * M_p r), M_p^T(M_o g * M_s x))``."""
    if isinstance(m, ShardedMatrices):
        parts = _map_shards(lambda s: _follow_vjp_one(x, r, s, g), m.shards, workers)
        return _ordered_sum([p[0] for p in parts]), _ordered_sum([p[1] for p in parts])
    return _follow_vjp_one(x, r, m, g)


# -- intersection ----------------------------------------------------------------


def intersect_min(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"intersect_min length mismatch: {a.shape} vs {b.shape}")
    return np.minimum(a, b)


def intersect_min_vjp(a, b, g):
    # ties split evenly so swapping the arguments swaps the gradients
    wa = np.where(a < b, 1.0, np.where(a == b, 0.5, 0.0))
    return g * wa, g * (1.0 - wa)


# -- softmax / clamp / loss ------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_vjp(y, g):
    return y * (g - np.dot(g, y))


def clamp_unit(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    return np.clip(x, eps, 1.0 - eps)


def clamp_unit_vjp(x, eps, g):
    return np.where((x > eps) & (x < 1.0 - eps), g, 0.0)


def multilabel_loss(y: np.ndarray, yhat: np.ndarray) -> float:
    """Mean binary cross-entropy over all entities (negated log-likelihood, so lower is better)."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeError(f"label/prediction length mismatch: {y.shape} vs {yhat.shape}")
    if np.any(yhat <= 0.0) or np.any(yhat >= 1.0):
        raise ValueError("predictions must lie strictly inside (0, 1); clamp before the loss")
    return float(-np.mean(y * np.log(yhat) + (1.0 - y) * np.log1p(-yhat)))


def multilabel_loss_grad(y, yhat):
    return (yhat - y) / (yhat * (1.0 - yhat)) / len(y)


# -- tape ----------------------------------------------------------------------------


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "index", "requires_grad", "name")

    def __init__(self, value, index: int, requires_grad: bool, name: str | None = None):
        self.value = value
        self.index = index
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var#{self.index}{tag}({np.shape(self.value)})"


class GradTape:
    """Ordered record of executed ops; :func:`backward` walks it in reverse."""

    def __init__(self, matrices: Matrices | None = None, workers: int = 1):
        self.matrices = matrices
        self.workers = workers
        self._n_vars = 0
        self.nodes: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self.params: dict[str, Var] = {}

    def _new(self, value, requires_grad=False, name=None) -> Var:
        v = Var(value, self._n_vars, requires_grad, name)
        self._n_vars += 1
        return v

    def param(self, name: str, value: np.ndarray) -> Var:
        v = self._new(np.asarray(value, dtype=np.float64), True, name)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        return self._new(np.asarray(value, dtype=np.float64))

    def record(self, value, parents: Sequence[Var], vjp: Callable) -> Var:
        """Append an op; ``vjp(g)`` must return one gradient per parent."""
        out = self._new(value, any(p.requires_grad for p in parents))
        self.nodes.append((out, tuple(parents), vjp))
        return out

    # ops ---------------------------------------------------------------------

    def follow(self, x: Var, r: Var) -> Var:
        m = self.matrices
        if m is None:
            raise TapeError("tape has no KG matrices bound")
        xv, rv = x.value, r.value
        return self.record(
            follow(xv, rv, m, self.workers), (x, r), lambda g: follow_vjp(xv, rv, m, g, self.workers)
        )

    def intersect_min(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self.record(intersect_min(av, bv), (a, b), lambda g: intersect_min_vjp(av, bv, g))

    def softmax(self, z: Var) -> Var:
        y = softmax(z.value)
        return self.record(y, (z,), lambda g: (softmax_vjp(y, g),))

    def clamp_unit(self, x: Var, eps: float) -> Var:
        xv = x.value
        return self.record(clamp_unit(xv, eps), (x,), lambda g: (clamp_unit_vjp(xv, eps, g),))

    def multilabel_loss(self, y: np.ndarray, yhat: Var) -> Var:
        y = np.asarray(y, dtype=np.float64)
        yv = yhat.value
        loss = multilabel_loss(y, yv)
        return self.record(np.float64(loss), (yhat,), lambda g: (g * multilabel_loss_grad(y, yv),))

    def matvec(self, w: Var, v: Var) -> Var:
        W, x = w.value, v.value
        return self.record(W @ x, (w, v), lambda g: (np.outer(g, x), W.T @ g))

    def concat(self, parts: Sequence[Var]) -> Var:
        sizes = [np.size(p.value) for p in parts]
        cuts = np.cumsum(sizes)[:-1]
        value = np.concatenate([np.atleast_1d(p.value) for p in parts])
        return self.record(value, parts, lambda g: tuple(np.split(g, cuts)))

    def add(self, a: Var, b: Var) -> Var:
        return self.record(a.value + b.value, (a, b), lambda g: (g, g))

    def mean_rows(self, table: Var, ids: Sequence[int]) -> Var:
        """Mean of the selected rows of ``table``."""
        ids = np.asarray(ids, dtype=np.int64)
        T = table.value
        n = len(ids)

        def vjp(g):
            gt = np.zeros_like(T)
            np.add.at(gt, ids, g / n)
            return (gt,)

        return self.record(T[ids].mean(axis=0), (table,), vjp)

    def weighted_sum(self, weights: Var, xs: Sequence[Var]) -> Var:
        """``sum_t weights[t] * xs[t]``"""
        a = weights.value
        X = np.stack([x.value for x in xs])

        def vjp(g):
            return (X @ g, *(a[t] * g for t in range(len(xs))))

        return self.record(a @ X, (weights, *xs), vjp)

    def mean(self, xs: Sequence[Var]) -> Var:
        n = len(xs)
        return self.record(sum(x.value for x in xs) / n, xs, lambda g: tuple(g / n for _ in xs))


def backward(tape: GradTape, output: Var, loss_seed: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of ``output`` with respect to every parameter registered on the tape.

    Parameters that ``output`` does not depend on get zero gradients. A tape
    without parameters yields an empty dict.
    """
    if not tape.nodes:
        raise TapeError("backward called before any forward op was recorded")
    grads: dict[int, np.ndarray] = {output.index: np.asarray(loss_seed, dtype=np.float64)}
    if output.requires_grad:
        for out, parents, vjp in reversed(tape.nodes):
            g = grads.pop(out.index, None)
            if g is None or not out.requires_grad:
                continue
            for p, gp in zip(parents, vjp(g)):
                if not p.requires_grad:
                    continue
                if p.index in grads:
                    grads[p.index] = grads[p.index] + gp
                else:
                    grads[p.index] = gp
    return {
        name: np.asarray(grads.get(v.index, np.zeros_like(v.value)), dtype=np.float64).reshape(
            np.shape(v.value)
        )
        for name, v in tape.params.items()
    }
