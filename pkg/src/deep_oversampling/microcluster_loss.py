"""Micro-cluster losses over a neighbor set ``N(x)`` in the embedding space.

Plain (unweighted) forms treat ``N(x)`` as a small in-class cluster; the
weighted forms attach a simplex weight vector ``w`` (one weight per element
of ``N(x)``, self included) that defines the synthetic target ``sum_i w_i v_i``.
"""
from __future__ import annotations

import numpy as np

from .dualhead_net import DataError

PROB_FLOOR = 1e-12


def cross_entropy(probs, y: int) -> float:
    """``-log(probs[y])`` with the probability floored at 1e-12."""
    probs = np.asarray(probs)
    if not 0 <= y < probs.shape[-1]:
        raise DataError(f"label {y} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(float(probs[y]), PROB_FLOOR)))


def _neighbors(fx, neighbors) -> tuple:
    fx = np.asarray(fx)
    nb = np.asarray(neighbors)
    if nb.ndim != 2 or len(nb) == 0:
        raise DataError("neighbor set must be a nonempty list of vectors")
    if nb.shape[1] != fx.shape[-1]:
        raise DataError(f"neighbor dimension {nb.shape[1]} != {fx.shape[-1]}")
    return fx, nb


def squared_distances(fx, neighbors) -> np.ndarray:
    fx, nb = _neighbors(fx, neighbors)
    return np.sum((nb - fx[None, :]) ** 2, axis=1)


def _weights(w, n: int) -> np.ndarray:
    w = np.asarray(w)
    if w.ndim != 1 or len(w) != n:
        raise DataError(f"weight arity {np.shape(w)} does not match {n} neighbors")
    return w


def _normalized_exp(neg_exponent: np.ndarray) -> np.ndarray:
    # max shift cancels after normalization
    e = np.exp(neg_exponent - neg_exponent.max())
    return e / e.sum()


def loss_f(fx, neighbors) -> float:
    """Sum of squared errors between ``fx`` and every element of ``N(x)``."""
    return float(squared_distances(fx, neighbors).sum())


def loss_f_grad(fx, neighbors) -> np.ndarray:
    fx, nb = _neighbors(fx, neighbors)
    return 2.0 * (len(nb) * fx - nb.sum(axis=0))


def rho(fx, neighbors) -> np.ndarray:
    """Normalized exponential weights ``exp(-||fx - v||^2) / Z``."""
    return _normalized_exp(-squared_distances(fx, neighbors))


def _aligned(g_outputs, weights) -> np.ndarray:
    g = np.asarray(g_outputs)
    if g.ndim != 2 or len(g) != len(weights):
        raise DataError(f"{len(g)} classifier outputs for {len(weights)} weights")
    return g


def loss_g(g_outputs, y: int, rho_weights) -> float:
    """``sum_v rho(v) * H(g(v), y)``."""
    g = _aligned(g_outputs, rho_weights)
    return float(sum(r * cross_entropy(p, y) for r, p in zip(rho_weights, g)))


def weighted_loss_f(fx, neighbors, w) -> float:
    """``sum_i w_i ||fx - v_i||^2``; minimized at ``fx = sum_i w_i v_i``."""
    d = squared_distances(fx, neighbors)
    return float(np.dot(_weights(w, len(d)), d))


def weighted_loss_f_grad(fx, neighbors, w) -> np.ndarray:
    fx, nb = _neighbors(fx, neighbors)
    w = _weights(w, len(nb))
    return 2.0 * (w.sum() * fx - w @ nb)


def rho_weighted(fx, neighbors, w) -> np.ndarray:
    """``exp(-w_i ||fx - v_i||^2) / Z'`` over the neighbor set."""
    d = squared_distances(fx, neighbors)
    return _normalized_exp(-_weights(w, len(d)) * d)


def weighted_loss_g(g_outputs, y: int, rho_weights) -> float:
    g = _aligned(g_outputs, rho_weights)
    return float(sum(r * cross_entropy(p, y) for r, p in zip(rho_weights, g)))
