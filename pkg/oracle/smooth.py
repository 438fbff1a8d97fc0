"""
Accelerated first-order helpers shared by the reference solvers and the protocol's
inner x-update solver.
"""
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class SmoothResult:
    x: np.ndarray
    iters: int
    converged: bool
    residual: float


def accelerated_gradient(grad_fn, x0, lipschitz, tol, max_iters, prox=None):
    """
    FISTA with gradient-based adaptive restart.

    Args:
        grad_fn: gradient of the smooth part.
        x0 (ndarray): starting point (any shape).
        lipschitz (float): Lipschitz constant of ``grad_fn``; the step is 1/lipschitz.
        tol (float): stop once the gradient-mapping norm is at most ``tol``.
        max_iters (int): iteration budget.
        prox: optional proximal map ``prox(v, step)`` of the nonsmooth part.

    Returns:
        SmoothResult: the last iterate, the iterations used, and whether ``tol`` was met.
    """
    step = 1.0 / lipschitz
    x = np.array(x0, dtype=float)
    y = x.copy()
    t = 1.0
    residual = np.inf
    for k in range(1, max_iters + 1):
        v = y - step * grad_fn(y)
        x_next = prox(v, step) if prox is not None else v
        mapping = y - x_next
        residual = float(np.linalg.norm(mapping)) / step
        if residual <= tol:
            return SmoothResult(x_next, k, True, residual)
        if np.vdot(mapping, x_next - x) > 0:
            # momentum points uphill: restart
            t = 1.0
            y = x_next
        else:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_next + ((t - 1.0) / t_next) * (x_next - x)
            t = t_next
        x = x_next
    return SmoothResult(x, max_iters, False, residual)


def block_soft_threshold(v, threshold):
    """
    Proximal map of threshold * ||.|| applied along the last axis.

    BST(v, t) = (1 - t / ||v||)_+ v, with BST(0, t) = 0.
    """
    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    threshold = np.asarray(threshold, dtype=float)
    if threshold.ndim:
        threshold = threshold[..., None]
    shrink = np.maximum(0.0, 1.0 - np.divide(threshold, norms, out=np.full_like(norms, np.inf), where=norms > 0))
    shrink = np.where(norms > 0, shrink, 0.0)
    return shrink * v


def laplacian_prox(weight, n_models):
    """
    Proximal map of weight * sum_{k != l} ||x_k - x_l||^2 over a stack of n_models rows.

    The coupling is 2 * weight * X^T (m I - 1 1^T) X: the mean is kept and the
    deviations shrink by 1 / (1 + 4 step weight m).
    """
    def prox(v, step):
        mean = v.mean(axis=0, keepdims=True)
        return mean + (v - mean) / (1.0 + 4.0 * step * weight * n_models)
    return prox
