"""Per-task loss weights for the combined objective ``sum_t k_t * L_t``.

Four strategies are available:

* ``equal``    -- k = (1, 1)
* ``gradnorm`` -- learnable weights pulled towards equal gradient norms on the
  last shared layer, modulated by each task's relative inverse training rate
* ``mgda``     -- min-norm convex combination of the per-task gradients over
  all shared parameters
* ``mgda-ub``  -- the same, with gradients taken with respect to the last
  shared activation (cheaper upper-bound variant)
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, TrainingDiverged
from .tensor import Tensor, add, grad, mul

logger = logging.getLogger(__name__)

STRATEGIES = ("equal", "gradnorm", "mgda", "mgda-ub")
TIE_EPS = 1e-12


@dataclass
class TaskWeights:
    k: tuple
    strategy: str = "equal"
    gamma: float = None
    min_norm_sq: float = None
    grad_size: int = None

    def __post_init__(self):
        self.k = tuple(float(v) for v in self.k)
        if any(not np.isfinite(v) or v < 0 for v in self.k):
            raise InvalidArgument(f"task weights must be finite and non-negative, got {self.k}")


@dataclass
class LossBundle:
    losses: tuple
    weights: TaskWeights
    total: Tensor

    @property
    def values(self):
        return tuple(loss.item() for loss in self.losses)


@dataclass
class GradNormState:
    alpha: float = 1.5
    lr: float = 0.025
    num_tasks: int = 2
    floor: float = 1e-4
    w: np.ndarray = None
    initial_losses: np.ndarray = None
    updates: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidArgument(f"GradNorm alpha must be >= 0, got {self.alpha}")
        if self.w is None:
            self.w = np.ones(self.num_tasks)

    def weights(self):
        return TaskWeights(tuple(self.w), "gradnorm")


def equal_weights(num_tasks=2):
    return TaskWeights((1.0,) * num_tasks, "equal")


def combine_losses(losses, weights):
    """Differentiable ``sum_t k_t * L_t``."""
    k = weights.k if isinstance(weights, TaskWeights) else tuple(weights)
    if len(k) != len(losses):
        raise InvalidArgument(f"{len(losses)} losses but {len(k)} weights")
    for i, loss in enumerate(losses):
        if not np.isfinite(loss.data).all():
            raise TrainingDiverged(f"loss of task {i} is not finite: {loss.item()}")
    total = None
    for loss, kt in zip(losses, k):
        term = mul(loss, kt)
        total = term if total is None else add(total, term)
    return total


def bundle(losses, weights):
    return LossBundle(tuple(losses), weights, combine_losses(losses, weights))


# --------------------------------------------------------------------------
# MGDA


def min_norm_2task(g1, g2):
    """Minimise ``|gamma * g1 + (1 - gamma) * g2|^2`` over gamma in [0, 1].

    This is the exact line search of Frank-Wolfe on the two-point simplex.
    Returns ``(gamma, min_norm_sq)``.
    """
    g1 = np.asarray(g1, dtype=np.float64).ravel()
    g2 = np.asarray(g2, dtype=np.float64).ravel()
    if g1.shape != g2.shape:
        raise InvalidArgument(f"gradient lengths differ: {g1.size} vs {g2.size}")
    if not (np.isfinite(g1).all() and np.isfinite(g2).all()):
        raise InvalidArgument("min_norm_2task needs finite gradients")
    diff = g1 - g2
    denom = float(diff @ diff)
    if denom < TIE_EPS:
        gamma = 0.5
    else:
        gamma = float(np.clip(-(diff @ g2) / denom, 0.0, 1.0))
    d = gamma * g1 + (1.0 - gamma) * g2
    return gamma, float(d @ d)


def _flat(arrays):
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def mgda_from_gradients(g1, g2, strategy="mgda"):
    g1, g2 = _flat(g1), _flat(g2)
    gamma, norm_sq = min_norm_2task(g1, g2)
    if not g1.any() or not g2.any():
        logger.warning("%s: a task gradient is identically zero (gamma=%.3f)", strategy, gamma)
    return TaskWeights((gamma, 1.0 - gamma), strategy, gamma, norm_sq, g1.size)


def mgda_weights(model, loss_height, loss_semantics):
    """Min-norm weights from the gradients over every shared parameter.

    Pass ``None`` for a degenerate loss to fall back to equal weights.
    """
    if loss_height is None or loss_semantics is None:
        logger.warning("mgda: degenerate task loss, using equal weights for this iteration")
        return equal_weights()
    shared = model.shared_parameters()
    g1 = grad(loss_height, shared)
    g2 = grad(loss_semantics, shared)
    return mgda_from_gradients(g1, g2, "mgda")


def mgda_ub_weights(model, losses, last_shared):
    """Min-norm weights from gradients with respect to the last shared activation."""
    loss_height, loss_semantics = losses
    if loss_height is None or loss_semantics is None:
        logger.warning("mgda-ub: degenerate task loss, using equal weights for this iteration")
        return equal_weights()
    g1 = grad(loss_height, [last_shared])
    g2 = grad(loss_semantics, [last_shared])
    return mgda_from_gradients(g1, g2, "mgda-ub")


# --------------------------------------------------------------------------
# GradNorm


def _renormalize(w, total, floor):
    w = np.maximum(w, floor)
    w = w * (total / w.sum())
    low = w < floor
    if low.any():
        # pin starved tasks at the floor and rescale the rest to keep the sum
        w[low] = floor
        rest = total - floor * low.sum()
        w[~low] *= rest / w[~low].sum()
    return w


def gradnorm_step(state, loss_values, grad_norms):
    """Advance GradNorm given raw losses and the norms of d L_t / d W.

    ``grad_norms[t]`` is the norm of the unweighted task gradient on the last
    shared layer, so the weighted norm is ``G_t = w_t * grad_norms[t]``.
    """
    L = np.asarray(loss_values, dtype=np.float64)
    norms = np.asarray(grad_norms, dtype=np.float64)
    if state.initial_losses is None:
        state.initial_losses = np.maximum(L, 1e-8)
    G = state.w * norms
    if not (np.isfinite(G).all() and np.isfinite(L).all()):
        logger.warning("gradnorm: non-finite gradient norm, keeping weights %s", state.w)
        return state.weights()

    G_mean = G.mean()
    ratio = L / state.initial_losses
    inverse_rate = ratio / ratio.mean()
    target = G_mean * inverse_rate ** state.alpha
    # d/dw_t sum_s |G_s - target_s| with targets held constant
    dw = np.sign(G - target) * norms
    w = state.w - state.lr * dw
    state.w = _renormalize(w, float(state.num_tasks), state.floor)
    state.updates += 1
    return state.weights()


def gradnorm_update(state, losses, model):
    W = model.last_shared_weight
    norms = [float(np.linalg.norm(grad(loss, [W])[0].astype(np.float64))) for loss in losses]
    return gradnorm_step(state, [loss.item() for loss in losses], norms)


# --------------------------------------------------------------------------


@dataclass
class Balancer:
    """Strategy dispatcher owned by a training loop."""

    strategy: str = "equal"
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    gradnorm: GradNormState = field(default=None, repr=False)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidArgument(f"unknown balancing strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == "gradnorm" and self.gradnorm is None:
            self.gradnorm = GradNormState(alpha=self.gradnorm_alpha, lr=self.gradnorm_lr)

    def gradients(self, model, losses, last_shared=None):
        """Weights and combined parameter gradients for one iteration.

        Returns ``(TaskWeights, grads)`` with ``grads`` aligned to
        ``model.parameters()``.
        """
        params = model.parameters()
        if self.strategy == "equal":
            weights = equal_weights(len(losses))
            return weights, grad(combine_losses(losses, weights), params)

        if self.strategy == "gradnorm":
            # weights in force for this step; the update applies from the next one
            weights = self.gradnorm.weights()
            grads = grad(combine_losses(losses, weights), params)
            gradnorm_update(self.gradnorm, losses, model)
            return weights, grads

        if self.strategy == "mgda":
            g1 = grad(losses[0], params)
            g2 = grad(losses[1], params)
            shared = {id(p) for p in model.shared_parameters()}
            pick = [i for i, p in enumerate(params) if id(p) in shared]
            weights = mgda_from_gradients([g1[i] for i in pick], [g2[i] for i in pick], "mgda")
            gamma = np.float32(weights.gamma)
            grads = [gamma * a + (np.float32(1.0) - gamma) * b for a, b in zip(g1, g2)]
            return weights, grads

        if last_shared is None:
            raise InvalidArgument("mgda-ub needs the last shared activation from forward()")
        weights = mgda_ub_weights(model, losses, last_shared)
        return weights, grad(combine_losses(losses, weights), params)
