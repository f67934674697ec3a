"""L-infinity adversarial attacks: FGSM initialisation schemes, the
single-step FGSM update, multi-step PGD and a margin-loss PGD."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from fatlab.autodiff import Graph, backward, forward
from fatlab.models import ModelParams, mlp

INIT_SCHEMES = ("zero", "normal_half", "uniform_full", "bernoulli_half", "atta_prior", "pgi_momentum")
PRIOR_SCHEMES = ("atta_prior", "pgi_momentum")
LOSSES = ("cross_entropy", "margin")

# training step size as a multiple of epsilon for each scheme
DEFAULT_ALPHA_FACTOR = {
    "zero": 1.0,
    "normal_half": 0.5,
    "uniform_full": 1.25,
    "bernoulli_half": 1.0,
    "atta_prior": 1.0,
    "pgi_momentum": 1.0,
}


class AttackError(Exception):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float | None = None
    steps: int = 1
    init_scheme: str = "zero"
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init_scheme!r}; expected one of {INIT_SCHEMES}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown attack loss {self.loss!r}; expected one of {LOSSES}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", DEFAULT_ALPHA_FACTOR[self.init_scheme] * self.epsilon)
        if self.alpha < 0 or (self.alpha == 0 and self.epsilon > 0):
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        """Same attack at a different budget, step size scaled proportionally."""
        if self.epsilon == 0:
            raise ValueError("cannot rescale an attack with epsilon 0")
        return replace(self, epsilon=epsilon, alpha=self.alpha * epsilon / self.epsilon)


def pgd_config(epsilon: float, steps: int = 10, alpha: float | None = None,
               init_scheme: str = "uniform_full") -> AttackConfig:
    """Evaluation PGD; step size defaults to epsilon/4 (2/255 at 8/255)."""
    return AttackConfig(epsilon, epsilon / 4 if alpha is None else alpha, steps, init_scheme)


def margin_config(epsilon: float, steps: int = 20, alpha: float | None = None) -> AttackConfig:
    return AttackConfig(epsilon, epsilon / 10 if alpha is None else alpha, steps, "zero", "margin")


def project(x: np.ndarray, delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp to the epsilon ball, then shrink so ``x + delta`` stays in [0, 1]."""
    delta = np.clip(delta, -epsilon, epsilon)
    return np.clip(delta, -x, 1.0 - x)


# -- objectives ----------------------------------------------------------

def add_loss(g: Graph, logits, labels, loss: str):
    """Per-row attack/training loss node.  ``labels`` is an int array or a
    ``(y1, y2, weight)`` mixed-label triple."""
    if isinstance(labels, tuple):
        y1, y2, w = labels
        first = g.softmax_ce(logits, g.const(y1)) if loss == "cross_entropy" else g.margin(logits, g.const(y1))
        second = g.softmax_ce(logits, g.const(y2)) if loss == "cross_entropy" else g.margin(logits, g.const(y2))
        return g.mul(first, g.const(w)) + g.mul(second, g.const(1.0 - np.asarray(w)))
    node = g.input("y")
    return g.softmax_ce(logits, node) if loss == "cross_entropy" else g.margin(logits, node)


def loss_graph(params: ModelParams, labels, loss: str = "cross_entropy") -> Graph:
    g = Graph()
    logits, _ = mlp(g, params.spec, g.input("x"))
    g.set_output("loss", g.sum(add_loss(g, logits, labels, loss)))
    return g


def input_gradient(params: ModelParams, x: np.ndarray, labels, loss: str = "cross_entropy") -> np.ndarray:
    """Gradient of the batch-summed loss with respect to the input batch."""
    g = loss_graph(params, labels, loss)
    bindings = {"x": x, **params.bindings()}
    if not isinstance(labels, tuple):
        bindings["y"] = np.asarray(labels)
    forward(g, bindings)
    return backward(g, "loss", ["x"])["x"].data


GradFn = Callable[[np.ndarray], np.ndarray]


# -- initialisation ------------------------------------------------------

class PriorState:
    """Per-sample stored perturbations (and signed-gradient momentum for PGI).

    Rows are indexed by the stable dataset index of each sample.  Updates
    mutate the arrays in place; one writer per epoch.
    """

    def __init__(self, n_samples: int, dim: int, epsilon: float, momentum: float = 0.3, dtype=np.float64):
        self.eta = np.zeros((n_samples, dim), dtype=dtype)
        self.grad = np.zeros((n_samples, dim), dtype=dtype)
        self.epsilon = epsilon
        self.momentum = momentum

    def _check(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.eta)):
            raise AttackError(f"sample id out of range [0, {len(self.eta)})")
        return ids

    def lookup(self, ids) -> np.ndarray:
        return self.eta[self._check(ids)].copy()


def sample_init(scheme: str, epsilon: float, shape, prior: PriorState | None = None,
                sample_ids=None, rng: np.random.Generator | None = None, dtype=np.float64) -> np.ndarray:
    if scheme == "zero":
        return np.zeros(shape, dtype=dtype)
    if scheme in PRIOR_SCHEMES:
        if prior is None or sample_ids is None:
            raise AttackError(f"{scheme} initialisation needs a prior state and sample ids")
        return prior.lookup(sample_ids).reshape(shape).astype(dtype, copy=False)
    if scheme not in INIT_SCHEMES:
        raise AttackError(f"unknown init scheme {scheme!r}")
    if rng is None:
        raise AttackError(f"{scheme} initialisation needs an rng")
    if scheme == "normal_half":
        eta = np.clip(epsilon / 2 * rng.standard_normal(shape), -epsilon, epsilon)
    elif scheme == "uniform_full":
        eta = epsilon * rng.uniform(-1.0, 1.0, shape)
    else:
        eta = epsilon / 2 * (2.0 * rng.integers(0, 2, shape) - 1.0)
    return eta.astype(dtype, copy=False)


def update_prior_state(state: PriorState, sample_ids, delta: np.ndarray, signed_grad: np.ndarray,
                       scheme: str, alpha: float) -> PriorState:
    """ATTA keeps the latest perturbation; PGI folds the signed gradient into
    its momentum and advances the stored initialisation along it."""
    ids = state._check(sample_ids)
    eps = state.epsilon
    if scheme == "atta_prior":
        state.eta[ids] = np.clip(delta, -eps, eps)
    elif scheme == "pgi_momentum":
        g = state.momentum * state.grad[ids] + signed_grad
        state.grad[ids] = g
        state.eta[ids] = np.clip(state.eta[ids] + alpha * np.sign(g), -eps, eps)
    else:
        raise AttackError(f"scheme {scheme!r} keeps no prior state")
    return state


# -- attacks -------------------------------------------------------------

def fgsm_step(params: ModelParams | None, x: np.ndarray, y, eta: np.ndarray, alpha: float, epsilon: float,
              loss: str = "cross_entropy", grad_fn: GradFn | None = None,
              return_signed_grad: bool = False):
    """One signed-gradient step from ``x + eta``, projected to the ball and box.

    ``grad_fn`` overrides the model loss gradient (used when the attack
    objective carries a regulariser, and for closed-form test objectives).
    """
    eta = project(x, eta, epsilon)
    point = x + eta
    g = grad_fn(point) if grad_fn is not None else input_gradient(params, point, y, loss)
    if not np.all(np.isfinite(g)):
        bad = np.argwhere(~np.isfinite(g))
        raise AttackError(f"non-finite input gradient at {len(bad)} coordinates, first {bad[0].tolist()}")
    signed = np.sign(g)
    delta = project(x, eta + alpha * signed, epsilon)
    return (delta, signed) if return_signed_grad else delta


def pgd(params: ModelParams, x: np.ndarray, y, config: AttackConfig, rng: np.random.Generator | None = None,
        init: np.ndarray | None = None, grad_fn: GradFn | None = None) -> np.ndarray:
    """Iterated FGSM.  ``init`` overrides the configured initialisation."""
    if init is None:
        if config.init_scheme in PRIOR_SCHEMES:
            raise AttackError("prior-based initialisation is only available inside training")
        init = sample_init(config.init_scheme, config.epsilon, x.shape, rng=rng, dtype=x.dtype)
    delta = project(x, init, config.epsilon)
    for _ in range(config.steps):
        delta = fgsm_step(params, x, y, delta, config.alpha, config.epsilon, config.loss, grad_fn)
    return delta


def margin_pgd(params: ModelParams, x: np.ndarray, y, config: AttackConfig,
               rng: np.random.Generator | None = None, init: np.ndarray | None = None) -> np.ndarray:
    """PGD on ``max_{j != y} z_j - z_y``; the stand-in for a C&W evaluation."""
    return pgd(params, x, y, replace(config, loss="margin"), rng, init)


def margin_loss(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    rows = np.arange(len(y))
    others = np.array(logits, dtype=float)
    others[rows, y] = -np.inf
    return others.max(axis=1) - np.asarray(logits)[rows, y]
