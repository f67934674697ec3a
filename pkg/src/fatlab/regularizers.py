"""Output-smoothness regularisers and the composite adversarial training loss.

The builders (``add_*``) append nodes to an existing graph so the training
objective and the standalone functions share one arithmetic path.  The
public ``*_reg`` functions accept either graph nodes (returning a node) or
plain arrays (returning the float value).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from fatlab.attacks import add_loss, input_gradient
from fatlab.autodiff import Graph, Var, as_array, backward, forward
from fatlab.models import ModelParams, mlp

log = logging.getLogger(__name__)

KINDS = ("none", "guided", "nuclear", "lipschitz")
PLACEMENTS = ("min_only", "min_max")
MAX_NUCLEAR_DIM = 512


class RegularizerError(Exception):
    pass


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "lipschitz"
    lam: float = 12.0
    placement: str = "min_only"
    norm_floor: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regulariser {self.kind!r}; expected one of {KINDS}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if not self.norm_floor > 0:
            raise ValueError(f"norm_floor must be > 0, got {self.norm_floor}")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.lam != 0

    @property
    def in_attack(self) -> bool:
        return self.active and self.placement == "min_max"

    @property
    def reference(self) -> str:
        """Which point the regulariser compares the adversarial output with."""
        return "eta" if self.kind == "lipschitz" else "clean"


def _check_same(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise RegularizerError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# -- graph builders --------------------------------------------------------

def add_guided(g: Graph, logits_adv: Var, logits_clean: Var, lam: float) -> Var:
    per_row = g.l2sq(g.sub(logits_adv, logits_clean), axis=1)
    return g.scale(g.mean(per_row), lam)


def _nuclear_fn(lam: float):
    def fn(a: np.ndarray):
        if a.ndim != 2 or max(a.shape) > MAX_NUCLEAR_DIM:
            raise RegularizerError(f"nuclear norm needs a matrix with sides <= {MAX_NUCLEAR_DIM}, got {a.shape}")
        try:
            u, s, vt = np.linalg.svd(a, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise RegularizerError(f"SVD did not converge on a {a.shape} matrix: {exc}") from exc
        # singular vectors held fixed: subgradient U V^T
        sub = u @ vt
        return lam * s.sum(), lambda g: (g * lam * sub,)
    return fn


def add_nuclear(g: Graph, logits_adv: Var, logits_clean: Var, lam: float) -> Var:
    return g.custom(_nuclear_fn(lam), g.sub(logits_adv, logits_clean), name="nuclear")


def lipschitz_weights(delta: np.ndarray, eta: np.ndarray, norm_floor: float) -> np.ndarray:
    """Per-row ``1 / max(||delta - eta||^2, floor)``; a constant for backward."""
    diff = np.asarray(delta) - np.asarray(eta)
    sq = np.sum(diff.reshape(len(diff), -1) ** 2, axis=1)
    return 1.0 / np.maximum(sq, norm_floor)


def add_lipschitz(g: Graph, logits_adv: Var, logits_eta: Var, feat_adv: Var, feat_eta: Var,
                  weights: np.ndarray, lam: float) -> Var:
    out_term = g.l2sq(g.sub(logits_adv, logits_eta), axis=1)
    feat_term = g.l2sq(g.sub(feat_adv, feat_eta), axis=1)
    per_row = g.mul(g.add(out_term, feat_term), g.const(weights))
    return g.scale(g.mean(per_row), lam)


# -- standalone forms ------------------------------------------------------

def _eager(build, **arrays) -> float:
    g = Graph()
    nodes = {k: g.input(k) for k in arrays}
    g.set_output("r", build(g, **nodes))
    return forward(g, arrays)["r"].item()


def guided_reg(logits_adv, logits_clean, lam: float):
    """``lam * mean_b ||z_adv - z_clean||^2``."""
    if isinstance(logits_adv, Var):
        return add_guided(logits_adv.graph, logits_adv, logits_clean, lam)
    a, c = as_array(logits_adv), as_array(logits_clean)
    _check_same("guided_reg", a, c)
    return _eager(lambda g, a, c: add_guided(g, a, c, lam), a=a, c=c)


def nuclear_reg(logits_adv, logits_clean, lam: float):
    """``lam * ||Z_adv - Z_clean||_*`` over the batch matrix."""
    if isinstance(logits_adv, Var):
        return add_nuclear(logits_adv.graph, logits_adv, logits_clean, lam)
    a, c = as_array(logits_adv), as_array(logits_clean)
    _check_same("nuclear_reg", a, c)
    return _eager(lambda g, a, c: add_nuclear(g, a, c, lam), a=a, c=c)


def nuclear_norm(a) -> float:
    return nuclear_reg(as_array(a), np.zeros_like(as_array(a)), 1.0)


def lipschitz_reg(logits_adv, logits_eta, feat_adv, feat_eta, delta, eta, lam: float,
                  norm_floor: float = 1e-8):
    """Squared output and feature change between ``x+delta`` and ``x+eta``
    per unit squared input change, averaged over the batch, times ``lam``."""
    delta, eta = as_array(delta), as_array(eta)
    _check_same("lipschitz_reg", delta, eta)
    weights = lipschitz_weights(delta, eta, norm_floor)
    if isinstance(logits_adv, Var):
        return add_lipschitz(logits_adv.graph, logits_adv, logits_eta, feat_adv, feat_eta, weights, lam)
    la, le, fa, fe = (as_array(v) for v in (logits_adv, logits_eta, feat_adv, feat_eta))
    _check_same("lipschitz_reg logits", la, le)
    _check_same("lipschitz_reg features", fa, fe)
    if len(la) != len(delta):
        raise RegularizerError(f"lipschitz_reg: {len(la)} output rows vs {len(delta)} perturbation rows")
    return _eager(lambda g, la, le, fa, fe: add_lipschitz(g, la, le, fa, fe, weights, lam),
                  la=la, le=le, fa=fa, fe=fe)


def grad_alignment_metric(params: ModelParams, x: np.ndarray, y, eta: np.ndarray) -> float:
    """``1 - cos`` between the input gradients at ``x`` and ``x + eta``.

    A local-linearity diagnostic; never part of a training loss.
    """
    g_clean = input_gradient(params, x, y).reshape(-1)
    g_eta = input_gradient(params, np.clip(x + eta, 0.0, 1.0), y).reshape(-1)
    norm_sq = float(np.dot(g_clean, g_clean)) * float(np.dot(g_eta, g_eta))
    if norm_sq == 0.0:
        log.warning("gradient alignment: zero-norm input gradient, reporting 1")
        return 1.0
    if np.array_equal(g_clean, g_eta):
        return 0.0
    cos = float(np.dot(g_clean, g_eta)) / np.sqrt(norm_sq)
    return float(np.clip(1.0 - cos, 0.0, 2.0))


# -- composite objective ---------------------------------------------------

@dataclass
class LossResult:
    total: float
    ce: float
    reg: float
    grads: list[np.ndarray]
    logits_adv: np.ndarray
    logits_ref: np.ndarray | None


def objective_graph(params: ModelParams, labels, spec: RegularizerSpec,
                    weights: np.ndarray | None = None, include_reg: bool = True) -> Graph:
    """CE at ``x_adv`` plus the regulariser against ``x_ref``.

    Inputs: ``x_adv``, ``x_ref`` (only when the regulariser is active),
    ``y`` (unless labels are mixed) and the parameters.
    """
    g = Graph()
    logits_adv, feat_adv = mlp(g, params.spec, g.input("x_adv"))
    ce = g.mean(add_loss(g, logits_adv, labels, "cross_entropy"))
    g.set_output("ce", ce)
    g.set_output("logits_adv", logits_adv)
    if include_reg and spec.active:
        logits_ref, feat_ref = mlp(g, params.spec, g.input("x_ref"))
        if spec.kind == "guided":
            reg = add_guided(g, logits_adv, logits_ref, spec.lam)
        elif spec.kind == "nuclear":
            reg = add_nuclear(g, logits_adv, logits_ref, spec.lam)
        else:
            reg = add_lipschitz(g, logits_adv, logits_ref, feat_adv, feat_ref, weights, spec.lam)
        g.set_output("reg", reg)
        g.set_output("logits_ref", logits_ref)
        g.set_output("loss", g.add(ce, reg))
    else:
        g.set_output("loss", ce)
    return g


def _bindings(params: ModelParams, labels, **inputs) -> dict:
    b = {**inputs, **params.bindings()}
    if not isinstance(labels, tuple):
        b["y"] = np.asarray(labels)
    return b


def reference_point(x: np.ndarray, eta: np.ndarray, spec: RegularizerSpec) -> np.ndarray:
    return x + eta if spec.reference == "eta" else x


def composite_loss(params: ModelParams, batch: np.ndarray, labels, delta: np.ndarray, eta: np.ndarray,
                   spec: RegularizerSpec) -> LossResult:
    """CE at ``batch + delta`` plus the configured regulariser; returns the
    value, its parts, and gradients for every parameter array."""
    x = as_array(batch)
    weights = lipschitz_weights(delta, eta, spec.norm_floor) if spec.kind == "lipschitz" else None
    g = objective_graph(params, labels, spec, weights)
    inputs = {"x_adv": x + delta}
    if spec.active:
        inputs["x_ref"] = reference_point(x, eta, spec)
    outs = forward(g, _bindings(params, labels, **inputs))
    names = params.spec.param_names()
    grads = backward(g, "loss", names)
    return LossResult(
        total=outs["loss"].item(),
        ce=outs["ce"].item(),
        reg=outs["reg"].item() if "reg" in outs else 0.0,
        grads=[grads[n].data for n in names],
        logits_adv=outs["logits_adv"].data,
        logits_ref=outs["logits_ref"].data if "logits_ref" in outs else None,
    )


def attack_gradient_fn(params: ModelParams, x: np.ndarray, labels, eta: np.ndarray, spec: RegularizerSpec):
    """Input-gradient callable for the inner maximisation.

    With ``min_max`` placement the regulariser (reference fixed at ``x`` or
    ``x + eta``) joins the attack objective; otherwise plain CE.
    """
    if not spec.in_attack:
        return None
    x_ref = reference_point(x, eta, spec)
    if spec.kind == "lipschitz":
        # the step starts at x+eta, so the current offset from the reference is zero
        weights = np.full(len(x), 1.0 / spec.norm_floor)
    else:
        weights = None
    g = objective_graph(params, labels, spec, weights)

    def grad(point: np.ndarray) -> np.ndarray:
        forward(g, _bindings(params, labels, x_adv=point, x_ref=x_ref))
        return backward(g, "loss", ["x_adv"])["x_adv"].data

    return grad
