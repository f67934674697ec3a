"""Exponential moving averages of model weights, optionally gated on the
quality of the batch's adversarial examples (Auto-EMA)."""

from __future__ import annotations

from dataclasses import dataclass, replace

from fatlab.models import ModelParams

GATE_DIRECTIONS = ("le", "gt")


@dataclass(frozen=True)
class EmaState:
    theta_avg: ModelParams
    tau: float = 0.999
    threshold: float = 0.82
    gate: str = "le"
    updates_applied: int = 0
    updates_skipped: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.gate not in GATE_DIRECTIONS:
            raise ValueError(f"gate must be one of {GATE_DIRECTIONS}, got {self.gate!r}")

    @property
    def calls(self) -> int:
        return self.updates_applied + self.updates_skipped


def init_ema(theta: ModelParams, tau: float = 0.999, threshold: float = 0.82, gate: str = "le") -> EmaState:
    return EmaState(theta, tau, threshold, gate)


@dataclass(frozen=True)
class QualitySnapshot:
    clean_correct: int
    robust_correct: int
    batch_size: int

    def __post_init__(self):
        for name in ("clean_correct", "robust_correct"):
            if not 0 <= getattr(self, name) <= self.batch_size:
                raise ValueError(f"{name}={getattr(self, name)} outside [0, {self.batch_size}]")

    @property
    def delta_ratio(self) -> float:
        return quality_ratio(self.clean_correct, self.robust_correct, self.batch_size)


def quality_ratio(clean_correct: int, robust_correct: int, batch_size: int) -> float:
    """Robust batch accuracy over clean batch accuracy; 1 when nothing is
    classified correctly on clean inputs."""
    if clean_correct == 0:
        return 1.0
    return (robust_correct / batch_size) / (clean_correct / batch_size)


def ema_update(state: EmaState, theta: ModelParams) -> EmaState:
    if theta.spec != state.theta_avg.spec:
        raise ValueError(f"spec mismatch: averaged {state.theta_avg.spec.describe()} vs live {theta.spec.describe()}")
    avg = state.theta_avg.combine(theta, state.tau, 1.0 - state.tau)
    return replace(state, theta_avg=avg, updates_applied=state.updates_applied + 1)


def gate_open(state: EmaState, delta_ratio: float) -> bool:
    if state.gate == "le":
        return delta_ratio <= state.threshold
    return delta_ratio > state.threshold


def auto_ema_update(state: EmaState, theta: ModelParams, snapshot: QualitySnapshot | float) -> EmaState:
    """EMA step only when the batch's quality ratio passes the gate."""
    if theta.spec != state.theta_avg.spec:
        raise ValueError(f"spec mismatch: averaged {state.theta_avg.spec.describe()} vs live {theta.spec.describe()}")
    ratio = snapshot.delta_ratio if isinstance(snapshot, QualitySnapshot) else float(snapshot)
    if gate_open(state, ratio):
        return ema_update(state, theta)
    return replace(state, updates_skipped=state.updates_skipped + 1)
