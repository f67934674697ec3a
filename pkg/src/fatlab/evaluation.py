"""Robust accuracy, the two-direction loss landscape and attack-strength sweeps.

Every sample's random attack start comes from its own keyed stream
(``seed``, sample index), and the network computes each row independently of
the rest of the batch, so results do not depend on how samples are batched.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from fatlab.attacks import AttackConfig, PRIOR_SCHEMES, AttackError, fgsm_step, input_gradient, project, sample_init
from fatlab.autodiff import Graph, forward
from fatlab.data import Dataset
from fatlab.models import ModelParams, mlp
from fatlab.rng import keyed_rng

EVAL_BATCH = 500


@dataclass
class EvalReport:
    clean_acc: float
    clean_ce: float
    n_samples: int
    robust_acc: dict[str, float] = field(default_factory=dict)
    attacks: dict[str, dict] = field(default_factory=dict)
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path


def attack_name(config: AttackConfig) -> str:
    kind = "margin-pgd" if config.loss == "margin" else "pgd"
    return f"{kind}-{config.steps}@{config.epsilon:.6g}"


def _named(attacks) -> dict[str, AttackConfig]:
    if isinstance(attacks, Mapping):
        return dict(attacks)
    named = {}
    for cfg in attacks:
        name = attack_name(cfg)
        if name in named:
            raise ValueError(f"duplicate attack {name}")
        named[name] = cfg
    return named


def _batches(n: int, size: int = EVAL_BATCH):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def per_sample_ce(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and logits."""
    g = Graph()
    logits, _ = mlp(g, params.spec, g.input("x"))
    g.set_output("ce", g.softmax_ce(logits, g.input("y")))
    g.set_output("logits", logits)
    ce, out = [], []
    for sl in _batches(len(x)):
        res = forward(g, {"x": x[sl], "y": y[sl], **params.bindings()})
        ce.append(res["ce"].data)
        out.append(res["logits"].data)
    if not ce:
        return np.zeros(0), np.zeros((0, params.spec.num_classes))
    return np.concatenate(ce), np.concatenate(out)


def mean_ce(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(per_sample_ce(params, x, y)[0]))


def _correct(params: ModelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.argmax(per_sample_ce(params, x, y)[1], axis=1) == y


def initial_perturbation(config: AttackConfig, x: np.ndarray, seed: int, offset: int = 0) -> np.ndarray:
    """Attack start for each row, drawn from a stream keyed on the row index."""
    if config.init_scheme in PRIOR_SCHEMES:
        raise AttackError("prior-based initialisation is only available inside training")
    if config.init_scheme == "zero":
        return np.zeros_like(x)
    rows = [sample_init(config.init_scheme, config.epsilon, (x.shape[1],),
                        rng=keyed_rng(seed, "eval_init", offset + i), dtype=x.dtype) for i in range(len(x))]
    return np.stack(rows) if rows else np.zeros_like(x)


def run_attack(params: ModelParams, x: np.ndarray, y: np.ndarray, config: AttackConfig,
               init: np.ndarray) -> np.ndarray:
    """PGD from an explicit start, in evaluation-sized batches."""
    delta = np.empty_like(x)
    for sl in _batches(len(x)):
        d = project(x[sl], init[sl], config.epsilon)
        for _ in range(config.steps):
            d = fgsm_step(params, x[sl], y[sl], d, config.alpha, config.epsilon, config.loss)
        delta[sl] = d
    return delta


def evaluate(params: ModelParams, dataset: Dataset, attacks: Sequence[AttackConfig] | Mapping[str, AttackConfig] = (),
             seed: int = 0) -> EvalReport:
    """Clean accuracy and robust accuracy under each attack."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if dataset.dim != params.spec.input_dim:
        raise ValueError(f"dataset has {dataset.dim} features but the model expects {params.spec.input_dim}")
    x = dataset.x.astype(params.dtype, copy=False)
    y = dataset.y
    ce, logits = per_sample_ce(params, x, y)
    report = EvalReport(float(np.mean(np.argmax(logits, axis=1) == y)), float(np.mean(ce)), len(y), seed=seed)
    for name, cfg in _named(attacks).items():
        delta = run_attack(params, x, y, cfg, initial_perturbation(cfg, x, seed))
        report.robust_acc[name] = float(np.mean(_correct(params, x + delta, y)))
        report.attacks[name] = asdict(cfg)
    return report


# -- loss landscape ------------------------------------------------------

@dataclass
class LandscapeGrid:
    r1: np.ndarray
    r2: np.ndarray
    a: np.ndarray
    b: np.ndarray
    grid: np.ndarray
    eta_mag: float

    @property
    def center(self) -> float:
        return float(self.grid[len(self.a) // 2, len(self.b) // 2])

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(f"# eta = {self.eta_mag!r}\n")
            fh.write("# a_axis = " + " ".join(repr(float(v)) for v in self.a) + "\n")
            fh.write("# b_axis = " + " ".join(repr(float(v)) for v in self.b) + "\n")
            w = csv.writer(fh)
            w.writerow(["i", "j", "a", "b", "loss"])
            for i, av in enumerate(self.a):
                for j, bv in enumerate(self.b):
                    w.writerow([i, j, repr(float(av)), repr(float(bv)), repr(float(self.grid[i, j]))])
        return path


def grid_axis(n: int) -> np.ndarray:
    if n < 1 or n % 2 == 0:
        raise ValueError(f"grid sizes must be odd and >= 1, got {n}")
    return np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n)


def landscape_grid(params: ModelParams, x: np.ndarray, y: np.ndarray, eta_mag: float, n1: int = 21, n2: int = 21,
                   rng: np.random.Generator | None = None) -> LandscapeGrid:
    """Mean CE over ``x + a*r1 + b*r2`` (clipped to [0, 1]) with ``r1`` a
    Rademacher direction and ``r2`` the signed input gradient, both of
    magnitude ``eta_mag`` per coordinate."""
    if not eta_mag > 0:
        raise ValueError(f"eta_mag must be > 0, got {eta_mag}")
    a_axis, b_axis = grid_axis(n1), grid_axis(n2)
    x = np.asarray(x, dtype=params.dtype)
    r1 = (eta_mag * (2.0 * rng.integers(0, 2, x.shape) - 1.0)).astype(x.dtype)
    r2 = (eta_mag * np.sign(input_gradient(params, x, y))).astype(x.dtype)
    grid = np.empty((n1, n2))
    for i, a in enumerate(a_axis):
        for j, b in enumerate(b_axis):
            point = x if a == 0 and b == 0 else np.clip(x + a * r1 + b * r2, 0.0, 1.0)
            grid[i, j] = mean_ce(params, point, y)
    if not np.all(np.isfinite(grid)):
        raise FloatingPointError("non-finite loss in landscape grid")
    return LandscapeGrid(r1, r2, a_axis, b_axis, grid, float(eta_mag))


# -- attack strength -----------------------------------------------------

def strength_sweep(params: ModelParams, dataset: Dataset, eps_list: Sequence[float], template: AttackConfig,
                   seed: int = 0, nested: bool = True) -> list[tuple[float, float]]:
    """Robust accuracy per budget, step size scaled with epsilon.

    With ``nested`` each budget starts from the previous budget's
    perturbation, and a sample fooled at a smaller budget keeps that
    perturbation if the new one fails, so accuracy cannot increase.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError(f"eps_list must be sorted ascending, got {eps_list}")
    x = dataset.x.astype(params.dtype, copy=False)
    y = dataset.y
    ratio = template.alpha / template.epsilon if template.epsilon > 0 else None
    out, prev, fooled = [], None, np.zeros(len(y), bool)
    for eps in eps_list:
        if ratio is None:
            raise ValueError("template attack needs epsilon > 0 to scale its step size")
        alpha = template.alpha if eps == template.epsilon else ratio * eps
        cfg = AttackConfig(eps, alpha, template.steps, template.init_scheme, template.loss)
        init = initial_perturbation(cfg, x, seed) if prev is None or not nested else prev
        delta = run_attack(params, x, y, cfg, init)
        wrong = ~_correct(params, x + delta, y)
        if nested and prev is not None:
            keep = fooled & ~wrong
            delta[keep] = prev[keep]
            wrong |= fooled
        fooled = wrong
        prev = delta
        out.append((eps, float(np.mean(~wrong))))
    return out


def write_sweep_csv(rows: Sequence[tuple[float, float]], path: str | Path, template: AttackConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# attack = {'margin-pgd' if template.loss == 'margin' else 'pgd'}, steps = {template.steps}, "
                 f"alpha/epsilon = {template.alpha / template.epsilon!r}\n")
        w = csv.writer(fh)
        w.writerow(["epsilon", "robust_acc"])
        for eps, acc in rows:
            w.writerow([repr(eps), repr(acc)])
    return path
