"""Experiment configuration: sectioned ``key = value`` files.

Values are typed per key; reals also accept fractions such as ``8/255``.
Unknown sections or keys are errors, reported with their line number.  The
resolved configuration (every key, defaults included) is written back in the
same format and reloads to an equal :class:`ExperimentConfig`.
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

from fatlab.attacks import AttackConfig, INIT_SCHEMES, LOSSES, DEFAULT_ALPHA_FACTOR
from fatlab.augment import AUGMENT_KINDS, AugmentSpec
from fatlab.averaging import GATE_DIRECTIONS
from fatlab.data import SOURCES, DatasetDescriptor
from fatlab.regularizers import KINDS, PLACEMENTS, RegularizerSpec
from fatlab.trainer import WA_KINDS, Cyclic, MonitorConfig, MultiStep, TrainConfig, WeightAveraging

OUTPUT_ROOT_ENV = "FATLAB_OUTPUT_ROOT"


class ConfigError(Exception):
    pass


# -- value types ---------------------------------------------------------------

def parse_real(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        return float(Fraction(num.strip()) / Fraction(den.strip()))
    return float(text)


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _tuple_of(conv):
    def parse(text: str) -> tuple:
        parts = [p.strip() for p in text.replace(",", " ").split()]
        return tuple(conv(p) for p in parts)
    return parse


def _optional(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("auto", "none", "") else conv(text)
    return parse


def _choice(options):
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# (section, key) -> (parser, default)
Schema = dict[str, dict[str, tuple[Callable[[str], Any], Any]]]

EPS_DEFAULT = 8 / 255

SCHEMA: Schema = {
    "data": {
        "source": (_choice(SOURCES), "synthetic_digits"),
        "images": (str, ""),
        "labels": (str, ""),
        "eval_images": (str, ""),
        "eval_labels": (str, ""),
        "n": (int, 10000),
        "n_eval": (int, 1000),
        "dim": (int, 2),
        "classes": (int, 2),
        "margin": (parse_real, 0.3),
        "spread": (parse_real, 0.12),
        "seed": (int, 0),
        "intensity": (_tuple_of(parse_real), (0.7, 1.0)),
        "thickness": (_tuple_of(parse_real), (0.6, 1.4)),
        "noise": (parse_real, 0.0),
        "clutter": (int, 0),
    },
    "model": {
        "hidden_dims": (_tuple_of(int), (256, 128)),
    },
    "train": {
        "epochs": (int, 110),
        "batch_size": (int, 128),
        "momentum": (parse_real, 0.9),
        "weight_decay": (parse_real, 5e-4),
        "seed": (int, 0),
        "dtype": (_choice(("float64", "float32")), "float64"),
    },
    "schedule": {
        "kind": (_choice(("multistep", "cyclic")), "multistep"),
        "base": (parse_real, 0.1),
        "milestones": (_tuple_of(int), (100, 105)),
        "factor": (parse_real, 0.1),
        "max_lr": (parse_real, 0.2),
    },
    "attack": {
        "epsilon": (parse_real, EPS_DEFAULT),
        "alpha": (_optional(parse_real), None),
        "steps": (int, 1),
        "init_scheme": (_choice(INIT_SCHEMES), "bernoulli_half"),
        "loss": (_choice(LOSSES), "cross_entropy"),
    },
    "regularizer": {
        "kind": (_choice(KINDS), "lipschitz"),
        "lambda": (parse_real, 12.0),
        "placement": (_choice(PLACEMENTS), "min_only"),
        "norm_floor": (parse_real, 1e-8),
    },
    "augment": {
        "kind": (_choice(AUGMENT_KINDS), "cutout"),
        "cutout_size": (_optional(int), None),
        "mixup_alpha": (parse_real, 1.0),
    },
    "averaging": {
        "kind": (_choice(WA_KINDS), "auto_ema"),
        "tau": (parse_real, 0.999),
        "threshold": (parse_real, 0.82),
        "gate": (_choice(GATE_DIRECTIONS), "le"),
    },
    "monitor": {
        "epsilon": (_optional(parse_real), None),  # auto: the training epsilon
        "steps": (int, 10),
        "alpha": (_optional(parse_real), None),  # auto: epsilon / 4
        "init_scheme": (_choice(INIT_SCHEMES), "uniform_full"),
        "collapse_fraction": (parse_real, 0.2),
        "eval_samples": (int, 1000),
        "eval_live": (parse_bool, True),
    },
    "eval": {
        "epsilon": (_optional(parse_real), None),
        "pgd_steps": (int, 50),
        "margin_steps": (int, 20),
        "samples": (int, 1000),
        "seed": (int, 0),
    },
    "landscape": {
        "eta": (parse_real, EPS_DEFAULT),
        "n1": (int, 21),
        "n2": (int, 21),
        "samples": (int, 1000),
        "seed": (int, 0),
    },
    "sweep": {
        "eps_list": (_tuple_of(parse_real), tuple(k / 255 for k in range(2, 17, 2))),
        "steps": (int, 10),
        "alpha_ratio": (parse_real, 0.25),
        "init_scheme": (_choice(INIT_SCHEMES), "zero"),
        "loss": (_choice(LOSSES), "cross_entropy"),
        "nested": (parse_bool, True),
        "samples": (int, 1000),
        "seed": (int, 0),
    },
    "output": {
        "dir": (str, "runs/default"),
    },
}


# -- typed configuration -------------------------------------------------------

@dataclass(frozen=True)
class EvalSettings:
    epsilon: float
    pgd_steps: int = 50
    margin_steps: int = 20
    samples: int = 1000
    seed: int = 0

    def attacks(self) -> dict[str, AttackConfig]:
        from fatlab.attacks import margin_config, pgd_config

        out = {}
        if self.pgd_steps:
            out[f"pgd-{self.pgd_steps}"] = pgd_config(self.epsilon, self.pgd_steps)
        if self.margin_steps:
            out[f"margin-pgd-{self.margin_steps}"] = margin_config(self.epsilon, self.margin_steps)
        return out


@dataclass(frozen=True)
class LandscapeSettings:
    eta: float
    n1: int = 21
    n2: int = 21
    samples: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class SweepSettings:
    eps_list: tuple[float, ...]
    template: AttackConfig
    nested: bool = True
    samples: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    data: DatasetDescriptor
    hidden_dims: tuple[int, ...]
    train: TrainConfig
    eval: EvalSettings
    landscape: LandscapeSettings
    sweep: SweepSettings
    output_dir: str
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def output_path(self) -> Path:
        """``output_dir``, resolved against the output-root environment variable when set."""
        path = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not path.is_absolute():
            return Path(root) / path
        return path


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"{re.escape(key)}\s*[=:]", stripped):
            return no
    return 0


def parse_config(text: str, source: str = "<string>", base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}:{_line_of(text, section)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}:{_line_of(text, section, key)}: unknown key {key!r} in [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                values.setdefault(section, {})[key] = conv(raw)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"{source}:{_line_of(text, section, key)}: [{section}] {key} = {raw!r}: {exc}") from None
    resolved = {s: {k: values.get(s, {}).get(k, default) for k, (_, default) in keys.items()}
                for s, keys in SCHEMA.items()}
    try:
        return _build(resolved, base_dir)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), path.parent)


def _build(r: dict[str, dict[str, Any]], base_dir: Path | None) -> ExperimentConfig:
    def data_path(p: str) -> str:
        if p and base_dir is not None and not Path(p).is_absolute():
            return str((base_dir / p).resolve())
        return p

    d = r["data"]
    digit_options = {"intensity": tuple(d["intensity"]), "thickness": tuple(d["thickness"]),
                     "noise": d["noise"], "clutter": d["clutter"]}
    for name in ("intensity", "thickness"):
        if len(digit_options[name]) != 2:
            raise ValueError(f"[data] {name} needs two values (low, high)")
    data = DatasetDescriptor(
        source=d["source"], images=data_path(d["images"]), labels=data_path(d["labels"]),
        eval_images=data_path(d["eval_images"]), eval_labels=data_path(d["eval_labels"]),
        n=d["n"], n_eval=d["n_eval"], dim=d["dim"], classes=d["classes"], margin=d["margin"],
        spread=d["spread"], seed=d["seed"], digit_options=digit_options)

    a = r["attack"]
    attack = AttackConfig(a["epsilon"], a["alpha"], a["steps"], a["init_scheme"], a["loss"])
    s = r["schedule"]
    schedule = MultiStep(s["base"], s["milestones"], s["factor"]) if s["kind"] == "multistep" else Cyclic(s["max_lr"])
    g = r["regularizer"]
    reg = RegularizerSpec(g["kind"], g["lambda"], g["placement"], g["norm_floor"])
    u = r["augment"]
    augment = AugmentSpec(u["kind"], u["cutout_size"], u["mixup_alpha"])
    w = r["averaging"]
    wa = WeightAveraging(w["kind"], w["tau"], w["threshold"], w["gate"])
    m = r["monitor"]
    m_eps = attack.epsilon if m["epsilon"] is None else m["epsilon"]
    m_alpha = m_eps / 4 if m["alpha"] is None else m["alpha"]
    monitor = MonitorConfig(AttackConfig(m_eps, m_alpha, m["steps"], m["init_scheme"]), m["collapse_fraction"],
                            m["eval_samples"], m["eval_live"])
    t = r["train"]
    train = TrainConfig(t["epochs"], t["batch_size"], schedule, t["momentum"], t["weight_decay"], attack, reg,
                        augment, wa, t["seed"], monitor, t["dtype"])
    e = r["eval"]
    evals = EvalSettings(attack.epsilon if e["epsilon"] is None else e["epsilon"], e["pgd_steps"], e["margin_steps"],
                         e["samples"], e["seed"])
    ls = r["landscape"]
    landscape = LandscapeSettings(ls["eta"], ls["n1"], ls["n2"], ls["samples"], ls["seed"])
    sw = r["sweep"]
    eps_max = max(sw["eps_list"]) if sw["eps_list"] else attack.epsilon
    template = AttackConfig(eps_max, sw["alpha_ratio"] * eps_max, sw["steps"], sw["init_scheme"], sw["loss"]) \
        if eps_max > 0 else AttackConfig(1.0, sw["alpha_ratio"], sw["steps"], sw["init_scheme"], sw["loss"])
    sweep = SweepSettings(tuple(sw["eps_list"]), template, sw["nested"], sw["samples"], sw["seed"])
    return ExperimentConfig(data, tuple(r["model"]["hidden_dims"]), train, evals, landscape, sweep,
                            r["output"]["dir"], raw=r)


def render_config(config: ExperimentConfig) -> str:
    """Every key with its resolved value."""
    r = {s: dict(v) for s, v in config.raw.items()}
    # derived values are echoed explicitly
    r["attack"]["alpha"] = config.train.attack.alpha
    r["monitor"]["epsilon"] = config.train.co_monitor.eval_attack.epsilon
    r["monitor"]["alpha"] = config.train.co_monitor.eval_attack.alpha
    r["eval"]["epsilon"] = config.eval.epsilon
    for key in ("images", "labels", "eval_images", "eval_labels"):
        r["data"][key] = getattr(config.data, key)
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_fmt(r[section][key])}" for key in keys)
        lines.append("")
    return "\n".join(lines)


def default_config() -> ExperimentConfig:
    return parse_config("")


__all__ = ["ConfigError", "ExperimentConfig", "EvalSettings", "LandscapeSettings", "SweepSettings", "SCHEMA",
           "load_config", "parse_config", "render_config", "default_config", "parse_real", "OUTPUT_ROOT_ENV",
           "DEFAULT_ALPHA_FACTOR"]
