"""Layered pruning schedules and their INI-style text format.

A schedule file looks like::

    [schedule]
    name = dart-random-64
    ratio_base = original

    [action 1]
    layer = 1
    strategy = LowDuplication
    retain_ratio = 0.10
    seed = 0

An action at layer ``i`` runs after decoder layer ``i`` (``0`` = before the
first layer), so layers ``i+1 ..`` see the reduced visual set.  With
``ratio_base = alive`` a ratio is a fraction of the currently alive tokens;
with ``original`` it is a fraction of the unpruned visual count.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from importlib import resources

from ..engine.config import ConfigError
from .strategies import STRATEGIES, retained_count

RATIO_BASES = ("alive", "original")


@dataclass(frozen=True)
class PruneAction:
    layer: int
    strategy: str
    retain_ratio: float
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.retain_ratio <= 1.0:
            raise ConfigError(f"retain_ratio {self.retain_ratio} outside [0, 1]")
        if self.strategy == "Withdraw" and self.retain_ratio != 0:
            raise ConfigError("Withdraw actions must have retain_ratio = 0")
        if self.layer < 0:
            raise ConfigError("action layer must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative 64-bit integer")


@dataclass(frozen=True)
class PruneSchedule:
    name: str
    actions: tuple[PruneAction, ...] = field(default_factory=tuple)
    ratio_base: str = "alive"

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if self.ratio_base not in RATIO_BASES:
            raise ConfigError(f"ratio_base must be one of {RATIO_BASES}")
        layers = [a.layer for a in self.actions]
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ConfigError(f"schedule {self.name!r}: action layers must strictly increase")

    def check_layers(self, n_layers: int) -> None:
        for a in self.actions:
            if a.layer > n_layers:
                raise ConfigError(
                    f"schedule {self.name!r} acts at layer {a.layer} but the model has {n_layers}"
                )

    def target_counts(self, n_visual: int) -> list[int]:
        """Visual tokens alive after each action, in action order."""
        alive, counts = n_visual, []
        for a in self.actions:
            base = alive if self.ratio_base == "alive" else n_visual
            k = retained_count(a.retain_ratio, base)
            if k > alive:
                raise ConfigError(
                    f"schedule {self.name!r}: layer {a.layer} keeps {k} of only {alive} alive tokens"
                )
            counts.append(k)
            alive = k
        return counts

    def tokens_per_layer(self, n_visual: int, n_layers: int) -> list[int]:
        """Visual tokens processed by decoder layers ``1..n_layers``."""
        self.check_layers(n_layers)
        per_layer = [n_visual] * n_layers
        for action, count in zip(self.actions, self.target_counts(n_visual)):
            for j in range(action.layer + 1, n_layers + 1):
                per_layer[j - 1] = count
        return per_layer

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        parser["schedule"] = {"name": self.name, "ratio_base": self.ratio_base}
        for i, a in enumerate(self.actions, start=1):
            parser[f"action {i}"] = {
                "layer": str(a.layer),
                "strategy": a.strategy,
                "retain_ratio": repr(float(a.retain_ratio)),
                "seed": str(a.seed),
            }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


EMPTY = PruneSchedule("none")


def parse_schedule(text: str) -> PruneSchedule:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
        head = parser["schedule"]
        actions = []
        for section in parser.sections():
            if section == "schedule":
                continue
            if not section.startswith("action"):
                raise ConfigError(f"unexpected section [{section}]")
            s = parser[section]
            actions.append(PruneAction(
                layer=s.getint("layer"),
                strategy=s.get("strategy"),
                retain_ratio=s.getfloat("retain_ratio"),
                seed=s.getint("seed", fallback=0),
            ))
        return PruneSchedule(head.get("name", "unnamed"), tuple(actions),
                             head.get("ratio_base", "alive"))
    except (configparser.Error, KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed schedule: {exc}") from exc


def load_schedule(path: str | os.PathLike) -> PruneSchedule:
    with open(path) as fh:
        return parse_schedule(fh.read())


def preset_names() -> list[str]:
    files = resources.files("tokenhorizon.pruning").joinpath("presets").iterdir()
    return sorted(["none"] + [f.name[:-4] for f in files if f.name.endswith(".ini")])


def load_preset(name: str) -> PruneSchedule:
    if name == "none":
        return EMPTY
    ref = resources.files("tokenhorizon.pruning").joinpath("presets", f"{name}.ini")
    if not ref.is_file():
        raise ConfigError(f"unknown schedule preset {name!r}; known: {', '.join(preset_names())}")
    return parse_schedule(ref.read_text())


def resolve_schedule(name_or_path: str) -> PruneSchedule:
    """A preset name, or a path to a schedule file."""
    if os.path.exists(name_or_path):
        return load_schedule(name_or_path)
    return load_preset(name_or_path)
