"""Declarative experiment files (YAML with a ``.cfg`` suffix)."""

from __future__ import annotations

import copy
import hashlib
import inspect
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .model import ChargeModelParams, ChargeState
from .photonics import DEFAULT_BIN_WIDTH, DetectorParams
from .profiles import DEFAULT_PROFILE, load_profile
from .sequence import (
    PROTOCOLS,
    PulseSequence,
    Segment,
    build_protocol,
    format_duration,
    parse_duration,
    validate,
)

__all__ = ["ConfigError", "ExperimentConfig", "RunSpec", "load_config", "parse_config"]

_TOP_KEYS = ("name", "description", "seed", "repetitions", "model", "detector", "protocol",
             "sweep", "analysis", "initial_state", "mode", "output")


class ConfigError(ValueError):
    """Invalid experiment file; ``problems`` holds ``(line, message)`` pairs."""

    def __init__(self, problems, source: str = "<config>"):
        self.problems = [(ln, msg) for ln, msg in problems]
        self.source = source
        super().__init__("\n".join(self.format_lines()))

    def format_lines(self) -> list[str]:
        return [f"{self.source}:{ln}: {msg}" if ln else f"{self.source}: {msg}" for ln, msg in self.problems]


class _Lines:
    """Map key paths to 1-based source lines using the composed YAML tree."""

    def __init__(self, node=None):
        self.root = node

    def __call__(self, *path) -> int | None:
        node, line = self.root, None
        for key in path:
            if node is None:
                break
            line = node.start_mark.line + 1
            if isinstance(node, yaml.MappingNode):
                nxt = None
                for k, v in node.value:
                    if k.value == str(key):
                        nxt, line = v, k.start_mark.line + 1
                        break
                node = nxt
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                node = node.value[key]
                line = node.start_mark.line + 1
            else:
                node = None
        if node is not None and line is None:
            line = node.start_mark.line + 1
        return line


@dataclass(frozen=True)
class RunSpec:
    """One point of the sweep product."""

    index: int
    axes: dict
    sequence: PulseSequence


@dataclass
class ExperimentConfig:
    """A validated experiment: model, detector, protocol, sweep and seed.

    ``protocol`` is either ``{"name": ..., "params": {...}}`` for a built-in
    protocol or ``{"segments": [...], "windows": {...}}`` for an explicit one.
    ``sweep`` maps axis names to non-empty value lists; runs are the cartesian
    product in declaration order (first axis slowest).
    """

    name: str
    seed: int
    repetitions: int
    protocol: dict
    model: dict = field(default_factory=lambda: {"profile": DEFAULT_PROFILE})
    detector: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    bin_width: int = DEFAULT_BIN_WIDTH
    fit: bool = True
    initial_state: str = "dark"
    mode: str = "reduced"
    output: str | None = None
    description: str = ""

    # -- derived objects -------------------------------------------------

    def model_params(self) -> ChargeModelParams:
        if "params" in self.model:
            base = ChargeModelParams.from_dict(self.model["params"])
        else:
            base = load_profile(self.model.get("profile", DEFAULT_PROFILE))
        overrides = self.model.get("overrides") or {}
        return base.with_overrides(overrides) if overrides else base

    def detector_params(self) -> DetectorParams:
        return DetectorParams.from_dict(self.detector)

    def initial(self) -> ChargeState:
        return ChargeState.parse(self.initial_state)

    def build_sequence(self, axes: Mapping[str, Any]) -> PulseSequence:
        proto = self.protocol
        if "name" in proto:
            params = {**(proto.get("params") or {}), **axes}
            return build_protocol(proto["name"], repetitions=self.repetitions, **params)
        seq = PulseSequence.from_dict({**proto, "repetitions": self.repetitions})
        if "voltage" in axes:
            segs = tuple(Segment(s.duration, s.channels, float(axes["voltage"])) for s in seq.segments)
            seq = PulseSequence(segs, seq.repetitions, seq.label, False, seq.gap, seq.markers)
        return seq

    def runs(self) -> list[RunSpec]:
        names = list(self.sweep)
        combos = itertools.product(*(self.sweep[n] for n in names)) if names else [()]
        out = []
        for i, values in enumerate(combos):
            axes = dict(zip(names, values))
            out.append(RunSpec(i, axes, self.build_sequence(axes)))
        return out

    @property
    def protocol_name(self) -> str:
        return self.protocol.get("name", "custom")

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = {"name": self.name}
        if self.description:
            d["description"] = self.description
        d.update({
            "seed": self.seed,
            "repetitions": self.repetitions,
            "model": copy.deepcopy(self.model),
            "detector": DetectorParams.from_dict(self.detector).to_dict(),
            "protocol": copy.deepcopy(self.protocol),
            "sweep": copy.deepcopy(self.sweep),
            "analysis": {"bin_width": format_duration(self.bin_width), "fit": self.fit},
            "initial_state": self.initial_state,
            "mode": self.mode,
        })
        if self.output is not None:
            d["output"] = self.output
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None, width=100)

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping, lines: _Lines | None = None, source: str = "<config>") -> "ExperimentConfig":
        return _build(d, lines or _Lines(), source)


def _protocol_axes(name: str) -> set[str]:
    sig = inspect.signature(PROTOCOLS[name])
    return {p for p in sig.parameters if p != "repetitions"}


def _build(d: Mapping, line: _Lines, source: str) -> ExperimentConfig:
    problems: list[tuple[int | None, str]] = []

    def bad(msg, *path):
        problems.append((line(*path), msg))

    if not isinstance(d, Mapping):
        raise ConfigError([(1, "top level must be a mapping")], source)
    for k in d:
        if k not in _TOP_KEYS:
            bad(f"unknown key {k!r}; allowed: {', '.join(_TOP_KEYS)}", k)

    name = d.get("name", "")
    if not isinstance(name, str) or not name:
        bad("'name' must be a non-empty string", "name")
    seed = d.get("seed")
    if seed is None:
        bad("'seed' is required", "seed" if "seed" in d else None)
    elif not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        bad(f"'seed' must be a non-negative integer, got {seed!r}", "seed")
    reps = d.get("repetitions")
    if not isinstance(reps, int) or isinstance(reps, bool) or reps < 1:
        bad(f"'repetitions' must be an integer >= 1, got {reps!r}", "repetitions")

    model = d.get("model", {"profile": DEFAULT_PROFILE})
    if isinstance(model, str):
        model = {"profile": model}
    if not isinstance(model, Mapping):
        bad("'model' must be a profile name or a mapping", "model")
        model = {}
    else:
        model = dict(model)
        extra = set(model) - {"profile", "params", "overrides"}
        if extra:
            bad(f"unknown model key(s) {sorted(extra)}", "model", sorted(extra)[0])
        if "profile" in model and "params" in model:
            bad("give either 'profile' or 'params', not both", "model")

    detector = d.get("detector") or {}
    if not isinstance(detector, Mapping):
        bad("'detector' must be a mapping", "detector")
        detector = {}
    else:
        try:
            DetectorParams.from_dict(detector)
        except (ValueError, TypeError) as exc:
            bad(f"detector: {exc}", "detector")

    protocol = d.get("protocol")
    if not isinstance(protocol, Mapping):
        bad("exactly one 'protocol' (builtin 'name' or explicit 'segments') is required",
            "protocol" if "protocol" in d else None)
        protocol = {}
    else:
        protocol = dict(protocol)
        has_name, has_segs = "name" in protocol, "segments" in protocol
        if has_name == has_segs:
            bad("protocol needs exactly one of 'name' or 'segments'", "protocol")
        elif has_name:
            if protocol["name"] not in PROTOCOLS:
                bad(f"unknown protocol {protocol['name']!r}; choose from {sorted(PROTOCOLS)}", "protocol", "name")
            extra = set(protocol) - {"name", "params"}
            if extra:
                bad(f"unknown protocol key(s) {sorted(extra)}", "protocol", sorted(extra)[0])
            params = protocol.get("params") or {}
            if not isinstance(params, Mapping):
                bad("protocol 'params' must be a mapping", "protocol", "params")
            elif protocol["name"] in PROTOCOLS:
                allowed = _protocol_axes(protocol["name"])
                for k in params:
                    if k not in allowed:
                        bad(f"protocol {protocol['name']!r} has no parameter {k!r}; allowed: {sorted(allowed)}",
                            "protocol", "params", k)

    sweep = d.get("sweep") or {}
    if not isinstance(sweep, Mapping):
        bad("'sweep' must map axis names to lists", "sweep")
        sweep = {}
    else:
        sweep = dict(sweep)
        if "name" in protocol and protocol.get("name") in PROTOCOLS:
            allowed = _protocol_axes(protocol["name"])
        else:
            allowed = {"voltage"}
        for axis, values in sweep.items():
            if axis not in allowed:
                bad(f"unknown sweep axis {axis!r}; allowed: {sorted(allowed)}", "sweep", axis)
            elif not isinstance(values, list):
                bad(f"sweep axis {axis!r} must be a list", "sweep", axis)
            elif not values:
                bad(f"sweep axis {axis!r} is empty", "sweep", axis)
            elif any(isinstance(v, (list, dict)) for v in values):
                bad(f"sweep axis {axis!r} must hold scalars", "sweep", axis)

    analysis = d.get("analysis") or {}
    bin_width, fit = DEFAULT_BIN_WIDTH, True
    if not isinstance(analysis, Mapping):
        bad("'analysis' must be a mapping", "analysis")
    else:
        extra = set(analysis) - {"bin_width", "fit"}
        if extra:
            bad(f"unknown analysis key(s) {sorted(extra)}", "analysis", sorted(extra)[0])
        try:
            bin_width = parse_duration(analysis.get("bin_width", DEFAULT_BIN_WIDTH))
            if bin_width <= 0:
                raise ValueError("bin width must be positive")
        except ValueError as exc:
            bad(str(exc), "analysis", "bin_width")
        fit = analysis.get("fit", True)
        if not isinstance(fit, bool):
            bad("'analysis.fit' must be true or false", "analysis", "fit")

    initial = d.get("initial_state", "dark")
    try:
        ChargeState.parse(initial)
    except (ValueError, KeyError):
        bad(f"unknown initial_state {initial!r}", "initial_state")
    mode = d.get("mode", "reduced")
    if mode not in ("reduced", "full"):
        bad(f"mode must be 'reduced' or 'full', got {mode!r}", "mode")
    output = d.get("output")
    if output is not None and not isinstance(output, str):
        bad("'output' must be a path string", "output")

    if problems:
        raise ConfigError(problems, source)

    cfg = ExperimentConfig(
        name=name, seed=seed, repetitions=reps, protocol=protocol, model=model, detector=dict(detector),
        sweep=sweep, bin_width=bin_width, fit=fit, initial_state=str(initial), mode=mode, output=output,
        description=str(d.get("description", "") or ""),
    )
    try:
        cfg.model_params()
    except (ValueError, KeyError, TypeError) as exc:
        problems.append((line("model"), f"model: {exc.args[0] if exc.args else exc}"))
    try:
        for run in cfg.runs():
            for msg in validate(run.sequence):
                problems.append((line("sweep") or line("protocol"), f"run {run.axes}: {msg}"))
    except (ValueError, TypeError, KeyError) as exc:
        problems.append((line("protocol"), f"protocol: {exc}"))
    if problems:
        raise ConfigError(problems, source)
    return cfg


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate an experiment file's text."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ConfigError([(mark.line + 1 if mark else None, f"YAML syntax: {exc.problem}")], source) from None
    if data is None:
        raise ConfigError([(None, "file is empty")], source)
    return ExperimentConfig.from_dict(data, _Lines(node), source)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([(None, f"cannot read: {exc.strerror}")], str(path)) from None
    return parse_config(text, str(path))
