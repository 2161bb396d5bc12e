"""Multi-channel pulse sequences and the built-in measurement protocols.

Time is kept in integer nanoseconds.  Durations in config files are strings
with a unit (``"5 ms"``, ``"250us"``, ``"1.5 ms"``) converted exactly through
:class:`decimal.Decimal`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import Color, LaserChannel

__all__ = [
    "Segment",
    "PulseSequence",
    "SequenceError",
    "DEVICE_VOLTAGE_RANGE",
    "parse_duration",
    "format_duration",
    "ms",
    "us",
    "validate",
    "protocol_fig1",
    "protocol_fig3",
    "protocol_ple",
    "PROTOCOLS",
    "build_protocol",
]

#: Bias range (V) accepted by the device model.
DEVICE_VOLTAGE_RANGE = (-300.0, 300.0)

_UNITS = {"ns": 1, "us": 1_000, "µs": 1_000, "ms": 1_000_000, "s": 1_000_000_000}
_DURATION_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(ns|us|µs|ms|s)\s*$")


class SequenceError(ValueError):
    """Raised when a sequence fails validation where one is required."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def parse_duration(text) -> int:
    """Convert ``"2.5 ms"`` style strings (or plain ints, taken as ns) to ns."""
    if isinstance(text, (int, np.integer)) and not isinstance(text, bool):
        return int(text)
    m = _DURATION_RE.match(str(text))
    if not m:
        raise ValueError(f"cannot parse duration {text!r}; expected e.g. '5 ms' or '250 us'")
    try:
        value = Decimal(m.group(1)) * _UNITS[m.group(2)]
    except InvalidOperation as exc:  # pragma: no cover - regex guards this
        raise ValueError(f"bad duration {text!r}") from exc
    if value != value.to_integral_value():
        raise ValueError(f"duration {text!r} is not a whole number of nanoseconds")
    return int(value)


def format_duration(ns: int) -> str:
    for unit in ("s", "ms", "us"):
        if ns and ns % _UNITS[unit] == 0:
            return f"{ns // _UNITS[unit]} {unit}"
    return f"{ns} ns"


def ms(value) -> int:
    return parse_duration(f"{Decimal(str(value))} ms")


def us(value) -> int:
    return parse_duration(f"{Decimal(str(value))} us")


@dataclass(frozen=True)
class Segment:
    duration: int  # ns
    channels: tuple[LaserChannel, ...] = ()
    voltage: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "voltage", float(self.voltage))
        object.__setattr__(self, "duration", int(self.duration))

    def power(self, color) -> float:
        color = Color.parse(color)
        return sum(ch.power for ch in self.channels if ch.color is color)

    def to_dict(self) -> dict:
        return {
            "duration": format_duration(self.duration),
            "voltage_v": self.voltage,
            "lasers": [ch.to_dict() for ch in self.channels],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Segment":
        return cls(
            duration=parse_duration(d["duration"]),
            channels=tuple(LaserChannel.from_dict(c) for c in d.get("lasers", ())),
            voltage=float(d.get("voltage_v", 0.0)),
        )


@dataclass(frozen=True)
class PulseSequence:
    """Ordered segments repeated ``repetitions`` times.

    ``gap`` is an optional laser-free pause (ns) appended to every repetition.
    """

    segments: tuple[Segment, ...]
    repetitions: int = 1
    label: str = ""
    voltage_stepped: bool = False
    gap: int = 0
    markers: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "markers", {k: (int(a), int(b)) for k, (a, b) in dict(self.markers).items()})

    @property
    def period(self) -> int:
        return sum(s.duration for s in self.segments) + self.gap

    def timeline(self) -> list[Segment]:
        """Segments actually played, including the trailing gap."""
        segs = list(self.segments)
        if self.gap > 0:
            v = segs[-1].voltage if segs else 0.0
            segs.append(Segment(self.gap, (), v))
        return segs

    def boundaries(self) -> np.ndarray:
        """Segment start times (ns) followed by the period."""
        return np.concatenate([[0], np.cumsum([s.duration for s in self.timeline()])]).astype(np.int64)

    def with_repetitions(self, n: int) -> "PulseSequence":
        return replace(self, repetitions=int(n))

    def window(self, name: str) -> tuple[int, int]:
        """Named analysis window ``(start_ns, stop_ns)`` set by the protocol builders."""
        try:
            return tuple(self.markers[name])
        except KeyError:
            raise KeyError(f"sequence {self.label!r} has no window {name!r}; "
                           f"known: {sorted(self.markers)}") from None

    def to_dict(self) -> dict:
        d = {
            "label": self.label,
            "repetitions": self.repetitions,
            "segments": [s.to_dict() for s in self.segments],
        }
        if self.voltage_stepped:
            d["voltage_stepped"] = True
        if self.gap:
            d["gap"] = format_duration(self.gap)
        if self.markers:
            d["windows"] = {k: [format_duration(a), format_duration(b)] for k, (a, b) in self.markers.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PulseSequence":
        markers = {k: (parse_duration(a), parse_duration(b)) for k, (a, b) in (d.get("windows") or {}).items()}
        return cls(
            segments=tuple(Segment.from_dict(s) for s in d["segments"]),
            repetitions=int(d.get("repetitions", 1)),
            label=str(d.get("label", "")),
            voltage_stepped=bool(d.get("voltage_stepped", False)),
            gap=parse_duration(d.get("gap", 0)),
            markers=markers,
        )


def validate(seq: PulseSequence) -> list[str]:
    """Return every invariant violation of ``seq`` (empty list means valid)."""
    problems = []
    if not seq.segments:
        problems.append("sequence has no segments")
    if seq.repetitions < 1:
        problems.append(f"repetitions must be >= 1, got {seq.repetitions}")
    if seq.gap < 0:
        problems.append("inter-repetition gap must be >= 0")
    lo, hi = DEVICE_VOLTAGE_RANGE
    for i, seg in enumerate(seq.segments):
        if seg.duration <= 0:
            problems.append(f"segment {i}: non-positive duration ({seg.duration} ns)")
        colors = [ch.color for ch in seg.channels]
        for c in set(colors):
            if colors.count(c) > 1:
                problems.append(f"segment {i}: duplicate color {c.value!r}")
        if not lo <= seg.voltage <= hi:
            problems.append(f"segment {i}: voltage {seg.voltage} V outside device range {lo}..{hi} V")
    volts = {seg.voltage for seg in seq.segments}
    if len(volts) > 1 and not seq.voltage_stepped:
        problems.append("voltage changes between segments but sequence is not marked voltage_stepped")
    if seq.segments and seq.period <= 0:
        problems.append("period must be > 0")
    for name, (a, b) in seq.markers.items():
        if not 0 <= a < b <= seq.period:
            problems.append(f"window {name!r} [{a}, {b}) ns does not fit in the period")
    return problems


def require_valid(seq: PulseSequence) -> PulseSequence:
    problems = validate(seq)
    if problems:
        raise SequenceError(problems)
    return seq


def _lasers(green=0.0, resonant=None, near=None, detuning=None):
    chans = []
    if green is not None and green > 0:
        chans.append(LaserChannel(Color.GREEN, green))
    if resonant is not None:
        chans.append(LaserChannel(Color.RESONANT, resonant, detuning))
    if near is not None:
        chans.append(LaserChannel(Color.NEAR_RESONANT, near))
    return tuple(chans)


def protocol_fig1(probe_power: float = 13.0, green_power: float = 300.0, voltage: float = 0.0,
                  readout_power: float | None = None, repetitions: int = 1) -> PulseSequence:
    """Green initialization with a centered resonant probe, 2 ms pause, 38 ms readout.

    Segments: green 2 ms | green + probe 1 ms | green 2 ms | dark 2 ms | resonant 38 ms.
    The readout uses ``readout_power`` (defaults to ``probe_power``).
    """
    if probe_power < 0 or green_power < 0:
        raise ValueError("powers must be >= 0")
    readout = probe_power if readout_power is None else readout_power
    g = LaserChannel(Color.GREEN, green_power)
    segs = (
        Segment(ms(2), (g,), voltage),
        Segment(ms(1), (g, LaserChannel(Color.RESONANT, probe_power)), voltage),
        Segment(ms(2), (g,), voltage),
        Segment(ms(2), (), voltage),
        Segment(ms(38), (LaserChannel(Color.RESONANT, readout),), voltage),
    )
    markers = {
        "probe": (ms(2), ms(3)),
        "dark_gap": (ms(5), ms(7)),
        "readout": (ms(7), ms(45)),
        "readout_init": (ms(7), ms(8)),
        "readout_final": (ms(44), ms(45)),
    }
    return PulseSequence(segs, repetitions, f"fig1 P={probe_power:g}uW V={voltage:g}V", markers=markers)


def protocol_fig3(tau2: float = 10.0, near_resonant_on: bool = True, voltage: float = 0.0,
                  resonant_power: float = 13.0, green_power: float = 300.0,
                  near_resonant_power: float | None = None, repetitions: int = 1) -> PulseSequence:
    """Green 5 ms | dark 2 ms | resonant 10 ms | delay ``tau2`` ms | resonant 10 ms.

    With ``near_resonant_on`` the near-resonant laser (same power as the
    resonant one unless given) is present in every segment, delays included.
    """
    if tau2 < 0:
        raise ValueError(f"tau2 must be >= 0, got {tau2}")
    nr_power = resonant_power if near_resonant_power is None else near_resonant_power
    nr = nr_power if near_resonant_on else 0.0

    def chans(green=0.0, res=None):
        return _lasers(green, res, nr if near_resonant_on else None)

    t2 = ms(tau2)
    segs = [
        Segment(ms(5), chans(green_power), voltage),
        Segment(ms(2), chans(), voltage),
        Segment(ms(10), chans(res=resonant_power), voltage),
    ]
    if t2 > 0:
        segs.append(Segment(t2, chans(), voltage))
    segs.append(Segment(ms(10), chans(res=resonant_power), voltage))
    p1 = ms(7)
    p2 = ms(17) + t2
    markers = {
        "dark_gap": (ms(5), ms(7)),
        "pulse1": (p1, p1 + ms(10)),
        "pulse2": (p2, p2 + ms(10)),
        "I1_init": (p1, p1 + ms(1)),
        "I1_final": (p1 + ms(9), p1 + ms(10)),
        "I2_init": (p2, p2 + ms(1)),
        "I2_final": (p2 + ms(9), p2 + ms(10)),
    }
    label = f"fig3 tau2={tau2:g}ms NR={'on' if near_resonant_on else 'off'} V={voltage:g}V"
    return PulseSequence(tuple(segs), repetitions, label, markers=markers)


def protocol_ple(detuning: float = 0.0, resonant_power: float = 13.0, green_power: float = 300.0,
                 voltage: float = 0.0, dwell: float = 10.0, repetitions: int = 1) -> PulseSequence:
    """One PLE scan point: green 5 ms, then green + resonant at ``detuning`` for ``dwell`` ms."""
    g = LaserChannel(Color.GREEN, green_power)
    segs = (
        Segment(ms(5), (g,), voltage),
        Segment(ms(dwell), (g, LaserChannel(Color.RESONANT, resonant_power, detuning)), voltage),
    )
    markers = {"scan": (ms(5), ms(5) + ms(dwell))}
    return PulseSequence(segs, repetitions, f"ple D={detuning:g}MHz P={resonant_power:g}uW", markers=markers)


PROTOCOLS = {
    "fig1": protocol_fig1,
    "fig2": protocol_fig1,  # same optical sequence, bias applied throughout
    "fig3": protocol_fig3,
    "ple": protocol_ple,
}


def build_protocol(name: str, **params) -> PulseSequence:
    try:
        builder = PROTOCOLS[name]
    except KeyError:
        raise ValueError(f"unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}") from None
    return builder(**params)


def concat(sequences: Iterable[PulseSequence], label: str = "") -> PulseSequence:
    """Join sequences end to end (marks the result voltage-stepped if needed)."""
    segs = [s for seq in sequences for s in seq.segments]
    stepped = len({s.voltage for s in segs}) > 1
    return PulseSequence(tuple(segs), 1, label, voltage_stepped=stepped)
