"""Charge-state space and transition rates of a single SiV center.

Three states are tracked: the SiV- ground manifold (``BRIGHT_GROUND``), the
optically excited SiV- manifold (``BRIGHT_EXCITED``) and the non-fluorescing
SiV2- state (``DARK``).  Rates are built from the laser channels and the DC
bias applied during a sequence segment.

Units: power in microwatts, detuning in MHz, voltage in volts, rates in Hz.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Mapping

import numpy as np
import scipy.constants as sc

__all__ = [
    "ChargeState",
    "Color",
    "LaserChannel",
    "ChargeModelParams",
    "RateSet",
    "EffectiveRates",
    "NEAR_RESONANT_DETUNING_MHZ",
    "excitation_rate",
    "drift_factor",
    "capture_quench",
    "hole_flux",
    "build_rates",
    "excited_fraction",
    "effective_rates",
    "effective_bright_to_dark_rate",
]

#: 4.6 meV blue detuning of the near-resonant laser, expressed in MHz.
NEAR_RESONANT_DETUNING_MHZ = 4.6e-3 * sc.e / sc.h / 1e6


class ChargeState(enum.IntEnum):
    BRIGHT_GROUND = 0
    BRIGHT_EXCITED = 1
    DARK = 2

    @classmethod
    def parse(cls, value) -> "ChargeState":
        if isinstance(value, ChargeState):
            return value
        if isinstance(value, str):
            return cls[value.strip().upper()]
        return cls(int(value))


class Color(str, enum.Enum):
    GREEN = "green"
    RESONANT = "resonant"
    NEAR_RESONANT = "near_resonant"

    @classmethod
    def parse(cls, value) -> "Color":
        if isinstance(value, Color):
            return value
        return cls(str(value).strip().lower().replace("-", "_"))


_DEFAULT_DETUNING = {
    Color.GREEN: 0.0,
    Color.RESONANT: 0.0,
    Color.NEAR_RESONANT: NEAR_RESONANT_DETUNING_MHZ,
}


@dataclass(frozen=True)
class LaserChannel:
    """One laser color with its power (uW) and detuning (MHz).

    ``detuning=None`` selects the color default: 0 for the resonant laser and
    +4.6 meV for the near-resonant one.  Green ignores detuning.
    """

    color: Color
    power: float
    detuning: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "color", Color.parse(self.color))
        if not (self.power >= 0 and math.isfinite(self.power)):
            raise ValueError(f"laser power must be finite and >= 0, got {self.power!r}")
        if self.detuning is None:
            object.__setattr__(self, "detuning", _DEFAULT_DETUNING[self.color])
        object.__setattr__(self, "power", float(self.power))
        object.__setattr__(self, "detuning", float(self.detuning))

    def to_dict(self) -> dict:
        d = {"color": self.color.value, "power_uw": self.power}
        if self.detuning != _DEFAULT_DETUNING[self.color]:
            d["detuning_mhz"] = self.detuning
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LaserChannel":
        return cls(Color.parse(d["color"]), float(d["power_uw"]), d.get("detuning_mhz"))


def _default_hole_gen():
    return {Color.GREEN: 1.0, Color.RESONANT: 1e-6, Color.NEAR_RESONANT: 1e-6}


@dataclass(frozen=True)
class ChargeModelParams:
    """Physical rate parameters of one emitter.

    Attributes
    ----------
    gamma_rad : float
        Radiative decay rate of the excited manifold (Hz).
    zpl_branching : float
        Fraction of emission into the zero-phonon line.
    gamma_0 : float
        Low-power optical linewidth FWHM (MHz).
    p_sat : float
        Saturation power of the resonant transition (uW).
    r_max : float
        On-resonance excitation rate scale (Hz).
    k_ion : float
        Photoionization rate out of the excited manifold (Hz).
    green_exc : float
        Off-resonant pumping rate per uW of green power (Hz/uW).
    hole_gen : dict
        Hole-generation yield per uW for each laser color.
    c_capture : float
        Hole flux to Dark -> BrightGround rate conversion (Hz per flux unit).
    v_half, f_max : float
        Voltage scale (V) and ceiling of the drift enhancement of hole flux.
    v_field_ion, k_field_ion : float
        Onset voltage (V) and rate scale (Hz) of laser-free field ionization.
    v_capture_quench : float
        Voltage scale (V) over which hole capture is suppressed above
        ``v_field_ion``.  ``inf`` disables the suppression.
    """

    gamma_rad: float = 1.0 / 1.7e-9
    zpl_branching: float = 0.7
    gamma_0: float = 220.0
    p_sat: float = 130.0
    r_max: float = 0.02 / 1.7e-9
    k_ion: float = 2.51e5
    green_exc: float = 400.0
    hole_gen: Mapping[Color, float] = field(default_factory=_default_hole_gen)
    c_capture: float = 4615.0
    v_half: float = 10.0
    f_max: float = 5.0e4
    v_field_ion: float = 120.0
    k_field_ion: float = 2000.0
    v_capture_quench: float = 13.0

    def __post_init__(self):
        hg = {Color.parse(k): float(v) for k, v in dict(self.hole_gen).items()}
        for c in Color:
            hg.setdefault(c, 0.0)
        object.__setattr__(self, "hole_gen", hg)
        errors = self.check()
        if errors:
            raise ValueError("invalid model parameters: " + "; ".join(errors))

    def check(self) -> list[str]:
        errors = []
        for f in fields(self):
            if f.name == "hole_gen":
                continue
            v = getattr(self, f.name)
            if math.isnan(v) or v < 0:
                errors.append(f"{f.name} must be >= 0, got {v}")
        for c, v in self.hole_gen.items():
            if not (v >= 0 and math.isfinite(v)):
                errors.append(f"hole_gen[{c.value}] must be finite and >= 0")
        if not 0 <= self.zpl_branching <= 1:
            errors.append("zpl_branching must lie in [0, 1]")
        if self.p_sat <= 0:
            errors.append("p_sat must be > 0")
        if self.gamma_0 <= 0:
            errors.append("gamma_0 must be > 0")
        if self.f_max < 1:
            errors.append("f_max must be >= 1")
        if self.v_half <= 0:
            errors.append("v_half must be > 0")
        if self.v_field_ion <= 0:
            errors.append("v_field_ion must be > 0")
        if self.v_capture_quench <= 0:
            errors.append("v_capture_quench must be > 0")
        return errors

    def replace(self, **changes) -> "ChargeModelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hole_gen"] = {c.value: v for c, v in self.hole_gen.items()}
        if math.isinf(d["v_capture_quench"]):
            d["v_capture_quench"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChargeModelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model parameter(s): {sorted(unknown)}")
        kw = dict(d)
        if "hole_gen" in kw:
            kw["hole_gen"] = {Color.parse(k): float(v) for k, v in kw["hole_gen"].items()}
        for k, v in kw.items():
            if k != "hole_gen":
                kw[k] = float(v)
        return cls(**kw)

    def with_overrides(self, overrides: Mapping) -> "ChargeModelParams":
        d = self.to_dict()
        for k, v in overrides.items():
            if k == "hole_gen":
                d["hole_gen"] = {**d["hole_gen"], **{Color.parse(c).value: x for c, x in v.items()}}
            else:
                d[k] = v
        return ChargeModelParams.from_dict(d)

    def digest(self) -> str:
        """Short stable hash of the parameter values."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class RateSet:
    """The five allowed transition rates (Hz)."""

    excitation: float = 0.0
    decay: float = 0.0
    photoionization: float = 0.0
    field_ionization: float = 0.0
    capture: float = 0.0

    _TRANSITIONS = {
        (ChargeState.BRIGHT_GROUND, ChargeState.BRIGHT_EXCITED): "excitation",
        (ChargeState.BRIGHT_EXCITED, ChargeState.BRIGHT_GROUND): "decay",
        (ChargeState.BRIGHT_EXCITED, ChargeState.DARK): "photoionization",
        (ChargeState.BRIGHT_GROUND, ChargeState.DARK): "field_ionization",
        (ChargeState.DARK, ChargeState.BRIGHT_GROUND): "capture",
    }

    def rate(self, src: ChargeState, dst: ChargeState) -> float:
        name = self._TRANSITIONS.get((ChargeState(src), ChargeState(dst)))
        return 0.0 if name is None else getattr(self, name)

    def generator(self) -> np.ndarray:
        """Row-convention generator: ``Q[i, j]`` is the i -> j rate, rows sum to 0."""
        q = np.zeros((3, 3))
        for (i, j), name in self._TRANSITIONS.items():
            q[i, j] = getattr(self, name)
        q[np.diag_indices(3)] = -q.sum(axis=1)
        return q

    def is_zero(self) -> bool:
        return not any(getattr(self, n) for n in self._TRANSITIONS.values())


def excitation_rate(power: float, detuning: float, params: ChargeModelParams) -> float:
    """Saturated Lorentzian pumping rate of the SiV- optical transition.

    The line has FWHM ``gamma_0 * sqrt(1 + s)`` with ``s = power / p_sat``.
    """
    if power <= 0:
        return 0.0
    s = power / params.p_sat
    x = 2.0 * detuning / params.gamma_0
    return params.r_max * s / (1.0 + s + x * x)


def drift_factor(voltage: float, params: ChargeModelParams) -> float:
    """Field-driven enhancement of the hole current reaching the emitter."""
    v = max(voltage, 0.0)
    return 1.0 + (params.f_max - 1.0) * v / (v + params.v_half)


def capture_quench(voltage: float, params: ChargeModelParams) -> float:
    """Suppression of hole capture above the field-ionization onset (1 below it)."""
    over = voltage - params.v_field_ion
    if over <= 0 or math.isinf(params.v_capture_quench):
        return 1.0
    return math.exp(-over / params.v_capture_quench)


def hole_flux(channels: Iterable[LaserChannel], voltage: float, params: ChargeModelParams) -> float:
    generated = sum(params.hole_gen[ch.color] * ch.power for ch in channels)
    if generated == 0:
        return 0.0
    return drift_factor(voltage, params) * generated


def _field_ionization(voltage: float, params: ChargeModelParams) -> float:
    return params.k_field_ion * max(0.0, voltage - params.v_field_ion) / params.v_field_ion


def build_rates(channels: Iterable[LaserChannel], voltage: float, params: ChargeModelParams) -> RateSet:
    channels = list(channels)
    exc = 0.0
    for ch in channels:
        if ch.color is Color.GREEN:
            exc += params.green_exc * ch.power
        else:
            exc += excitation_rate(ch.power, ch.detuning, params)
    capture = params.c_capture * hole_flux(channels, voltage, params) * capture_quench(voltage, params)
    # without optical drive the excited manifold is never populated; its exits are
    # zeroed so that every state is absorbing in the dark
    driven = exc > 0
    return RateSet(
        excitation=exc,
        decay=params.gamma_rad if driven else 0.0,
        photoionization=params.k_ion if driven else 0.0,
        field_ionization=_field_ionization(voltage, params),
        capture=capture,
    )


def excited_fraction(rates: RateSet) -> float:
    """Quasi-steady excited share of the bright manifold."""
    total = rates.excitation + rates.decay + rates.photoionization
    return rates.excitation / total if total > 0 else 0.0


@dataclass(frozen=True)
class EffectiveRates:
    """Two-state (bright/dark) rates with the excited manifold eliminated."""

    bright_to_dark: float
    dark_to_bright: float
    excited_fraction: float
    emission_rate: float  # total photon emission rate while bright (Hz)


def effective_rates(rates: RateSet) -> EffectiveRates:
    pi_e = excited_fraction(rates)
    return EffectiveRates(
        bright_to_dark=rates.photoionization * pi_e + rates.field_ionization * (1.0 - pi_e),
        dark_to_bright=rates.capture,
        excited_fraction=pi_e,
        emission_rate=rates.decay * pi_e,
    )


def effective_bright_to_dark_rate(params: ChargeModelParams, power: float, detuning: float = 0.0) -> float:
    """Bright -> dark rate under resonant-only light, no capture, no bias."""
    r = excitation_rate(power, detuning, params)
    return params.k_ion * r / (r + params.gamma_rad + params.k_ion)
