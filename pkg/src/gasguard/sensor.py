"""MQ-6 sensor chain: concentration -> sensing resistance -> divider voltage -> ADC code.

The resistance curve is the usual MQ-datasheet power law

    Rs / R0 = (ppm / ref_ppm) ** -slope

capped at ``clean_air_ratio * R0``. Curve constants below are datasheet-style
defaults; only the 5 V rail comes from the original hardware.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from gasguard.errors import DomainError, SaturationError, UsageError


class GasSpecies(str, enum.Enum):
    LPG = "LPG"
    PROPANE = "Propane"
    METHANE = "Methane"
    BUTANE = "Butane"

    @classmethod
    def parse(cls, name: str) -> "GasSpecies":
        for gas in cls:
            if gas.value.lower() == name.strip().lower():
                return gas
        raise ValueError(f"unknown gas species: {name!r}")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class SensitivityCurve:
    gas: GasSpecies
    slope_s: float
    ref_ppm: float = 1000.0
    clean_air_ratio: float = 10.0
    valid_range: tuple[float, float] = (200.0, 10000.0)

    def __post_init__(self):
        lo, hi = self.valid_range
        if self.slope_s <= 0:
            raise DomainError(f"{self.gas}: slope must be positive")
        if self.ref_ppm <= 0 or not 0 < lo < hi:
            raise DomainError(f"{self.gas}: bad ref_ppm / valid_range")
        if self.clean_air_ratio <= (lo / self.ref_ppm) ** (-self.slope_s):
            raise DomainError(f"{self.gas}: clean-air cap binds inside valid_range")


# Datasheet-style slopes, steepest for LPG.
DEFAULT_SLOPES = {
    GasSpecies.LPG: 0.42,
    GasSpecies.PROPANE: 0.40,
    GasSpecies.BUTANE: 0.38,
    GasSpecies.METHANE: 0.35,
}


def default_curves() -> dict[GasSpecies, SensitivityCurve]:
    return {gas: SensitivityCurve(gas, s) for gas, s in DEFAULT_SLOPES.items()}


@dataclass(frozen=True)
class SensorModel:
    r0: float = 10_000.0
    rl: float = 20_000.0
    vc: float = 5.0
    vref: float = 5.0
    adc_bits: int = 10
    curves: Mapping[GasSpecies, SensitivityCurve] = field(default_factory=default_curves)

    def __post_init__(self):
        if min(self.r0, self.rl, self.vc, self.vref) <= 0:
            raise DomainError("r0, rl, vc and vref must be positive")
        if not 8 <= self.adc_bits <= 16:
            raise DomainError("adc_bits must lie in [8, 16]")
        missing = set(GasSpecies) - set(self.curves)
        if missing:
            raise DomainError(f"no sensitivity curve for {sorted(map(str, missing))}")

    @property
    def full_scale(self) -> int:
        return (1 << self.adc_bits) - 1

    @property
    def lsb_volts(self) -> float:
        return self.vref / (1 << self.adc_bits)

    def curve(self, gas: GasSpecies) -> SensitivityCurve:
        return self.curves[gas]

    def with_overrides(self, **kw) -> "SensorModel":
        return replace(self, **kw)


def default_model() -> SensorModel:
    return SensorModel()


@dataclass(frozen=True)
class SensorReading:
    timestamp_ms: int
    gas: GasSpecies
    true_ppm: float
    rs: float
    vout: float
    adc_code: int


def ppm_to_resistance(ppm: float, gas: GasSpecies, model: SensorModel) -> float:
    if ppm < 0 or math.isnan(ppm):
        raise DomainError(f"negative concentration: {ppm}")
    curve = model.curve(gas)
    cap = curve.clean_air_ratio * model.r0
    # at or below the curve's clean-air knee (also guards underflow to 0)
    if ppm <= curve.ref_ppm * curve.clean_air_ratio ** (-1.0 / curve.slope_s):
        return cap
    return min(cap, model.r0 * (ppm / curve.ref_ppm) ** (-curve.slope_s))


def resistance_to_voltage(rs: float, model: SensorModel) -> float:
    if not rs > 0:
        raise DomainError(f"sensing resistance must be positive, got {rs}")
    return model.vc * model.rl / (rs + model.rl)


def adc_quantize(vout: float, model: SensorModel) -> int:
    if vout < 0 or math.isnan(vout):
        raise DomainError(f"negative voltage: {vout}")
    code = math.floor(vout * (1 << model.adc_bits) / model.vref)
    return min(code, model.full_scale)


def code_center(code: int, model: SensorModel) -> float:
    """Voltage at the middle of an ADC code's bin."""
    return (code + 0.5) * model.lsb_volts


def sample(true_ppm: float, gas: GasSpecies, model: SensorModel, timestamp_ms: int = 0) -> SensorReading:
    rs = ppm_to_resistance(true_ppm, gas, model)
    vout = resistance_to_voltage(rs, model)
    return SensorReading(timestamp_ms, gas, true_ppm, rs, vout, adc_quantize(vout, model))


def _code_to_resistance(adc_code: int, model: SensorModel) -> float:
    if not 0 <= adc_code <= model.full_scale:
        raise DomainError(f"adc_code {adc_code} outside [0, {model.full_scale}]")
    vmid = code_center(adc_code, model)
    if vmid >= model.vc:
        raise SaturationError(f"adc_code {adc_code} at or above the supply rail")
    return model.rl * (model.vc - vmid) / vmid


def estimate_ppm(adc_code: int, gas: GasSpecies, model: SensorModel) -> float:
    rs = _code_to_resistance(adc_code, model)
    curve = model.curve(gas)
    if rs >= curve.clean_air_ratio * model.r0:
        return 0.0
    ppm = curve.ref_ppm * (rs / model.r0) ** (-1.0 / curve.slope_s)
    return min(max(ppm, 0.0), 10 * curve.valid_range[1])


def calibrate_r0(readings: Sequence[SensorReading], model: SensorModel) -> float:
    """Mean back-solved Rs over readings taken at the curve's reference exposure.

    ``model.r0`` is ignored; only the divider and ADC constants are used.
    """
    if not readings:
        raise UsageError("calibration needs at least one reading")
    total = 0.0
    for r in readings:
        if r.adc_code >= model.full_scale:
            raise SaturationError(f"reading at t={r.timestamp_ms} ms is at full scale")
        total += _code_to_resistance(r.adc_code, model)
    return total / len(readings)
