"""Alarm firmware control loop.

``tick`` is a pure function: it takes the previous state and one ADC sample
and returns the next state plus a list of effects (LCD, buzzer, LED, SMS,
telemetry) for the harness to carry out.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Union

from gasguard.errors import ConfigurationError, UsageError
from gasguard.gateway.wire import TelemetryRecord
from gasguard.modem import SmsMessage
from gasguard.sensor import GasSpecies, SensorModel, estimate_ppm

LCD_WIDTH = 16

ALERT_LINES = ("Gas Leakage".ljust(LCD_WIDTH), "Detected".ljust(LCD_WIDTH))
SMS_TEMPLATE = "EMERGENCY ALERT: {gas} gas leakage found in your home"

# LPG and propane limits are the published ones; methane and butane are
# placeholders chosen for this simulator.
DEFAULT_THRESHOLDS = {
    GasSpecies.LPG: 1000.0,
    GasSpecies.PROPANE: 10000.0,
    GasSpecies.METHANE: 5000.0,
    GasSpecies.BUTANE: 1000.0,
}

PHONE_RE = re.compile(r"\+[0-9]{7,15}")


class Verdict(enum.Enum):
    OVER = "over"
    IN_BAND = "in_band"
    UNDER_CLEAR = "under_clear"


class AlarmState(enum.Enum):
    NORMAL = "Normal"
    PENDING = "Pending"
    ALARMED = "Alarmed"
    CLEARING = "Clearing"

    @property
    def alarming(self) -> bool:
        return self in (AlarmState.ALARMED, AlarmState.CLEARING)


@dataclass(frozen=True)
class ThresholdTable:
    thresholds: Mapping[GasSpecies, float] = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    hysteresis_fraction: float = 0.1
    raise_count: int = 3
    clear_count: int = 5

    def __post_init__(self):
        if any(self.thresholds.get(g, 0) <= 0 for g in GasSpecies):
            raise ConfigurationError("every gas needs a positive threshold")
        if not 0 < self.hysteresis_fraction < 1:
            raise ConfigurationError("hysteresis_fraction must lie in (0, 1)")
        if self.raise_count < 1 or self.clear_count < 1:
            raise ConfigurationError("raise_count and clear_count must be >= 1")

    def threshold(self, gas: GasSpecies) -> float:
        return self.thresholds[gas]

    def clear_level(self, gas: GasSpecies) -> float:
        return (1.0 - self.hysteresis_fraction) * self.thresholds[gas]

    def with_threshold(self, gas: GasSpecies, ppm: float) -> "ThresholdTable":
        return replace(self, thresholds={**self.thresholds, gas: ppm})


@dataclass(frozen=True)
class AlarmFsm:
    state: AlarmState = AlarmState.NORMAL
    over_count: int = 0
    under_count: int = 0
    latched_since_ms: Optional[int] = None


@dataclass(frozen=True)
class FirmwareConfig:
    device_id: str = "gasguard-1"
    emergency_number: Optional[str] = None
    sms_repeat_ms: int = 30_000
    sample_period_ms: int = 500


@dataclass(frozen=True)
class FirmwareState:
    active_gas: GasSpecies = GasSpecies.LPG
    fsm: AlarmFsm = AlarmFsm()
    last_adc_code: Optional[int] = None
    last_estimate_ppm: float = 0.0
    seq: int = -1
    buzzer_on: bool = False
    led_on: bool = False
    lcd: tuple[str, str] = (" " * LCD_WIDTH, " " * LCD_WIDTH)
    last_sms_ms: Optional[int] = None
    last_tick_ms: Optional[int] = None


@dataclass(frozen=True)
class BuzzerSet:
    on: bool


@dataclass(frozen=True)
class LedSet:
    on: bool


@dataclass(frozen=True)
class LcdSet:
    line1: str
    line2: str


@dataclass(frozen=True)
class SmsSend:
    message: SmsMessage


@dataclass(frozen=True)
class TelemetryEmit:
    record: TelemetryRecord


Effect = Union[BuzzerSet, LedSet, LcdSet, SmsSend, TelemetryEmit]


def evaluate_threshold(estimate: float, gas: GasSpecies, table: ThresholdTable) -> Verdict:
    if estimate > table.threshold(gas):
        return Verdict.OVER
    if estimate < table.clear_level(gas):
        return Verdict.UNDER_CLEAR
    return Verdict.IN_BAND


def fsm_step(fsm: AlarmFsm, verdict: Verdict, now_ms: int, raise_count: int = 3,
             clear_count: int = 5) -> tuple[AlarmFsm, bool, bool]:
    """Advance the debounce/latch machine by one verdict.

    Returns ``(next_fsm, raised, cleared)``. Raising takes ``raise_count``
    consecutive OVER verdicts; clearing takes ``clear_count`` consecutive
    UNDER_CLEAR verdicts. IN_BAND keeps an alarm latched.
    """
    s = fsm.state
    if s in (AlarmState.NORMAL, AlarmState.PENDING):
        if verdict is not Verdict.OVER:
            return AlarmFsm(), False, False
        n = fsm.over_count + 1
        if n >= raise_count:
            return AlarmFsm(AlarmState.ALARMED, latched_since_ms=now_ms), True, False
        return AlarmFsm(AlarmState.PENDING, over_count=n), False, False

    if verdict is not Verdict.UNDER_CLEAR:
        return AlarmFsm(AlarmState.ALARMED, latched_since_ms=fsm.latched_since_ms), False, False
    n = fsm.under_count + 1
    if n >= clear_count:
        return AlarmFsm(), False, True
    return AlarmFsm(AlarmState.CLEARING, under_count=n,
                    latched_since_ms=fsm.latched_since_ms), False, False


def _fit(text: str) -> str:
    return text[:LCD_WIDTH].ljust(LCD_WIDTH)


def render_lcd(state: FirmwareState) -> tuple[str, str]:
    if state.fsm.state.alarming:
        return ALERT_LINES
    ppm = state.last_estimate_ppm
    value = "....." if ppm >= 100_000 else str(math.floor(ppm + 0.5))
    head = f"{state.active_gas.value}:"
    body = value + "ppm"
    width = LCD_WIDTH - len(head) - 1
    line1 = head + body.rjust(width) + " " if len(body) <= width else head + body
    status = "PENDING" if state.fsm.state is AlarmState.PENDING else "NORMAL"
    return _fit(line1), _fit(f"STATUS: {status}")


def compose_sms(gas: GasSpecies, now_ms: int, config: FirmwareConfig) -> SmsMessage:
    number = config.emergency_number
    if not number:
        raise ConfigurationError("no emergency number configured")
    if not PHONE_RE.fullmatch(number):
        raise ConfigurationError(f"emergency number {number!r} is not +<7-15 digits>")
    return SmsMessage(number, SMS_TEMPLATE.format(gas=gas.value), now_ms, 0)


def sms_due(state: FirmwareState, now_ms: int, config: FirmwareConfig) -> bool:
    return state.last_sms_ms is None or now_ms - state.last_sms_ms >= config.sms_repeat_ms


def compose_telemetry(state: FirmwareState, adc_code: int, now_ms: int,
                      config: FirmwareConfig) -> TelemetryRecord:
    return TelemetryRecord(
        device_id=config.device_id,
        seq=state.seq,
        timestamp_ms=now_ms,
        gas=state.active_gas,
        ppm=math.floor(state.last_estimate_ppm + 0.5),
        adc_code=adc_code,
        alarm=state.fsm.state.alarming,
    )


def tick(state: FirmwareState, adc_code: int, now_ms: int, table: ThresholdTable,
         model: SensorModel, config: FirmwareConfig) -> tuple[FirmwareState, list[Effect]]:
    if state.last_tick_ms is not None and now_ms <= state.last_tick_ms:
        raise UsageError(f"tick time went from {state.last_tick_ms} to {now_ms} ms")

    gas = state.active_gas
    estimate = estimate_ppm(adc_code, gas, model)
    verdict = evaluate_threshold(estimate, gas, table)
    fsm, _, _ = fsm_step(state.fsm, verdict, now_ms, table.raise_count, table.clear_count)
    alarming = fsm.state.alarming

    nxt = replace(state, fsm=fsm, last_adc_code=adc_code, last_estimate_ppm=estimate,
                  seq=state.seq + 1, buzzer_on=alarming, led_on=alarming, last_tick_ms=now_ms)
    nxt = replace(nxt, lcd=render_lcd(nxt))

    effects: list[Effect] = [LcdSet(*nxt.lcd)]
    if alarming != state.buzzer_on:
        effects += [BuzzerSet(alarming), LedSet(alarming)]
    if fsm.state is AlarmState.ALARMED and sms_due(state, now_ms, config):
        effects.append(SmsSend(compose_sms(gas, now_ms, config)))
        nxt = replace(nxt, last_sms_ms=now_ms)
    effects.append(TelemetryEmit(compose_telemetry(nxt, adc_code, now_ms, config)))
    return nxt, effects
