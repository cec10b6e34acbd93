"""Scripted leak scenarios and the deterministic simulation harness.

Scenario file grammar, one item per line, ``#`` starts a comment::

    device=kitchen-1
    gas=LPG
    period_ms=500
    duration_ms=60000
    sigma_ppm=0
    seed=1
    segment 0 30000 linear 0 2000
    segment 30000 60000 hold 2000 2000
    outage 40000 45000          # optional: data channel down in [start, end)

Optional overrides: ``phone``, ``threshold_ppm``, ``hysteresis``,
``raise_count``, ``clear_count``, ``sms_repeat_ms``, ``r0``, ``rl``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

from gasguard import firmware as fw
from gasguard.errors import GasGuardError, UsageError
from gasguard.gateway.server import InProcessLink, SocketLink, parse_addr
from gasguard.gateway.store import TelemetryStore, recover
from gasguard.gateway.wire import DEVICE_ID_RE, encode_frame
from gasguard.modem import (
    Attention,
    DeliveryError,
    Modem,
    RegistrationQuery,
    SetTextMode,
)
from gasguard.sensor import GasSpecies, SensorModel, sample

DEFAULT_PHONE = "+15550100000"
IN_PROCESS = ("gateway.local", 7070)

_MASK64 = (1 << 64) - 1


class LoadError(GasGuardError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None, fieldname: Optional[str] = None):
        where = f"line {line}: " if line is not None else ""
        what = f"[{fieldname}] " if fieldname else ""
        super().__init__(f"{where}{what}{message}")
        self.line = line
        self.field = fieldname


class StartupError(GasGuardError):
    pass


class Shape(enum.Enum):
    HOLD = "hold"
    LINEAR = "linear"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class Segment:
    start_ms: int
    end_ms: int
    start_ppm: float
    end_ppm: float
    shape: Shape = Shape.HOLD

    def value_at(self, t_ms: int) -> float:
        frac = (t_ms - self.start_ms) / (self.end_ms - self.start_ms)
        if self.shape is Shape.HOLD:
            return self.start_ppm
        if self.shape is Shape.LINEAR:
            return self.start_ppm + (self.end_ppm - self.start_ppm) * frac
        return self.start_ppm * (self.end_ppm / self.start_ppm) ** frac


@dataclass(frozen=True)
class Scenario:
    device_id: str
    active_gas: GasSpecies
    duration_ms: int
    segments: tuple[Segment, ...]
    sample_period_ms: int = 500
    noise_sigma_ppm: float = 0.0
    rng_seed: int = 0
    emergency_number: str = DEFAULT_PHONE
    thresholds: fw.ThresholdTable = field(default_factory=fw.ThresholdTable)
    sms_repeat_ms: int = 30_000
    model: SensorModel = field(default_factory=SensorModel)
    outages: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        validate(self)

    @property
    def ticks(self) -> int:
        return -(-self.duration_ms // self.sample_period_ms)

    @property
    def threshold_ppm(self) -> float:
        return self.thresholds.threshold(self.active_gas)

    def firmware_config(self) -> fw.FirmwareConfig:
        return fw.FirmwareConfig(self.device_id, self.emergency_number, self.sms_repeat_ms,
                                 self.sample_period_ms)


def validate(sc: Scenario) -> None:
    if not DEVICE_ID_RE.fullmatch(sc.device_id):
        raise LoadError("1-32 chars of [A-Za-z0-9_-] expected", fieldname="device")
    if not fw.PHONE_RE.fullmatch(sc.emergency_number):
        raise LoadError("expected + followed by 7-15 digits", fieldname="phone")
    if sc.duration_ms <= 0:
        raise LoadError("must be positive", fieldname="duration_ms")
    if sc.sample_period_ms <= 0:
        raise LoadError("must be positive", fieldname="period_ms")
    if sc.noise_sigma_ppm < 0:
        raise LoadError("must be >= 0", fieldname="sigma_ppm")
    if not sc.segments:
        raise LoadError("at least one segment is required", fieldname="segment")
    expect = 0
    for seg in sc.segments:
        if seg.end_ms <= seg.start_ms:
            raise LoadError(f"segment [{seg.start_ms}, {seg.end_ms}) is empty", fieldname="segment")
        if seg.start_ppm < 0 or seg.end_ppm < 0:
            raise LoadError("negative ppm", fieldname="segment")
        if seg.shape is Shape.EXPONENTIAL and (seg.start_ppm == 0 or seg.end_ppm == 0):
            raise LoadError("exponential segment needs nonzero endpoints", fieldname="segment")
        if seg.start_ms > expect:
            raise LoadError(f"gap between {expect} and {seg.start_ms} ms", fieldname="segment")
        if seg.start_ms < expect:
            raise LoadError(f"overlap at {seg.start_ms} ms", fieldname="segment")
        expect = seg.end_ms
    if expect != sc.duration_ms:
        raise LoadError(f"segments cover [0, {expect}) but duration is {sc.duration_ms}",
                        fieldname="segment")
    for start, end in sc.outages:
        if not 0 <= start < end:
            raise LoadError(f"bad outage window [{start}, {end})", fieldname="outage")


_HEADER_KEYS = {
    "device", "gas", "period_ms", "duration_ms", "sigma_ppm", "seed", "phone", "threshold_ppm",
    "hysteresis", "raise_count", "clear_count", "sms_repeat_ms", "r0", "rl",
}


def _num(text: str, line: int, key: str, kind=float):
    try:
        v = kind(text)
    except ValueError:
        raise LoadError(f"not a number: {text!r}", line, key) from None
    if isinstance(v, float) and not math.isfinite(v):
        raise LoadError(f"not finite: {text!r}", line, key)
    return v


def load_scenario(text: str) -> Scenario:
    header: dict[str, tuple[str, int]] = {}
    segments: list[tuple[Segment, int]] = []
    outages: list[tuple[int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line and not line.startswith(("segment", "outage")):
            key, _, value = (p.strip() for p in line.partition("="))
            if key not in _HEADER_KEYS:
                raise LoadError("unknown key", lineno, key)
            if key in header:
                raise LoadError("duplicate key", lineno, key)
            header[key] = (value, lineno)
            continue
        word, *args = line.split()
        if word == "segment":
            if len(args) != 5:
                raise LoadError("expected: segment <start_ms> <end_ms> <shape> <start_ppm> <end_ppm>",
                                lineno, "segment")
            try:
                shape = Shape(args[2].lower())
            except ValueError:
                raise LoadError(f"unknown shape {args[2]!r}", lineno, "segment") from None
            seg = Segment(_num(args[0], lineno, "segment", int), _num(args[1], lineno, "segment", int),
                          _num(args[3], lineno, "segment"), _num(args[4], lineno, "segment"), shape)
            segments.append((seg, lineno))
        elif word == "outage":
            if len(args) != 2:
                raise LoadError("expected: outage <start_ms> <end_ms>", lineno, "outage")
            outages.append((_num(args[0], lineno, "outage", int), _num(args[1], lineno, "outage", int)))
        else:
            raise LoadError(f"unrecognised line {raw.strip()!r}", lineno)

    for key in ("device", "gas", "duration_ms"):
        if key not in header:
            raise LoadError("missing required field", fieldname=key)

    def get(key, kind, default):
        if key not in header:
            return default
        value, lineno = header[key]
        return _num(value, lineno, key, kind)

    gas_text, gas_line = header["gas"]
    try:
        gas = GasSpecies.parse(gas_text)
    except ValueError as e:
        raise LoadError(str(e), gas_line, "gas") from None

    # Re-check segment coverage here to report the offending line number.
    expect = 0
    for seg, lineno in segments:
        if seg.start_ms != expect:
            kind = "gap" if seg.start_ms > expect else "overlap"
            raise LoadError(f"{kind} at {min(seg.start_ms, expect)} ms", lineno, "segment")
        if seg.end_ms <= seg.start_ms:
            raise LoadError("segment end must be after its start", lineno, "segment")
        if seg.start_ppm < 0 or seg.end_ppm < 0:
            raise LoadError("negative ppm", lineno, "segment")
        expect = seg.end_ms

    try:
        table = fw.ThresholdTable()
        if "threshold_ppm" in header:
            table = table.with_threshold(gas, get("threshold_ppm", float, None))
        table = fw.ThresholdTable(
            table.thresholds,
            get("hysteresis", float, table.hysteresis_fraction),
            get("raise_count", int, table.raise_count),
            get("clear_count", int, table.clear_count),
        )
        model = SensorModel(r0=get("r0", float, 10_000.0), rl=get("rl", float, 20_000.0))
    except LoadError:
        raise
    except GasGuardError as e:
        raise LoadError(str(e)) from None

    return Scenario(
        device_id=header["device"][0],
        active_gas=gas,
        duration_ms=get("duration_ms", int, 0),
        segments=tuple(s for s, _ in segments),
        sample_period_ms=get("period_ms", int, 500),
        noise_sigma_ppm=get("sigma_ppm", float, 0.0),
        rng_seed=get("seed", int, 0),
        emergency_number=header.get("phone", (DEFAULT_PHONE, 0))[0],
        thresholds=table,
        sms_repeat_ms=get("sms_repeat_ms", int, 30_000),
        model=model,
        outages=tuple(outages),
    )


def load_scenario_file(path) -> Scenario:
    return load_scenario(Path(path).read_text())


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def tick_normal(seed: int, tick: int) -> float:
    """Standard normal deviate for one tick, from the substream seeded with seed XOR tick."""
    state = (seed ^ tick) & _MASK64
    state, a = splitmix64(state)
    _, b = splitmix64(state)
    u1 = ((a >> 11) + 1) * 2.0**-53  # (0, 1]
    u2 = (b >> 11) * 2.0**-53
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def concentration_at(scenario: Scenario, t_ms: int, tick: Optional[int] = None) -> float:
    if not 0 <= t_ms < scenario.duration_ms:
        raise UsageError(f"t={t_ms} ms outside [0, {scenario.duration_ms})")
    seg = next(s for s in scenario.segments if s.start_ms <= t_ms < s.end_ms)
    ppm = seg.value_at(t_ms)
    if scenario.noise_sigma_ppm > 0:
        if tick is None:
            tick = t_ms // scenario.sample_period_ms
        ppm += scenario.noise_sigma_ppm * tick_normal(scenario.rng_seed, tick)
    return max(ppm, 0.0)


@dataclass(frozen=True)
class RunReport:
    ticks: int
    first_alarm_ms: Optional[int]
    alarm_latency_ms: Optional[int]
    sms_sent: int
    records_persisted: int
    final_state: str
    records_pending: int = 0


def _fmt_ms(v: Optional[int]) -> str:
    return "none" if v is None else f"{v} ms"


def report_render(report: RunReport, fmt: str = "text") -> str:
    if fmt == "machine":
        return json.dumps(asdict(report))
    if fmt != "text":
        raise UsageError(f"unknown report format {fmt!r}")
    rows = [
        ("ticks", str(report.ticks)),
        ("first_alarm", _fmt_ms(report.first_alarm_ms)),
        ("alarm_latency", _fmt_ms(report.alarm_latency_ms)),
        ("sms_sent", str(report.sms_sent)),
        ("records_persisted", str(report.records_persisted)),
        ("records_pending", str(report.records_pending)),
        ("final_state", report.final_state),
    ]
    return "".join(f"{k}: {v}\n" for k, v in rows)


def parse_machine_report(text: str) -> RunReport:
    obj = json.loads(text)
    names = [f.name for f in fields(RunReport)]
    return RunReport(**{k: obj[k] for k in names})


class EventLog(list):
    def add(self, t_ms: int, kind: str, detail: str = "") -> None:
        self.append(f"{t_ms:>9} {kind:<8} {detail}".rstrip())

    def text(self) -> str:
        return "\n".join(self) + "\n"


def _effect_str(effect: fw.Effect) -> tuple[str, str]:
    if isinstance(effect, fw.LcdSet):
        return "lcd", f"{effect.line1!r} {effect.line2!r}"
    if isinstance(effect, fw.BuzzerSet):
        return "buzzer", "on" if effect.on else "off"
    if isinstance(effect, fw.LedSet):
        return "led", "on" if effect.on else "off"
    if isinstance(effect, fw.SmsSend):
        return "sms", f"{effect.message.destination} {effect.message.body!r}"
    return "emit", encode_frame(effect.record).decode().rstrip("\n")


class Harness:
    """Clocks firmware, modem and gateway for one scenario.

    By default the gateway is an in-process store; with ``remote`` the modem
    opens a real TCP connection to a running gateway's ingest socket.
    """

    def __init__(self, scenario: Scenario, remote: Optional[str] = None,
                 store: Optional[TelemetryStore] = None, gateway_log: Optional[str] = None,
                 on_tick: Optional[Callable[[int, fw.FirmwareState], None]] = None):
        self.scenario = scenario
        self.on_tick = on_tick
        self.events = EventLog()
        if remote is not None:
            self.store = None
            self.gateway_addr = parse_addr(remote)
            connector = lambda host, port: SocketLink(host, port)  # noqa: E731
        else:
            if store is None:
                store = recover(gateway_log) if gateway_log else TelemetryStore()
            self.store = store
            self.gateway_addr = IN_PROCESS
            connector = lambda host, port: InProcessLink(store)  # noqa: E731
        self.modem = Modem(connector)
        self._seen = 0
        self.acked = 0
        self.pending: list = []

    def _log_modem(self, t_ms: int) -> None:
        for direction, data in self.modem.transcript[self._seen:]:
            self.events.add(t_ms, "modem" + direction, repr(data))
        self._seen = len(self.modem.transcript)

    def _open_channel(self, t_ms: int) -> bool:
        ok = self.modem.open_data(*self.gateway_addr, t_ms)
        self._log_modem(t_ms)
        return ok

    def _flush(self, t_ms: int) -> None:
        while self.pending:
            record = self.pending[0]
            try:
                ack = self.modem.transmit_telemetry(record, t_ms)
            except DeliveryError as e:
                self.events.add(t_ms, "retain", f"{len(self.pending)} pending: {e}")
                break
            finally:
                self._log_modem(t_ms)
            self.pending.pop(0)
            if ack:
                self.acked += 1
                self.events.add(t_ms, "ack", f"seq={record.seq}")
            else:
                self.events.add(t_ms, "nack", f"seq={record.seq} {self.modem.last_reply!r}")

    def _in_outage(self, t_ms: int) -> bool:
        return any(s <= t_ms < e for s, e in self.scenario.outages)

    def run(self) -> tuple[EventLog, RunReport]:
        sc = self.scenario
        cfg = sc.firmware_config()
        self.modem.command(Attention(), 0)
        self.modem.command(RegistrationQuery(), 0)
        self.modem.command(SetTextMode(True), 0)
        self._log_modem(0)
        if not self._open_channel(0):
            raise StartupError(f"gateway {self.gateway_addr[0]}:{self.gateway_addr[1]} unreachable")

        state = fw.FirmwareState(active_gas=sc.active_gas)
        threshold = sc.threshold_ppm
        crossing_ms = first_alarm_ms = None
        for k in range(sc.ticks):
            t = k * sc.sample_period_ms
            down = self._in_outage(t)
            if down and self.modem.channel_open:
                self.modem.close_data(t)
                self._log_modem(t)
            elif not down and not self.modem.channel_open:
                self._open_channel(t)

            ppm = concentration_at(sc, t, k)
            reading = sample(ppm, sc.active_gas, sc.model, t)
            was_alarming = state.fsm.state.alarming
            state, effects = fw.tick(state, reading.adc_code, t, sc.thresholds, sc.model, cfg)
            self.events.add(t, "tick", f"k={k} ppm={ppm:.3f} adc={reading.adc_code} "
                                       f"est={state.last_estimate_ppm:.3f} fsm={state.fsm.state.value}")
            if crossing_ms is None and ppm > threshold:
                crossing_ms = t
            if first_alarm_ms is None and state.fsm.state.alarming and not was_alarming:
                first_alarm_ms = t

            for effect in effects:
                self.events.add(t, *_effect_str(effect))
                if isinstance(effect, fw.SmsSend):
                    self.modem.send_sms(effect.message, t)
                    self._log_modem(t)
                elif isinstance(effect, fw.TelemetryEmit):
                    self.pending.append(effect.record)
            self._flush(t)
            if self.on_tick is not None:
                self.on_tick(t, state)

        end = sc.ticks * sc.sample_period_ms
        if self.modem.channel_open:
            self.modem.close_data(end)
            self._log_modem(end)

        if self.store is not None:
            persisted = self.store.accepted_count(sc.device_id)
        else:
            persisted = self.acked
        latency = None
        if first_alarm_ms is not None and crossing_ms is not None:
            latency = first_alarm_ms - crossing_ms
        report = RunReport(
            ticks=sc.ticks,
            first_alarm_ms=first_alarm_ms,
            alarm_latency_ms=latency,
            sms_sent=len(self.modem.outbox),
            records_persisted=persisted,
            final_state="Alarmed" if state.fsm.state.alarming else "Normal",
            records_pending=len(self.pending),
        )
        self.events.add(end, "report", report_render(report, "machine"))
        return self.events, report


def run(scenario: Scenario, remote: Optional[str] = None, store: Optional[TelemetryStore] = None,
        gateway_log: Optional[str] = None, on_tick=None) -> tuple[EventLog, RunReport]:
    return Harness(scenario, remote=remote, store=store, gateway_log=gateway_log, on_tick=on_tick).run()
