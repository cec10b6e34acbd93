"""Telemetry wire format: one compact JSON object per ``\\n``-terminated line.

The key set is fixed and ordered; unknown or missing keys are rejected.
``encode_frame`` emits the canonical form, so ``encode_frame(decode_frame(f)) == f``
for every canonical frame ``f``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from gasguard.errors import GasGuardError
from gasguard.sensor import GasSpecies

FIELDS = ("device_id", "seq", "timestamp_ms", "gas", "ppm", "adc_code", "alarm")
ADC_MAX = 1023
MAX_FRAME = 512

DEVICE_ID_RE = re.compile(r"[A-Za-z0-9_-]{1,32}")


class FrameError(GasGuardError, ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class TelemetryRecord:
    device_id: str
    seq: int
    timestamp_ms: int
    gas: GasSpecies
    ppm: int
    adc_code: int
    alarm: bool

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "seq": self.seq,
            "timestamp_ms": self.timestamp_ms,
            "gas": self.gas.value,
            "ppm": self.ppm,
            "adc_code": self.adc_code,
            "alarm": self.alarm,
        }


def encode_frame(record: TelemetryRecord) -> bytes:
    return json.dumps(record.to_dict(), separators=(",", ":")).encode() + b"\n"


def _int_field(obj: dict, key: str, lo: int = 0, hi: int | None = None) -> int:
    v = obj[key]
    if type(v) is not int:
        raise FrameError("type", f"{key} must be an integer")
    if v < lo or (hi is not None and v > hi):
        raise FrameError("range", f"{key}={v}")
    return v


def record_from_dict(obj: object) -> TelemetryRecord:
    if not isinstance(obj, dict):
        raise FrameError("type", "frame is not a JSON object")
    if set(obj) != set(FIELDS):
        extra = sorted(set(obj) - set(FIELDS))
        missing = sorted(set(FIELDS) - set(obj))
        raise FrameError("keys", f"extra={extra} missing={missing}")
    device_id = obj["device_id"]
    if not isinstance(device_id, str) or not DEVICE_ID_RE.fullmatch(device_id):
        raise FrameError("device_id", repr(device_id))
    gas_name = obj["gas"]
    gas = next((g for g in GasSpecies if g.value == gas_name), None)
    if gas is None:
        raise FrameError("gas", repr(gas_name))
    if type(obj["alarm"]) is not bool:
        raise FrameError("type", "alarm must be a boolean")
    return TelemetryRecord(
        device_id=device_id,
        seq=_int_field(obj, "seq"),
        timestamp_ms=_int_field(obj, "timestamp_ms"),
        gas=gas,
        ppm=_int_field(obj, "ppm"),
        adc_code=_int_field(obj, "adc_code", 0, ADC_MAX),
        alarm=obj["alarm"],
    )


def _no_duplicate_keys(pairs):
    obj = dict(pairs)
    if len(obj) != len(pairs):
        raise FrameError("keys", "duplicate key")
    return obj


def decode_frame(frame: bytes) -> TelemetryRecord:
    """Parse one frame. A trailing newline is optional; embedded ones are not."""
    if len(frame) > MAX_FRAME:
        raise FrameError("size", f"{len(frame)} bytes")
    body = frame[:-1] if frame.endswith(b"\n") else frame
    if b"\n" in body:
        raise FrameError("framing", "embedded newline")
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FrameError("encoding", str(e)) from None
    try:
        obj = json.loads(text, object_pairs_hook=_no_duplicate_keys)
    except FrameError:
        raise
    except (ValueError, RecursionError) as e:
        raise FrameError("json", str(e)) from None
    return record_from_dict(obj)
