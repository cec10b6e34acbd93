"""Append-only telemetry store.

The log file holds canonical wire frames in acceptance order. Everything
else (per-device seq index, latest record) is rebuilt from it on start.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

from gasguard.errors import GasGuardError, UsageError
from gasguard.gateway.wire import FrameError, TelemetryRecord, decode_frame, encode_frame
from gasguard.sensor import GasSpecies


class IngestError(GasGuardError):
    pass


class RecoveryError(GasGuardError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"corrupt log frame at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class NotFound(GasGuardError, LookupError):
    pass


@dataclass(frozen=True)
class StoreOffset:
    byte_offset: int
    index: int


@dataclass(frozen=True)
class DuplicateRejected:
    device_id: str
    seq: int
    last_seq: int


@dataclass(frozen=True)
class RecoveryReport:
    records: int
    truncated_at: Optional[int] = None
    truncated_bytes: int = 0

    @property
    def truncated(self) -> bool:
        return self.truncated_bytes > 0


@dataclass(frozen=True)
class AlarmEpisode:
    device_id: str
    gas: GasSpecies
    start_ms: int
    end_ms: Optional[int]
    peak_ppm: int

    def to_dict(self) -> dict:
        return {"device_id": self.device_id, "gas": self.gas.value, "start_ms": self.start_ms,
                "end_ms": self.end_ms, "peak_ppm": self.peak_ppm}


class TelemetryStore:
    """In-memory indexes over an optional append-only log file.

    Appends go through one lock, and a record becomes visible to readers only
    after its frame is fully written (and fsynced when ``fsync`` is set).
    """

    def __init__(self, path: Union[str, os.PathLike, None] = None, *, fsync: bool = True):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.recovery = RecoveryReport(0)
        self._lock = threading.Lock()
        self._records: list[TelemetryRecord] = []
        self._by_device: dict[str, list[TelemetryRecord]] = {}
        self._size = 0
        self._fd: Optional[int] = None
        if self.path is not None:
            self._fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
            self._size = os.fstat(self._fd).st_size
            if self._size:
                os.close(self._fd)
                self._fd = None
                raise UsageError(f"{self.path} is not empty; use recover() to reopen it")

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __len__(self) -> int:
        return len(self._records)

    def _index(self, record: TelemetryRecord) -> None:
        self._records.append(record)
        self._by_device.setdefault(record.device_id, []).append(record)

    def _write(self, frame: bytes) -> None:
        if self._fd is None:
            return
        start = self._size
        try:
            view = memoryview(frame)
            while view:
                n = os.write(self._fd, view)
                view = view[n:]
            if self.fsync:
                os.fsync(self._fd)
        except OSError as e:
            try:
                os.ftruncate(self._fd, start)
            except OSError:
                pass
            raise IngestError(f"log write failed: {e}") from e

    def ingest(self, record: TelemetryRecord) -> Union[StoreOffset, DuplicateRejected]:
        frame = encode_frame(record)
        with self._lock:
            history = self._by_device.get(record.device_id)
            if history and record.seq <= history[-1].seq:
                return DuplicateRejected(record.device_id, record.seq, history[-1].seq)
            self._write(frame)
            offset = StoreOffset(self._size, len(self._records))
            self._size += len(frame)
            self._index(record)
            return offset

    def records(self, device_id: Optional[str] = None) -> list[TelemetryRecord]:
        with self._lock:
            if device_id is None:
                return list(self._records)
            return list(self._by_device.get(device_id, ()))

    def devices(self) -> list[str]:
        with self._lock:
            return sorted(self._by_device)

    def accepted_count(self, device_id: str) -> int:
        with self._lock:
            return len(self._by_device.get(device_id, ()))

    def latest(self, device_id: str) -> TelemetryRecord:
        with self._lock:
            history = self._by_device.get(device_id)
            if not history:
                raise NotFound(device_id)
            return history[-1]

    def snapshot(self) -> dict[str, list[TelemetryRecord]]:
        with self._lock:
            return {d: list(rs) for d, rs in self._by_device.items()}


def recover(path: Union[str, os.PathLike], *, fsync: bool = True) -> TelemetryStore:
    """Rebuild a store from its log and reopen the log for appends.

    A trailing frame without its newline (crash mid-write) is cut off and
    reported in ``store.recovery``. Any other bad frame raises RecoveryError.
    """
    path = Path(path)
    data = path.read_bytes() if path.exists() else b""
    store = TelemetryStore(fsync=fsync)
    pos = 0
    truncated_at = None
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0:
            truncated_at = pos
            break
        try:
            record = decode_frame(data[pos:end + 1])
        except FrameError as e:
            raise RecoveryError(pos, str(e)) from None
        if isinstance(store.ingest(record), DuplicateRejected):
            raise RecoveryError(pos, f"seq {record.seq} not increasing for {record.device_id}")
        pos = end + 1

    if truncated_at is not None:
        with open(path, "r+b") as f:
            f.truncate(truncated_at)
    store.path = path
    store._fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    store._size = pos
    store.recovery = RecoveryReport(len(store), truncated_at, len(data) - pos)
    return store


def query_latest(store: TelemetryStore, device_id: str) -> TelemetryRecord:
    return store.latest(device_id)


def episodes_from_records(records: Iterable[TelemetryRecord]) -> list[AlarmEpisode]:
    out: list[AlarmEpisode] = []
    current: Optional[list[TelemetryRecord]] = None
    for r in records:
        if r.alarm:
            if current is None:
                current = []
            current.append(r)
        elif current is not None:
            out.append(_episode(current, closed=True))
            current = None
    if current is not None:
        out.append(_episode(current, closed=False))
    return out


def _episode(run: list[TelemetryRecord], closed: bool) -> AlarmEpisode:
    first, last = run[0], run[-1]
    return AlarmEpisode(first.device_id, first.gas, first.timestamp_ms,
                        last.timestamp_ms if closed else None, max(r.ppm for r in run))


def query_alarm_episodes(store: TelemetryStore, device_id: str, from_ms: int,
                         to_ms: int) -> list[AlarmEpisode]:
    """Alarm episodes built from the records timestamped in ``[from_ms, to_ms]``.

    An episode runs from a rising alarm edge to the last alarmed record before
    the falling edge; one still alarmed at the end of the window has no end.
    """
    if from_ms > to_ms:
        raise UsageError(f"inverted range {from_ms} > {to_ms}")
    window = (r for r in store.records(device_id) if from_ms <= r.timestamp_ms <= to_ms)
    return episodes_from_records(window)
