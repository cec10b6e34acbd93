"""GSM modem emulator speaking a small text-mode AT dialect.

Grammar (commands end in CR, head is case-insensitive)::

    AT
    AT+CMGF=<0|1>
    AT+CMGS="<+digits>"        -> "> " prompt, then body ending in 0x1A (0x1B aborts)
    AT+CREG?
    AT+CIPSTART="<host>",<port>
    AT+CIPSEND=<len>            -> "> " prompt, then exactly <len> raw bytes
    AT+CIPCLOSE

``parse_at`` and ``execute`` are pure; :class:`Modem` wires them to a byte
stream and to a data link towards the telemetry gateway.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Callable, Optional, Protocol, Union

from gasguard.errors import GasGuardError
from gasguard.gateway.wire import TelemetryRecord, encode_frame

CR = 0x0D
CTRL_Z = 0x1A
ESC = 0x1B
MAX_SMS = 160
MAX_PAYLOAD = 1460
MAX_LINE = 512

_DEST = re.compile(r"\+[0-9]{7,15}")
_HOST = re.compile(r"[A-Za-z0-9._:-]{1,253}")


class ParseError(GasGuardError, ValueError):
    def __init__(self, message: str, span: tuple[int, int]):
        super().__init__(f"{message} at bytes {span[0]}..{span[1]}")
        self.span = span


class DeliveryError(GasGuardError):
    """Telemetry could not be handed to the gateway; the caller keeps the record."""


@dataclass(frozen=True)
class SmsMessage:
    destination: str
    body: str
    accepted_at_ms: int
    message_ref: int

    def __post_init__(self):
        if len(self.body) > MAX_SMS or "\x1a" in self.body:
            raise ValueError("SMS body must be <= 160 chars without 0x1A")


@dataclass(frozen=True)
class Attention:
    pass


@dataclass(frozen=True)
class SetTextMode:
    enabled: bool


@dataclass(frozen=True)
class SendSms:
    destination: str


@dataclass(frozen=True)
class SmsBody:
    text: str
    terminated: bool = True  # False: aborted with ESC


@dataclass(frozen=True)
class RegistrationQuery:
    pass


@dataclass(frozen=True)
class DataOpen:
    host: str
    port: int


@dataclass(frozen=True)
class DataSend:
    length: int


@dataclass(frozen=True)
class DataPayload:
    data: bytes


@dataclass(frozen=True)
class DataClose:
    pass


AtCommand = Union[Attention, SetTextMode, SendSms, SmsBody, RegistrationQuery,
                  DataOpen, DataSend, DataPayload, DataClose]


def _parse_body(unit: bytes) -> SmsBody:
    text = unit[:-1]
    if len(text) > MAX_SMS:
        raise ParseError(f"SMS body longer than {MAX_SMS} chars", (MAX_SMS, len(text)))
    for i, b in enumerate(text):
        if b >= 0x80 or b in (CTRL_Z, ESC):
            raise ParseError(f"byte 0x{b:02x} not allowed in SMS body", (i, i + 1))
    return SmsBody(text.decode("ascii"), terminated=unit[-1] == CTRL_Z)


def _parse_uint(text: str, offset: int, lo: int, hi: int, what: str) -> int:
    if not text.isdigit() or not text.isascii() or len(text) > 6:
        raise ParseError(f"bad {what} {text!r}", (offset, offset + len(text)))
    v = int(text)
    if not lo <= v <= hi:
        raise ParseError(f"{what} {v} outside [{lo}, {hi}]", (offset, offset + len(text)))
    return v


def _unquote(arg: str, offset: int) -> str:
    if len(arg) < 2 or arg[0] != '"' or arg[-1] != '"':
        raise ParseError("expected a quoted argument", (offset, offset + len(arg)))
    return arg[1:-1]


def parse_at(unit: bytes, *, payload: bool = False) -> AtCommand:
    """Parse one serial unit.

    A unit is a CR-terminated command line, an SMS body ending in 0x1A/0x1B,
    or (with ``payload=True``) the raw bytes following ``AT+CIPSEND``.
    """
    unit = bytes(unit)
    if payload:
        if not 1 <= len(unit) <= MAX_PAYLOAD:
            raise ParseError("payload length out of range", (0, len(unit)))
        return DataPayload(unit)
    if not unit:
        raise ParseError("empty unit", (0, 0))
    if unit[-1] in (CTRL_Z, ESC):
        return _parse_body(unit)
    if unit[-1] != CR:
        raise ParseError("unterminated command", (0, len(unit)))
    if len(unit) > MAX_LINE:
        raise ParseError("command line too long", (MAX_LINE, len(unit)))
    for i, b in enumerate(unit[:-1]):
        if not 0x20 <= b < 0x7F:
            raise ParseError(f"control or non-ASCII byte 0x{b:02x}", (i, i + 1))
    line = unit[:-1].decode("ascii")

    head, sep, arg = line.partition("=")
    upper = head.upper()
    argpos = len(head) + 1
    if not sep:
        if upper == "AT":
            return Attention()
        if upper == "AT+CREG?":
            return RegistrationQuery()
        if upper == "AT+CIPCLOSE":
            return DataClose()
    elif upper == "AT+CMGF":
        if arg not in ("0", "1"):
            raise ParseError("CMGF expects 0 or 1", (argpos, len(line)))
        return SetTextMode(arg == "1")
    elif upper == "AT+CMGS":
        dest = _unquote(arg, argpos)
        if not _DEST.fullmatch(dest):
            raise ParseError(f"destination {dest!r} is not +<7-15 digits>", (argpos, len(line)))
        return SendSms(dest)
    elif upper == "AT+CIPSTART":
        host_arg, comma, port_arg = arg.rpartition(",")
        if not comma:
            raise ParseError("CIPSTART expects \"host\",port", (argpos, len(line)))
        host = _unquote(host_arg, argpos)
        if not _HOST.fullmatch(host):
            raise ParseError(f"bad host {host!r}", (argpos, argpos + len(host_arg)))
        port = _parse_uint(port_arg, argpos + len(host_arg) + 1, 1, 65535, "port")
        return DataOpen(host, port)
    elif upper == "AT+CIPSEND":
        return DataSend(_parse_uint(arg, argpos, 1, MAX_PAYLOAD, "length"))
    raise ParseError(f"unknown command {head!r}", (0, len(head)))


def serialize_command(cmd: AtCommand) -> bytes:
    if isinstance(cmd, Attention):
        return b"AT\r"
    if isinstance(cmd, SetTextMode):
        return b"AT+CMGF=%d\r" % int(cmd.enabled)
    if isinstance(cmd, SendSms):
        return b'AT+CMGS="%s"\r' % cmd.destination.encode("ascii")
    if isinstance(cmd, SmsBody):
        return cmd.text.encode("ascii") + bytes([CTRL_Z if cmd.terminated else ESC])
    if isinstance(cmd, RegistrationQuery):
        return b"AT+CREG?\r"
    if isinstance(cmd, DataOpen):
        return b'AT+CIPSTART="%s",%d\r' % (cmd.host.encode("ascii"), cmd.port)
    if isinstance(cmd, DataSend):
        return b"AT+CIPSEND=%d\r" % cmd.length
    if isinstance(cmd, DataPayload):
        return cmd.data
    if isinstance(cmd, DataClose):
        return b"AT+CIPCLOSE\r"
    raise TypeError(f"not an AT command: {cmd!r}")


@dataclass(frozen=True)
class AtResponse:
    lines: tuple[str, ...] = ()
    prompt: bool = False

    @property
    def ok(self) -> bool:
        return not self.prompt and bool(self.lines) and self.lines[-1] in ("OK", "CONNECT", "SEND OK")


OK = AtResponse(("OK",))
ERROR = AtResponse(("ERROR",))
PROMPT = AtResponse(prompt=True)


def serialize_response(resp: AtResponse) -> bytes:
    if resp.prompt:
        return b"> "
    return b"".join(b"\r\n" + line.encode("ascii") + b"\r\n" for line in resp.lines)


@dataclass(frozen=True)
class ModemState:
    registered: bool = True
    text_mode: bool = False
    awaiting_body: Optional[str] = None
    awaiting_payload: Optional[int] = None
    data_channel: Optional[tuple[str, int]] = None  # None means Closed
    outbox: tuple[SmsMessage, ...] = ()
    sms_counter: int = 0


def execute(state: ModemState, cmd: AtCommand, now_ms: int) -> tuple[ModemState, AtResponse]:
    # A body or payload is only legal right after its prompt; anything else cancels the wait.
    if state.awaiting_body is not None and not isinstance(cmd, SmsBody):
        state = replace(state, awaiting_body=None)
    if state.awaiting_payload is not None and not isinstance(cmd, DataPayload):
        state = replace(state, awaiting_payload=None)

    if isinstance(cmd, Attention):
        return state, OK
    if isinstance(cmd, SetTextMode):
        if not cmd.enabled:
            return state, ERROR
        return replace(state, text_mode=True), OK
    if isinstance(cmd, RegistrationQuery):
        return state, AtResponse(("+CREG: 0,1", "OK"))
    if isinstance(cmd, SendSms):
        if not state.text_mode:
            return state, AtResponse(("+CMS ERROR: 305",))
        return replace(state, awaiting_body=cmd.destination), PROMPT
    if isinstance(cmd, SmsBody):
        if state.awaiting_body is None:
            return state, ERROR
        if not cmd.terminated:
            return replace(state, awaiting_body=None), OK
        n = state.sms_counter + 1
        msg = SmsMessage(state.awaiting_body, cmd.text, now_ms, n)
        return (replace(state, awaiting_body=None, outbox=state.outbox + (msg,), sms_counter=n),
                AtResponse((f"+CMGS: {n}", "OK")))
    if isinstance(cmd, DataOpen):
        if state.data_channel is not None:
            return state, ERROR
        return replace(state, data_channel=(cmd.host, cmd.port)), AtResponse(("CONNECT",))
    if isinstance(cmd, DataSend):
        if state.data_channel is None:
            return state, ERROR
        return replace(state, awaiting_payload=cmd.length), PROMPT
    if isinstance(cmd, DataPayload):
        if state.awaiting_payload is None or len(cmd.data) != state.awaiting_payload:
            return replace(state, awaiting_payload=None), ERROR
        return replace(state, awaiting_payload=None), AtResponse(("SEND OK",))
    if isinstance(cmd, DataClose):
        if state.data_channel is None:
            return state, ERROR
        return replace(state, data_channel=None), AtResponse(("CLOSED",))
    raise TypeError(f"not an AT command: {cmd!r}")


class Link(Protocol):
    def send(self, frame: bytes) -> bytes:
        """Deliver one telemetry frame; return the gateway's reply line."""

    def close(self) -> None: ...


Connector = Callable[[str, int], Link]


class Modem:
    """A modem instance: serial byte interface, SMS outbox and data link.

    Every exchange is appended to ``transcript`` as ``(direction, bytes)``
    with direction ``">"`` for host-to-modem and ``"<"`` for modem replies.
    """

    def __init__(self, connector: Optional[Connector] = None):
        self.state = ModemState()
        self.transcript: list[tuple[str, bytes]] = []
        self._connector = connector
        self._link: Optional[Link] = None
        self._buf = bytearray()
        self.last_reply: bytes = b""

    @property
    def outbox(self) -> tuple[SmsMessage, ...]:
        return self.state.outbox

    @property
    def channel_open(self) -> bool:
        return self.state.data_channel is not None

    def command(self, cmd: AtCommand, now_ms: int) -> AtResponse:
        self.transcript.append((">", serialize_command(cmd)))
        resp = self._apply(cmd, now_ms)
        self.transcript.append(("<", serialize_response(resp)))
        return resp

    def _apply(self, cmd: AtCommand, now_ms: int) -> AtResponse:
        if isinstance(cmd, DataOpen) and self.state.data_channel is None:
            if self._connector is None:
                return ERROR
            try:
                self._link = self._connector(cmd.host, cmd.port)
            except OSError:
                return AtResponse(("CONNECT FAIL",))
        elif isinstance(cmd, DataPayload) and self.state.awaiting_payload == len(cmd.data):
            try:
                if self._link is None:
                    raise OSError("no link behind the data channel")
                self.last_reply = self._link.send(cmd.data)
            except OSError:
                self._drop_link()
                return AtResponse(("SEND FAIL", "CLOSED"))
        elif isinstance(cmd, DataClose) and self._link is not None:
            self._drop_link()
            return AtResponse(("CLOSED",))
        self.state, resp = execute(self.state, cmd, now_ms)
        return resp

    def _drop_link(self):
        if self._link is not None:
            try:
                self._link.close()
            except OSError:
                pass
        self._link = None
        self.state = replace(self.state, data_channel=None, awaiting_payload=None)

    def feed(self, data: bytes, now_ms: int = 0) -> bytes:
        """Serial interface: consume raw bytes, return everything the modem replies."""
        self._buf += data
        out = bytearray()
        while True:
            unit, payload = self._next_unit()
            if unit is None:
                break
            try:
                cmd = parse_at(unit, payload=payload)
            except ParseError:
                resp = ERROR
                if self.state.awaiting_body is not None or self.state.awaiting_payload is not None:
                    self.state = replace(self.state, awaiting_body=None, awaiting_payload=None)
            else:
                resp = self._apply(cmd, now_ms)
            self.transcript.append((">", unit))
            self.transcript.append(("<", serialize_response(resp)))
            out += serialize_response(resp)
        return bytes(out)

    def _next_unit(self) -> tuple[Optional[bytes], bool]:
        buf = self._buf
        if self.state.awaiting_payload is not None:
            n = self.state.awaiting_payload
            if len(buf) < n:
                return None, True
            unit = bytes(buf[:n])
            del buf[:n]
            return unit, True
        if self.state.awaiting_body is not None:
            ends = [i for i in (buf.find(CTRL_Z), buf.find(ESC)) if i >= 0]
        else:
            ends = [i for i in (buf.find(CR),) if i >= 0]
        if not ends:
            if len(buf) > MAX_LINE:
                # Runaway line with no terminator: discard and report it.
                unit = bytes(buf[:MAX_LINE])
                del buf[:MAX_LINE]
                return unit, False
            return None, False
        end = min(ends) + 1
        unit = bytes(buf[:end])
        del buf[:end]
        return unit, False

    def send_sms(self, message: SmsMessage, now_ms: int) -> SmsMessage:
        if not self.state.text_mode:
            self.command(SetTextMode(True), now_ms)
        resp = self.command(SendSms(message.destination), now_ms)
        if not resp.prompt:
            raise GasGuardError(f"modem refused CMGS: {resp.lines}")
        resp = self.command(SmsBody(message.body), now_ms)
        if resp.lines[-1:] != ("OK",):
            raise GasGuardError(f"modem refused SMS body: {resp.lines}")
        return self.outbox[-1]

    def open_data(self, host: str, port: int, now_ms: int) -> bool:
        return self.command(DataOpen(host, port), now_ms).ok

    def close_data(self, now_ms: int) -> None:
        self.command(DataClose(), now_ms)

    def transmit_telemetry(self, record: TelemetryRecord, now_ms: int) -> bool:
        """Send one record over the data channel; True iff the gateway acked its seq.

        Raises DeliveryError when the channel is closed or fails mid-send.
        """
        if self.state.data_channel is None:
            raise DeliveryError("data channel closed")
        frame = encode_frame(record)
        resp = self.command(DataSend(len(frame)), now_ms)
        if not resp.prompt:
            raise DeliveryError(f"CIPSEND refused: {resp.lines}")
        self.last_reply = b""
        resp = self.command(DataPayload(frame), now_ms)
        if resp.lines[:1] != ("SEND OK",):
            raise DeliveryError(f"send failed: {resp.lines}")
        self.transcript.append(("<", self.last_reply))
        return self.last_reply.strip() == b"ACK %d" % record.seq
