import json
import os
import socket
import threading
import urllib.request
from html.parser import HTMLParser
from xml.etree import ElementTree

import pytest
from hypothesis import given, strategies as st

import oracles
from gasguard.errors import UsageError
from gasguard.gateway.page import render_status_page
from gasguard.gateway.server import GatewayConfig, GatewayServer, handle_frame
from gasguard.gateway.store import (
    DuplicateRejected,
    NotFound,
    RecoveryError,
    StoreOffset,
    TelemetryStore,
    query_alarm_episodes,
    query_latest,
    recover,
)
from gasguard.gateway.wire import FrameError, TelemetryRecord, decode_frame, encode_frame
from gasguard.sensor import GasSpecies

MINIMAL = b'{"device_id":"dev1","seq":0,"timestamp_ms":0,"gas":"LPG","ppm":0,"adc_code":0,"alarm":false}\n'


def rec(seq, device="dev1", alarm=False, ppm=0, ts=None):
    return TelemetryRecord(device, seq, seq * 500 if ts is None else ts, GasSpecies.LPG, ppm, 300, alarm)


record_st = st.builds(
    TelemetryRecord,
    device_id=st.from_regex(r"[A-Za-z0-9_-]{1,32}", fullmatch=True),
    seq=st.integers(0, 2**53),
    timestamp_ms=st.integers(0, 2**53),
    gas=st.sampled_from(list(GasSpecies)),
    ppm=st.integers(0, 10**7),
    adc_code=st.integers(0, 1023),
    alarm=st.booleans(),
)


# -- wire ---------------------------------------------------------------------

def test_minimal_frame():
    r = decode_frame(MINIMAL)
    assert r == TelemetryRecord("dev1", 0, 0, GasSpecies.LPG, 0, 0, False)
    assert encode_frame(r) == MINIMAL


@pytest.mark.parametrize("frame,reason", [
    (MINIMAL.replace(b'"adc_code":0', b'"adc_code":2048'), "range"),
    (MINIMAL.replace(b'"seq":0', b'"seq":-1'), "range"),
    (MINIMAL.replace(b'"dev1"', b'"bad id!"'), "device_id"),
    (MINIMAL.replace(b'"dev1"', b'"' + b"a" * 33 + b'"'), "device_id"),
    (MINIMAL.replace(b'"LPG"', b'"CO2"'), "gas"),
    (MINIMAL.replace(b"false", b"0"), "type"),
    (MINIMAL.replace(b'"ppm":0', b'"ppm":1.5'), "type"),
    (MINIMAL.replace(b'"ppm":0', b'"ppm":true'), "type"),
    (MINIMAL.replace(b"}", b',"extra":1}'), "keys"),
    (MINIMAL.replace(b'"ppm":0,', b""), "keys"),
    (MINIMAL.replace(b"}", b',"ppm":1}'), "keys"),
    (b"not json\n", "json"),
    (b"[1,2]\n", "type"),
    (b"\xff\xfe\n", "encoding"),
    (b"{}\n{}\n", "framing"),
])
def test_bad_frames(frame, reason):
    with pytest.raises(FrameError) as ei:
        decode_frame(frame)
    assert ei.value.reason == reason


@given(record_st)
def test_decode_encode_identity(r):
    assert decode_frame(encode_frame(r)) == r


@given(record_st)
def test_encode_decode_identity_on_canonical(r):
    f = encode_frame(r)
    assert encode_frame(decode_frame(f)) == f


@given(st.binary(max_size=600))
def test_decode_never_crashes(data):
    try:
        decode_frame(data)
    except FrameError:
        pass


# -- store --------------------------------------------------------------------

def test_ingest_and_duplicates():
    s = TelemetryStore()
    assert s.ingest(rec(0)) == StoreOffset(0, 0)
    assert isinstance(s.ingest(rec(0)), DuplicateRejected)
    assert len(s) == 1
    assert s.ingest(rec(1)).index == 1
    assert s.ingest(rec(1)).last_seq == 1


def test_seq_gaps_visible():
    s = TelemetryStore()
    for q in (0, 1, 5):
        assert isinstance(s.ingest(rec(q)), StoreOffset)
    assert [r.seq for r in s.records("dev1")] == [0, 1, 5]
    assert query_latest(s, "dev1").seq == 5


def test_offsets_are_byte_positions(tmp_path):
    s = TelemetryStore(tmp_path / "log")
    offs = [s.ingest(rec(i)) for i in range(5)]
    data = (tmp_path / "log").read_bytes()
    for i, o in enumerate(offs):
        assert data[o.byte_offset:].startswith(encode_frame(rec(i)))
        assert o.index == i


def test_query_latest():
    s = TelemetryStore()
    for i in range(10):
        s.ingest(rec(i))
    assert query_latest(s, "dev1").seq == 9
    with pytest.raises(NotFound):
        query_latest(s, "nobody")


def test_latest_independent_per_device():
    s = TelemetryStore()
    for i in range(10):
        s.ingest(rec(i, "A"))
        if i % 2:
            s.ingest(rec(100 + i, "B"))
    assert query_latest(s, "A").seq == 9
    assert query_latest(s, "B").seq == 109
    assert s.devices() == ["A", "B"]


def ingest_flags(s, flags, ppms=None):
    for i, f in enumerate(flags):
        s.ingest(rec(i, alarm=f, ppm=(ppms[i] if ppms else i)))


def test_episode_examples():
    s = TelemetryStore()
    ingest_flags(s, [False, False, True, True, True, False], [0, 0, 1500, 2100, 1800, 0])
    eps = query_alarm_episodes(s, "dev1", 0, 10**9)
    assert len(eps) == 1
    assert (eps[0].start_ms, eps[0].end_ms, eps[0].peak_ppm) == (1000, 2000, 2100)

    s2 = TelemetryStore()
    ingest_flags(s2, [False] * 5)
    assert query_alarm_episodes(s2, "dev1", 0, 10**9) == []

    s3 = TelemetryStore()
    ingest_flags(s3, [False, True, True])
    assert query_alarm_episodes(s3, "dev1", 0, 10**9)[0].end_ms is None

    with pytest.raises(UsageError):
        query_alarm_episodes(s, "dev1", 10, 5)


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 10**5)), max_size=60),
       st.integers(0, 40_000), st.integers(0, 40_000))
def test_episodes_match_edge_scan(rows, a, b):
    lo, hi = sorted((a, b))
    s = TelemetryStore()
    for i, (flag, ppm) in enumerate(rows):
        s.ingest(rec(i, alarm=flag, ppm=ppm))
    got = [(e.start_ms, e.end_ms, e.peak_ppm) for e in query_alarm_episodes(s, "dev1", lo, hi)]
    window = [(f, p, i * 500) for i, (f, p) in enumerate(rows) if lo <= i * 500 <= hi]
    assert got == oracles.edge_scan(window)


# -- persistence --------------------------------------------------------------

def fill(path, n=100, devices=("A", "B", "C")):
    s = TelemetryStore(path)
    for i in range(n):
        s.ingest(rec(i // len(devices), devices[i % len(devices)], alarm=i % 7 == 0, ppm=i))
    s.close()
    return s


def test_recover_equals_live_store(tmp_path):
    live = fill(tmp_path / "log")
    back = recover(tmp_path / "log")
    assert len(back) == 100
    assert back.snapshot() == live.snapshot()
    assert back.records() == live.records()
    assert not back.recovery.truncated


def test_recover_truncated_final_frame(tmp_path):
    path = tmp_path / "log"
    live = fill(path)
    data = path.read_bytes()
    last = data.rstrip(b"\n").rfind(b"\n") + 1
    path.write_bytes(data[: last + 20])
    back = recover(path)
    assert len(back) == 99
    assert back.recovery.truncated and back.recovery.truncated_at == last
    assert back.records() == live.records()[:99]
    assert path.read_bytes() == data[:last]
    # appends continue cleanly after the cut
    assert isinstance(back.ingest(live.records()[-1]), StoreOffset)
    back.close()
    assert path.read_bytes() == data


def test_recover_empty_and_missing(tmp_path):
    (tmp_path / "empty").write_bytes(b"")
    assert len(recover(tmp_path / "empty")) == 0
    assert len(recover(tmp_path / "missing")) == 0


def test_recover_corrupt_middle_frame(tmp_path):
    path = tmp_path / "log"
    fill(path, 10)
    data = bytearray(path.read_bytes())
    second = data.find(b"\n") + 1
    data[second + 2] = ord("X")
    path.write_bytes(bytes(data))
    with pytest.raises(RecoveryError) as ei:
        recover(path)
    assert ei.value.offset == second


def test_recover_rejects_seq_regression(tmp_path):
    path = tmp_path / "log"
    path.write_bytes(encode_frame(rec(3)) + encode_frame(rec(2)))
    with pytest.raises(RecoveryError):
        recover(path)


def test_nonempty_log_needs_recover(tmp_path):
    fill(tmp_path / "log", 3)
    with pytest.raises(UsageError):
        TelemetryStore(tmp_path / "log")


@given(st.lists(st.tuples(st.sampled_from("ABC"), st.integers(0, 30), st.booleans()), max_size=50))
def test_crash_consistency_property(tmp_path_factory, ops):
    path = tmp_path_factory.mktemp("cc") / "log"
    live = TelemetryStore(path, fsync=False)
    for dev, seq, flag in ops:
        live.ingest(rec(seq, dev, alarm=flag))
    live.close()
    back = recover(path, fsync=False)
    assert back.snapshot() == live.snapshot()
    for dev, history in back.snapshot().items():
        seqs = [r.seq for r in history]
        assert seqs == sorted(set(seqs))


def test_concurrent_ingest_frames_intact(tmp_path):
    path = tmp_path / "log"
    s = TelemetryStore(path, fsync=False)

    def worker(dev):
        for i in range(200):
            s.ingest(rec(i, dev, ppm=i * 37))

    threads = [threading.Thread(target=worker, args=(f"d{k}",)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    s.close()
    lines = path.read_bytes().split(b"\n")
    assert lines[-1] == b""
    decoded = [decode_frame(line) for line in lines[:-1]]
    assert len(decoded) == 1600
    assert recover(path).snapshot() == s.snapshot()


# -- status page --------------------------------------------------------------

class _Cells(HTMLParser):
    def __init__(self):
        super().__init__()
        self.rows, self.scripts = [], 0

    def handle_starttag(self, tag, attrs):
        if tag == "tr":
            self.rows.append([])
        if tag == "script":
            self.scripts += 1

    def handle_data(self, data):
        if self.rows and data.strip():
            self.rows[-1].append(data.strip())


def parse_page(html):
    ElementTree.fromstring(html.split("\n", 1)[1])  # well-formed apart from the doctype
    p = _Cells()
    p.feed(html)
    assert p.scripts == 0
    return p.rows


def test_empty_page_has_only_header():
    rows = parse_page(render_status_page(TelemetryStore()))
    assert rows == [["device", "gas", "ppm", "status", "timestamp_ms"]]


def test_page_marks_alarm():
    s = TelemetryStore()
    s.ingest(rec(0, "kitchen", alarm=True, ppm=2100))
    s.ingest(rec(0, "hall"))
    html = render_status_page(s)
    rows = parse_page(html)
    assert ["kitchen", "LPG", "2100", "ALARM", "0"] in rows
    assert ["hall", "LPG", "0", "ok", "0"] in rows
    assert '<td class="alarm">ALARM</td>' in html


@given(st.lists(record_st, max_size=15))
def test_page_always_well_formed(records):
    s = TelemetryStore()
    for r in records:
        s.ingest(r)
    rows = parse_page(render_status_page(s))
    assert len(rows) == 1 + len(s.devices())


# -- network ------------------------------------------------------------------

def test_handle_frame_replies():
    s = TelemetryStore()
    assert handle_frame(s, MINIMAL) == b"ACK 0\n"
    assert handle_frame(s, MINIMAL) == b"ACK 0\n"
    assert len(s) == 1
    assert handle_frame(s, b"garbage\n") == b"ERR json\n"


def test_config_env_override(tmp_path):
    ini = tmp_path / "gw.ini"
    ini.write_text("[gateway]\ningest = 0.0.0.0:9000\nhttp = :9001\nlog_path = /tmp/a.log\n")
    cfg = GatewayConfig.load(str(ini), env={})
    assert cfg.ingest_addr == ("0.0.0.0", 9000) and cfg.http_addr == ("127.0.0.1", 9001)
    assert cfg.log_path == "/tmp/a.log"
    assert GatewayConfig.load(str(ini), env={"GASGW_LOG_PATH": "/x"}).log_path == "/x"


@pytest.fixture
def gateway(tmp_path):
    cfg = GatewayConfig(("127.0.0.1", 0), ("127.0.0.1", 0), str(tmp_path / "gw.log"))
    with GatewayServer(cfg) as gw:
        yield gw


def http_get(gw, path):
    host, port = gw.http_addr
    try:
        with urllib.request.urlopen(f"http://{host}:{port}{path}", timeout=5) as r:
            return r.status, r.read().decode()
    except urllib.error.HTTPError as e:
        return e.code, e.read().decode()


def test_socket_ingest_and_http(gateway):
    sock = socket.create_connection(gateway.ingest_addr, timeout=5)
    f = sock.makefile("rwb")
    frames = [encode_frame(rec(i, "kit", alarm=2 <= i <= 4, ppm=i * 100)) for i in range(7)]
    f.write(b"".join(frames[:3]) + b"bogus\n" + b"".join(frames[3:]) + frames[0])
    f.write(b"x" * 2000 + b"\n")
    f.flush()
    replies = [f.readline() for _ in range(10)]
    sock.close()
    assert replies[:3] == [b"ACK 0\n", b"ACK 1\n", b"ACK 2\n"]
    assert replies[3] == b"ERR json\n"
    assert replies[4:8] == [b"ACK 3\n", b"ACK 4\n", b"ACK 5\n", b"ACK 6\n"]
    assert replies[8] == b"ACK 0\n"
    assert replies[9] == b"ERR size\n"

    assert http_get(gateway, "/devices") == (200, '["kit"]')
    status, body = http_get(gateway, "/latest/kit")
    assert status == 200 and body.encode() == frames[-1]
    assert http_get(gateway, "/latest/nobody")[0] == 404
    status, body = http_get(gateway, "/alarms/kit?from=0&to=100000")
    assert json.loads(body) == [{"device_id": "kit", "gas": "LPG", "start_ms": 1000, "end_ms": 2000,
                                 "peak_ppm": 400}]
    assert http_get(gateway, "/alarms/kit?from=5&to=1")[0] == 400
    status, body = http_get(gateway, "/")
    assert status == 200 and "kit" in body
    assert http_get(gateway, "/nope")[0] == 404
    assert os.path.getsize(gateway.config.log_path) == sum(map(len, frames))
