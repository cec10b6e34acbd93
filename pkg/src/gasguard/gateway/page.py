from __future__ import annotations

from html import escape

from gasguard.gateway.store import TelemetryStore

_HEAD = """<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8" />
<title>Gas monitor</title>
<style>td.alarm { background: #c00; color: #fff; font-weight: bold; }</style>
</head>
<body>
<h1>Gas monitor</h1>
<table>
<tr><th>device</th><th>gas</th><th>ppm</th><th>status</th><th>timestamp_ms</th></tr>
"""

_TAIL = """</table>
</body>
</html>
"""


def render_status_page(store: TelemetryStore) -> str:
    """Server-rendered table of the latest record per device. No scripts."""
    rows = []
    for device_id, history in sorted(store.snapshot().items()):
        r = history[-1]
        status = '<td class="alarm">ALARM</td>' if r.alarm else "<td>ok</td>"
        rows.append(
            f"<tr><td>{escape(device_id)}</td><td>{escape(r.gas.value)}</td>"
            f"<td>{r.ppm}</td>{status}<td>{r.timestamp_ms}</td></tr>\n"
        )
    return _HEAD + "".join(rows) + _TAIL
