from gasguard.gateway.wire import FrameError, TelemetryRecord, decode_frame, encode_frame

__all__ = ["FrameError", "TelemetryRecord", "decode_frame", "encode_frame"]
