"""Forward / VJP oracle around a private source model.

Wire format, one frame per request or reply::

    u32 LE frame_len | header JSON + b"\\n" | payload (raw LE f32)

``frame_len`` counts header (with its newline) plus payload.  Header keys:
``op`` ("hello" | "forward" | "backward" | "error"), ``id`` (u64),
``shape``, ``dtype`` ("f32").  A backward request carries the input x
(``shape``) followed by the upstream gradient w.r.t. the logits
(``grad_shape``).  Replies echo the request id; errors carry ``code`` and
``message``.  Parameters of the served model never go on the wire.
"""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .netcore import DTYPE, NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 30

MALFORMED_FRAME = "MALFORMED_FRAME"
UNKNOWN_OP = "UNKNOWN_OP"
BACKWARD_DISABLED = "BACKWARD_DISABLED"
NON_FINITE_INPUT = "NON_FINITE_INPUT"
SHAPE_MISMATCH = "SHAPE_MISMATCH"
SHAPE_REJECTED = "SHAPE_REJECTED"
INTERNAL = "INTERNAL"


class OracleMode(str, Enum):
    FORWARD_ONLY = "forward_only"
    FORWARD_BACKWARD = "forward_backward"


class OracleError(RuntimeError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


class ProtocolError(OracleError):
    def __init__(self, message: str):
        super().__init__(MALFORMED_FRAME, message)


# --------------------------------------------------------------------------
# framing

def encode_frame(header: dict, *arrays: np.ndarray) -> bytes:
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8") + b"\n"
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return struct.pack("<I", len(head) + len(payload)) + head + payload


def decode_body(body: bytes) -> tuple[dict, list[np.ndarray]]:
    """Split a frame body into its header and the arrays it declares."""
    nl = body.find(b"\n")
    if nl < 0:
        raise ProtocolError("header is not newline-terminated")
    try:
        header = json.loads(body[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or "op" not in header:
        raise ProtocolError("header must be an object with an 'op'")
    if header.get("dtype", "f32") != "f32":
        raise ProtocolError(f"unsupported dtype {header.get('dtype')!r}")
    shapes = []
    for key in ("shape", "grad_shape"):
        if key in header:
            shape = header[key]
            if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
                raise ProtocolError(f"{key} must be a list of non-negative ints")
            shapes.append(shape)
    payload = body[nl + 1:]
    expected = sum(4 * int(np.prod(s)) for s in shapes)
    if len(payload) != expected:
        raise OracleError(SHAPE_MISMATCH, f"payload has {len(payload)} bytes, shapes need {expected}")
    arrays, pos = [], 0
    for s in shapes:
        n = 4 * int(np.prod(s))
        arrays.append(np.frombuffer(payload[pos:pos + n], dtype="<f4").astype(DTYPE).reshape(s))
        pos += n
    return header, arrays


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes | None:
    """Return the raw frame body, or None on a clean EOF before a frame starts."""
    first = sock.recv(4)
    if not first:
        return None
    if len(first) < 4:
        first += _recv_exact(sock, 4 - len(first))
    (length,) = struct.unpack("<I", first)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    return _recv_exact(sock, length)


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host, int(port)


# --------------------------------------------------------------------------
# the served computation

@dataclass
class OracleStats:
    forward_calls: int = 0
    backward_calls: int = 0


class ModelEndpoint:
    """Runs forward / VJP on a frozen model and keeps call counters."""

    def __init__(self, model, mode: OracleMode | str):
        self.model = model
        self.mode = OracleMode(mode)
        self.stats = OracleStats()
        self._lock = threading.Lock()
        model.freeze()
        self.in_channels = _input_channels(model)

    @property
    def supports_backward(self) -> bool:
        return self.mode is OracleMode.FORWARD_BACKWARD

    def capabilities(self) -> dict:
        return {"forward": True, "backward": self.supports_backward}

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or (self.in_channels is not None and x.shape[1] != self.in_channels):
            raise OracleError(SHAPE_REJECTED, f"expected (N, {self.in_channels}, H, W) input, got {list(x.shape)}")
        if not np.isfinite(x).all():
            raise OracleError(NON_FINITE_INPUT, "input contains NaN or Inf")

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        self._check_input(x)
        try:
            with no_grad():
                out = self.model(Tensor(x)).data
        except NonFiniteError as exc:
            raise OracleError(INTERNAL, str(exc)) from exc
        except ValueError as exc:
            raise OracleError(SHAPE_REJECTED, str(exc)) from exc
        with self._lock:
            self.stats.forward_calls += 1
        return out

    def backward(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if not self.supports_backward:
            raise OracleError(BACKWARD_DISABLED, "this oracle only serves forward passes")
        x = np.asarray(x, dtype=DTYPE)
        g = np.asarray(g, dtype=DTYPE)
        self._check_input(x)
        if not np.isfinite(g).all():
            raise OracleError(NON_FINITE_INPUT, "upstream gradient contains NaN or Inf")
        xt = Tensor(x.copy(), requires_grad=True)
        try:
            out = self.model(xt)
            if out.shape != g.shape:
                raise OracleError(SHAPE_MISMATCH, f"gradient shape {list(g.shape)} != logits shape {list(out.shape)}")
            out.backward(g)
        except NonFiniteError as exc:
            raise OracleError(INTERNAL, str(exc)) from exc
        with self._lock:
            self.stats.backward_calls += 1
        return xt.grad


def _input_channels(model) -> int | None:
    spec = getattr(model, "spec", None)
    return getattr(spec, "in_channels", None)


class LocalOracle(ModelEndpoint):
    """In-process oracle; same interface as :class:`RemoteOracle`."""

    def hello(self) -> dict:
        return {"op": "hello", "capabilities": self.capabilities(), "mode": self.mode.value}

    def close(self) -> None:
        pass


# --------------------------------------------------------------------------
# server

class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        endpoint: ModelEndpoint = self.server.endpoint
        sock = self.request
        while True:
            try:
                body = read_frame(sock)
            except ProtocolError as exc:
                self._send(encode_frame({"op": "error", "id": 0, "code": exc.code, "message": exc.message}))
                return
            except (ConnectionError, OSError):
                return
            if body is None:
                return
            self._send(self._dispatch(endpoint, body))

    def _send(self, frame: bytes) -> None:
        try:
            self.request.sendall(frame)
        except OSError:
            pass

    @staticmethod
    def _dispatch(endpoint: ModelEndpoint, body: bytes) -> bytes:
        req_id = 0
        try:
            header, arrays = decode_body(body)
            req_id = header.get("id", 0)
            op = header["op"]
            if op == "hello":
                return encode_frame({"op": "hello", "id": req_id, "capabilities": endpoint.capabilities(),
                                     "mode": endpoint.mode.value})
            if op == "forward":
                if len(arrays) != 1:
                    raise OracleError(SHAPE_MISMATCH, "forward needs exactly one tensor")
                out = endpoint.forward(arrays[0])
                return encode_frame({"op": "forward", "id": req_id, "shape": list(out.shape), "dtype": "f32"}, out)
            if op == "backward":
                if not endpoint.supports_backward:
                    raise OracleError(BACKWARD_DISABLED, "this oracle only serves forward passes")
                if len(arrays) != 2:
                    raise OracleError(SHAPE_MISMATCH, "backward needs 'shape' and 'grad_shape' tensors")
                gx = endpoint.backward(arrays[0], arrays[1])
                return encode_frame({"op": "backward", "id": req_id, "shape": list(gx.shape), "dtype": "f32"}, gx)
            raise OracleError(UNKNOWN_OP, f"unknown op {op!r}")
        except OracleError as exc:
            return encode_frame({"op": "error", "id": req_id, "code": exc.code, "message": exc.message})
        except Exception as exc:  # keep the connection alive on unexpected failures
            log.exception("oracle request failed")
            return encode_frame({"op": "error", "id": req_id, "code": INTERNAL, "message": str(exc)})


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class OracleServer:
    """A running oracle; use as a context manager or call :meth:`close`."""

    def __init__(self, model, mode: OracleMode | str, bind_address: str = "127.0.0.1:0"):
        self.endpoint = ModelEndpoint(model, mode)
        host, port = parse_address(bind_address)
        self._server = _TCPServer((host, port), _Handler)
        self._server.endpoint = self.endpoint
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    @property
    def stats(self) -> OracleStats:
        return self.endpoint.stats

    @property
    def mode(self) -> OracleMode:
        return self.endpoint.mode

    def start(self) -> "OracleServer":
        self._thread = threading.Thread(target=self._server.serve_forever, name="oracle", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def close(self) -> None:
        if self._thread is not None:
            self._server.shutdown()
            self._thread.join()
            self._thread = None
        self._server.server_close()

    def __enter__(self) -> "OracleServer":
        return self.start() if self._thread is None else self

    def __exit__(self, *exc) -> None:
        self.close()


def serve(model, mode: OracleMode | str, bind_address: str = "127.0.0.1:0") -> OracleServer:
    """Bind and start serving ``model`` in a background thread."""
    return OracleServer(model, mode, bind_address).start()


# --------------------------------------------------------------------------
# client

class RemoteOracle:
    """Client side of the wire protocol.  One request in flight at a time."""

    def __init__(self, address: str, timeout: float = 60.0, capture: bool = False):
        host, port = parse_address(address)
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise OracleError("UNREACHABLE", f"cannot connect to {address}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._next_id = 1
        self._lock = threading.Lock()
        self.captured = bytearray() if capture else None
        self.calls = OracleStats()
        reply = self.hello()
        self.capabilities = reply.get("capabilities", {})
        self.mode = OracleMode(reply.get("mode", OracleMode.FORWARD_ONLY.value))

    @property
    def supports_backward(self) -> bool:
        return bool(self.capabilities.get("backward"))

    def _roundtrip(self, header: dict, *arrays: np.ndarray) -> tuple[dict, list[np.ndarray]]:
        with self._lock:
            header = {**header, "id": self._next_id, "dtype": "f32"}
            self._next_id += 1
            frame = encode_frame(header, *arrays)
            try:
                self._sock.sendall(frame)
                body = read_frame(self._sock)
            except OSError as exc:
                raise OracleError("TRANSPORT", str(exc)) from exc
            if body is None:
                raise OracleError("TRANSPORT", "server closed the connection")
            if self.captured is not None:
                # both directions, exactly as they crossed the wire
                self.captured.extend(frame)
                self.captured.extend(struct.pack("<I", len(body)) + body)
        reply, out = decode_body(body)
        if reply["op"] == "error":
            raise OracleError(reply.get("code", INTERNAL), reply.get("message", ""))
        return reply, out

    def send_raw(self, frame: bytes) -> tuple[dict, list[np.ndarray]]:
        """Send pre-encoded bytes and decode the reply without raising on errors."""
        with self._lock:
            self._sock.sendall(frame)
            body = read_frame(self._sock)
        if body is None:
            raise OracleError("TRANSPORT", "server closed the connection")
        return decode_body(body)

    def hello(self) -> dict:
        reply, _ = self._roundtrip({"op": "hello"})
        return reply

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        _, out = self._roundtrip({"op": "forward", "shape": list(x.shape)}, x)
        self.calls.forward_calls += 1
        return out[0]

    def backward(self, x: np.ndarray, g_logits: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        g = np.asarray(g_logits, dtype=DTYPE)
        _, out = self._roundtrip({"op": "backward", "shape": list(x.shape), "grad_shape": list(g.shape)}, x, g)
        self.calls.backward_calls += 1
        if out[0].shape != x.shape:
            raise OracleError(SHAPE_MISMATCH, f"server returned gradient of shape {out[0].shape}")
        return out[0]

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "RemoteOracle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
