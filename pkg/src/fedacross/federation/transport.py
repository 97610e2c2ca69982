"""Transports: an in-process loopback and a TCP socket transport.

Both push every message through ``encode``/``decode``, so byte counts and
decoded contents are identical whichever transport carries them.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

from ..errors import FedAcrossError, ProtocolError, TransportError
from .messages import ACK_ERROR, MAX_FRAME, Ack, decode, encode
from .server import ServerSession, ServerState

log = logging.getLogger(__name__)


class Channel:
    """Client end of a session. Tracks bytes in both directions."""

    def __init__(self):
        self.bytes_sent = 0
        self.bytes_received = 0
        self.last_request_bytes = 0
        self.last_reply_bytes = 0
        self.log: list[tuple[str, str, int]] = []  # (direction, message type, bytes)

    def request(self, msg):
        frame = encode(msg)
        reply_frame = self._roundtrip(frame)
        self.last_request_bytes = len(frame)
        self.last_reply_bytes = len(reply_frame)
        self.bytes_sent += len(frame)
        self.bytes_received += len(reply_frame)
        reply = decode(reply_frame)
        self.log.append(("up", type(msg).__name__, len(frame)))
        self.log.append(("down", type(reply).__name__, len(reply_frame)))
        return reply

    def _roundtrip(self, frame: bytes) -> bytes:
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _serve_frame(session: ServerSession, frame: bytes) -> bytes:
    try:
        reply = session.handle(decode(frame))
    except FedAcrossError as exc:
        log.warning("session %s: %s", session.client_id, exc)
        reply = Ack(ACK_ERROR)
    return encode(reply)


class InProcessChannel(Channel):
    def __init__(self, server: ServerState):
        super().__init__()
        self.session = ServerSession(server)

    def _roundtrip(self, frame):
        return _serve_frame(self.session, frame)


class InProcessTransport:
    name = "in_process"

    def __init__(self, server: ServerState):
        self.server = server

    def connect(self) -> Channel:
        return InProcessChannel(self.server)

    def close(self):
        pass


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes | None:
    """Next whole frame, or ``None`` on a clean close between frames."""
    first = sock.recv(4)
    if not first:
        return None
    head = first + recv_exact(sock, 4 - len(first)) if len(first) < 4 else first
    length = int.from_bytes(head, "big")
    if not 1 <= length <= MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    return head + recv_exact(sock, length)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        session = ServerSession(self.server.state)
        sock = self.request
        try:
            while True:
                frame = recv_frame(sock)
                if frame is None:
                    return
                sock.sendall(_serve_frame(session, frame))
        except (OSError, FedAcrossError) as exc:
            log.warning("connection from %s dropped: %s", self.client_address, exc)


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class SocketServer:
    """Threaded TCP front end for a ``ServerState``; one thread per session."""

    def __init__(self, state: ServerState, host: str = "127.0.0.1", port: int = 0):
        self._srv = _TCPServer((host, port), _Handler)
        self._srv.state = state
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._srv.server_address[:2]

    def start(self) -> "SocketServer":
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._srv.serve_forever()

    def close(self):
        self._srv.shutdown()
        self._srv.server_close()


class SocketChannel(Channel):
    def __init__(self, host: str, port: int, timeout: float | None = 30.0):
        super().__init__()
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach {host}:{port}: {exc}") from exc

    def _roundtrip(self, frame):
        try:
            self.sock.sendall(frame)
            reply = recv_frame(self.sock)
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        if reply is None:
            raise TransportError("server closed the connection")
        return reply

    def close(self):
        self.sock.close()


class SocketTransport:
    """Starts a local ``SocketServer`` for ``server`` unless an address is given."""

    name = "socket"

    def __init__(self, server: ServerState | None = None, host: str = "127.0.0.1", port: int = 0,
                 timeout: float | None = 30.0):
        self.timeout = timeout
        self._owned = None
        if server is not None:
            self._owned = SocketServer(server, host, port).start()
            host, port = self._owned.address
        self.host, self.port = host, port

    def connect(self) -> Channel:
        return SocketChannel(self.host, self.port, self.timeout)

    def close(self):
        if self._owned is not None:
            self._owned.close()
            self._owned = None

