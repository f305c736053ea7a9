"""Message delivery between nodes and the aggregator.

Two interchangeable channels: an in-process bus for fast simulation and a
loopback TCP channel with explicit length-prefixed framing for a realistic
deployment shape. Envelopes are JSON-safe dicts; the socket channel carries
them as UTF-8 JSON inside 4-byte big-endian length-prefixed frames.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import BinaryIO

log = logging.getLogger(__name__)

MAX_FRAME_BYTES = 64 * 1024 * 1024
_HEADER = struct.Struct(">I")


class TransportError(Exception):
    """Base class for channel failures."""


class FrameError(TransportError):
    """Stream ended inside a frame."""


class FrameTooLarge(TransportError):
    """Payload exceeds the configured frame cap."""


class DeliveryError(TransportError):
    """Endpoint closed, unknown, or unreachable."""


class ReceiveTimeout(TransportError):
    """No message arrived within the allowed wait."""


@dataclass(frozen=True)
class DeliveryReceipt:
    to: str
    n_bytes: int | None = None


def encode_frame(payload: bytes, max_bytes: int = MAX_FRAME_BYTES) -> bytes:
    """Length-prefix a payload: 4-byte big-endian count, then the bytes."""
    if len(payload) > max_bytes:
        raise FrameTooLarge(
            f"payload of {len(payload)} bytes exceeds cap of {max_bytes}")
    return _HEADER.pack(len(payload)) + payload


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise FrameError(f"stream truncated: expected {n} bytes, got {got}")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def decode_frame(stream: BinaryIO, max_bytes: int = MAX_FRAME_BYTES) -> bytes:
    """Read one frame; partial reads resume until the full payload arrives."""
    header = _read_exact(stream, _HEADER.size)
    (length,) = _HEADER.unpack(header)
    if length > max_bytes:
        raise FrameTooLarge(
            f"incoming frame of {length} bytes exceeds cap of {max_bytes}")
    return _read_exact(stream, length)


class BusEndpoint:
    """One participant's handle on the in-process bus."""

    def __init__(self, bus: "InProcBus", endpoint_id: str):
        self.id = endpoint_id
        self._bus = bus
        self._inbox: queue.Queue = queue.Queue()
        self._open = True

    def send(self, to: str, envelope: dict) -> DeliveryReceipt:
        if not self._open:
            raise DeliveryError(f"endpoint {self.id} is closed")
        self._bus._deliver(to, envelope)
        return DeliveryReceipt(to=to)

    def recv(self, timeout: float | None = None) -> dict:
        if not self._open:
            raise DeliveryError(f"endpoint {self.id} is closed")
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ReceiveTimeout(
                f"endpoint {self.id}: nothing received within {timeout}s") from None

    def close(self) -> None:
        self._open = False


class InProcBus:
    """Exactly-once, per-sender in-order delivery between queue endpoints.

    Envelopes are passed by reference and must be treated as read-only
    JSON-safe values, which keeps delivery equivalent to a serialize/parse
    round trip without the cost.
    """

    def __init__(self):
        self._endpoints: dict[str, BusEndpoint] = {}
        self._lock = threading.Lock()

    def endpoint(self, endpoint_id: str) -> BusEndpoint:
        with self._lock:
            if endpoint_id in self._endpoints:
                raise ValueError(f"endpoint id {endpoint_id!r} already registered")
            ep = BusEndpoint(self, endpoint_id)
            self._endpoints[endpoint_id] = ep
            return ep

    def _deliver(self, to: str, envelope: dict) -> None:
        with self._lock:
            ep = self._endpoints.get(to)
        if ep is None or not ep._open:
            raise DeliveryError(f"no open endpoint {to!r}")
        ep._inbox.put(envelope)

    def close(self) -> None:
        with self._lock:
            for ep in self._endpoints.values():
                ep.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class SocketEndpoint:
    """One participant on the loopback channel: a listener plus an inbox.

    Every message travels on its own short-lived connection carrying exactly
    one frame, so no connection state machine is needed.
    """

    def __init__(self, network: "SocketNetwork", endpoint_id: str,
                 max_bytes: int, connect_timeout: float):
        self.id = endpoint_id
        self._network = network
        self._max_bytes = max_bytes
        self._connect_timeout = connect_timeout
        self._inbox: queue.Queue = queue.Queue()
        self._open = True

        self._listener = socket.create_server(("127.0.0.1", 0))
        self.address = self._listener.getsockname()
        self._acceptor = threading.Thread(
            target=self._accept_loop, name=f"accept-{endpoint_id}", daemon=True)
        self._acceptor.start()

    def _accept_loop(self) -> None:
        while self._open:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return  # listener closed
            if not self._open:
                conn.close()
                return
            try:
                with conn, conn.makefile("rb") as stream:
                    payload = decode_frame(stream, self._max_bytes)
                self._inbox.put(json.loads(payload.decode("utf-8")))
            except (TransportError, ValueError) as exc:
                log.warning("endpoint %s dropped a bad frame: %s", self.id, exc)

    def send(self, to: str, envelope: dict) -> DeliveryReceipt:
        if not self._open:
            raise DeliveryError(f"endpoint {self.id} is closed")
        address = self._network._address_of(to)
        frame = encode_frame(json.dumps(envelope).encode("utf-8"), self._max_bytes)
        try:
            with socket.create_connection(address, timeout=self._connect_timeout) as s:
                s.sendall(frame)
        except OSError as exc:
            raise DeliveryError(f"could not deliver to {to!r}: {exc}") from exc
        return DeliveryReceipt(to=to, n_bytes=len(frame))

    def recv(self, timeout: float | None = None) -> dict:
        if not self._open:
            raise DeliveryError(f"endpoint {self.id} is closed")
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ReceiveTimeout(
                f"endpoint {self.id}: nothing received within {timeout}s") from None

    def close(self) -> None:
        self._open = False
        # shutdown wakes an accept() blocked in another thread; plain close
        # would leave the kernel socket listening until that call returned
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass


class SocketNetwork:
    """Registry of loopback endpoints with ephemeral ports."""

    def __init__(self, max_bytes: int = MAX_FRAME_BYTES,
                 connect_timeout: float = 5.0):
        self._max_bytes = max_bytes
        self._connect_timeout = connect_timeout
        self._endpoints: dict[str, SocketEndpoint] = {}
        self._lock = threading.Lock()

    def endpoint(self, endpoint_id: str) -> SocketEndpoint:
        with self._lock:
            if endpoint_id in self._endpoints:
                raise ValueError(f"endpoint id {endpoint_id!r} already registered")
            ep = SocketEndpoint(self, endpoint_id, self._max_bytes,
                                self._connect_timeout)
            self._endpoints[endpoint_id] = ep
            return ep

    def _address_of(self, endpoint_id: str):
        with self._lock:
            ep = self._endpoints.get(endpoint_id)
        if ep is None:
            raise DeliveryError(f"no endpoint {endpoint_id!r} registered")
        return ep.address

    def close(self) -> None:
        with self._lock:
            for ep in self._endpoints.values():
                ep.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
