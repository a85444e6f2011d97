"""Topic pub-sub broker and client over TCP and WebSocket.

Star topology: every component connects to one broker, which forwards each
published frame verbatim to the topic's current subscribers. Per-publisher,
per-topic FIFO order is preserved end to end: one reader thread per
connection processes publishes in arrival order, and one writer thread per
subscriber drains a bounded queue in order. A full subscriber queue closes
that subscriber with QUEUE_OVERFLOW instead of dropping frames silently, so
the delivery-completeness property stays falsifiable.

Control verbs (SUBSCRIBE, UNSUBSCRIBE, PING, acks) are STATUS envelopes on
the reserved "@control" topic. Everything else is treated as a publish; the
first publish on a topic registers its message type.
"""

from __future__ import annotations

import csv
import io
import logging
import queue
import socket
import threading
from dataclasses import dataclass, field

import numpy as np

from . import ws
from .clock import now_ns
from .messages import CONTROL_TOPIC, Envelope, FrameDecoder, MsgType, Payload, encode

log = logging.getLogger(__name__)

DEFAULT_TCP_PORT = 9870
DEFAULT_WS_PORT = 9871
DEFAULT_QUEUE_LIMIT = 1024


class BridgeError(Exception):
    pass


class TypeConflict(BridgeError):
    """Topic already registered with a different message type."""


class BrokerConnectionError(BridgeError):
    pass


class BindError(BridgeError):
    """A listen port is busy or otherwise not bindable."""


class MissingTrafficError(BridgeError):
    def __init__(self, msg_type: str, have: int, want: int):
        super().__init__(f"no/insufficient traffic for {msg_type}: {have}/{want} samples")
        self.msg_type = msg_type


# -- transports --------------------------------------------------------------


class TcpTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv(self) -> bytes:
        try:
            return self.sock.recv(1 << 18)
        except OSError:
            return b""

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class WsTransport:
    def __init__(self, wsock: ws.WsSocket):
        self.wsock = wsock

    def send(self, data: bytes) -> None:
        self.wsock.send(data)

    def recv(self) -> bytes:
        return self.wsock.recv()

    def close(self) -> None:
        self.wsock.close()


# -- broker ------------------------------------------------------------------


class _Conn:
    """One broker-side connection: reader + queued writer."""

    _next_id = 0
    _id_lock = threading.Lock()

    def __init__(self, transport, broker: "Broker", kind: str):
        with _Conn._id_lock:
            _Conn._next_id += 1
            self.id = _Conn._next_id
        self.transport = transport
        self.broker = broker
        self.kind = kind
        self.outbox: queue.Queue[bytes | None] = queue.Queue(maxsize=broker.queue_limit)
        self.alive = True
        self.close_reason = ""
        self._ctrl_seq = 0
        self._ctrl_lock = threading.Lock()

    def start(self) -> None:
        threading.Thread(target=self._writer, name=f"broker-w{self.id}", daemon=True).start()
        threading.Thread(target=self._reader, name=f"broker-r{self.id}", daemon=True).start()

    def control(self, payload: dict) -> None:
        """Queue a STATUS envelope on @control to this peer."""
        with self._ctrl_lock:
            seq = self._ctrl_seq
            self._ctrl_seq += 1
        frame = encode(Envelope(CONTROL_TOPIC, MsgType.STATUS, seq, now_ns(), payload))
        self.enqueue(frame)

    def enqueue(self, frame: bytes) -> None:
        if not self.alive:
            return
        try:
            self.outbox.put_nowait(frame)
        except queue.Full:
            self.close("QUEUE_OVERFLOW")

    def close(self, reason: str) -> None:
        if not self.alive:
            return
        self.alive = False
        self.close_reason = reason
        self.broker._drop_conn(self, reason)
        try:
            self.outbox.put_nowait(None)
        except queue.Full:
            # writer is stuck on a dead socket; closing the transport unblocks it
            pass
        self.transport.close()

    def _writer(self) -> None:
        while True:
            frame = self.outbox.get()
            if frame is None:
                return
            try:
                self.transport.send(frame)
            except OSError:
                self.close("SEND_FAILED")
                return

    def _reader(self) -> None:
        dec = FrameDecoder()
        while self.alive:
            chunk = self.transport.recv()
            if not chunk:
                self.close("PEER_CLOSED")
                return
            try:
                envelopes = dec.feed_sized(chunk)
            except Exception as e:
                log.warning("conn %d: bad frame: %s", self.id, e)
                self.close("BAD_FRAME")
                return
            for env, size in envelopes:
                self.broker._handle(self, env, size)


@dataclass
class TopicEntry:
    msg_type: MsgType | None  # None until the first publish pins it
    subscribers: set = field(default_factory=set)
    last_seq: dict = field(default_factory=dict)  # publisher conn id -> seq
    published: int = 0
    delivered: int = 0
    bytes: int = 0


class Broker:
    """Topic router; serves raw TCP and WebSocket clients simultaneously."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        tcp_port: int | None = 0,
        ws_port: int | None = 0,
        queue_limit: int = DEFAULT_QUEUE_LIMIT,
    ):
        self.host = host
        self.queue_limit = queue_limit
        self.topics: dict[str, TopicEntry] = {}
        self._lock = threading.Lock()
        self._conns: dict[int, _Conn] = {}
        self._servers: list[socket.socket] = []
        self._tcp_port = tcp_port
        self._ws_port = ws_port
        self.tcp_address: tuple[str, int] | None = None
        self.ws_address: tuple[str, int] | None = None
        self._running = False

    def start(self) -> "Broker":
        self._running = True
        if self._tcp_port is not None:
            srv = self._listen(self._tcp_port)
            self.tcp_address = srv.getsockname()[:2]
            threading.Thread(target=self._accept_loop, args=(srv, "tcp"),
                             name="broker-accept-tcp", daemon=True).start()
        if self._ws_port is not None:
            srv = self._listen(self._ws_port)
            self.ws_address = srv.getsockname()[:2]
            threading.Thread(target=self._accept_loop, args=(srv, "ws"),
                             name="broker-accept-ws", daemon=True).start()
        return self

    def _listen(self, port: int) -> socket.socket:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            srv.bind((self.host, port))
        except OSError as e:
            raise BindError(f"cannot bind {self.host}:{port}: {e}") from e
        srv.listen(64)
        self._servers.append(srv)
        return srv

    def _accept_loop(self, srv: socket.socket, kind: str) -> None:
        while self._running:
            try:
                sock, _ = srv.accept()
            except OSError:
                return
            threading.Thread(target=self._setup_conn, args=(sock, kind), daemon=True).start()

    def _setup_conn(self, sock: socket.socket, kind: str) -> None:
        try:
            if kind == "ws":
                ws.server_handshake(sock)
                transport = WsTransport(ws.WsSocket(sock, server=True))
            else:
                transport = TcpTransport(sock)
        except Exception as e:
            log.warning("handshake failed: %s", e)
            sock.close()
            return
        conn = _Conn(transport, self, kind)
        with self._lock:
            self._conns[conn.id] = conn
        conn.start()

    def stop(self) -> None:
        self._running = False
        for srv in self._servers:
            try:
                srv.close()
            except OSError:
                pass
        with self._lock:
            conns = list(self._conns.values())
        for conn in conns:
            conn.close("BROKER_STOPPED")

    def _drop_conn(self, conn: _Conn, reason: str) -> None:
        with self._lock:
            self._conns.pop(conn.id, None)
            for entry in self.topics.values():
                entry.subscribers.discard(conn)
        if reason not in ("PEER_CLOSED", "BROKER_STOPPED"):
            log.info("conn %d closed: %s", conn.id, reason)

    # -- message handling ----------------------------------------------------

    def _handle(self, conn: _Conn, env: Envelope, size: int) -> None:
        if env.topic == CONTROL_TOPIC:
            self._handle_control(conn, env)
            return
        with self._lock:
            entry = self.topics.get(env.topic)
            if entry is None:
                entry = TopicEntry(msg_type=env.msg_type)
                self.topics[env.topic] = entry
            elif entry.msg_type is None:
                entry.msg_type = env.msg_type  # topic existed only as a subscription
            elif entry.msg_type is not env.msg_type:
                conn.control(
                    {
                        "verb": "ERROR",
                        "code": "TYPE_CONFLICT",
                        "topic": env.topic,
                        "registered": entry.msg_type.value,
                        "got": env.msg_type.value,
                    }
                )
                return
            entry.published += 1
            entry.bytes += size
            entry.last_seq[conn.id] = env.seq
            subscribers = [s for s in entry.subscribers if s.alive]
            entry.delivered += len(subscribers)
        frame = encode(env)
        for sub in subscribers:
            sub.enqueue(frame)
        conn.control({"verb": "PUBACK", "topic": env.topic, "seq": env.seq})

    def _handle_control(self, conn: _Conn, env: Envelope) -> None:
        if env.msg_type is not MsgType.STATUS or not isinstance(env.payload, dict):
            conn.control({"verb": "ERROR", "code": "BAD_CONTROL"})
            return
        verb = env.payload.get("verb")
        topic = env.payload.get("topic", "")
        if verb == "SUBSCRIBE":
            with self._lock:
                entry = self.topics.get(topic)
                if entry is None:
                    entry = TopicEntry(msg_type=None)  # type pinned on first publish
                    self.topics[topic] = entry
                entry.subscribers.add(conn)
            conn.control({"verb": "SUBACK", "topic": topic})
        elif verb == "UNSUBSCRIBE":
            with self._lock:
                entry = self.topics.get(topic)
                if entry is not None:
                    entry.subscribers.discard(conn)
            conn.control({"verb": "UNSUBACK", "topic": topic})
        elif verb == "PING":
            conn.control({"verb": "PONG", "nonce": env.payload.get("nonce")})
        else:
            conn.control({"verb": "ERROR", "code": "UNKNOWN_VERB", "got": verb})

    # -- introspection ---------------------------------------------------------

    def topic_stats(self) -> dict[str, dict]:
        with self._lock:
            return {
                name: {
                    "msg_type": entry.msg_type.value if entry.msg_type else None,
                    "subscribers": len(entry.subscribers),
                    "published": entry.published,
                    "delivered": entry.delivered,
                    "bytes": entry.bytes,
                }
                for name, entry in self.topics.items()
            }


# -- delay instrumentation ----------------------------------------------------


@dataclass(frozen=True)
class DelaySample:
    topic: str
    msg_type: MsgType
    seq: int
    stamp_ns: int
    recv_ns: int
    payload_bytes: int


class DelayCollector:
    """Accumulates one-way delay samples per message type."""

    def __init__(self):
        self.samples: dict[MsgType, list[DelaySample]] = {}
        self._lock = threading.Lock()

    def record(self, env: Envelope, recv_ns: int, frame_bytes: int) -> None:
        sample = DelaySample(env.topic, env.msg_type, env.seq, env.stamp_ns, recv_ns, frame_bytes)
        if recv_ns < env.stamp_ns:
            raise AssertionError("recv before publish on a monotonic clock")
        with self._lock:
            self.samples.setdefault(env.msg_type, []).append(sample)

    def count(self, msg_type: MsgType) -> int:
        with self._lock:
            return len(self.samples.get(msg_type, []))

    def snapshot(self) -> dict[MsgType, list[DelaySample]]:
        with self._lock:
            return {k: list(v) for k, v in self.samples.items()}


@dataclass(frozen=True)
class DelayStats:
    msg_type: str
    n: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    mean_bytes: float


@dataclass(frozen=True)
class DelayReport:
    stats: tuple[DelayStats, ...]

    def by_type(self) -> dict[str, DelayStats]:
        return {s.msg_type: s for s in self.stats}

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["msg_type", "n", "mean_ms", "median_ms", "p95_ms", "mean_bytes"])
        for s in self.stats:
            writer.writerow(
                [s.msg_type, s.n, f"{s.mean_ms:.6f}", f"{s.median_ms:.6f}",
                 f"{s.p95_ms:.6f}", f"{s.mean_bytes:.1f}"]
            )
        return out.getvalue()


def build_delay_report(collector: DelayCollector, window: int) -> DelayReport:
    stats = []
    for msg_type, samples in sorted(collector.snapshot().items(), key=lambda kv: kv[0].value):
        delays_ms = np.array([(s.recv_ns - s.stamp_ns) * 1e-6 for s in samples])
        sizes = np.array([s.payload_bytes for s in samples], dtype=float)
        stats.append(
            DelayStats(
                msg_type=msg_type.value,
                n=len(samples),
                mean_ms=float(delays_ms.mean()),
                median_ms=float(np.median(delays_ms)),
                p95_ms=float(np.percentile(delays_ms, 95)),
                mean_bytes=float(sizes.mean()),
            )
        )
    return DelayReport(tuple(stats))


def measure_delays(
    collector: DelayCollector,
    window: int,
    types: tuple[MsgType, ...] = (MsgType.POINTCLOUD, MsgType.IMAGE, MsgType.POSE, MsgType.WRENCH),
    timeout: float = 30.0,
    poll: float = 0.02,
) -> DelayReport:
    """Wait until >= window samples of each type arrived, then report.

    Raises MissingTrafficError naming the lagging type if the timeout expires.
    """
    import time as _time

    deadline = _time.monotonic() + timeout
    while _time.monotonic() < deadline:
        if all(collector.count(t) >= window for t in types):
            return build_delay_report(collector, window)
        _time.sleep(poll)
    for t in types:
        if collector.count(t) < window:
            raise MissingTrafficError(t.value, collector.count(t), window)
    return build_delay_report(collector, window)


# -- client --------------------------------------------------------------------


class BridgeClient:
    """One connection to the broker; thread-safe publish, callback delivery.

    Callbacks run on the client's reader thread, in arrival order. Keep them
    short or hand off to your own queue.
    """

    def __init__(
        self,
        host: str,
        port: int,
        transport: str = "tcp",
        name: str = "client",
        collector: DelayCollector | None = None,
        connect_timeout: float = 5.0,
    ):
        self.name = name
        self.collector = collector
        sock = socket.create_connection((host, port), timeout=connect_timeout)
        sock.settimeout(None)
        if transport == "ws":
            ws.client_handshake(sock, host, port)
            self._transport = WsTransport(ws.WsSocket(sock, server=False))
        elif transport == "tcp":
            self._transport = TcpTransport(sock)
        else:
            raise ValueError(f"unknown transport {transport!r}")
        self._seq: dict[str, int] = {}
        self._send_lock = threading.Lock()
        self._callbacks: dict[str, list] = {}
        self._cb_lock = threading.Lock()
        self._acks: dict[str, threading.Event] = {}
        self._pong: dict[object, threading.Event] = {}
        self.alive = True
        self.puback_count = 0
        self.received: dict[str, int] = {}
        self.errors: list[dict] = []
        self._closed = threading.Event()
        threading.Thread(target=self._reader, name=f"{name}-reader", daemon=True).start()

    # -- outbound ------------------------------------------------------------

    def _next_seq(self, topic: str) -> int:
        seq = self._seq.get(topic, 0)
        self._seq[topic] = seq + 1
        return seq

    def publish(self, topic: str, msg_type: MsgType, payload: Payload,
                stamp_ns: int | None = None) -> int:
        """Publish and return the per-topic seq this envelope was given."""
        if not self.alive:
            raise BrokerConnectionError(f"{self.name}: connection closed")
        with self._send_lock:
            seq = self._next_seq(topic)
            env = Envelope(topic, msg_type, seq, now_ns() if stamp_ns is None else stamp_ns, payload)
            frame = encode(env)
            try:
                self._transport.send(frame)
            except OSError as e:
                self.alive = False
                raise BrokerConnectionError(f"{self.name}: send failed: {e}") from e
        return seq

    def _control(self, payload: dict) -> None:
        self.publish(CONTROL_TOPIC, MsgType.STATUS, payload)

    def subscribe(self, topic: str, callback=None, timeout: float = 5.0) -> None:
        """Register interest; returns once the broker confirms."""
        if callback is not None:
            with self._cb_lock:
                self._callbacks.setdefault(topic, []).append(callback)
        event = self._acks.setdefault(f"SUBACK:{topic}", threading.Event())
        event.clear()
        self._control({"verb": "SUBSCRIBE", "topic": topic})
        if not event.wait(timeout):
            raise BrokerConnectionError(f"subscribe to {topic!r} not confirmed")

    def unsubscribe(self, topic: str, timeout: float = 5.0) -> None:
        event = self._acks.setdefault(f"UNSUBACK:{topic}", threading.Event())
        event.clear()
        self._control({"verb": "UNSUBSCRIBE", "topic": topic})
        if not event.wait(timeout):
            raise BrokerConnectionError(f"unsubscribe from {topic!r} not confirmed")

    def echo(self, timeout: float = 5.0) -> float:
        """Round-trip time through the broker, seconds (RTT/2 approximates
        one-way delay when clocks are not shared)."""
        nonce = f"{self.name}-{now_ns()}"
        event = self._pong.setdefault(nonce, threading.Event())
        t0 = now_ns()
        self._control({"verb": "PING", "nonce": nonce})
        if not event.wait(timeout):
            raise BrokerConnectionError("no PONG")
        self._pong.pop(nonce, None)
        return (now_ns() - t0) * 1e-9

    def close(self) -> None:
        self.alive = False
        self._transport.close()
        self._closed.wait(timeout=2.0)

    # -- inbound ---------------------------------------------------------------

    def _reader(self) -> None:
        dec = FrameDecoder()
        while True:
            chunk = self._transport.recv()
            if not chunk:
                break
            try:
                envelopes = dec.feed_sized(chunk)
            except Exception as e:
                log.warning("%s: undecodable frame: %s", self.name, e)
                break
            recv_ns = now_ns()
            for env, size in envelopes:
                if env.topic == CONTROL_TOPIC:
                    self._handle_control(env)
                    continue
                self.received[env.topic] = self.received.get(env.topic, 0) + 1
                if self.collector is not None:
                    self.collector.record(env, recv_ns, size)
                with self._cb_lock:
                    callbacks = list(self._callbacks.get(env.topic, ()))
                for cb in callbacks:
                    try:
                        cb(env)
                    except Exception:
                        log.exception("%s: callback failed on %s", self.name, env.topic)
        self.alive = False
        self._closed.set()

    def _handle_control(self, env: Envelope) -> None:
        payload = env.payload if isinstance(env.payload, dict) else {}
        verb = payload.get("verb")
        if verb == "PUBACK":
            self.puback_count += 1
        elif verb in ("SUBACK", "UNSUBACK"):
            event = self._acks.get(f"{verb}:{payload.get('topic')}")
            if event:
                event.set()
        elif verb == "PONG":
            event = self._pong.get(payload.get("nonce"))
            if event:
                event.set()
        elif verb == "ERROR":
            self.errors.append(payload)
            log.warning("%s: broker error: %s", self.name, payload)
