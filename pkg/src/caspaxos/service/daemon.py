"""Acceptor and proposer daemons.

Both daemons host the very same state machines the simulator runs; the
daemon layer only supplies transport (framed TCP), timers (wall clock in
configured ticks) and durable storage (the journal backend).

The acceptor answers each request on the connection that carried it,
serialized under one lock.  The proposer runs a single dispatcher thread
consuming one queue fed by client connections, peer replies and timers,
so its actor logic stays single-threaded exactly as in simulation.
"""

from __future__ import annotations

import itertools
import json
import os
import queue
import socket
import threading
import time

from .. import trace as trace_mod
from ..acceptor import Acceptor
from ..core import ErrorReply, Message
from ..kvstore import GcOptions
from ..node import ProposerNode
from ..storage import FileBackend
from . import frames
from .config import NodeConfig


def _parse_addr(addr: str) -> tuple[str, int]:
    host, port = addr.rsplit(":", 1)
    return host, int(port)


class _FileTraceSink:
    """Append protocol trace events to a JSONL file (spot-check replay)."""

    def __init__(self, path: str):
        self._fh = open(path, "a", buffering=1)
        self._ts: dict[str, int] = {}
        self._lock = threading.Lock()

    def __call__(self, **fields) -> None:
        with self._lock:
            node = fields["node"]
            ts = self._ts.get(node, 0) + 1
            self._ts[node] = ts
            event = trace_mod.TraceEvent(ts=ts, **fields)
            self._fh.write(trace_mod.event_to_json(event) + "\n")


class AcceptorDaemon:
    def __init__(self, config: NodeConfig):
        config.validate()
        self.config = config
        self.backend = FileBackend(config.storage_dir, fsync=config.fsync)
        sink = _FileTraceSink(config.trace_file) if config.trace_file else None
        self.acceptor = Acceptor(config.node_id, self.backend, trace_sink=sink)
        self._lock = threading.Lock()
        self._server = socket.create_server(_parse_addr(config.listen))
        self._stopping = threading.Event()

    @property
    def address(self) -> str:
        host, port = self._server.getsockname()[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def serve_forever(self) -> None:
        self.start()
        self._stopping.wait()

    def stop(self) -> None:
        self._stopping.set()
        self._server.close()

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            while True:
                try:
                    frame = frames.read_frame(conn)
                except frames.FrameError:
                    return
                if frame is None:
                    return
                msg = frames.decode_or_error(frame)
                if isinstance(msg, ErrorReply):
                    reply = msg
                else:
                    with self._lock:
                        reply = self.acceptor.process(msg)
                if reply is None:
                    continue  # persistence failed: stay silent, like a lost message
                try:
                    conn.sendall(frames.encode_frame(reply, frame.request_id))
                except OSError:
                    return


class _PeerLink:
    """Lazily connected outbound link; replies flow back into the queue."""

    def __init__(self, daemon: "ProposerDaemon", peer_id: str, address: str):
        self.daemon = daemon
        self.peer_id = peer_id
        self.address = address
        self.sock: socket.socket | None = None
        self.lock = threading.Lock()

    def send(self, msg: Message, request_id: int, age: int) -> None:
        data = frames.encode_frame(msg, request_id, age)
        with self.lock:
            try:
                if self.sock is None:
                    self.sock = socket.create_connection(_parse_addr(self.address), timeout=2.0)
                    self.sock.settimeout(None)
                    threading.Thread(
                        target=self._reader, args=(self.sock,), daemon=True
                    ).start()
                self.sock.sendall(data)
            except OSError:
                if self.sock is not None:
                    try:
                        self.sock.close()
                    except OSError:
                        pass
                self.sock = None  # dropped; the protocol treats it as message loss

    def _reader(self, sock: socket.socket) -> None:
        while True:
            try:
                frame = frames.read_frame(sock)
            except frames.FrameError:
                frame = None
            if frame is None:
                with self.lock:
                    if self.sock is sock:
                        self.sock = None
                return
            try:
                msg = frame.message()
            except Exception:
                continue
            self.daemon.enqueue(self.peer_id, msg)


class ProposerDaemon:
    def __init__(self, config: NodeConfig):
        config.validate()
        self.config = config
        self.backend = FileBackend(config.storage_dir, fsync=config.fsync)
        sink = _FileTraceSink(config.trace_file) if config.trace_file else None
        self.node = ProposerNode(
            config.node_id,
            config.configuration(),
            self.backend,
            one_rtt=(config.mode == "1rtt"),
            phase_timeout=config.phase_timeout_ticks,
            proposer_roster=tuple(config.proposers) or (config.node_id,),
            gc_options=GcOptions(interval=config.gc_interval_ticks),
            trace_sink=sink,
        )
        self._queue: "queue.Queue[tuple]" = queue.Queue()
        self._peers = {
            peer: _PeerLink(self, peer, addr) for peer, addr in config.peers.items()
        }
        self._request_ids = itertools.count(1)
        self._clients: dict[int, socket.socket] = {}
        self._client_ids = itertools.count(1)
        self._server = socket.create_server(_parse_addr(config.listen))
        self._stopping = threading.Event()
        self._started = time.monotonic()

    @property
    def address(self) -> str:
        host, port = self._server.getsockname()[:2]
        return f"{host}:{port}"

    # -- context given to the shared actor ---------------------------------

    def enqueue(self, frm: str, msg: Message) -> None:
        self._queue.put(("msg", frm, msg))

    def _ticks(self) -> int:
        return int((time.monotonic() - self._started) * 1000 / self.config.tick_ms)

    class _Ctx:
        def __init__(self, daemon: "ProposerDaemon"):
            self.daemon = daemon

        def send(self, to: str, msg: Message) -> None:
            d = self.daemon
            if to.startswith("client/"):
                _, conn_id, request_id = to.split("/")
                conn = d._clients.get(int(conn_id))
                if conn is not None:
                    try:
                        conn.sendall(frames.encode_frame(msg, int(request_id)))
                    except OSError:
                        pass
                return
            link = d._peers.get(to)
            if link is not None:
                link.send(msg, next(d._request_ids), d.node.proposer.age)

        def set_timer(self, delay_ticks: int, token) -> None:
            d = self.daemon
            seconds = max(delay_ticks, 1) * d.config.tick_ms / 1000
            timer = threading.Timer(seconds, lambda: d._queue.put(("timer", token)))
            timer.daemon = True
            timer.start()

        def now(self) -> int:
            return self.daemon._ticks()

    def start(self) -> None:
        threading.Thread(target=self._accept_loop, daemon=True).start()
        threading.Thread(target=self._dispatch_loop, daemon=True).start()
        self._queue.put(("start",))

    def serve_forever(self) -> None:
        self.start()
        self._stopping.wait()

    def stop(self) -> None:
        self._stopping.set()
        self._server.close()
        self._queue.put(("stop",))

    def _dispatch_loop(self) -> None:
        ctx = self._Ctx(self)
        while not self._stopping.is_set():
            item = self._queue.get()
            if item[0] == "stop":
                return
            if item[0] == "start":
                self.node.on_start(ctx)
            elif item[0] == "timer":
                self.node.on_timer(item[1], ctx)
            else:
                _, frm, msg = item
                self.node.handle(frm, msg, ctx)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            conn_id = next(self._client_ids)
            self._clients[conn_id] = conn
            threading.Thread(
                target=self._serve_conn, args=(conn, conn_id), daemon=True
            ).start()

    def _serve_conn(self, conn: socket.socket, conn_id: int) -> None:
        try:
            while True:
                try:
                    frame = frames.read_frame(conn)
                except frames.FrameError:
                    return
                if frame is None:
                    return
                msg = frames.decode_or_error(frame)
                if isinstance(msg, ErrorReply):
                    try:
                        conn.sendall(frames.encode_frame(msg, frame.request_id))
                    except OSError:
                        return
                    continue
                self.enqueue(f"client/{conn_id}/{frame.request_id}", msg)
        finally:
            self._clients.pop(conn_id, None)
            conn.close()


def run_acceptor(config: NodeConfig) -> AcceptorDaemon:
    daemon = AcceptorDaemon(config)
    daemon.start()
    return daemon


def run_proposer(config: NodeConfig) -> ProposerDaemon:
    daemon = ProposerDaemon(config)
    daemon.start()
    return daemon


def write_pidfile(directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "daemon.pid"), "w") as fh:
        json.dump({"pid": os.getpid()}, fh)
