"""Encrypted request channel in front of the engine.

Wire format: each frame is ``u32 LE length`` followed by a 12-byte nonce and
the AES-256-GCM ciphertext+tag of one message; the length prefix is bound as
associated data.  Nonces are ``session(3) | direction(1) | counter(8, LE)``;
a receiver rejects a frame whose counter does not increase, so a replayed or
reordered frame is treated like a forged one: the connection is dropped.
"""

from __future__ import annotations

import asyncio
import configparser
import logging
import os
import secrets
import socket
import struct
import threading
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Mapping, Optional, Tuple, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (ERRORS_BY_CODE, AuthFailure, BadMessage, InvalidParam,
                     TimeclaveError)
from .tsengine import Engine, EngineConfig, parse_agg, parse_duration_ms

log = logging.getLogger(__name__)

KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16
MAX_FRAME = 16 << 20
LEN = struct.Struct("<I")

INGEST, QUERY, RESPONSE, ERROR = 1, 2, 3, 4
CLIENT_TO_SERVER, SERVER_TO_CLIENT = 0, 1

_POINT = struct.Struct("<Qd")
_QUERY = struct.Struct("<BQQ")
_RESPONSE = struct.Struct("<Bd")
_ERROR_HEAD = struct.Struct("<BH")


# -- messages ------------------------------------------------------------------

@dataclass(frozen=True)
class Ingest:
    points: Tuple[Tuple[int, float], ...] = ()


@dataclass(frozen=True)
class Query:
    f: int
    t_a: int
    t_b: int


@dataclass(frozen=True)
class Response:
    status: int
    value: float


@dataclass(frozen=True)
class Error:
    code: int
    detail: str = ""


Message = Union[Ingest, Query, Response, Error]


def encode_message(msg: Message) -> bytes:
    try:
        if isinstance(msg, Ingest):
            return bytes([INGEST]) + b"".join(_POINT.pack(int(t), float(v)) for t, v in msg.points)
        if isinstance(msg, Query):
            return bytes([QUERY]) + _QUERY.pack(msg.f, msg.t_a, msg.t_b)
        if isinstance(msg, Response):
            return bytes([RESPONSE]) + _RESPONSE.pack(msg.status, msg.value)
        if isinstance(msg, Error):
            text = msg.detail.encode("utf-8")[:0xFFFF]
            return bytes([ERROR]) + _ERROR_HEAD.pack(msg.code, len(text)) + text
    except struct.error as exc:
        raise BadMessage(f"cannot encode {msg!r}: {exc}") from None
    raise BadMessage(f"unknown message type {type(msg).__name__}")


def decode_message(data: bytes) -> Message:
    if not data:
        raise BadMessage("empty message")
    kind, body = data[0], data[1:]
    if kind == INGEST:
        if len(body) % _POINT.size:
            raise BadMessage(f"INGEST body of {len(body)} bytes")
        return Ingest(tuple(_POINT.iter_unpack(body)))
    if kind == QUERY:
        if len(body) != _QUERY.size:
            raise BadMessage(f"QUERY body of {len(body)} bytes")
        return Query(*_QUERY.unpack(body))
    if kind == RESPONSE:
        if len(body) != _RESPONSE.size:
            raise BadMessage(f"RESPONSE body of {len(body)} bytes")
        return Response(*_RESPONSE.unpack(body))
    if kind == ERROR:
        if len(body) < _ERROR_HEAD.size:
            raise BadMessage("short ERROR body")
        code, n = _ERROR_HEAD.unpack_from(body)
        text = body[_ERROR_HEAD.size:]
        if len(text) != n:
            raise BadMessage("ERROR detail length mismatch")
        return Error(code, text.decode("utf-8", errors="replace"))
    raise BadMessage(f"unknown message kind {kind}")


# -- keys and framing ------------------------------------------------------------

def load_key(path) -> bytearray:
    """32 raw bytes, or 64 hex digits (surrounding whitespace ignored)."""
    raw = Path(path).read_bytes()
    if len(raw) == KEY_BYTES:
        return bytearray(raw)
    text = raw.strip()
    if len(text) == 2 * KEY_BYTES:
        try:
            return bytearray(bytes.fromhex(text.decode("ascii")))
        except ValueError:
            pass
    raise InvalidParam(f"{path}: key must be {KEY_BYTES} raw bytes or {2 * KEY_BYTES} hex digits")


def write_key(path, key: Optional[bytes] = None) -> bytes:
    key = key if key is not None else secrets.token_bytes(KEY_BYTES)
    p = Path(path)
    p.write_text(key.hex() + "\n")
    os.chmod(p, 0o600)
    return key


class Channel:
    """One direction-aware AEAD session over a shared key."""

    def __init__(self, key: bytes, send_dir: int, session: Optional[bytes] = None):
        if len(key) != KEY_BYTES:
            raise InvalidParam(f"key must be {KEY_BYTES} bytes")
        self._aead = AESGCM(bytes(key))
        self.send_dir = send_dir
        self.session = session if session is not None else secrets.token_bytes(3)
        self._send_ctr = 0
        self._recv_ctr = -1
        self._peer_session: Optional[bytes] = None

    def seal(self, plaintext: bytes) -> bytes:
        self._send_ctr += 1
        nonce = self.session + bytes([self.send_dir]) + self._send_ctr.to_bytes(8, "little")
        length = NONCE_BYTES + len(plaintext) + TAG_BYTES
        head = LEN.pack(length)
        return head + nonce + self._aead.encrypt(nonce, plaintext, head)

    def open(self, frame: bytes) -> bytes:
        """Verify and decrypt a full frame (length prefix included)."""
        if len(frame) < LEN.size + NONCE_BYTES + TAG_BYTES:
            raise AuthFailure("short frame")
        head, nonce, ct = frame[:4], frame[4:4 + NONCE_BYTES], frame[4 + NONCE_BYTES:]
        if LEN.unpack(head)[0] != len(frame) - 4:
            raise AuthFailure("length prefix mismatch")
        try:
            plain = self._aead.decrypt(nonce, ct, head)
        except InvalidTag:
            raise AuthFailure("frame failed authentication") from None
        session, direction = nonce[:3], nonce[3]
        ctr = int.from_bytes(nonce[4:], "little")
        if direction == self.send_dir:
            raise AuthFailure("frame reflected back to its sender")
        if self._peer_session is None:
            self._peer_session = session
        elif session != self._peer_session:
            raise AuthFailure("frame from another session")
        if ctr <= self._recv_ctr:
            raise AuthFailure("replayed or reordered frame")
        self._recv_ctr = ctr
        return plain

    def encode(self, msg: Message) -> bytes:
        return self.seal(encode_message(msg))

    def decode(self, frame: bytes) -> Message:
        return decode_message(self.open(frame))


def client_encode(msg: Message, channel: Channel) -> bytes:
    return channel.encode(msg)


def client_decode(frame: bytes, channel: Channel) -> Message:
    return channel.decode(frame)


# -- configuration ---------------------------------------------------------------

@dataclass
class ServiceConfig:
    listen_addr: str = "127.0.0.1:7700"
    key_file: str = "timeclave.key"
    intervals: str = "10s"
    retention: str = "24h"
    Z: int = 4
    B: int = 64
    R: int = 32
    seed: Optional[int] = None
    variant: str = "roram"
    concurrent: bool = False

    @property
    def host_port(self) -> Tuple[str, int]:
        host, _, port = self.listen_addr.rpartition(":")
        if not host or not port.isdigit():
            raise InvalidParam(f"listen_addr {self.listen_addr!r} is not host:port")
        return host.strip("[]"), int(port)

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            intervals_ms=tuple(parse_duration_ms(x) for x in self.intervals.split(",") if x.strip()),
            retention_ms=parse_duration_ms(self.retention), z=self.Z, block_bytes=self.B,
            r=self.R, seed=self.seed, variant=self.variant, concurrent=self.concurrent)


_SECTION = "timeclave"


def _coerce(name: str, text: str):
    text = text.strip().strip('"').strip("'")
    if name in ("Z", "B", "R"):
        return int(text)
    if name == "seed":
        return None if text.lower() in ("", "none") else int(text)
    if name == "concurrent":
        return text.lower() in ("1", "true", "yes", "on")
    return text


def load_config(path=None, env: Optional[Mapping[str, str]] = None) -> ServiceConfig:
    """``key = value`` lines (``#`` comments), then ``TIMECLAVE_<KEY>`` env overrides."""
    env = os.environ if env is None else env
    values = {}
    names = {f.name.lower(): f.name for f in fields(ServiceConfig)}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        parser.read_string(f"[{_SECTION}]\n" + Path(path).read_text())
        for key, text in parser[_SECTION].items():
            name = names.get(key.lower())
            if name is None:
                raise InvalidParam(f"{path}: unknown setting {key!r}")
            values[name] = _coerce(name, text)
    for key, text in env.items():
        if key.upper().startswith("TIMECLAVE_"):
            name = names.get(key[len("TIMECLAVE_"):].lower())
            if name is not None:
                values[name] = _coerce(name, text)
    try:
        return ServiceConfig(**values)
    except ValueError as exc:
        raise InvalidParam(str(exc)) from None


# -- server ------------------------------------------------------------------------

def _error_for(exc: BaseException) -> Error:
    code = exc.code if isinstance(exc, TimeclaveError) else 255
    return Error(code, str(exc))


class Service:
    """Frame handler bound to one engine; one task per connection."""

    def __init__(self, engine: Engine, key: bytes):
        self.engine = engine
        self._key = bytearray(key)
        self._server: Optional[asyncio.base_events.Server] = None
        self._tasks: set = set()
        self.port: Optional[int] = None
        self._engine_lock = asyncio.Lock()

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        self._server = await asyncio.start_server(self._handle, host, port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    async def serve_forever(self) -> None:
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)
        await asyncio.to_thread(self.engine.flush)
        for i in range(len(self._key)):
            self._key[i] = 0

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        task = asyncio.current_task()
        self._tasks.add(task)
        chan = Channel(bytes(self._key), SERVER_TO_CLIENT)
        try:
            while True:
                try:
                    head = await reader.readexactly(LEN.size)
                except asyncio.IncompleteReadError:
                    break
                n = LEN.unpack(head)[0]
                if n > MAX_FRAME:
                    log.warning("dropping connection: oversized frame")
                    break
                try:
                    body = await reader.readexactly(n)
                    plain = chan.open(head + body)
                except (asyncio.IncompleteReadError, AuthFailure) as exc:
                    log.warning("dropping connection: %s", exc)
                    break
                reply = await self._dispatch(plain)
                writer.write(chan.encode(reply))
                await writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            self._tasks.discard(task)
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, asyncio.CancelledError):
                pass

    async def _dispatch(self, plain: bytes) -> Message:
        try:
            msg = decode_message(plain)
        except BadMessage as exc:
            return _error_for(exc)
        async with self._engine_lock:
            try:
                if isinstance(msg, Ingest):
                    return Response(0, float(await asyncio.to_thread(self._ingest, msg.points)))
                if isinstance(msg, Query):
                    value = await asyncio.to_thread(self.engine.execute, msg.f, msg.t_a, msg.t_b)
                    return Response(0, value)
                return Error(BadMessage.code, f"unexpected {type(msg).__name__} from client")
            except TimeclaveError as exc:
                return _error_for(exc)
            except Exception as exc:  # keep the connection alive on engine bugs
                log.exception("request failed")
                return _error_for(exc)

    def _ingest(self, points) -> int:
        for ts, value in points:
            self.engine.ingest(ts, value)
        return len(points)


class BackgroundServer:
    """Run a :class:`Service` on its own event loop thread (tests, embedding)."""

    def __init__(self, engine: Engine, key: bytes, host: str = "127.0.0.1", port: int = 0):
        self.service = Service(engine, key)
        self.host = host
        self._port = port
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True)

    def __enter__(self) -> "BackgroundServer":
        self._thread.start()
        fut = asyncio.run_coroutine_threadsafe(self.service.start(self.host, self._port), self._loop)
        self.port = fut.result(timeout=10)
        return self

    def __exit__(self, *exc) -> None:
        asyncio.run_coroutine_threadsafe(self.service.close(), self._loop).result(timeout=30)
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(timeout=10)
        self._loop.close()


def build_engine(cfg: ServiceConfig) -> Engine:
    return Engine(cfg.engine_config())


def serve(cfg: ServiceConfig) -> None:
    """Blocking server entry point."""
    key = load_key(cfg.key_file)
    engine = build_engine(cfg)
    host, port = cfg.host_port

    async def main():
        svc = Service(engine, key)
        await svc.start(host, port)
        log.info("listening on %s:%d", host, svc.port)
        try:
            await svc.serve_forever()
        finally:
            await svc.close()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass


# -- client ------------------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed by server")
        buf += chunk
    return bytes(buf)


class Client:
    """Blocking client; raises the matching domain error for ERROR replies."""

    def __init__(self, host: str, port: int, key: bytes, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.chan = Channel(bytes(key), CLIENT_TO_SERVER)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def send_frame(self, frame: bytes) -> None:
        self.sock.sendall(frame)

    def recv_frame(self) -> bytes:
        head = _recv_exact(self.sock, LEN.size)
        n = LEN.unpack(head)[0]
        if n > MAX_FRAME:
            raise BadMessage("oversized frame from server")
        return head + _recv_exact(self.sock, n)

    def request(self, msg: Message) -> Message:
        self.send_frame(self.chan.encode(msg))
        return self.chan.decode(self.recv_frame())

    def _value(self, reply: Message) -> float:
        if isinstance(reply, Error):
            cls = ERRORS_BY_CODE.get(reply.code, TimeclaveError)
            raise cls(reply.detail)
        if not isinstance(reply, Response):
            raise BadMessage(f"unexpected reply {reply!r}")
        return reply.value

    def ingest(self, points, batch: int = 4096) -> int:
        pts: List[Tuple[int, float]] = list(points)
        total = 0
        for i in range(0, max(len(pts), 1), batch):
            total += int(self._value(self.request(Ingest(tuple(pts[i:i + batch])))))
        return total

    def query(self, f, t_a: int, t_b: int) -> float:
        return self._value(self.request(Query(int(parse_agg(f)), int(t_a), int(t_b))))
