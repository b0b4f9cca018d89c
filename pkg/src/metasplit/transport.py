"""Framed wire protocol between the device and the aggregator.

Frame layout (little-endian)::

    magic "MSL1" | msg_type u8 | dtype u8 | ndim u16 | dims u32 * ndim
    | payload_len u64 | payload | crc32 u32 (over everything before it)

The same codec runs over an in-process loopback or a TCP stream. Each
training step is a strict exchange: the device sends SMASHED then LABELS,
the aggregator answers SMASHED_GRAD then LOSS_REPORT.
"""
from __future__ import annotations

import enum
import logging
import queue
import socket
import struct
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import nncore, splitnet
from .channel import ChannelPair, DeepFadeError
from .splitnet import ProtocolError, SplitPair

log = logging.getLogger(__name__)

MAGIC = b"MSL1"
PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 30.0

_FIXED = struct.Struct("<4sBBH")
_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")


class MsgType(enum.IntEnum):
    HELLO = 0
    SMASHED = 1
    SMASHED_GRAD = 2
    LABELS = 3
    LOSS_REPORT = 4
    PARAM_SYNC = 5
    BYE = 6


DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Frame:
    msg_type: MsgType
    tensor: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, Frame)
            and self.msg_type == other.msg_type
            and self.tensor.dtype == other.tensor.dtype
            and self.tensor.shape == other.tensor.shape
            and np.array_equal(self.tensor, other.tensor)
        )


def empty(dtype=np.float32) -> np.ndarray:
    return np.zeros((0,), dtype)


def header_size(ndim: int) -> int:
    return _FIXED.size + 4 * ndim + _LEN.size


def frame_size(shape, dtype=np.float32) -> int:
    return header_size(len(shape)) + int(np.prod(shape)) * np.dtype(dtype).itemsize + _CRC.size


def encode_frame(msg: Frame) -> bytes:
    arr = np.asarray(msg.tensor)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ProtocolError(f"unsupported dtype {arr.dtype}")
    payload = np.ascontiguousarray(arr, DTYPES[code]).tobytes()
    head = (_FIXED.pack(MAGIC, int(MsgType(msg.msg_type)), code, arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + _LEN.pack(len(payload)))
    body = head + payload
    return body + _CRC.pack(zlib.crc32(body))


def _parse_header(buf: bytes, off: int = 0) -> Tuple[MsgType, np.dtype, Tuple[int, ...], int, int]:
    """Returns (type, dtype, dims, payload_len, payload offset)."""
    if len(buf) < off + _FIXED.size:
        raise ProtocolError("truncated frame header", len(buf))
    magic, mtype, code, ndim = _FIXED.unpack_from(buf, off)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", off)
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {mtype}", off + 4) from None
    if code not in DTYPES:
        raise ProtocolError(f"unknown dtype code {code}", off + 5)
    need = off + header_size(ndim)
    if len(buf) < need:
        raise ProtocolError("truncated frame dims", len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, off + _FIXED.size)
    (plen,) = _LEN.unpack_from(buf, need - _LEN.size)
    if plen != int(np.prod(dims)) * DTYPES[code].itemsize:
        raise ProtocolError(f"payload_len {plen} inconsistent with dims {dims}", need - _LEN.size)
    return mtype, DTYPES[code], dims, plen, need


def decode_frame(buf: bytes) -> Frame:
    mtype, dtype, dims, plen, start = _parse_header(buf)
    end = start + plen
    if len(buf) < end + _CRC.size:
        raise ProtocolError("truncated frame payload", len(buf))
    (crc,) = _CRC.unpack_from(buf, end)
    if crc != zlib.crc32(buf[:end]):
        raise ProtocolError("CRC mismatch", end)
    if len(buf) != end + _CRC.size:
        raise ProtocolError("trailing bytes after frame", end + _CRC.size)
    arr = np.frombuffer(buf, dtype, int(np.prod(dims)), start).reshape(dims)
    return Frame(mtype, arr.astype(dtype.newbyteorder("="), copy=True))


# ---------------------------------------------------------------- endpoints

@dataclass
class Endpoint:
    """One side of a session; counts every encoded byte in each direction."""

    role: str
    address: str = "loopback"
    sent: int = 0
    received: int = 0

    def send(self, msg_type: MsgType, tensor: Optional[np.ndarray] = None) -> int:
        data = encode_frame(Frame(MsgType(msg_type), empty() if tensor is None else tensor))
        self._write(data)
        self.sent += len(data)
        return len(data)

    def recv(self, timeout: Optional[float] = DEFAULT_TIMEOUT) -> Frame:
        data = self._read(timeout)
        self.received += len(data)
        return decode_frame(data)

    def expect(self, *types: MsgType, timeout: Optional[float] = DEFAULT_TIMEOUT) -> Frame:
        frame = self.recv(timeout)
        if frame.msg_type not in types:
            raise ProtocolError(
                f"{self.role}: expected {'/'.join(t.name for t in types)}, got {frame.msg_type.name}"
            )
        return frame

    def close(self):
        pass

    def _write(self, data: bytes):
        raise NotImplementedError

    def _read(self, timeout) -> bytes:
        raise NotImplementedError


class LoopbackEndpoint(Endpoint):
    def __init__(self, role: str, inbox: "queue.Queue[bytes]", outbox: "queue.Queue[bytes]"):
        super().__init__(role)
        self._inbox, self._outbox = inbox, outbox

    def _write(self, data: bytes):
        self._outbox.put(data)

    def _read(self, timeout) -> bytes:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"{self.role}: no frame within {timeout} s") from None


def loopback_pair() -> Tuple[LoopbackEndpoint, LoopbackEndpoint]:
    """(device, aggregator) endpoints joined by two in-process queues."""
    a_to_b: "queue.Queue[bytes]" = queue.Queue()
    b_to_a: "queue.Queue[bytes]" = queue.Queue()
    return LoopbackEndpoint("device", b_to_a, a_to_b), LoopbackEndpoint("aggregator", a_to_b, b_to_a)


class SocketEndpoint(Endpoint):
    def __init__(self, role: str, sock: socket.socket, address: str = ""):
        super().__init__(role, address)
        self.sock = sock

    def _write(self, data: bytes):
        self.sock.sendall(data)

    def _read_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(n - got)
            if not chunk:
                raise ProtocolError("connection closed mid-frame", got)
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _read(self, timeout) -> bytes:
        self.sock.settimeout(timeout)
        try:
            head = self._read_exact(_FIXED.size)
            ndim = _FIXED.unpack(head)[3]
            head += self._read_exact(4 * ndim + _LEN.size)
            _, _, _, plen, _ = _parse_header(head)
            return head + self._read_exact(plen + _CRC.size)
        except socket.timeout:
            raise TimeoutError(f"{self.role}: no frame within {timeout} s") from None

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def connect(host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> SocketEndpoint:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketEndpoint("device", sock, f"{host}:{port}")


def listen(port: int, host: str = "127.0.0.1") -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def accept(srv: socket.socket, timeout: Optional[float] = None) -> SocketEndpoint:
    srv.settimeout(timeout)
    sock, addr = srv.accept()
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketEndpoint("aggregator", sock, f"{addr[0]}:{addr[1]}")


# ---------------------------------------------------------------- sessions

@dataclass(frozen=True)
class SessionConfig:
    """Carried in the HELLO payload so the aggregator needs no local config."""

    cut: int = 3
    num_classes: int = 5
    seed: int = 0
    lr: float = 0.001
    steps: int = 20
    wire_dtype: str = "f32"

    def to_tensor(self) -> np.ndarray:
        return np.array([PROTOCOL_VERSION, self.cut, self.num_classes, self.seed, self.lr,
                         self.steps, 0 if self.wire_dtype == "f32" else 1], np.float64)

    @classmethod
    def from_tensor(cls, t: np.ndarray) -> "SessionConfig":
        if t.shape != (7,) or int(t[0]) != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported HELLO payload {t}")
        return cls(int(t[1]), int(t[2]), int(t[3]), float(t[4]), int(t[5]),
                   "f32" if int(t[6]) == 0 else "f64")


@dataclass
class StepRecord:
    step: int
    loss: float
    checksum: str
    bytes_sent: int
    bytes_received: int


@dataclass
class SessionLog:
    role: str
    steps: List[StepRecord] = field(default_factory=list)
    initial_checksum: str = ""

    def checksums(self) -> List[str]:
        return [s.checksum for s in self.steps]


SESSION_COLUMNS = ("step", "loss", "checksum", "bytes_sent", "bytes_received")


def write_session_csv(path, slog: SessionLog):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SESSION_COLUMNS)
        w.writerow([0, "", slog.initial_checksum, 0, 0])
        for s in slog.steps:
            w.writerow([s.step, repr(s.loss), s.checksum, s.bytes_sent, s.bytes_received])


def _wire(arr: np.ndarray, dtype: str) -> np.ndarray:
    return arr.astype(np.float32 if dtype == "f32" else np.float64, copy=False)


def run_aggregator(ep: Endpoint, pair: Optional[SplitPair] = None,
                   model_cfg: Optional[nncore.ModelConfig] = None,
                   timeout: Optional[float] = DEFAULT_TIMEOUT) -> SessionLog:
    """Serve one session until BYE.

    Without a ``pair`` the aggregator half is built from the HELLO config
    (default architecture, seeded init), mirroring what the device does.
    Any out-of-order message aborts with ProtocolError.
    """
    slog = SessionLog("aggregator")
    hello = ep.expect(MsgType.HELLO, timeout=timeout)
    scfg = SessionConfig.from_tensor(hello.tensor)
    if pair is None:
        cfg = model_cfg or nncore.default_config(scfg.num_classes)
        pair = splitnet.init_pair(cfg, scfg.cut, scfg.seed)
    elif pair.cut.block_index != scfg.cut:
        raise ProtocolError(f"device cut {scfg.cut} != aggregator cut {pair.cut.block_index}")
    slog.initial_checksum = nncore.params_checksum(pair.agg_params)
    ep.send(MsgType.HELLO, hello.tensor)
    step = 0
    while True:
        sent0, recv0 = ep.sent, ep.received
        frame = ep.expect(MsgType.SMASHED, MsgType.PARAM_SYNC, MsgType.BYE, timeout=timeout)
        if frame.msg_type == MsgType.BYE:
            ep.send(MsgType.BYE)
            break
        if frame.msg_type == MsgType.PARAM_SYNC:
            ep.send(MsgType.PARAM_SYNC, flatten_params(pair.agg_params))
            continue
        labels = ep.expect(MsgType.LABELS, timeout=timeout).tensor
        smashed = frame.tensor.astype(next(iter(pair.agg_params.values())).dtype, copy=False)
        logits, trace = splitnet.aggregator_forward(pair, splitnet.SmashedData(smashed, "received"))
        loss, g_logits = nncore.loss_softmax_ce(logits, labels.astype(np.int64))
        grads, g_cut = splitnet.aggregator_backward(pair, trace, g_logits)
        pair.agg_params = nncore.sgd_step(pair.agg_params, grads, scfg.lr)
        ep.send(MsgType.SMASHED_GRAD, _wire(g_cut.tensor, scfg.wire_dtype))
        ep.send(MsgType.LOSS_REPORT, np.array([loss], np.float64))
        step += 1
        slog.steps.append(StepRecord(step, loss, nncore.params_checksum(pair.agg_params),
                                     ep.sent - sent0, ep.received - recv0))
    return slog


def run_device(ep: Endpoint, pair: SplitPair, x: np.ndarray, y: np.ndarray,
               scfg: SessionConfig, channels: Optional[ChannelPair] = None,
               timeout: Optional[float] = DEFAULT_TIMEOUT) -> SessionLog:
    """Drive ``scfg.steps`` full-batch split SGD steps, then say BYE.

    Channel corruption happens here, before sending smashed data and after
    receiving its gradient, so bytes on the wire are exactly what was sent.
    """
    slog = SessionLog("device", initial_checksum=nncore.params_checksum(pair.device_params))
    ep.send(MsgType.HELLO, scfg.to_tensor())
    ep.expect(MsgType.HELLO, timeout=timeout)
    for step in range(1, scfg.steps + 1):
        sent0, recv0 = ep.sent, ep.received
        smashed, trace = splitnet.device_forward(pair, x)
        s = smashed.tensor
        if channels is not None:
            try:
                s = channels.send_forward(s)
            except DeepFadeError as exc:
                log.warning("step %d skipped: %s", step, exc)
                continue
        ep.send(MsgType.SMASHED, _wire(s, scfg.wire_dtype))
        ep.send(MsgType.LABELS, np.asarray(y, np.float32))
        g = ep.expect(MsgType.SMASHED_GRAD, timeout=timeout).tensor
        loss = float(ep.expect(MsgType.LOSS_REPORT, timeout=timeout).tensor[0])
        g = g.astype(s.dtype, copy=False)
        if channels is not None:
            try:
                g = channels.send_backward(g)
            except DeepFadeError as exc:
                log.warning("gradient for step %d lost: %s", step, exc)
                slog.steps.append(StepRecord(step, loss, nncore.params_checksum(pair.device_params),
                                             ep.sent - sent0, ep.received - recv0))
                continue
        grads = splitnet.device_backward(pair, trace, splitnet.SmashedGrad(g, "received"))
        pair.device_params = nncore.sgd_step(pair.device_params, grads, scfg.lr)
        slog.steps.append(StepRecord(step, loss, nncore.params_checksum(pair.device_params),
                                     ep.sent - sent0, ep.received - recv0))
    ep.send(MsgType.BYE)
    ep.expect(MsgType.BYE, timeout=timeout)
    return slog


def request_param_sync(ep: Endpoint, device_params: nncore.Params,
                       timeout: Optional[float] = DEFAULT_TIMEOUT) -> np.ndarray:
    """Send the flattened device half; the aggregator answers with its own."""
    ep.send(MsgType.PARAM_SYNC, flatten_params(device_params))
    return ep.expect(MsgType.PARAM_SYNC, timeout=timeout).tensor


def flatten_params(params: nncore.Params) -> np.ndarray:
    if not params:
        return empty()
    return np.concatenate([params[k].ravel() for k in params])


def unflatten_params(flat: np.ndarray, like: nncore.Params) -> nncore.Params:
    want = nncore.total_params(like)
    if flat.size != want:
        raise ProtocolError(f"PARAM_SYNC carries {flat.size} values, expected {want}")
    out, off = {}, 0
    for k, v in like.items():
        out[k] = flat[off : off + v.size].reshape(v.shape).astype(v.dtype)
        off += v.size
    return out
