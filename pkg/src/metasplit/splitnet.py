"""Cutting a model into device and aggregator halves, plus the split exchange.

The device half ends right after a conv block's pooling layer; everything
after (remaining blocks, flatten, fully connected head) lives on the
aggregator. Only the smashed activation and its gradient cross the cut.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import nncore
from .nncore import ActivationTrace, ConfigError, Grads, ModelConfig, Params


class ProtocolError(RuntimeError):
    """A payload arrived with the wrong shape or out of order."""

    def __init__(self, msg: str, offset: Optional[int] = None):
        super().__init__(msg if offset is None else f"{msg} (at byte {offset})")
        self.offset = offset


def block_ends(cfg: ModelConfig) -> list:
    """Layer count through the end of each conv block (its pooling layer)."""
    ends = []
    for j, spec in enumerate(cfg.layers):
        if spec.kind == "MaxPool":
            ends.append(j + 1)
    return ends


@dataclass(frozen=True)
class CutPoint:
    block_index: int

    def layer_count(self, cfg: ModelConfig) -> int:
        ends = block_ends(cfg)
        if not 1 <= self.block_index <= len(ends):
            raise ConfigError(f"cut {self.block_index} invalid; model has {len(ends)} conv blocks")
        return ends[self.block_index - 1]


@dataclass
class SplitPair:
    device_params: Params
    device_cfg: ModelConfig
    agg_params: Params
    agg_cfg: ModelConfig
    cut: CutPoint

    def copy(self) -> "SplitPair":
        return SplitPair(nncore.copy_params(self.device_params), self.device_cfg,
                         nncore.copy_params(self.agg_params), self.agg_cfg, self.cut)

    def joined(self) -> Tuple[ModelConfig, Params]:
        return join(self)

    def checksums(self) -> Tuple[str, str]:
        return nncore.params_checksum(self.device_params), nncore.params_checksum(self.agg_params)


@dataclass
class SmashedData:
    tensor: np.ndarray
    provenance: str = "pre-channel"

    @property
    def byte_size(self) -> int:
        return int(self.tensor.nbytes)


@dataclass
class SmashedGrad:
    tensor: np.ndarray
    provenance: str = "pre-channel"

    @property
    def byte_size(self) -> int:
        return int(self.tensor.nbytes)


def split_config(cfg: ModelConfig, cut: CutPoint) -> Tuple[ModelConfig, ModelConfig]:
    n = cut.layer_count(cfg)
    shapes = nncore.layer_shapes(cfg)
    dev = ModelConfig(cfg.layers[:n], cfg.input_shape, cfg.num_classes, cfg.first_index)
    agg = ModelConfig(cfg.layers[n:], shapes[n], cfg.num_classes, cfg.first_index + n)
    return dev, agg


def split_at(cfg: ModelConfig, params: Params, cut: CutPoint) -> SplitPair:
    dev_cfg, agg_cfg = split_config(cfg, cut)
    dev_names, agg_names = set(dev_cfg.param_names()), set(agg_cfg.param_names())
    missing = (dev_names | agg_names) - set(params)
    if missing:
        raise ConfigError(f"parameters missing for {sorted(missing)}")
    dev = {k: v.copy() for k, v in params.items() if k in dev_names}
    agg = {k: v.copy() for k, v in params.items() if k in agg_names}
    return SplitPair(dev, dev_cfg, agg, agg_cfg, cut)


def join(pair: SplitPair) -> Tuple[ModelConfig, Params]:
    d, a = pair.device_cfg, pair.agg_cfg
    cfg = ModelConfig(d.layers + a.layers, d.input_shape, a.num_classes, d.first_index)
    params = nncore.concat_params([pair.device_params, pair.agg_params])
    return cfg, {k: params[k] for k in cfg.param_names()}


def init_pair(cfg: ModelConfig, cut: int, seed: int, dtype=np.float32) -> SplitPair:
    return split_at(cfg, nncore.init_params(cfg, seed, dtype), CutPoint(cut))


# ---------------------------------------------------------------- exchange

def device_forward(pair: SplitPair, batch: np.ndarray) -> Tuple[SmashedData, ActivationTrace]:
    trace = nncore.forward(pair.device_params, pair.device_cfg, batch)
    return SmashedData(trace.outputs[-1]), trace


def _check_cut_shape(pair: SplitPair, tensor: np.ndarray, what: str):
    want = pair.agg_cfg.input_shape
    if tensor.ndim != len(want) + 1 or tensor.shape[1:] != want:
        raise ProtocolError(f"{what} shape {tensor.shape} does not match cut shape (B, {want})")


def aggregator_forward(pair: SplitPair, s_received: SmashedData) -> Tuple[np.ndarray, ActivationTrace]:
    _check_cut_shape(pair, s_received.tensor, "smashed data")
    trace = nncore.forward(pair.agg_params, pair.agg_cfg, s_received.tensor)
    return trace.logits, trace


def aggregator_backward(pair: SplitPair, trace: ActivationTrace,
                        grad_logits: np.ndarray) -> Tuple[Grads, SmashedGrad]:
    grads, g_cut = nncore.backward(pair.agg_params, pair.agg_cfg, trace, grad_logits)
    return grads, SmashedGrad(g_cut)


def device_backward(pair: SplitPair, trace: ActivationTrace, g_received: SmashedGrad) -> Grads:
    if g_received.tensor.shape != trace.outputs[-1].shape:
        raise ProtocolError(
            f"smashed gradient shape {g_received.tensor.shape} != smashed data {trace.outputs[-1].shape}"
        )
    grads, _ = nncore.backward(pair.device_params, pair.device_cfg, trace, g_received.tensor)
    return grads


def smashed_shape(cut: CutPoint, cfg: Optional[ModelConfig] = None) -> Tuple[int, ...]:
    cfg = cfg or nncore.default_config()
    return nncore.layer_shapes(cfg)[cut.layer_count(cfg)]


def smashed_payload_bytes(cut: CutPoint, batch: int, dtype=np.float32,
                          cfg: Optional[ModelConfig] = None) -> int:
    return int(batch * np.prod(smashed_shape(cut, cfg)) * np.dtype(dtype).itemsize)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MSLW"
CKPT_VERSION = 1


def save_checkpoint(path, params: Params) -> None:
    """Little-endian flat file: header, then name/shape/payload per tensor."""
    out = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(params))]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr)
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<H", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        out.append(struct.pack("<Q", len(payload)) + payload)
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ProtocolError("bad checkpoint magic", 0)
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise ProtocolError(f"unsupported checkpoint version {version}", 4)
    off = 10
    params: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2 : off + 2 + nlen].decode("utf-8")
            off += 2 + nlen
            (ndim,) = struct.unpack_from("<H", buf, off)
            dims = struct.unpack_from(f"<{ndim}I", buf, off + 2)
            off += 2 + 4 * ndim
            (plen,) = struct.unpack_from("<Q", buf, off)
            off += 8
            n = int(np.prod(dims))
            # element width is implied by the payload length
            width = plen // n if n else 4
            if width not in (4, 8) or (n and width * n != plen) or off + plen > len(buf):
                raise ProtocolError(f"bad payload length {plen} for tensor {name}", off - 8)
            dtype = "<f4" if width == 4 else "<f8"
            params[name] = np.frombuffer(buf, dtype, n, off).reshape(dims).astype(dtype[1:])
            off += plen
    except struct.error as exc:
        raise ProtocolError(f"truncated checkpoint: {exc}", off) from exc
    return params
