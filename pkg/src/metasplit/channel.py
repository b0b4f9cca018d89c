"""Wireless hop for smashed data and smashed gradients.

Received tensor: ``s' = h * s + n`` on the power-normalized payload, with
``h`` a real Rayleigh fading magnitude (unit mean square, one draw per
transmission) and ``n`` i.i.d. Gaussian of variance ``p / 10**(snr_db/10)``.
The receiver equalizes with perfect channel knowledge and undoes the power
scaling.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

DEEP_FADE = 1e-6
MAX_RETRIES = 5


class DeepFadeError(RuntimeError):
    """Every retry landed in a deep fade; the step should be skipped."""


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = math.inf
    fading: bool = False
    power: float = 1.0
    apply_to_backward: bool = True
    quant_levels: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if not self.power > 0:
            raise ValueError("power must be positive")
        if self.quant_levels is not None and self.quant_levels < 2:
            raise ValueError("quant_levels must be >= 2")

    @property
    def sigma(self) -> float:
        return noise_sigma(self.snr_db, self.power)

    @property
    def is_identity(self) -> bool:
        return self.sigma == 0 and not self.fading and self.quant_levels is None


@dataclass(frozen=True)
class ChannelRealization:
    h: float
    sigma: float


def noise_sigma(snr_db: float, power: float = 1.0) -> float:
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return math.sqrt(power / 10 ** (snr_db / 10))


def power_normalize(s: np.ndarray, p: float = 1.0) -> Tuple[np.ndarray, float]:
    """Scale ``s`` to mean square ``p``; an all-zero tensor passes unchanged."""
    if s.size == 0:
        raise ValueError("cannot normalize an empty tensor")
    ms = float(np.mean(np.square(s, dtype=np.float64)))
    if ms == 0.0:
        return s.copy(), 1.0
    scale = math.sqrt(p / ms)
    return (s * scale).astype(s.dtype, copy=False), scale


def transmit(s_norm: np.ndarray, cfg: ChannelConfig,
             rng: np.random.Generator) -> Tuple[np.ndarray, ChannelRealization]:
    # Rayleigh magnitude with E|h|^2 = 1, i.e. scale 1/sqrt(2)
    h = float(rng.rayleigh(math.sqrt(0.5))) if cfg.fading else 1.0
    sigma = cfg.sigma
    out = h * s_norm.astype(np.float64)
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, s_norm.shape)
    return out.astype(s_norm.dtype, copy=False), ChannelRealization(h, sigma)


def equalize(s_prime: np.ndarray, realization: ChannelRealization, scale: float) -> np.ndarray:
    if abs(realization.h) < DEEP_FADE:
        raise DeepFadeError(f"|h| = {abs(realization.h):.3g} below {DEEP_FADE}")
    out = (s_prime.astype(np.float64) / realization.h) / scale
    return out.astype(s_prime.dtype, copy=False)


def quantize(s: np.ndarray, levels: int, lo: Optional[float] = None,
             hi: Optional[float] = None) -> np.ndarray:
    """Uniform mid-rise quantizer over ``[lo, hi]`` (the tensor range by default).

    Values map to the center of one of ``levels`` equal cells.
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    lo = float(s.min()) if lo is None else lo
    hi = float(s.max()) if hi is None else hi
    if hi <= lo:
        return s.copy()
    step = (hi - lo) / levels
    idx = np.clip(np.floor((s.astype(np.float64) - lo) / step), 0, levels - 1)
    return (lo + (idx + 0.5) * step).astype(s.dtype, copy=False)


class Channel:
    """One direction of the link. Owns its RNG; not shared across threads."""

    def __init__(self, cfg: ChannelConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.transmissions = 0
        self.retries = 0
        self.skipped = 0

    @property
    def is_identity(self) -> bool:
        return self.cfg.is_identity

    def send(self, s: np.ndarray) -> np.ndarray:
        """Pass a tensor across the hop and return the receiver's estimate.

        Raises DeepFadeError after MAX_RETRIES consecutive deep fades.
        """
        self.transmissions += 1
        if self.cfg.is_identity:
            return s
        s_norm, scale = power_normalize(s, self.cfg.power)
        lo = hi = None
        if self.cfg.quant_levels is not None:
            lo, hi = float(s_norm.min()), float(s_norm.max())
            s_norm = quantize(s_norm, self.cfg.quant_levels, lo, hi)
        for attempt in range(MAX_RETRIES + 1):
            s_prime, real = transmit(s_norm, self.cfg, self.rng)
            if abs(real.h) >= DEEP_FADE:
                return equalize(s_prime, real, scale)
            if attempt < MAX_RETRIES:
                self.retries += 1
                log.debug("deep fade |h|=%.3g, retrying", real.h)
        self.skipped += 1
        raise DeepFadeError(f"deep fade persisted over {MAX_RETRIES} retries")


class ChannelPair:
    """Independent forward (smashed data) and backward (gradient) hops."""

    def __init__(self, cfg: ChannelConfig, seed: Optional[int] = None):
        base = cfg.seed if seed is None else seed
        fwd_seed, bwd_seed = np.random.SeedSequence(base).generate_state(2)
        self.cfg = cfg
        self.forward = Channel(cfg, int(fwd_seed))
        self.backward = Channel(cfg, int(bwd_seed))

    @property
    def is_identity(self) -> bool:
        return self.cfg.is_identity

    def send_forward(self, s: np.ndarray) -> np.ndarray:
        return self.forward.send(s)

    def send_backward(self, g: np.ndarray) -> np.ndarray:
        if not self.cfg.apply_to_backward:
            return g
        return self.backward.send(g)


def identity_channel() -> ChannelPair:
    return ChannelPair(ChannelConfig())
