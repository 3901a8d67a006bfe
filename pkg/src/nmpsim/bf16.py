"""BF16 helpers: round-to-nearest-even conversion and raw bit patterns."""

import numpy as np


def to_bits(x):
    """Round float32 values to BF16 and return the 16-bit patterns (uint16)."""
    f = np.asarray(x, dtype=np.float32)
    u = f.view(np.uint32).astype(np.uint64)
    rounded = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
    nan = np.isnan(f)
    if np.any(nan):
        # keep NaN payload high bits, force quiet bit so it stays NaN after truncation
        rounded = np.where(nan, (u >> 16) | 0x0040, rounded)
    return (rounded & 0xFFFF).astype(np.uint16)


def from_bits(bits):
    """Expand 16-bit BF16 patterns to float32."""
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    return b.view(np.float32)


def round_bf16(x):
    """Round to the nearest BF16 value, returned as float32."""
    return from_bits(to_bits(x))


def scalar_bits(x: float) -> int:
    return int(to_bits(np.float32(x)))


def scalar_value(bits: int) -> float:
    return float(from_bits(np.uint16(bits)))
