"""Seeded FNV-1a, used wherever a stable cross-platform hash is needed."""

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes, seed: int = 0) -> int:
    h = (_FNV_OFFSET ^ (seed * 0x9E3779B97F4A7C15)) & _MASK
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK
    return h
