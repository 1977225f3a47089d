"""Platform-stable random streams.

Everything random in the pipeline draws from Philox, a counter-based
generator, and only through its raw 64-bit output so results do not depend on
numpy's distribution-sampling code paths.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*parts: object) -> int:
    """Stable 64-bit key from an arbitrary tuple of str/int parts."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class CounterRng:
    def __init__(self, *key_parts: object):
        self._bitgen = np.random.Philox(key=derive_key(*key_parts))

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the top 53 bits of each raw draw."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers in [0, high) by multiply-shift on 32-bit draws."""
        top = self.raw(n) >> np.uint64(32)
        return ((top * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def bits(self, shape: tuple[int, ...]) -> np.ndarray:
        """Independent fair coin flips, packed 64 per raw draw."""
        total = int(np.prod(shape))
        raw = self.raw((total + 63) // 64)
        flat = np.unpackbits(raw.astype("<u8").view(np.uint8), bitorder="little")[:total]
        return flat.reshape(shape).astype(bool)
