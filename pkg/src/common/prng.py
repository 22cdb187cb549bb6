"""xorshift64* pseudo-random generator.

Every random decision in the simulator (packet loss, duplication, protection
keys, node GUIDs) draws from one of these, so a run is a pure function of its
seeds. The algorithm is fixed so traces can be reproduced by any
implementation:

    x ^= x >> 12
    x ^= x << 25   (mod 2**64)
    x ^= x >> 27
    out = (x * 0x2545F4914F6CDD1D) mod 2**64

Seeds are first passed through one splitmix64 round so that small or zero
seeds still give a non-zero, well-mixed state.
"""

MASK64 = (1 << 64) - 1
MULTIPLIER = 0x2545F4914F6CDD1D

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_SPLITMIX_M1 = 0xBF58476D1CE4E5B9
_SPLITMIX_M2 = 0x94D049BB133111EB


def splitmix64(value: int) -> int:
    z = (value + _SPLITMIX_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * _SPLITMIX_M1) & MASK64
    z = ((z ^ (z >> 27)) * _SPLITMIX_M2) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    __slots__ = ("_state",)

    def __init__(self, seed: int):
        state = splitmix64(seed & MASK64)
        self._state = state or _SPLITMIX_GAMMA

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x = (x ^ (x << 25)) & MASK64
        x ^= x >> 27
        self._state = x
        return (x * MULTIPLIER) & MASK64

    def next_u32(self) -> int:
        return self.next_u64() >> 32

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) / float(1 << 53)

    def chance(self, probability: float) -> bool:
        if probability <= 0.0:
            return False
        return self.random() < probability

    def nonzero_u32(self) -> int:
        while True:
            value = self.next_u32()
            if value:
                return value

    @property
    def state(self) -> int:
        return self._state
