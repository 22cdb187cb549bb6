"""24-bit PSN arithmetic over a 2**23 half window."""

PSN_BITS = 24
PSN_MOD = 1 << PSN_BITS
HALF_WINDOW = 1 << (PSN_BITS - 1)


def psn_add(psn: int, delta: int) -> int:
    return (psn + delta) % PSN_MOD


def psn_diff(a: int, b: int) -> int:
    """Signed distance a - b, in [-2**23, 2**23)."""
    d = (a - b) % PSN_MOD
    return d - PSN_MOD if d >= HALF_WINDOW else d


def psn_lt(a: int, b: int) -> bool:
    return psn_diff(a, b) < 0


def psn_le(a: int, b: int) -> bool:
    return psn_diff(a, b) <= 0
