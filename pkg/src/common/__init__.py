from .errors import (
    MigrsimError,
    ArgumentError,
    ResourceError,
    StateError,
    CollisionError,
    PacketError,
    ImageError,
    ScenarioError,
)
from .utils import strip_empty_values, gid_hex, parse_bool
from .filtering import matches_filter
from .prng import XorShift64Star

__all__ = [
    "MigrsimError",
    "ArgumentError",
    "ResourceError",
    "StateError",
    "CollisionError",
    "PacketError",
    "ImageError",
    "ScenarioError",
    "strip_empty_values",
    "gid_hex",
    "parse_bool",
    "matches_filter",
    "XorShift64Star",
]
