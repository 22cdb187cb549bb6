from .migration import MigrationReport, MigrationSpec, MigrationStatus, Transfer
from .migrator import Migrator

__all__ = [
    "MigrationReport",
    "MigrationSpec",
    "MigrationStatus",
    "Transfer",
    "Migrator",
]
