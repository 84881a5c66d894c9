"""Network and host layer: wire protocol, mover, emulation and tuning.

Modules that need the application configuration (storage, emulation,
staging) are imported by their users rather than re-exported here.
"""

from .models import Mode, TransferResult, TransferSpec
from .shell import Shell

__all__ = ['Mode', 'TransferResult', 'TransferSpec', 'Shell']
