"""Bulk-synchronous distributed list over a rank communicator."""

from .comm import Communicator, SelfComm, SocketComm, ThreadComm, run_processes, run_ranks
from .core import (
    DFM,
    Context,
    DestinationOutOfRange,
    DfmError,
    ElementError,
    InconsistentLength,
    concat_lists,
    split_list,
)
from .partition import Partition

__all__ = [
    "Communicator", "SelfComm", "SocketComm", "ThreadComm", "run_processes", "run_ranks",
    "DFM", "Context", "DestinationOutOfRange", "DfmError", "ElementError", "InconsistentLength",
    "concat_lists", "split_list", "Partition",
]
