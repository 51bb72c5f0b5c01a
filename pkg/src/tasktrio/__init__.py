"""Three minimal workflow schedulers and a task-granularity benchmark.

- :mod:`tasktrio.graphstore`, :mod:`tasktrio.hubd`, :mod:`tasktrio.worker`:
  a pull-based task-graph hub, its relay and query tool, and worker clients.
- :mod:`tasktrio.pmake`: file-directed parallel make over a node budget.
- :mod:`tasktrio.dfm`: a bulk-synchronous distributed list.
- :mod:`tasktrio.metgbench`: minimum effective task granularity sweeps.
"""

__version__ = "0.1.0"
