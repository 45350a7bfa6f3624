"""Memory-lean point-cloud networks with manual backpropagation in numpy."""

from .networks import ArchSpec, Network, PointCloud, build_preset, count_params
from .memledger import MemoryLedger, analytic_memory

__all__ = ["ArchSpec", "Network", "PointCloud", "build_preset", "count_params", "MemoryLedger", "analytic_memory"]
