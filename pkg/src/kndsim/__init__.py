"""Desk-scale simulator of topology-aware network driver allocation.

Modules:

- :mod:`kndsim.topology`: device inventories with PCI root / NUMA attributes
- :mod:`kndsim.selector`: CEL-subset claim selectors
- :mod:`kndsim.allocator`: constraint-satisfying claim allocation
- :mod:`kndsim.lifecycle`: pod startup pipelines (CNI, CNI + device plugin, KND)
- :mod:`kndsim.fabric`: collective bus bandwidth model
- :mod:`kndsim.scenario`, :mod:`kndsim.harness`, :mod:`kndsim.cli`: scenarios, replications, CSV
"""

__version__ = "0.1.0"
