"""Desk-scale low-dose CT enhancement workbench.

Submodules are imported lazily by callers; keep this module free of heavy
imports so the CLI can configure BLAS threading before numpy loads.
"""

__version__ = "0.1.0"
