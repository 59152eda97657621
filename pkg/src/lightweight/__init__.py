"""Lightweight structure design under unknown force locations.

Submodules: ``mesh``, ``fem``, ``loadcase``, ``criticality``, ``reduction``,
``optimizer``, ``io``, ``models`` and ``cli``. They are not imported here so
the command line can cap BLAS threads before numpy loads.
"""
__version__ = "0.1.0"
