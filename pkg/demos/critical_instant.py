"""Hierarchical critical-instant search against the brute-force oracle.

    python3 demos/critical_instant.py [model]
"""
import sys

import numpy as np

from lightweight.criticality import CriticalityAnalyzer
from lightweight.models import BUNDLED

name = sys.argv[1] if len(sys.argv) > 1 else "bracket"
model = BUNDLED[name]()
analyzer = CriticalityAnalyzer(model.mesh, model.regions)
system = analyzer.factorize(np.ones(model.mesh.n_elements))

result = analyzer.analyze(system=system)
oracle = analyzer.oracle(system=system, wrs=result.wrs)
print(f"{name}: {model.mesh.n_elements} tets, {len(analyzer.library.contact)} contact nodes")
print(f"search  node {result.result.node:5d}  sigma_cr {result.sigma_cr:.5g}  ({result.n_fea} FEA)")
print(f"oracle  node {oracle.node:5d}  sigma_cr {oracle.sigma_cr:.5g}  ({len(analyzer.library.contact)} FEA)")
print(f"ratio {result.sigma_cr / oracle.sigma_cr:.4f}")
