"""Stress-constrained lightweighting of the bundled slingshot (about 10 s).

    python3 demos/lightweight_slingshot.py
"""
from lightweight.fem import MaterialModel
from lightweight.models import slingshot
from lightweight.optimizer import OptimizerConfig, optimize

model = slingshot()
material = MaterialModel(yield_strength=1.42)


def show(state):
    if state.accepted:
        print(f"{state.iteration:4d}  mass {state.mass:9.3f}  sigma_cr {state.sigma_cr:.4f}  node {state.node}")


res = optimize(model.mesh, model.regions, material, config=OptimizerConfig(force_budget=1.0), callback=show)
print(f"{res.status} {res.verdict}: mass {res.mass_initial:.1f} -> {res.mass_binary:.1f} (binary), "
      f"verified sigma_cr {res.sigma_verified:.4f} <= {1.05 * material.yield_strength:.4f}")
