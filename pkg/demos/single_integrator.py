"""Two CBFs for the interval [x_min, x_max] under xdot = u.

The pipeline should recover h1 = a1 (x - x_min) and h2 = a2 (x - x_max).
"""

import numpy as np

from cbf_forge.pipeline import load_config, synthesize

cfg = load_config(preset="integrator")
res = synthesize(cfg)
x = np.linspace(cfg["safe_set"]["x_min"], cfg["safe_set"]["x_max"], 11)[:, None]
edges = (cfg["safe_set"]["x_min"], cfg["safe_set"]["x_max"])
for model, design, edge in zip(res.models, res.designs, edges):
    a = design.collocation.alpha[0, 0]
    err = np.abs(model.value(x) - a * (x[:, 0] - edge)).max()
    print(f"h_{design.q}: alpha={a:+.3f} theta={design.theta:g} max |H - alpha (x - {edge})| = {err:.2e}")
