"""Single- vs multi-CBF filtering on the Himmelblau safe set (a few minutes).

Writes artifacts and gnuplot data under ./himmelblau_run; plot with
``gnuplot himmelblau_run/compare/compare.gp``.
"""

import sys
from pathlib import Path

from cbf_forge.cli import cmd_compare, cmd_synthesize
from cbf_forge.pipeline import load_config

out = Path(sys.argv[1] if len(sys.argv) > 1 else "himmelblau_run")
cfg = load_config(preset="himmelblau")
syn = cmd_synthesize(cfg, out / "synthesis")
rep = cmd_compare(cfg, out / "compare", syn["manifest"])["report"]
for name in ("single", "multi"):
    m = rep[name]
    print(f"{name:6s} min h_des {m['min_h_desired']:+.3g}  escaped {m['escaped']}  statuses {m['status_counts']}")
