"""Where does the ellipsoid CBF lose its input term?

Prints the states on the boundary of the ellipsoid where L_g h = 0 for the
vertical quadrotor, then repeats the scan for a half-space (no such states).
"""

import numpy as np

from cbf_forge.dynamics import SIM_PARAMS, quadrotor_z_system
from cbf_forge.relative_degree import scan_inactivity
from cbf_forge.safe_sets import ellipsoid_safe_set, halfspace_safe_set

sys_ = quadrotor_z_system(SIM_PARAMS)

ellipse = ellipsoid_safe_set([0.0, 0.0], np.eye(2) / 1.44)
rep = scan_inactivity(sys_, ellipse)
print(f"ellipsoid: {len(rep.points)} zero-locus points, {len(rep.interior_points)} interior")
for p in rep.boundary_points:
    print(f"  boundary point z={p[0]:+.6f} zdot={p[1]:+.2e}")

plane = halfspace_safe_set([-1.0, -0.5], 1.0)
print(f"half-space: {len(scan_inactivity(sys_, plane).points)} zero-locus points")
