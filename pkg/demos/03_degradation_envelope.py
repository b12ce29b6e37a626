"""Degradation maps and their convex lower envelopes.

Generates the two bundled chemistry maps, shows the calibration (rated
full cycling reaches 20% fade at the anchor cycle count), and extracts
the envelope planes the scheduler prices aging with.
"""

import numpy as np

from lv_storage_opt.battery import DegradationModel, generate_degradation_map
from lv_storage_opt.battery.degradation import RATED_C_RATE


def main() -> None:
    for tech in ("licoo2", "lifepo4"):
        model = DegradationModel(map=generate_degradation_map(tech))
        m = model.map
        print(f"\n{tech}: anchor {m.anchor_cycles} full cycles, "
              f"{model.n_planes} envelope planes, grid "
              f"{len(m.c_rate_grid)}x{len(m.soe_grid)}")

        # resting (calendar) fade across the state of energy
        print("  resting fade rate (fraction of capacity per year):")
        for soe in (0.05, 0.25, 0.5, 0.75, 0.95):
            rate = model.map_rate(0.0, soe) * 8760.0
            print(f"    soe {soe:4.2f}: {100 * rate:6.3f} %/a")

        # one rated full cycle integrated on the sampled map
        dt_h = 1.0 / 60.0
        soe, direction, z = 1.0, -1.0, 0.0
        for _ in range(int(round((2.0 / RATED_C_RATE) / dt_h))):
            z += m.interpolate(-direction * RATED_C_RATE, soe) * dt_h
            soe = min(1.0, max(0.0, soe + direction * RATED_C_RATE * dt_h))
            if soe in (0.0, 1.0):
                direction = -direction
        print(f"  one rated cycle costs {100 * z:.5f}% capacity "
              f"-> {0.2 / z:.0f} cycles to 80% (anchor {m.anchor_cycles})")

        # envelope dominance: max over planes never exceeds the map
        gap = np.inf
        excess = -np.inf
        for i, c in enumerate(m.c_rate_grid):
            for j, s in enumerate(m.soe_grid):
                d = m.rate[i, j] - model.hull_rate(c, s)
                gap = min(gap, d)
                excess = max(excess, -d)
        print(f"  envelope stays below the map (worst excess {excess:.1e}); "
              f"nonconvex gap up to {np.max(m.rate) - np.min(m.rate):.2e}")


if __name__ == "__main__":
    main()
