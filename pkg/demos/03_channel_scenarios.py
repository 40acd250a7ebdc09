"""Block-level channel simulation under the named noise scenarios.

Runs the simulator with fixed nominal control through each scenario and
dumps the telemetry CSV. The printed digest shows how the estimated QBER
and its Wilson interval respond to the scheduled disturbances.
"""

from pathlib import Path

import numpy as np

from optiqkd import (ControlState, LinkParams, ProtocolConfig, Simulator,
                     make_scenario)
from optiqkd.channel import TELEMETRY_CSV_HEADER

OUT = Path("out")
OUT.mkdir(exist_ok=True)

link, proto = LinkParams(), ProtocolConfig()
ctrl = ControlState()
blocks = 240

for name in ("nominal", "noise-sweep", "splice-3db", "sine-drift"):
    sim = Simulator(link, proto, make_scenario(name, blocks), seed=1)
    rows = [sim.step(ctrl) for _ in range(blocks)]
    path = OUT / f"demo_telemetry_{name}.csv"
    path.write_text(TELEMETRY_CSV_HEADER + "\n"
                    + "\n".join(t.csv_row() for t in rows) + "\n")
    qber = np.array([t.e_mu_hat for t in rows])
    print(f"{name:>12}: blocks 0/{blocks//2}/{blocks-1} QBER = "
          f"{qber[0]:.4f} / {qber[blocks//2]:.4f} / {qber[-1]:.4f}  "
          f"aborts={sum(t.aborted for t in rows)}  -> {path}")

# same seed, same schedule: telemetry is bit-identical
a = Simulator(link, proto, make_scenario("noise-sweep", 50), seed=7)
b = Simulator(link, proto, make_scenario("noise-sweep", 50), seed=7)
assert all(a.step(ctrl) == b.step(ctrl) for _ in range(50))
print("\nDeterminism check: same seed reproduces the telemetry stream exactly.")
