"""
Energy and latency of the hybrid analog/digital deployment
==========================================================

The cost model charges analog matrix products per crossbar tile and
digital ones per MAC. Larger lattices put a larger share of the work on
the crossbars, so the speedup climbs toward the fully analog ceiling.
"""

# %%
import matplotlib.pyplot as plt

from anflow.flow import MixerConfig
from anflow.hardware import hardware_report, layer_profiles, scaling_sweep

rep = hardware_report(layer_profiles(MixerConfig(lattice=(4, 4))))
for k, v in rep["totals"].items():
    print(f"{k:22s} {v:.4g}")

# %%
rows = scaling_sweep([4, 8, 12, 16, 24, 32])
L = [r["L"] for r in rows]
fig, ax = plt.subplots(1, 2, figsize=(9, 3))
ax[0].plot(L, [r["speedup"] for r in rows], "o-")
ax[0].set_xlabel("lattice size L")
ax[0].set_ylabel("speedup")
ax[1].plot(L, [r["analog_mac_fraction"] for r in rows], "o-")
ax[1].set_xlabel("lattice size L")
ax[1].set_ylabel("analog MAC share")
plt.show()
