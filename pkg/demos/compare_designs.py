"""Average transmit power of every design on a few channel realizations.

Run with ``python demos/compare_designs.py [seeds]``; the default of five
seeds takes about a minute.
"""
import sys

import numpy as np

from ris_ofdm.config import ScenarioConfig, watts_to_dbm
from ris_ofdm.exceptions import RisOfdmError
from ris_ofdm.harness import run_design

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
base = ScenarioConfig(K=4, M=4, N=32, T_max=4)
designs = {
    "no_ris": base.replace(T_max=1),
    "random_phase": base.replace(T_max=1),
    "sic": base,
    "diagonal": base,
    "info": base,
}
for name, cfg in designs.items():
    powers = []
    for s in seeds:
        try:
            powers.append(run_design(cfg.replace(optimizer=name), s).power)
        except RisOfdmError as err:
            print(f"{name} seed {s}: {err}")
    if powers:
        print(f"{name:>12}: {watts_to_dbm(np.mean(powers)):6.2f} dBm over {len(powers)} seeds")
