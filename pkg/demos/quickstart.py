"""Design one realization, predict it with state evolution, then simulate it.

Run with ``python demos/quickstart.py``; takes about ten seconds.
"""
from ris_ofdm.config import ScenarioConfig
from ris_ofdm.harness import monte_carlo, run_design, se_prediction

cfg = ScenarioConfig(K=4, M=4, N=16, T_max=2)
rec = run_design(cfg, seed=0)
print(f"groups {rec.grouping.groups}, power {rec.power_dbm:.2f} dBm after {len(rec.power_trace)} rounds")

trace = se_prediction(rec, cfg)
for t, v in enumerate(trace.v[1:], start=1):
    print(f"iteration {t}: predicted decoder variances {v.round(4)}")

mc = monte_carlo(rec, cfg, frames=20)
print(f"simulated BER per user over {mc.bits} bits: {mc.ber.round(4)} (target {cfg.P_tar})")
