"""Humidity CRPS of BM (settings H, HT) against UM over simulated seeds.

With ``--null`` the coupling b21 is zero, so BM and UM should score alike.
"""

import argparse

import numpy as np

from bispde.experiments import StudyConfig, validation_study
from bispde.simulate import SimulationConfig

NULL_THETA = (10.0, 0.028, 0.0, 0.028, 300.0, 0.035)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--null", action="store_true")
    ap.add_argument("--bm", default="BM_TH")
    a = ap.parse_args()
    sim = SimulationConfig(theta=NULL_THETA) if a.null else SimulationConfig()
    rows = validation_study(StudyConfig(seeds=tuple(range(a.seeds)), sim=sim, bm=a.bm))
    print("seed,bm_h,bm_ht,um,ordered")
    for r in rows:
        print(f"{r.seed},{r.bm_h:.6g},{r.bm_ht:.6g},{r.um:.6g},{r.ordered}")
    m = {k: np.mean([getattr(r, k) for r in rows]) for k in ("bm_h", "bm_ht", "um")}
    print(f"ordered in {sum(r.ordered for r in rows)}/{len(rows)}; means " +
          ", ".join(f"{k} {v:.5g}" for k, v in m.items()))


if __name__ == "__main__":
    main()
