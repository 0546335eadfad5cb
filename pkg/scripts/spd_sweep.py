"""Cholesky success rate of the bivariate precision over random parameters.

Failures are reported with the dense spectrum of Q; once the condition
number passes about 1e16 the rounded matrix is numerically indefinite and
no double-precision factorization can succeed.
"""

import argparse

from bispde.experiments import MODERATE_BOX, WIDE_BOX, SweepConfig, extreme_eigenvalues, spd_sweep, _square
from bispde.mesh import assemble_fem, build_mesh


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--draws", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--box", choices=("wide", "moderate"), default="wide")
    a = ap.parse_args()
    cfg = SweepConfig(n_draws=a.draws, seed=a.seed, box=WIDE_BOX if a.box == "wide" else MODERATE_BOX)
    r = spd_sweep(cfg)
    print(f"{len(r.failures)} of {r.n_draws} failed ({r.seconds:.1f} s)")
    fem = assemble_fem(build_mesh(_square(cfg.side), cfg.max_edge, cfg.extension))
    for p in r.failures[:20]:
        lo, hi = extreme_eigenvalues(fem, p)
        print(f"  |cond| {hi / abs(lo):9.2e}  min eig {lo:+.1e}  {p}")


if __name__ == "__main__":
    main()
