"""Correlation and variance of the SPDE field against the Matern target."""

import argparse

from bispde.experiments import MaternConfig, matern_fidelity


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--side", type=float, default=10.0)
    ap.add_argument("--max-edge", type=float, default=0.1)
    ap.add_argument("--extension", type=float, default=3.0)
    ap.add_argument("--kappa", type=float, default=2.0)
    a = ap.parse_args()
    r = matern_fidelity(MaternConfig(a.side, a.max_edge, a.extension, a.kappa))
    print(f"nodes {r.n_nodes}  max |corr error| {r.max_corr_error:.4f}  "
          f"variance {r.variance:.4f} (target {r.target_variance:.4f})  {r.seconds:.1f} s")


if __name__ == "__main__":
    main()
