"""Round-trip error of the Box-Cox pair against the conditioning 1 / (|lam| y^lam)."""

import argparse

import numpy as np

from bispde.preprocess import boxcox, inverse_boxcox


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    rng = np.random.default_rng(a.seed)
    y = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), a.n))
    lam = rng.uniform(-2, 2, a.n)
    err = np.array([abs(inverse_boxcox(boxcox(u, v), v) / u - 1) for u, v in zip(y, lam)])
    cond = 1 / np.maximum(np.abs(lam) * y**lam, 1e-300)
    print(f"max rel err {err.max():.2e}; {np.sum(err > 1e-12)} of {a.n} above 1e-12")
    for lo, hi in ((0, 1e3), (1e3, 1e5), (1e5, np.inf)):
        sel = (cond >= lo) & (cond < hi)
        if sel.any():
            print(f"  cond in [{lo:.0e}, {hi:.0e}): n={sel.sum():4d}  max err {err[sel].max():.2e}")


if __name__ == "__main__":
    main()
