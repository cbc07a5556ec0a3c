"""What do the learned representations encode?

Trains the model on one synthetic training fold and reports, for every
covariate, how much of it a quadratic regression on the conditioning
representation (C, F) and on the instrument representation S explains, plus
the instrument's incremental pull on the treatment given (C, F). A useful
instrument needs S to move W after conditioning on (C, F), which fails when
(C, F) absorbs the instrument covariate.

    python scripts/representation_diagnostics.py --seed 3 --epochs 100
"""
import argparse

import numpy as np

from civrep import estimators as E
from civrep import model as M
from civrep.data import SynthConfig, generate_synthetic, split


def r2(target, feats):
    design = np.column_stack([np.ones(len(target)), feats, feats ** 2])
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    return 1 - np.var(target - design @ coef) / np.var(target)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=M.ModelConfig.epochs)
    args = ap.parse_args()

    ds = generate_synthetic(SynthConfig(n=args.n, seed=args.seed))
    train, test = split(ds, 0.7, args.seed)
    params, hist = M.train(train, M.ModelConfig(epochs=args.epochs, seed=args.seed))
    s, z = M.extract_representations(params, train.x)

    print(f"final loss {hist.loss[-1]:.3f}  KL s/c/f {hist.kl_s[-1]:.3f}/{hist.kl_c[-1]:.3f}/{hist.kl_f[-1]:.3f}")
    print("covariate   R2|(C,F)   R2|S")
    for name in train.columns:
        print(f"{name:10s} {r2(train.column(name), z):9.3f} {r2(train.column(name), s):7.3f}")
    u1 = train.hidden[:, train.hidden_columns.index("U1")]
    print(f"U1 (instrument source) R2|(C,F) {r2(u1, z):.3f}  R2|(S,C,F) {r2(u1, np.hstack([s, z])):.3f}")
    print(f"W R2|(C,F) {r2(train.w, z):.3f}  R2|(S,C,F) {r2(train.w, np.hstack([s, z])):.3f}")

    ts = E.fit_two_stage(s, z, train.w, train.y, E.TwoStageConfig(seed=args.seed))
    est = E.cace(ts, M.extract_representations(params, test.x)[1])
    print(f"out-of-sample ACE {est.mean():.3f} (truth 2.0)")


if __name__ == "__main__":
    main()
