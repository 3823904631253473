"""Learned-mode smoke run: train per-level S-GATs on a synthetic corpus.

Trains twice with the same seed, checks the checkpoints are byte-identical,
and compares held-out similarity after the full learned pipeline against the
similarity after its rigid stage alone.
"""

import argparse
import time

import numpy as np

from spherereg.net import dumps
from spherereg.registry import RegistrationConfig, TrainConfig, register, train
from spherereg.synth import synth_corpus


def smoke(n_train=64, n_test=8, epochs=50, levels=(3, 4), widths=(8, 16), heads=1, seed=0, repeats=2, log=None):
    corpus = synth_corpus(seed, n_train + n_test, max(levels))
    train_set, test_set = corpus[:n_train], corpus[n_train:]
    rc = RegistrationConfig(levels=levels, mode="learned")
    tc = TrainConfig(epochs=epochs, widths=widths, heads=heads, seed=seed)
    blobs, seconds = [], []
    for _ in range(repeats):
        t = time.perf_counter()
        model, history = train(train_set, tc, rc, log=log)
        seconds.append(time.perf_counter() - t)
        blobs.append(dumps(model))
    rigid, final = [], []
    for k in range(n_test):
        r = register(test_set[k], test_set[(k + 1) % n_test], rc, model)
        rigid.append(r.post_rigid_sim)
        final.append(r.final_sim)
    return {
        "identical": all(b == blobs[0] for b in blobs),
        "train_seconds": seconds,
        "rigid_sim": float(np.mean(rigid)),
        "final_sim": float(np.mean(final)),
        "history": history,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--subjects", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--widths", default="8,16")
    ap.add_argument("--repeats", type=int, default=2)
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args()
    out = smoke(args.subjects, epochs=args.epochs, widths=tuple(int(w) for w in args.widths.split(",")),
                repeats=args.repeats, log=print if args.verbose else None)
    print(f"train seconds per run: {[round(s) for s in out['train_seconds']]}")
    print(f"checkpoints byte-identical: {out['identical']}")
    print(f"held-out sim: rigid-only {out['rigid_sim']:.4f}  learned {out['final_sim']:.4f}")


if __name__ == "__main__":
    main()
