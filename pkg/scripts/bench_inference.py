"""Wall clock of learned-mode rigid + non-rigid inference at ico_6 on one core.

Network weights do not change the amount of work, so a freshly initialised
model with the default architecture is timed on a synthetic ico_6 pair.
"""

import argparse
import time

import numpy as np
import torch

from spherereg.registry import RegistrationConfig, TrainConfig, init_model, register
from spherereg.synth import synth_corpus

REFERENCE_SECONDS = 2.058


def bench(repeats=3, widths=(64, 128), heads=4, levels=(3, 4, 5, 6)):
    torch.set_num_threads(1)
    moving, fixed = synth_corpus(0, 2, levels[-1])
    rc = RegistrationConfig(levels=levels, mode="learned")
    model = init_model(rc, TrainConfig(widths=widths, heads=heads), moving.features.n_channels)
    register(moving, fixed, rc, model)  # warm-up: builds cached meshes and locators
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        register(moving, fixed, rc, model)
        times.append(time.perf_counter() - t)
    return np.array(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    t = bench(args.repeats)
    print(f"ico_6 learned inference: {t.mean():.3f} +/- {t.std():.3f} s over {len(t)} runs "
          f"(reference {REFERENCE_SECONDS} s, hard bound 30 s)")


if __name__ == "__main__":
    main()
