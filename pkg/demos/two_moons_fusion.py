"""Fuse two independently trained MLPs on two-moons and compare baselines.

Trains the same 2-16-16-2 architecture from two seeds, then reports test
accuracy for each parent, the plain parameter average, and the
barycentric fusion, plus the path barrier before and after alignment.

Run: python3 demos/two_moons_fusion.py
"""

import numpy as np

from baryfuse.datasets import two_moons
from baryfuse.fusion import FusionConfig, align_model, vanilla_average, wb_fuse_model
from baryfuse.landscape import flatten_model, segment_barrier
from baryfuse.network import accuracy
from baryfuse.training import train


def main():
    train_ds = two_moons(100, seed=0)
    test_ds = two_moons(200, seed=1, split_tag="test")

    m1 = train("mlp", train_ds, seed=10)
    m2 = train("mlp", train_ds, seed=11)
    print(f"parent 1 accuracy   {accuracy(m1, test_ds):.3f}")
    print(f"parent 2 accuracy   {accuracy(m2, test_ds):.3f}")

    avg = vanilla_average([m1, m2])
    print(f"plain average       {accuracy(avg, test_ds):.3f}")

    result = wb_fuse_model([m1, m2], FusionConfig())
    print(f"barycentric fusion  {accuracy(result.fused, test_ds):.3f}")

    aligned = align_model(m2, result.couplings[1])
    t1, t2, ta = (flatten_model(m) for m in (m1, m2, aligned))
    print(f"barrier, raw pair      {segment_barrier(t1, t2, m1, test_ds):.3f}")
    print(f"barrier, after align   {segment_barrier(t1, ta, m1, test_ds):.3f}")


if __name__ == "__main__":
    main()
