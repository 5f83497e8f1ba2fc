"""Fuse two recurrent parity models and sweep the relational cost weight.

Hidden-to-hidden weights have no fixed neuron order, so recurrent fusion
couples them through a relational term weighted by alpha_h. alpha_h = 0
ignores recurrence and matches units by input weights alone; larger values
let the hidden dynamics drive the matching.

One-shot fusion of independently trained recurrent nets is hard: at this
scale the fused model lands near chance either way, and the interesting
signal is the relative ordering across alpha_h, not the absolute accuracy.

Run: python3 demos/parity_recurrent_fusion.py [rnn|lstm]
"""

import sys

from baryfuse.datasets import sequence_parity
from baryfuse.network import accuracy
from baryfuse.recurrent_fusion import GwbConfig, gwb_fuse_model
from baryfuse.training import train


def main(arch: str = "rnn"):
    ds = sequence_parity(8)
    test = sequence_parity(8, split_tag="test")

    m1 = train(arch, ds, seed=20)
    m2 = train(arch, ds, seed=21)
    print(f"{arch} parent accuracies: "
          f"{accuracy(m1, test):.3f} / {accuracy(m2, test):.3f}")

    for alpha_h in (0.0, 1.0, 5.0, 20.0):
        result = gwb_fuse_model([m1, m2], GwbConfig(alpha_h=alpha_h))
        print(f"alpha_h {alpha_h:>4}: fused accuracy {accuracy(result.fused, test):.3f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "rnn")
