"""Train a static similarity network, then fold it into a plain CNN.

A static layer scores every patch with W^T M X.  Because M does not depend
on the input, the product M^T W can be computed once after training, so the
deployed network has exactly the parameter count of its plain twin.
"""

import numpy as np

from nsl.data import SynthSpec, synth_dataset
from nsl.network import Network
from nsl.presets import build_preset
from nsl.training import TrainConfig, evaluate, predict, train


def main():
    spec = SynthSpec(classes=4, per_class=40, size=12, noise=1.0)
    data, test = synth_dataset(spec, 0), synth_dataset(spec, 1)
    for kind in ("diagonal", "block", "cholesky"):
        net = Network(build_preset("synth-3", 4, (1, 12, 12), kind), 0)
        train(net, data, TrainConfig(epochs=8, batch_size=16, lr=0.05))
        folded = net.fold()
        gap = np.abs(predict(folded, test) - predict(net, test)).max()
        print(f"{kind:>9}: test error {evaluate(net, test):.3f}, "
              f"params {net.num_parameters()} -> folded {folded.num_parameters()} "
              f"(plain twin {net.plain_twin().num_parameters()}), max logit change {gap:.1e}")


if __name__ == "__main__":
    main()
