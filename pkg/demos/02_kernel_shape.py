"""Learn which kernel positions matter.

Inputs are 3x3 patches.  Five positions carry a class prototype plus noise;
the four corners carry pure noise.  A shape layer multiplies a learned
similarity R by a 0/1 mask D, and a real-valued shadow of D is pushed along
the mask gradient plus a constant sparsity pull.  The corner bits switch
off, and a masked position cannot influence the output at all.
"""

import numpy as np

from nsl.data import Dataset
from nsl.network import Conv, Linear, Network, NetworkSpec, ReLU
from nsl.training import TrainConfig, evaluate, train

NOISE = [0, 2, 6, 8]


def patches(seed, n=1000):
    rng = np.random.default_rng(seed)
    protos = np.random.default_rng(100).choice([-1.0, 1.0], size=(4, 9))
    y = rng.integers(0, 4, n)
    x = protos[y] + rng.normal(size=(n, 9))
    x[:, NOISE] = rng.normal(size=(n, len(NOISE)))
    return Dataset(x.reshape(n, 1, 3, 3), y)


def main():
    spec = NetworkSpec((1, 3, 3), 4, [Conv(8, 3, pad=0, similarity="shape", shape_r="diagonal"), ReLU(),
                                      Linear(None)])
    for seed in range(3):
        data = patches(seed)
        net = Network(spec, seed)
        net.params["layer0.weight"].data *= 0.1
        train(net, data, TrainConfig(epochs=30, batch_size=100, lr=0.05, shape_l1=0.01, shape_lr=1.0, seed=seed))
        mask = net.masks[0].data.reshape(3, 3).astype(int)
        print(f"seed {seed}: training error {evaluate(net, data):.3f}, learned kernel shape")
        print("\n".join("    " + " ".join(map(str, row)) for row in mask))
        kernel = net.fold().params["layer0.weight"].data
        print(f"    folded kernel magnitude at masked positions: {np.abs(kernel[:, :, mask == 0]).max():.1f}")


if __name__ == "__main__":
    main()
