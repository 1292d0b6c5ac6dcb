"""Self-attention as a dynamic global similarity.

The convolution is written as one matrix acting on the flattened feature
map.  Inserting the data-dependent matrix G1(X) G2(X)^T before it gives
attention followed by convolution.  A diagonal global matrix acts as a
spatial mask.  At m=1 it agrees with the local form, while at m=2 no local
diagonal reproduces it.
"""

import numpy as np

from nsl.gns import DiagonalMask, best_lns_residual, conv_as_matrix, flatten_map, gns_forward, self_attention_forward


def main():
    rng = np.random.default_rng(0)
    m, c = 4, 2
    W, X = rng.normal(size=(3, 3, c)), rng.normal(size=(m, m, c))
    G1, G2 = rng.normal(size=(c, c)), rng.normal(size=(c, c))
    out = self_attention_forward(W, G1, G2, X).data[:, :, 0]
    A = (X.reshape(-1, c) @ G1.T) @ (X.reshape(-1, c) @ G2.T).T
    mixed = (A @ X.reshape(-1, c)).reshape(m, m, c)
    direct = conv_as_matrix(W, m).apply(flatten_map(mixed)).data.reshape(m, m)
    print(f"attention then convolution vs dynamic global similarity: max gap {np.abs(out - direct).max():.1e}")
    mask = rng.uniform(size=m * m)
    masked = gns_forward(conv_as_matrix(W, m), DiagonalMask(mask, m, c), X).data
    plain = conv_as_matrix(W, m).apply(flatten_map(X * mask.reshape(m, m, 1))).data
    print(f"diagonal global similarity vs mask-then-convolve: max gap {np.abs(masked - plain).max():.1e}")
    print(f"best local diagonal at m=1: residual {best_lns_residual(W[:1, :1], [0.7], X[:1, :1]):.1e}")
    kernels = rng.normal(size=(4, 3, 3, c))
    gap = best_lns_residual(kernels, [1.0, 2.0, 3.0, 4.0], X[:2, :2])
    print(f"best local diagonal at m=2 for a stack of 4 kernels: residual {gap:.2f}")


if __name__ == "__main__":
    main()
