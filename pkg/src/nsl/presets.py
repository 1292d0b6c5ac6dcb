"""Architecture presets: the plain CNN backbones used for image recognition and few-shot tasks."""

from __future__ import annotations

from .network import BatchNorm, Conv, Linear, MaxPool, NetworkSpec, PredictorConfig, ReLU

PRESETS = ("CNN-4", "CNN-9", "CNN-10", "baselineCNN", "baselineCNN++-like", "synth-3")

_DEFAULTS = {
    "CNN-4": ((3, 84, 84), 5),
    "CNN-9": ((3, 32, 32), 10),
    "CNN-10": ((3, 224, 224), 1000),
    "baselineCNN": ((3, 32, 32), 10),
    "baselineCNN++-like": ((3, 32, 32), 10),
    "synth-3": ((1, 12, 12), 4),
}


def _unit(width, n, similarity, mode):
    layers = []
    for _ in range(n):
        layers += [Conv(width, 3, similarity=similarity, mode=mode), BatchNorm(), ReLU()]
    return layers


def _stages(widths, depth, fc, similarity, mode):
    layers = []
    for w in widths:
        layers += _unit(w, depth, similarity, mode) + [MaxPool(2, 2)]
    return layers + [Linear(fc), ReLU(), Linear(None)]


def build_preset(
    name: str,
    num_classes: int | None = None,
    input_shape: tuple | None = None,
    similarity: str = "none",
    mode: str = "static",
    predictor: PredictorConfig | None = None,
) -> NetworkSpec:
    """Layer list of a named backbone.

    Every convolution is followed by batch-norm and ReLU.  ``similarity`` and
    ``mode`` apply to every convolution.  CNN-9 and CNN-10 end in a hidden
    fully connected layer (256 and 512 units) followed by the classifier.
    """
    if name not in _DEFAULTS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    shape, classes = _DEFAULTS[name]
    shape = tuple(input_shape or shape)
    classes = num_classes or classes
    if name == "CNN-4":
        layers = []
        for _ in range(4):
            layers += _unit(32, 1, similarity, mode) + [MaxPool(2, 2)]
        layers.append(Linear(None))
    elif name in ("CNN-9", "baselineCNN"):
        layers = _stages((32, 64, 128), 3, 256, similarity, mode)
    elif name == "synth-3":
        # desk-scale backbone for the procedural datasets
        layers = _unit(8, 1, similarity, mode) + [MaxPool(2, 2)]
        layers += _unit(16, 1, similarity, mode) + [MaxPool(2, 2)]
        layers += _unit(16, 1, similarity, mode) + [Linear(None)]
    elif name == "baselineCNN++-like":
        # deeper and wider than CNN-9 so that its parameter count exceeds the
        # similarity variants built on CNN-9
        layers = _stages((40, 80, 160), 4, 320, similarity, mode)
    else:
        layers = [Conv(64, 7, stride=2, pad=3, similarity=similarity, mode=mode), BatchNorm(), ReLU(),
                  MaxPool(3, 2)]
        layers += _unit(64, 3, similarity, mode) + [MaxPool(2, 2)]
        layers += _unit(128, 3, similarity, mode) + [MaxPool(2, 2)]
        layers += _unit(256, 3, similarity, mode) + [MaxPool(2, 2)]
        layers += [Linear(512), ReLU(), Linear(None)]
    return NetworkSpec(shape, classes, layers, predictor or PredictorConfig())
