"""Small convolutional encoder-decoder that cleans up sub-sampled maps.

Input and output are (batch, n_range, n_azimuth) magnitude maps. The network
is a narrow U-shape: ``depth`` encoder levels of one 3x3 'same' convolution
plus ReLU followed by 2x2 average pooling, a bottleneck convolution, then
mirrored decoder levels of nearest-neighbor upsampling, a skip concatenation
and one convolution. The head convolution reduces to one channel and is
added to the network's input before a final ReLU (maps are nonnegative), so
the net refines the beamformed map rather than re-deriving it: at
initialization it behaves nearly like the identity. Channel widths double
per level from ``base_channels``.

Maps are normalized per image to peak 1 before the network and scaled back
after, so the net sees a fixed dynamic range regardless of scene brightness;
both steps are graph ops, so gradients account for them. Spatial sizes are
zero-padded on the bottom/right up to multiples of 2**depth and cropped back
at the end.

Hidden convolutions get He-uniform weights; the head convolution starts at
zero, which together with the residual connection makes the freshly
initialized network compute exactly the identity. Training therefore starts
from the raw beamformed map's score and any learning is pure improvement,
instead of first having to climb out of a random-init hole.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"SALC"
CHECKPOINT_VERSION = 1
PEAK_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelDescriptor:
    """Architecture hyperparameters; fully determines shapes and counts."""

    depth: int = 3
    base_channels: int = 8
    kernel: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("ModelDescriptor: depth and base_channels must "
                             "be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("ModelDescriptor: kernel must be odd")

    def layer_plan(self) -> list:
        """(name, in_channels, out_channels) per convolution, in order."""
        d, c, plan = self.depth, self.base_channels, []
        for j in range(d):
            plan.append((f"enc{j}", 1 if j == 0 else c * 2 ** (j - 1),
                         c * 2 ** j))
        plan.append(("bottleneck", c * 2 ** (d - 1), c * 2 ** d))
        for j in reversed(range(d)):
            plan.append((f"dec{j}", c * 2 ** (j + 1) + c * 2 ** j, c * 2 ** j))
        plan.append(("head", c, 1))
        return plan

    def param_count(self) -> int:
        k2 = self.kernel ** 2
        return sum(k2 * cin * cout + cout for _, cin, cout in self.layer_plan())


class ReconstructionModel:
    """The network plus its parameter store."""

    def __init__(self, descriptor: ModelDescriptor, rng: np.random.Generator):
        self.descriptor = descriptor
        self.params = {}
        k = descriptor.kernel
        for name, cin, cout in descriptor.layer_plan():
            if name == "head":
                w = np.zeros((cout, cin, k, k))
            else:
                fan_in = k * k * cin
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, (cout, cin, k, k))
            self.params[f"{name}.w"] = ad.param(w, name=f"{name}.w")
            self.params[f"{name}.b"] = ad.param(np.zeros(cout),
                                                name=f"{name}.b")

    @property
    def param_order(self) -> list:
        return [f"{name}.{s}" for name, _, _ in self.descriptor.layer_plan()
                for s in ("w", "b")]

    @property
    def param_list(self) -> list:
        return [self.params[n] for n in self.param_order]

    def _conv(self, x: ad.Node, name: str) -> ad.Node:
        return ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def __call__(self, maps: ad.Node) -> ad.Node:
        maps = ad.constant(maps)
        if maps.value.ndim != 3:
            raise ad.ShapeError(f"ReconstructionModel: expected (batch, "
                                f"rows, cols), got {maps.value.shape}")
        b, h, w = maps.value.shape
        x = ad.reshape(maps, (b, 1, h, w))
        peak = ad.clamp_min(ad.max_reduce(x, axes=(1, 2, 3), keepdims=True),
                            PEAK_FLOOR)
        x = ad.div(x, peak)
        step = 2 ** self.descriptor.depth
        x = ad.pad_hw(x, (-h) % step, (-w) % step)
        entry = x
        skips = []
        for j in range(self.descriptor.depth):
            x = ad.relu(self._conv(x, f"enc{j}"))
            skips.append(x)
            x = ad.avgpool2(x)
        x = ad.relu(self._conv(x, "bottleneck"))
        for j in reversed(range(self.descriptor.depth)):
            x = ad.concat([ad.upsample2(x), skips[j]], axis=1)
            x = ad.relu(self._conv(x, f"dec{j}"))
        x = ad.relu(ad.add(self._conv(x, "head"), entry))
        x = ad.crop_hw(x, h, w)
        x = ad.mul(x, peak)
        return ad.reshape(x, (b, h, w))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: ReconstructionModel):
    """Descriptor plus every weight, concatenated in layer order."""
    d = model.descriptor
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<3I", d.depth, d.base_channels, d.kernel))
        for name in model.param_order:
            f.write(np.ascontiguousarray(model.params[name].value,
                                         dtype="<f8").tobytes())


def load_checkpoint(path) -> ReconstructionModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"load_checkpoint: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"load_checkpoint: unsupported version {version}")
    depth, base, kernel = struct.unpack_from("<3I", blob, 6)
    desc = ModelDescriptor(depth, base, kernel)
    model = ReconstructionModel(desc, np.random.default_rng(0))
    off = 6 + struct.calcsize("<3I")
    if len(blob) - off != 8 * desc.param_count():
        raise ValueError(f"load_checkpoint: expected {desc.param_count()} "
                         f"weights, file holds {(len(blob) - off) // 8}")
    for name in model.param_order:
        node = model.params[name]
        n = node.value.size
        node.value = np.frombuffer(blob, "<f8", n, off) \
            .reshape(node.value.shape).copy()
        off += 8 * n
    return model
