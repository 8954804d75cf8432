"""Descriptor extractor for polar radar scan images.

Left-to-right: a 5x5 stem conv, then four downsampling blocks (2x2
stride-2 conv + two 3x3 convs with a residual skip + channel attention).
Right-to-left: a 2x2 stride-2 transposed conv upsamples the deepest map
back to 1/8 resolution, where it is concatenated with a 1x1-projected
skip from the previous block. Generalized-mean pooling of the merged map
yields the global descriptor.

All convolutions pad circularly along the angular axis, so descriptors
are exactly invariant to cyclic input shifts that are multiples of the
total stride (16 bins).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .autodiff import DivergenceError, Tensor, concat_channels, add, relu
from .layers import BatchNorm2d, CircularConv2d, Eca, GeM, TransposedConv2d
from .optim import ParameterStore

TOTAL_STRIDE = 16


@dataclass
class NetworkConfig:
    """Architecture hyperparameters; defaults match 384x128 polar scans."""

    input_shape: tuple = (1, 384, 128)
    block_channels: tuple = (32, 32, 64, 64, 128)
    lateral_channels: int = 128
    descriptor_dim: int = 256
    eca_kernel: int = 3
    gem_p: float = 3.0
    gem_eps: float = 1e-6

    def validate(self):
        c, a, r = self.input_shape
        if c != 1:
            raise ValueError("input must be single-channel")
        if a % TOTAL_STRIDE or r % TOTAL_STRIDE or a < TOTAL_STRIDE or r < TOTAL_STRIDE:
            raise ValueError(
                f"angular/radial extents {(a, r)} must be positive multiples of {TOTAL_STRIDE}")
        if len(self.block_channels) != 5:
            raise ValueError("block_channels must list five blocks")
        if self.descriptor_dim != 2 * self.lateral_channels:
            raise ValueError("descriptor_dim must equal 2 * lateral_channels")
        if self.eca_kernel < 1 or self.eca_kernel % 2 == 0:
            raise ValueError("eca_kernel must be a positive odd integer")
        if self.gem_eps <= 0.0:
            raise ValueError("gem_eps must be positive")

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "block_channels": list(self.block_channels),
            "lateral_channels": self.lateral_channels,
            "descriptor_dim": self.descriptor_dim,
            "eca_kernel": self.eca_kernel,
            "gem_p": self.gem_p,
            "gem_eps": self.gem_eps,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_shape=tuple(d["input_shape"]),
            block_channels=tuple(d["block_channels"]),
            lateral_channels=int(d["lateral_channels"]),
            descriptor_dim=int(d["descriptor_dim"]),
            eca_kernel=int(d.get("eca_kernel", 3)),
            gem_p=float(d.get("gem_p", 3.0)),
            gem_eps=float(d.get("gem_eps", 1e-6)),
        )


class _DownBlock:
    """Stride-2 conv, then a two-conv residual branch, then ECA."""

    def __init__(self, in_ch, out_ch, eca_kernel, rng, dtype):
        self.down = CircularConv2d(in_ch, out_ch, 2, stride=2, rng=rng, dtype=dtype)
        self.bn_down = BatchNorm2d(out_ch, dtype=dtype)
        self.conv1 = CircularConv2d(out_ch, out_ch, 3, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = CircularConv2d(out_ch, out_ch, 3, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        self.eca = Eca(eca_kernel, rng=rng, dtype=dtype)

    def __call__(self, x, training):
        t = relu(self.bn_down(self.down(x), training))
        u = relu(self.bn1(self.conv1(t), training))
        u = relu(self.bn2(self.conv2(u), training))
        return self.eca(add(t, u))

    def submodules(self):
        return [("down", self.down), ("bn_down", self.bn_down),
                ("conv1", self.conv1), ("bn1", self.bn1),
                ("conv2", self.conv2), ("bn2", self.bn2),
                ("eca", self.eca)]


class RadarLocModel:
    """Scan-image descriptor network; construct via ``build``."""

    def __init__(self, config, seed, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = dtype
        self.training = False
        rng = np.random.default_rng(np.random.SeedSequence(seed))

        ch = config.block_channels
        self.conv0 = CircularConv2d(1, ch[0], 5, rng=rng, dtype=dtype)
        self.bn0 = BatchNorm2d(ch[0], dtype=dtype)
        self.blocks = []
        prev = ch[0]
        for c in ch[1:]:
            self.blocks.append(_DownBlock(prev, c, config.eca_kernel, rng, dtype))
            prev = c
        lat = config.lateral_channels
        self.lateral3 = CircularConv2d(ch[3], lat, 1, rng=rng, dtype=dtype)
        self.lateral4 = CircularConv2d(ch[4], lat, 1, rng=rng, dtype=dtype)
        self.tconv = TransposedConv2d(lat, lat, rng=rng, dtype=dtype)
        self.gem = GeM(config.gem_p, config.gem_eps, dtype=dtype)

    # -- mode -------------------------------------------------------------
    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    # -- forward ----------------------------------------------------------
    def feature_map(self, batch):
        """Merged 1/8-resolution feature map, (N, descriptor_dim, A/8, R/8)."""
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        _, a, r = self.config.input_shape
        if x.data.ndim != 4 or x.data.shape[1:] != (1, a, r):
            raise ValueError(
                f"expected batch of shape (N, 1, {a}, {r}), got {x.data.shape}")
        if x.data.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)

        h = relu(self.bn0(self.conv0(x), self.training))
        skips = []
        for block in self.blocks:
            h = block(h, self.training)
            skips.append(h)
        up = self.tconv(self.lateral4(skips[3]))
        lat = self.lateral3(skips[2])
        return concat_channels(up, lat)

    def forward(self, batch):
        """Descriptors (N, descriptor_dim) for a batch of scan images."""
        desc = self.gem(self.feature_map(batch))
        if not np.isfinite(desc.data).all():
            raise DivergenceError("descriptor contains non-finite values")
        return desc

    def __call__(self, batch):
        return self.forward(batch)

    # -- parameter plumbing -------------------------------------------------
    def _named_modules(self):
        mods = [("conv0", self.conv0), ("bn0", self.bn0)]
        for i, block in enumerate(self.blocks, start=1):
            for sub, m in block.submodules():
                mods.append((f"block{i}.{sub}", m))
        mods.extend([("lateral3", self.lateral3), ("lateral4", self.lateral4),
                     ("tconv", self.tconv), ("gem", self.gem)])
        return mods

    def named_parameters(self):
        out = []
        for prefix, m in self._named_modules():
            for name, t in m.parameters():
                out.append((f"{prefix}.{name}", t))
        return out

    def named_buffers(self):
        out = []
        for prefix, m in self._named_modules():
            if hasattr(m, "buffers"):
                for name, arr in m.buffers():
                    out.append((f"{prefix}.{name}", arr))
        return out

    def parameter_store(self):
        return ParameterStore(self.named_parameters())

    def num_parameters(self):
        return sum(t.data.size for _, t in self.named_parameters())

    def clamp_constraints(self):
        """Re-apply parameter bounds after an optimizer step."""
        self.gem.clamp_p()

    # -- persistence --------------------------------------------------------
    def state_arrays(self):
        arrays = {name: t.data for name, t in self.named_parameters()}
        arrays.update({name: arr for name, arr in self.named_buffers()})
        return arrays

    def save(self, path):
        """Write a PLOC checkpoint plus a JSON config sidecar."""
        checkpoint.save_arrays(path, self.state_arrays())
        sidecar = str(path) + ".json"
        with open(sidecar, "w") as f:
            json.dump({"config": self.config.to_dict(), "seed": self.seed}, f,
                      indent=2, sort_keys=True)
            f.write("\n")

    def load_state(self, arrays):
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for name, t in self.named_parameters():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(f"{name}: shape {src.shape} != {t.data.shape}")
            t.data[...] = src.astype(self.dtype)
        for name, arr in self.named_buffers():
            arr[...] = arrays[name].astype(self.dtype)


def build(config=None, seed=0, dtype=np.float32):
    """Deterministically initialized model: equal seeds give bit-identical
    parameters."""
    return RadarLocModel(config or NetworkConfig(), seed, dtype)


def load(path, dtype=np.float32):
    """Rebuild a model from a checkpoint and its config sidecar."""
    sidecar = str(path) + ".json"
    with open(sidecar) as f:
        meta = json.load(f)
    config = NetworkConfig.from_dict(meta["config"])
    model = RadarLocModel(config, seed=int(meta.get("seed", 0)), dtype=dtype)
    model.load_state(checkpoint.load_arrays(path))
    return model
