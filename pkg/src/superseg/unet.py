"""Encoder-decoder network mapping a ``C x H x W`` raster to ``N x H x W`` logits."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ConvKernel, conv2d, instance_norm, maxpool2, relu, upsample_nearest2
from .tensor import Tensor

CHECKPOINT_MAGIC = b"UNW1"


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    out_channels: int
    depth: int = 4
    base_channels: int = 64
    max_channels: int = 512

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("in_channels and out_channels must be >= 1")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ValueError("need 1 <= base_channels <= max_channels")

    def widths(self) -> list[int]:
        """Feature width at each level, from the opening block to the bottleneck."""
        return [min(self.base_channels * 2**k, self.max_channels) for k in range(self.depth + 1)]


class UNet:
    """Parameters plus forward pass.

    Each block is two rounds of conv -> instance norm -> ReLU. Decoder levels
    upsample by nearest neighbour, convolve, and concatenate the matching
    encoder features before their block.
    """

    def __init__(self, config: UNetConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        widths = config.widths()
        prev = config.in_channels
        for lvl, w in enumerate(widths):
            self._block(f"enc{lvl}", prev, w, rng)
            prev = w
        for lvl in range(config.depth - 1, -1, -1):
            w = widths[lvl]
            self._conv(f"up{lvl}", widths[lvl + 1], w, rng)
            self._block(f"dec{lvl}", 2 * w, w, rng)
        self._conv("head", widths[0], config.out_channels, rng)

    def _conv(self, name: str, cin: int, cout: int, rng: np.random.Generator) -> None:
        bound = np.sqrt(6.0 / (cin * 9))
        self.params[f"{name}.w"] = T.parameter(rng.uniform(-bound, bound, (cout, cin, 3, 3)), f"{name}.w")
        self.params[f"{name}.b"] = T.parameter(np.zeros(cout), f"{name}.b")

    def _block(self, name: str, cin: int, cout: int, rng: np.random.Generator) -> None:
        for i, c in enumerate((cin, cout)):
            self._conv(f"{name}.conv{i}", c, cout, rng)
            self.params[f"{name}.norm{i}.g"] = T.parameter(np.ones(cout), f"{name}.norm{i}.g")
            self.params[f"{name}.norm{i}.b"] = T.parameter(np.zeros(cout), f"{name}.norm{i}.b")

    def kernel(self, name: str) -> ConvKernel:
        return ConvKernel(self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _run_block(self, name: str, x: Tensor) -> Tensor:
        for i in range(2):
            x = conv2d(x, self.kernel(f"{name}.conv{i}"))
            x = instance_norm(x, self.params[f"{name}.norm{i}.g"], self.params[f"{name}.norm{i}.b"])
            x = relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=float))
        c, h, w = x.shape
        cfg = self.config
        if c != cfg.in_channels:
            raise ValueError(f"network expects {cfg.in_channels} channels, got {c}")
        step = 2**cfg.depth
        if h % step or w % step:
            raise ValueError(
                f"spatial size {h}x{w} is not divisible by {step}; "
                "resize the raster with preprocess() first"
            )
        skips = []
        for lvl in range(cfg.depth + 1):
            if lvl > 0:
                x = maxpool2(x)
            x = self._run_block(f"enc{lvl}", x)
            skips.append(x)
        for lvl in range(cfg.depth - 1, -1, -1):
            x = conv2d(upsample_nearest2(x), self.kernel(f"up{lvl}"))
            x = T.concat([skips[lvl], x], axis=0)
            x = self._run_block(f"dec{lvl}", x)
        return conv2d(x, self.kernel("head"))

    __call__ = forward

    def save(self, path) -> None:
        """Write ``UNW1`` + five u32 config fields + u32 param count + float64 values."""
        cfg = self.config
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<6I", cfg.in_channels, cfg.out_channels, cfg.depth,
                                 cfg.base_channels, cfg.max_channels, self.num_parameters()))
            for p in self.params.values():
                fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "UNet":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {blob[:4]!r}")
        fields = struct.unpack_from("<6I", blob, 4)
        net = cls(UNetConfig(*fields[:5]), seed=0)
        if fields[5] != net.num_parameters():
            raise ValueError(f"{path}: parameter count {fields[5]} does not match config")
        values = np.frombuffer(blob, dtype="<f8", offset=28)
        if values.size != fields[5]:
            raise ValueError(f"{path}: expected {fields[5]} values, found {values.size}")
        pos = 0
        for p in net.params.values():
            p.data = values[pos:pos + p.size].reshape(p.shape).astype(np.float64)
            pos += p.size
        return net


def build_unet(config: UNetConfig, seed: int = 0) -> UNet:
    return UNet(config, seed)
