"""Recurrent 3D U-net backbone shared by the registration and segmentation
branches: a small encoder, a convolutional LSTM at the coarsest level carrying
state across recurrent steps, and a skip-connected decoder.

`channels` sets one width per level; the last entry is the CLSTM hidden width.
Spatial dims are halved per level with ceil semantics, so any input size
works. The output head is zero-initialized by callers that need an identity
start (flow field) or a uniform softmax start (logits).
"""

import numpy as np
import torch
import torch.nn.functional as F

from .nn import ClstmState, ParamStore, clstm_step, conv3d, trace


def _ceil_half(n: int) -> int:
    return -(-n // 2)


class RecurrentUnet:
    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        in_channels: int,
        channels,
        out_channels: int,
        use_clstm: bool = True,
        prefix: str = "",
    ):
        if len(channels) < 2:
            raise ValueError("need at least two channel widths (encoder + bottleneck)")
        self.store = store
        self.channels = tuple(int(c) for c in channels)
        self.in_channels = in_channels
        self.use_clstm = use_clstm
        self.prefix = prefix
        self.levels = len(self.channels)

        cs = (in_channels,) + self.channels
        for i in range(self.levels - 1):
            store.add_conv(f"{prefix}enc{i}", cs[i], cs[i + 1], 3, rng)
        c_pen, c_bot = self.channels[-2], self.channels[-1]
        if use_clstm:
            store.add_conv(f"{prefix}gates", c_pen + c_bot, 4 * c_bot, 3, rng)
        else:
            store.add_conv(f"{prefix}bot", c_pen, c_bot, 3, rng)
        for i in range(self.levels - 2, -1, -1):
            store.add_conv(f"{prefix}dec{i}", self.channels[i + 1] + self.channels[i], self.channels[i], 3, rng)
        store.add_conv(f"{prefix}head", self.channels[0], out_channels, 3, rng, zero=True)

    def _conv(self, name: str, x: torch.Tensor, stride: int = 1) -> torch.Tensor:
        p = self.store
        return conv3d(x, p[f"{self.prefix}{name}.w"], p[f"{self.prefix}{name}.b"], stride=stride)

    def state_shape(self, shape_zyx) -> tuple[int, int, int]:
        z, y, x = shape_zyx
        for _ in range(self.levels - 1):
            z, y, x = _ceil_half(z), _ceil_half(y), _ceil_half(x)
        return z, y, x

    def initial_state(self, shape_zyx) -> ClstmState | None:
        if not self.use_clstm:
            return None
        return ClstmState.zeros(self.channels[-1], self.state_shape(shape_zyx), dtype=self.store.dtype)

    def step(self, x: torch.Tensor, state: ClstmState | None):
        """One recurrent pass: returns (head output, next state)."""
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        skips = []
        h = x
        for i in range(self.levels - 1):
            h = trace(f"{self.prefix}enc{i}", F.relu(self._conv(f"enc{i}", h)))
            skips.append(h)
            h = F.max_pool3d(h, kernel_size=2, stride=2, ceil_mode=True)
        if self.use_clstm:
            p = self.store
            state = clstm_step(h, state, p[f"{self.prefix}gates.w"], p[f"{self.prefix}gates.b"])
            h = trace(f"{self.prefix}clstm", state.h)
        else:
            h = trace(f"{self.prefix}bot", F.relu(self._conv("bot", h)))
        for i in range(self.levels - 2, -1, -1):
            h = F.interpolate(h, size=skips[i].shape[2:], mode="nearest")
            h = trace(f"{self.prefix}dec{i}", F.relu(self._conv(f"dec{i}", torch.cat([h, skips[i]], dim=1))))
        out = trace(f"{self.prefix}head", self._conv("head", h))
        return out, state
