"""Minimal differentiable substrate on top of torch: parameter storage with
seeded initialization, 3D convolution, the convolutional LSTM cell update,
Adam, and the checkpoint format (JSON manifest + raw little-endian f32 blobs
in manifest order).

Everything runs on CPU tensors. Parameters are always initialized from a
numpy PRNG so trajectories are reproducible independent of torch's global
RNG state. float64 is supported throughout for finite-difference checks.
"""

import json
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


class NonFiniteLossError(RuntimeError):
    pass


class NonFiniteIntermediateError(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"first non-finite intermediate: {name}")
        self.name = name


_trace_state = threading.local()


@contextmanager
def detect_nonfinite():
    """While active, trace() raises at the first non-finite intermediate."""
    _trace_state.active = True
    try:
        yield
    finally:
        _trace_state.active = False


def trace(name: str, tensor: torch.Tensor) -> torch.Tensor:
    """Checkpoint for non-finite diagnosis; a no-op unless detect_nonfinite is active."""
    if getattr(_trace_state, "active", False) and not torch.isfinite(tensor).all():
        raise NonFiniteIntermediateError(name)
    return tensor


def backward(loss: torch.Tensor) -> None:
    """Reverse-mode gradient accumulation into .grad of every contributing parameter.

    Truncation boundaries are realized by the callers detaching carried state;
    anything detached is a constant to this backward pass.
    """
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            "loss is non-finite; re-run the forward pass under detect_nonfinite() to locate the first bad intermediate"
        )
    loss.backward()


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named leaf tensors with gradients, plus seeded initializers and checkpoint IO."""

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self._params: dict[str, torch.Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> torch.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        # torch.tensor always copies, so the store owns its values even when
        # the caller's array dtype already matches
        t = torch.tensor(np.ascontiguousarray(value), dtype=self.dtype)
        t.requires_grad_(True)
        self._params[name] = t
        return t

    def add_conv(self, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator, zero: bool = False):
        """Conv kernel + bias, uniform in +-1/sqrt(fan_in); zero=True for layers that
        must start as the identity contribution (flow and logits heads)."""
        fan_in = c_in * k * k * k
        bound = 1.0 / math.sqrt(fan_in)
        wshape = (c_out, c_in, k, k, k)
        if zero:
            w = np.zeros(wshape)
            b = np.zeros(c_out)
        else:
            w = rng.uniform(-bound, bound, size=wshape)
            b = rng.uniform(-bound, bound, size=c_out)
        return self.add(f"{name}.w", w), self.add(f"{name}.b", b)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def assert_finite(self):
        for name, t in self._params.items():
            if not torch.isfinite(t).all():
                raise NonFiniteLossError(f"parameter {name} became non-finite")

    def num_values(self) -> int:
        return sum(t.numel() for t in self._params.values())

    def state_bytes(self) -> bytes:
        """f32 little-endian concatenation in insertion order; used for bit-identity checks."""
        return b"".join(
            t.detach().cpu().numpy().astype("<f4").tobytes() for t in self._params.values()
        )

    def copy_values_from(self, other: "ParamStore"):
        with torch.no_grad():
            for name, t in self._params.items():
                t.copy_(other[name].to(self.dtype))

    # checkpoint format: manifest.json + params.bin (f32 LE blobs in manifest order)

    def save(self, directory, hyper: dict | None = None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": "f32-le",
            "params": [{"name": n, "shape": list(t.shape)} for n, t in self._params.items()],
            "hyper": hyper or {},
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        with open(directory / "params.bin", "wb") as fh:
            for t in self._params.values():
                fh.write(t.detach().cpu().numpy().astype("<f4").tobytes())

    @classmethod
    def load(cls, directory, dtype: torch.dtype = torch.float32) -> tuple["ParamStore", dict]:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = (directory / "params.bin").read_bytes()
        store = cls(dtype)
        offset = 0
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
            store.add(entry["name"], arr.astype(np.float32))
            offset += 4 * n
        if offset != len(blob):
            raise ValueError(f"{directory}: params.bin length {len(blob)} does not match manifest ({offset})")
        return store, manifest.get("hyper", {})


# ---------------------------------------------------------------------------
# ops


def conv3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1) -> torch.Tensor:
    """Cross-correlation with same-style zero padding; output dims = ceil(input/stride).

    Kernel spatial size must be odd.
    """
    k = weight.shape[-1]
    if k % 2 == 0 or weight.shape[-2] != k or weight.shape[-3] != k:
        raise ValueError(f"kernel must be cubic with odd size, got {tuple(weight.shape[-3:])}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs kernel {weight.shape[1]}")
    return F.conv3d(x, weight, bias, stride=stride, padding=k // 2)


@dataclass
class ClstmState:
    """Hidden and cell activations of one convolutional LSTM unit."""

    h: torch.Tensor
    c: torch.Tensor

    @classmethod
    def zeros(cls, channels: int, shape_zyx, dtype=torch.float32) -> "ClstmState":
        z = torch.zeros((1, channels) + tuple(shape_zyx), dtype=dtype)
        return cls(z, z.clone())

    def detached(self) -> "ClstmState":
        return ClstmState(self.h.detach(), self.c.detach())


def clstm_step(x: torch.Tensor, state: ClstmState, w_gates: torch.Tensor, b_gates: torch.Tensor) -> ClstmState:
    """One convolutional LSTM update.

    Gate pre-activations are a single convolution over the concatenated
    (input, hidden) channels producing 4x hidden channels, split in order
    (forget, input, candidate, output):

        f = sigmoid(W_xf*x + W_hf*h + b_f)      i = sigmoid(.)
        g = tanh(.)                             o = sigmoid(.)
        c' = f . c + i . g                      h' = o . tanh(c')
    """
    if x.shape[2:] != state.h.shape[2:]:
        raise ValueError(f"input {tuple(x.shape)} and hidden state {tuple(state.h.shape)} shapes differ")
    gates = conv3d(torch.cat([x, state.h], dim=1), w_gates, b_gates)
    f, i, g, o = gates.chunk(4, dim=1)
    f = torch.sigmoid(f)
    i = torch.sigmoid(i)
    g = torch.tanh(g)
    o = torch.sigmoid(o)
    c = f * state.c + i * g
    h = o * torch.tanh(c)
    return ClstmState(h, c)


class Adam:
    """Adam with bias correction; moment buffers live here, one per parameter."""

    def __init__(self, store: ParamStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in store.items()}
        self.v = {n: torch.zeros_like(p) for n, p in store.items()}

    @torch.no_grad()
    def step(self, lr: float):
        for name, p in self.store.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteLossError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name].mul_(b1).add_(g, alpha=1 - b1)
            v = self.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.add_(-lr * m_hat / (v_hat.sqrt() + self.eps))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        doc = {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        (directory / "adam.json").write_text(json.dumps(doc))
        for fname, buf in (("adam_m.bin", self.m), ("adam_v.bin", self.v)):
            with open(directory / fname, "wb") as fh:
                for name in self.store.names():
                    fh.write(buf[name].cpu().numpy().astype("<f4").tobytes())

    def load(self, directory):
        directory = Path(directory)
        doc = json.loads((directory / "adam.json").read_text())
        self.t = int(doc["t"])
        for fname, buf in (("adam_m.bin", self.m), ("adam_v.bin", self.v)):
            blob = (directory / fname).read_bytes()
            offset = 0
            for name in self.store.names():
                t = buf[name]
                n = t.numel()
                arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(tuple(t.shape))
                with torch.no_grad():
                    t.copy_(torch.from_numpy(arr.astype(np.float32)))
                offset += 4 * n


def adam_step(store: ParamStore, opt: Adam, lr: float):
    """Apply one Adam update to every parameter with a populated gradient."""
    if opt.store is not store:
        raise ValueError("optimizer is bound to a different ParamStore")
    opt.step(lr)


def set_deterministic():
    """Single-threaded execution for bit-identical runs."""
    torch.set_num_threads(1)
