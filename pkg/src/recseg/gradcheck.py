"""Finite-difference verification of every differentiable building block and
of the end-to-end training losses.

All checks run in float64 on tiny volumes. Central differences with step eps
are compared entrywise against autograd; the relative error
|a - f| / max(|a|, |f|) must stay within tolerance, entries where both sides
are below 1e-9 are treated as agreeing zeros. Nondifferentiable seams are
kept away from the probe points: warp displacements are bounded away from
voxel-boundary crossings, and hard-voxel selections are frozen while probing
(the loss is piecewise smooth in the selection; the selection itself is
locally constant almost everywhere).
"""

import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .nn import ClstmState, ParamStore, clstm_step, conv3d
from .rrn import RegistrationNet, RrnConfig, local_ncc_t, smoothness_t
from .rsn import RsnConfig, SegmentationNet, ohem_select_t

DEFAULT_EPS = 1e-3
DEFAULT_TOL = 1e-3
_ZERO_TOL = 1e-9


@dataclass
class OpResult:
    name: str
    max_rel_err: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def max_rel_error(loss_fn, tensors: dict, eps: float, rng: np.random.Generator,
                  max_entries: int | None = None, corrupt: bool = False) -> float:
    """Worst relative disagreement between autograd and central differences
    over (a sample of) the entries of every tensor in `tensors`."""
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)).reshape(-1)
        for name, t in tensors.items()
    }
    if corrupt:
        first = next(iter(analytic))
        analytic[first][0] += 0.5
    worst = 0.0
    for name, t in tensors.items():
        flat = t.detach().reshape(-1)
        n = flat.numel()
        if max_entries is None or n <= max_entries:
            indices = range(n)
        else:
            indices = sorted(int(i) for i in rng.choice(n, size=max_entries, replace=False))
        for i in indices:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + eps
            f_plus = float(loss_fn())
            with torch.no_grad():
                flat[i] = orig - eps
            f_minus = float(loss_fn())
            with torch.no_grad():
                flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name][i])
            if abs(a) < _ZERO_TOL and abs(fd) < _ZERO_TOL:
                continue
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd)))
    return worst


def _leaf(rng: np.random.Generator, shape, scale=1.0, offset=0.0) -> torch.Tensor:
    t = torch.from_numpy(rng.standard_normal(shape) * scale + offset)
    t.requires_grad_(True)
    return t


def _proj(rng: np.random.Generator, shape) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape))


def _bounded_disp(rng: np.random.Generator, shape) -> torch.Tensor:
    """Displacements with |value| in [0.05, 0.42]: probe points never cross a
    voxel boundary or a border-clamp kink within the FD step."""
    mag = rng.uniform(0.05, 0.42, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    t = torch.from_numpy(mag * sign)
    t.requires_grad_(True)
    return t


def _jitter_params(store: ParamStore, rng: np.random.Generator, scale=0.05):
    """Move all parameters off their init point (zero-init heads would otherwise
    block gradient flow upstream and make the check vacuous)."""
    with torch.no_grad():
        for _, t in store.items():
            t.add_(torch.from_numpy(rng.uniform(-scale, scale, size=tuple(t.shape))).to(t.dtype))


# ---------------------------------------------------------------------------
# individual op checks; each returns (loss_fn, tensors, max_entries)


def _check_conv3d(rng):
    x = _leaf(rng, (1, 2, 4, 4, 4))
    w = _leaf(rng, (3, 2, 3, 3, 3), scale=0.4)
    b = _leaf(rng, (3,), scale=0.2)
    proj = _proj(rng, (1, 3, 4, 4, 4))
    return (lambda: (conv3d(x, w, b) * proj).sum()), {"x": x, "w": w, "b": b}, None


def _check_clstm(rng):
    x = _leaf(rng, (1, 2, 4, 4, 4))
    h = _leaf(rng, (1, 3, 4, 4, 4), scale=0.5)
    c = _leaf(rng, (1, 3, 4, 4, 4), scale=0.5)
    w = _leaf(rng, (12, 5, 3, 3, 3), scale=0.3)
    b = _leaf(rng, (12,), scale=0.1)
    ph = _proj(rng, (1, 3, 4, 4, 4))
    pc = _proj(rng, (1, 3, 4, 4, 4))

    def loss():
        out = clstm_step(x, ClstmState(h, c), w, b)
        return (out.h * ph).sum() + (out.c * pc).sum()

    return loss, {"x": x, "h": h, "c": c, "w": w, "b": b}, 120


def _check_warp(rng):
    from .fields import warp_tensor

    img = _leaf(rng, (1, 1, 6, 6, 6))
    disp = _bounded_disp(rng, (1, 3, 6, 6, 6))
    proj = _proj(rng, (1, 1, 6, 6, 6))
    return (lambda: (warp_tensor(img, disp) * proj).sum()), {"img": img, "disp": disp}, 160


def _check_local_ncc(rng):
    a = _leaf(rng, (1, 1, 6, 6, 6), offset=0.5)
    b = _leaf(rng, (1, 1, 6, 6, 6), offset=0.5)
    return (lambda: local_ncc_t(a, b, window=5)), {"a": a, "b": b}, 120


def _check_smoothness(rng):
    disp = _leaf(rng, (1, 3, 5, 5, 5), scale=0.5)
    return (
        lambda: smoothness_t(disp, "mean") + 0.5 * smoothness_t(disp, "sum")
    ), {"disp": disp}, None


def _check_ohem(rng):
    logits = _leaf(rng, (1, 2, 5, 5, 5))
    y = torch.from_numpy(rng.integers(0, 2, size=(1, 5, 5, 5)))
    with torch.no_grad():
        lp0 = F.log_softmax(logits, dim=1)
        p_true0 = torch.gather(lp0, 1, y.unsqueeze(1)).flatten().exp()
        frozen = ohem_select_t(p_true0, tau=0.7, k_min=20)

    def loss():
        lp = F.log_softmax(logits, dim=1)
        lp_true = torch.gather(lp, 1, y.unsqueeze(1)).flatten()
        return -lp_true[frozen].mean()

    return loss, {"logits": logits}, None


def _check_e2e_registration(rng):
    cfg = RrnConfig(steps=2, channels=(3, 4), lambda_smooth=0.5, squaring_steps=4, ncc_window=5)
    net = RegistrationNet(cfg, seed=int(rng.integers(1 << 31)), dtype=torch.float64)
    _jitter_params(net.params, rng)
    x_c = _leaf(rng, (1, 1, 8, 8, 8), scale=0.3, offset=0.5).detach()
    x_cb = _leaf(rng, (1, 1, 8, 8, 8), scale=0.3, offset=0.5).detach()

    def loss():
        state = net.initial_state((8, 8, 8))
        x_prev = x_c
        total = None
        for _ in range(cfg.steps):
            phi, x_prev, state = net.step_once(x_prev, x_cb, state)
            ncc = local_ncc_t(x_prev, x_cb, cfg.ncc_window, cfg.ncc_eps)
            step = (-ncc + cfg.lambda_smooth * smoothness_t(phi, cfg.smooth_reduction)) / cfg.steps
            total = step if total is None else total + step
        return total

    tensors = {name: t for name, t in net.params.items()}
    return loss, tensors, 6


def _check_e2e_segmentation(rng):
    cfg = RsnConfig(steps=2, channels=(3, 4), num_classes=2, k_min=512, tau=0.7,
                    step_weighting="uniform")
    net = SegmentationNet(cfg, seed=int(rng.integers(1 << 31)), dtype=torch.float64)
    _jitter_params(net.params, rng)
    shape = (8, 8, 8)
    x_cb = _leaf(rng, (1, 1) + shape, scale=0.3, offset=0.5).detach()
    xc_steps = [_leaf(rng, (1, 1) + shape, scale=0.3, offset=0.5).detach() for _ in range(3)]
    prior_steps = [torch.softmax(_leaf(rng, (1, 2) + shape).detach(), dim=1) for _ in range(3)]
    y = torch.from_numpy(rng.integers(0, 2, size=(1,) + shape))

    def loss():
        # k_min covers every voxel, so the hard-voxel set is all of them and
        # the objective is smooth in the logits
        state = net.initial_state(shape)
        total = None
        for t in range(cfg.steps + 1):
            logits, state = net.step(net.build_input(xc_steps[t], prior_steps[t], x_cb), state)
            lp = F.log_softmax(logits, dim=1)
            step = -torch.gather(lp, 1, y.unsqueeze(1)).mean() * cfg.step_weight(t)
            total = step if total is None else total + step
        return total

    tensors = {name: t for name, t in net.params.items()}
    return loss, tensors, 6


_CHECKS = [
    ("conv3d", _check_conv3d),
    ("clstm_step", _check_clstm),
    ("warp", _check_warp),
    ("local_ncc", _check_local_ncc),
    ("smoothness", _check_smoothness),
    ("ohem", _check_ohem),
    ("e2e_registration", _check_e2e_registration),
    ("e2e_segmentation", _check_e2e_segmentation),
]


def run_all(seed: int = 0, eps: float = DEFAULT_EPS, tolerance: float = DEFAULT_TOL,
            corrupt: str | None = None) -> list[OpResult]:
    """Run every check; `corrupt` injects an error into the named op's analytic
    gradient (a self-test hook for the failure path)."""
    torch.set_default_dtype(torch.float64)
    try:
        results = []
        for op_index, (name, build) in enumerate(_CHECKS):
            rng = np.random.default_rng((seed, op_index))
            start = time.perf_counter()
            loss_fn, tensors, max_entries = build(rng)
            err = max_rel_error(loss_fn, tensors, eps, rng, max_entries, corrupt=(corrupt == name))
            results.append(OpResult(name, err, tolerance, time.perf_counter() - start))
        return results
    finally:
        torch.set_default_dtype(torch.float32)


def format_table(results: list[OpResult]) -> str:
    lines = [f"{'op':<20} {'max rel err':>12} {'time':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.max_rel_err:>12.3e} {r.seconds:>7.2f}s  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
