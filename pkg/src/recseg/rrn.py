"""Recurrent registration branch.

At each of N recurrent steps the network sees the current warped moving image
next to the fixed image, emits a stationary velocity field, integrates it to a
per-step diffeomorphic deformation phi^t, and re-warps:

    x_c^t = x_c^{t-1} o phi^t

so the total deformation is the composition phi^1 o ... o phi^N.  Training is
unsupervised: local NCC similarity plus a smoothness penalty on each step's
displacement.  Labels never enter the registration loss.
"""

from dataclasses import dataclass, fields as dc_fields

import numpy as np
import torch
import torch.nn.functional as F

from . import volume
from .fields import (
    compose_tensor,
    field_to_tensor,
    integrate_tensor,
    tensor_to_field,
    tensor_to_volume,
    volume_to_tensor,
    warp_tensor,
)
from .nn import Adam, ParamStore, backward
from .unet import RecurrentUnet
from .volume import DeformationField, LabelMap, Volume


@dataclass
class RrnConfig:
    steps: int = 8
    lambda_smooth: float = 30.0
    ncc_window: int = 5
    ncc_eps: float = 1e-5
    ncc_squared: bool = False
    channels: tuple = (8, 16, 32)
    squaring_steps: int = 7
    # Reduction of the per-step smoothness sum over difference sites. "mean"
    # (per-voxel) keeps lambda_smooth's balance against the voxel-averaged
    # similarity term independent of volume size; "sum" is the literal
    # per-site total.
    smooth_reduction: str = "mean"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.ncc_window % 2 == 0 or self.ncc_window < 1:
            raise ValueError(f"ncc_window must be odd, got {self.ncc_window}")
        if self.lambda_smooth < 0:
            raise ValueError(f"lambda_smooth must be >= 0, got {self.lambda_smooth}")
        if self.smooth_reduction not in ("mean", "sum"):
            raise ValueError(f"smooth_reduction must be 'mean' or 'sum', got {self.smooth_reduction!r}")
        self.channels = tuple(int(c) for c in self.channels)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)} | {"channels": list(self.channels)}

    @classmethod
    def from_dict(cls, doc: dict, path: str = "rrn") -> "RrnConfig":
        known = {f.name for f in dc_fields(cls)}
        for key in doc:
            if key not in known:
                raise ValueError(f"{path}.{key}: unknown config key")
        return cls(**doc)


class RegistrationNet:
    """U-net with a CLSTM bottleneck emitting per-step velocities; zero-initialized
    flow head, so an untrained network is exactly the identity transform."""

    def __init__(self, cfg: RrnConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        self.params = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        self.net = RecurrentUnet(self.params, rng, in_channels=2, channels=cfg.channels, out_channels=3)

    def initial_state(self, shape_zyx):
        return self.net.initial_state(shape_zyx)

    def step_once(self, x_prev: torch.Tensor, x_cb: torch.Tensor, state):
        """One recurrent registration step: (phi^t, x_c^t, new state)."""
        vel, state = self.net.step(torch.cat([x_prev, x_cb], dim=1), state)
        phi = integrate_tensor(vel, self.cfg.squaring_steps)
        return phi, warp_tensor(x_prev, phi), state

    def save(self, directory):
        self.params.save(directory, hyper={"kind": "rrn", "cfg": self.cfg.to_dict()})

    @classmethod
    def load(cls, directory, dtype: torch.dtype = torch.float32) -> "RegistrationNet":
        store, hyper = ParamStore.load(directory, dtype)
        net = cls(RrnConfig.from_dict(hyper["cfg"]), dtype=dtype)
        net.params.copy_values_from(store)
        return net


@dataclass
class RegistrationTrajectory:
    """Per-step outputs of a full recurrent registration pass (t = 1..N)."""

    fields: list  # DeformationField per step
    warped: list  # Volume, x_c^t
    hidden: list  # np.ndarray (C, Z, Y, X) hidden state per step
    composed: DeformationField
    warped_priors: list | None = None  # Volume, one-hot y_c^t, filled by propagate_label
    warped_labels: list | None = None  # LabelMap per step

    def __len__(self):
        return len(self.fields)


def rrn_forward(x_c: Volume, x_cb: Volume, net: RegistrationNet, y_c: LabelMap | None = None,
                num_classes: int | None = None) -> RegistrationTrajectory:
    """Run the full N-step registration (no gradients); optionally propagate a label."""
    x_c.grid.require_compatible(x_cb.grid)
    if x_c.channels != 1 or x_cb.channels != 1:
        raise ValueError("registration expects single-channel images")
    grid = x_c.grid
    dtype = net.params.dtype
    traj_fields, warped, hidden = [], [], []
    with torch.no_grad():
        xt = volume_to_tensor(x_c, dtype)
        fixed = volume_to_tensor(x_cb, dtype)
        state = net.initial_state(grid.shape_zyx)
        composed = None
        for _ in range(net.cfg.steps):
            phi, xt, state = net.step_once(xt, fixed, state)
            composed = phi if composed is None else compose_tensor(composed, phi)
            traj_fields.append(tensor_to_field(grid, phi))
            warped.append(tensor_to_volume(grid, xt))
            hidden.append(state.h.detach().squeeze(0).cpu().numpy().astype(np.float32))
        traj = RegistrationTrajectory(traj_fields, warped, hidden, tensor_to_field(grid, composed))
    if y_c is not None:
        propagate_label(traj, y_c, num_classes)
    return traj


def propagate_label(traj: RegistrationTrajectory, y_c: LabelMap, num_classes: int | None = None) -> RegistrationTrajectory:
    """Fill traj with progressively warped one-hot priors y_c^t = y_c^{t-1} o phi^t."""
    prior = y_c.one_hot(num_classes)
    priors, labels = [], []
    for phi in traj.fields:
        prior = volume.warp(prior, phi)
        priors.append(prior)
        labels.append(LabelMap(prior.grid, np.argmax(prior.data, axis=0).astype(np.int32)))
    traj.warped_priors = priors
    traj.warped_labels = labels
    return traj


# ---------------------------------------------------------------------------
# losses


def _window_sums(stack: torch.Tensor, window: int) -> torch.Tensor:
    """Per-channel box sums over a centered window, zero-padded at borders.

    The cubic box kernel separates into three axis-aligned passes (exact in
    float64), which is much cheaper than one dense window convolution.
    """
    c = stack.shape[1]
    for axis in range(3):
        shape = [c, 1, 1, 1, 1]
        shape[2 + axis] = window
        kernel = torch.ones(shape, dtype=stack.dtype)
        pad = [0, 0, 0]
        pad[axis] = window // 2
        stack = F.conv3d(stack, kernel, padding=tuple(pad), groups=c)
    return stack


_COUNT_CACHE: dict[tuple, torch.Tensor] = {}


def _window_counts(shape_zyx, window: int) -> torch.Tensor:
    key = (tuple(shape_zyx), window)
    cached = _COUNT_CACHE.get(key)
    if cached is None:
        ones = torch.ones((1, 1) + tuple(shape_zyx), dtype=torch.float64)
        cached = _window_sums(ones, window)
        _COUNT_CACHE[key] = cached
    return cached


def local_ncc_t(a: torch.Tensor, b: torch.Tensor, window: int = 5, eps: float = 1e-5,
                squared: bool = False) -> torch.Tensor:
    """Mean over voxels of NCC in a window centered on each voxel.

    Border windows use only in-volume voxels (zero-padded count correction).
    Accumulation happens in float64; a constant window yields NCC 0 through
    the eps guard rather than 0/0.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd, got {window}")
    if a.shape != b.shape or a.shape[1] != 1:
        raise ValueError(f"expected matching single-channel tensors, got {tuple(a.shape)} vs {tuple(b.shape)}")
    a = a.to(torch.float64)
    b = b.to(torch.float64)
    sums = _window_sums(torch.cat([a, b, a * a, b * b, a * b], dim=1), window)
    count = _window_counts(a.shape[2:], window)
    sa, sb, saa, sbb, sab = sums.split(1, dim=1)
    cross = sab - sa * sb / count
    var_a = (saa - sa * sa / count).clamp_min(0.0)
    var_b = (sbb - sb * sb / count).clamp_min(0.0)
    if squared:
        ncc = cross * cross / (var_a * var_b + eps)
    else:
        ncc = cross / torch.sqrt(var_a * var_b + eps)
    return ncc.mean()


def local_ncc(a: Volume, b: Volume, window: int = 5, eps: float = 1e-5) -> float:
    a.grid.require_compatible(b.grid)
    with torch.no_grad():
        return float(local_ncc_t(volume_to_tensor(a, torch.float64), volume_to_tensor(b, torch.float64),
                                 window=window, eps=eps))


def smoothness_t(disp: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Sum over forward-difference sites of the squared displacement gradient.

    reduction="mean" divides by the voxel count, decoupling the penalty's
    scale from the grid size.
    """
    d = disp.to(torch.float64)
    total = d.new_zeros(())
    for axis in (2, 3, 4):
        n = d.shape[axis]
        if n < 2:
            continue
        diff = d.narrow(axis, 1, n - 1) - d.narrow(axis, 0, n - 1)
        total = total + (diff * diff).sum()
    if reduction == "mean":
        total = total / int(np.prod(disp.shape[2:]))
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def smoothness_loss(traj: RegistrationTrajectory, reduction: str = "sum") -> float:
    """Per-step smoothness of the displacement, averaged over the N steps."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    with torch.no_grad():
        vals = [float(smoothness_t(field_to_tensor(f, torch.float64), reduction)) for f in traj.fields]
    return float(np.mean(vals))


def registration_loss(traj: RegistrationTrajectory, x_cb: Volume, cfg: RrnConfig) -> tuple[float, float, float]:
    """(L_reg, L_sim, L_smooth) over a finished trajectory, for evaluation/logging."""
    if len(traj) != cfg.steps:
        raise ValueError(f"trajectory has {len(traj)} steps, config says {cfg.steps}")
    sims = [local_ncc(w, x_cb, cfg.ncc_window, cfg.ncc_eps) for w in traj.warped]
    l_sim = -float(np.mean(sims))
    l_smooth = smoothness_loss(traj, cfg.smooth_reduction)
    l_reg = l_sim + cfg.lambda_smooth * l_smooth
    if not np.isfinite(l_reg):
        raise FloatingPointError(f"non-finite registration loss: sim={l_sim} smooth={l_smooth}")
    return l_reg, l_sim, l_smooth


def registration_training_step(net: RegistrationNet, x_c_t: torch.Tensor, x_cb_t: torch.Tensor,
                               tbptt_interval: int = 4) -> dict:
    """One unsupervised training iteration: N recurrent steps with truncated
    backpropagation every `tbptt_interval` steps (carried image and CLSTM state
    are detached at segment boundaries; gradients accumulate across segments).

    Returns logged loss floats; the caller applies the optimizer step.
    """
    cfg = net.cfg
    state = net.initial_state(x_c_t.shape[2:])
    x_prev = x_c_t
    segment = None
    sim_total = 0.0
    smooth_total = 0.0
    for t in range(1, cfg.steps + 1):
        phi, x_new, state = net.step_once(x_prev, x_cb_t, state)
        ncc = local_ncc_t(x_new, x_cb_t, cfg.ncc_window, cfg.ncc_eps, squared=cfg.ncc_squared)
        smooth = smoothness_t(phi, cfg.smooth_reduction)
        step_loss = (-ncc + cfg.lambda_smooth * smooth) / cfg.steps
        segment = step_loss if segment is None else segment + step_loss
        sim_total += -float(ncc.detach()) / cfg.steps
        smooth_total += float(smooth.detach()) / cfg.steps
        x_prev = x_new
        if t % tbptt_interval == 0 or t == cfg.steps:
            backward(segment)
            segment = None
            x_prev = x_prev.detach()
            if state is not None:
                state = state.detached()
    l_reg = sim_total + cfg.lambda_smooth * smooth_total
    return {"L_reg": l_reg, "L_sim": sim_total, "L_smooth": smooth_total}


def run_registration_nograd(net: RegistrationNet, x_c_t: torch.Tensor, x_cb_t: torch.Tensor,
                            prior_t: torch.Tensor | None):
    """Frozen-registration rollout for segmentation iterations: returns the
    lists [x_c^0..x_c^N] and [y_c^0..y_c^N] (one-hot priors), no graph."""
    with torch.no_grad():
        xs = [x_c_t]
        priors = None if prior_t is None else [prior_t]
        state = net.initial_state(x_c_t.shape[2:])
        x_prev = x_c_t
        prior_prev = prior_t
        for _ in range(net.cfg.steps):
            phi, x_prev, state = net.step_once(x_prev, x_cb_t, state)
            xs.append(x_prev)
            if prior_t is not None:
                prior_prev = warp_tensor(prior_prev, phi)
                priors.append(prior_prev)
    return xs, priors
