"""Recurrent segmentation branch.

Runs N+1 recurrent steps over the fixed image fused with progressively warped
priors from the registration branch: step 0 sees the undeformed moving image
and its label (a weak prior), step t >= 1 sees the step-t warped versions.
Input channels are (context image x_c^t, one-hot shape prior y_c^t, fixed
image x_cb), each removable for ablations; the CLSTM bottleneck and the OHEM /
deep-supervision pieces of the loss can likewise be switched off.

The hard-voxel loss keeps gradients only at voxels whose true-class
probability falls below tau, padded up to a minimum count so late training
never starves.
"""

import math
from dataclasses import dataclass, fields as dc_fields

import numpy as np
import torch
import torch.nn.functional as F

from .fields import volume_to_tensor
from .nn import ParamStore, backward
from .rrn import RegistrationTrajectory, propagate_label
from .unet import RecurrentUnet
from .volume import LabelMap, Volume

_LOG_CLAMP = 1e-12


@dataclass
class RsnConfig:
    steps: int = 8  # N, shared with the registration branch; the net runs N+1 passes
    num_classes: int = 2
    tau: float = 0.7
    k_min: int | None = None  # None -> max(64, 1% of voxels); paper-scale value 10000
    step_weighting: str = "uniform"  # or "linear": w_t = t/(N+1)
    channels: tuple = (8, 16, 32)
    use_shape_prior: bool = True
    use_context: bool = True
    use_clstm: bool = True
    use_ohem: bool = True
    deep_supervision: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.k_min is not None and self.k_min < 0:
            raise ValueError(f"k_min must be >= 0, got {self.k_min}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.step_weighting not in ("uniform", "linear"):
            raise ValueError(f"step_weighting must be 'uniform' or 'linear', got {self.step_weighting!r}")
        self.channels = tuple(int(c) for c in self.channels)

    @property
    def in_channels(self) -> int:
        return int(self.use_context) + int(self.use_shape_prior) * self.num_classes + 1

    def resolved_k_min(self, num_voxels: int) -> int:
        if self.k_min is not None:
            return self.k_min
        return max(64, math.ceil(0.01 * num_voxels))

    def step_weight(self, t: int) -> float:
        if not self.deep_supervision:
            return 1.0 if t == self.steps else 0.0
        if self.step_weighting == "linear":
            return t / (self.steps + 1)
        return 1.0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)} | {"channels": list(self.channels)}

    @classmethod
    def from_dict(cls, doc: dict, path: str = "rsn") -> "RsnConfig":
        known = {f.name for f in dc_fields(cls)}
        for key in doc:
            if key not in known:
                raise ValueError(f"{path}.{key}: unknown config key")
        return cls(**doc)


class SegmentationNet:
    def __init__(self, cfg: RsnConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        self.params = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        # zero-initialized logits head: untrained output is a uniform softmax
        self.net = RecurrentUnet(
            self.params, rng, in_channels=cfg.in_channels, channels=cfg.channels,
            out_channels=cfg.num_classes, use_clstm=cfg.use_clstm,
        )

    def initial_state(self, shape_zyx):
        return self.net.initial_state(shape_zyx)

    def build_input(self, x_c_t: torch.Tensor | None, prior_t: torch.Tensor | None,
                    x_cb_t: torch.Tensor) -> torch.Tensor:
        parts = []
        if self.cfg.use_context:
            parts.append(x_c_t)
        if self.cfg.use_shape_prior:
            parts.append(prior_t)
        parts.append(x_cb_t)
        return torch.cat(parts, dim=1)

    def step(self, x: torch.Tensor, state):
        return self.net.step(x, state)

    def save(self, directory):
        self.params.save(directory, hyper={"kind": "rsn", "cfg": self.cfg.to_dict()})

    @classmethod
    def load(cls, directory, dtype: torch.dtype = torch.float32) -> "SegmentationNet":
        store, hyper = ParamStore.load(directory, dtype)
        net = cls(RsnConfig.from_dict(hyper["cfg"]), dtype=dtype)
        net.params.copy_values_from(store)
        return net


@dataclass
class SegmentationTrajectory:
    """Per-step softmax probabilities and decoded labels, t = 0..N."""

    probs: list  # Volume with num_classes channels
    labels: list  # LabelMap
    hidden: list  # np.ndarray per step (empty entries when the bottleneck is stateless)

    def __len__(self):
        return len(self.probs)


def rsn_forward(x_cb: Volume, traj: RegistrationTrajectory | None, x_c: Volume, y_c: LabelMap,
                net: SegmentationNet) -> SegmentationTrajectory:
    """Full N+1-step segmentation pass (no gradients)."""
    cfg = net.cfg
    x_cb.grid.require_compatible(x_c.grid)
    x_cb.grid.require_compatible(y_c.grid)
    n_reg_steps = 0 if traj is None else len(traj)
    if n_reg_steps != cfg.steps:
        raise ValueError(f"registration trajectory has {n_reg_steps} steps, segmentation config expects {cfg.steps}")
    if traj is not None and traj.warped_priors is None:
        propagate_label(traj, y_c, cfg.num_classes)
    dtype = net.params.dtype
    grid = x_cb.grid
    with torch.no_grad():
        x_cb_t = volume_to_tensor(x_cb, dtype)
        xs = [volume_to_tensor(x_c, dtype)]
        priors = [volume_to_tensor(y_c.one_hot(cfg.num_classes), dtype)]
        if traj is not None:
            xs += [volume_to_tensor(v, dtype) for v in traj.warped]
            priors += [volume_to_tensor(v, dtype) for v in traj.warped_priors]
        state = net.initial_state(grid.shape_zyx)
        probs, labels, hidden = [], [], []
        for t in range(cfg.steps + 1):
            logits, state = net.step(net.build_input(xs[t], priors[t], x_cb_t), state)
            p = torch.softmax(logits, dim=1).squeeze(0).cpu().numpy().astype(np.float32)
            probs.append(Volume(grid, p))
            labels.append(LabelMap(grid, np.argmax(p, axis=0).astype(np.int32)))
            hidden.append(
                state.h.detach().squeeze(0).cpu().numpy().astype(np.float32)
                if state is not None else np.zeros((0,), dtype=np.float32)
            )
    return SegmentationTrajectory(probs, labels, hidden)


# ---------------------------------------------------------------------------
# hard-example selection and losses


def ohem_select(p_true: np.ndarray, tau: float, k_min: int) -> np.ndarray:
    """Indices (into the flattened array, ascending) of the hard voxels.

    All voxels with p_true < tau; padded to k_min by lowest probability, ties
    broken toward the lowest linear index; capped at the total voxel count.
    """
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    if k_min < 0:
        raise ValueError(f"k_min must be >= 0, got {k_min}")
    flat = np.asarray(p_true).reshape(-1)
    idx = np.flatnonzero(flat < tau)
    if idx.size < k_min:
        k = min(k_min, flat.size)
        order = np.argsort(flat, kind="stable")[:k]
        idx = np.sort(order)
    return idx.astype(np.int64)


def ohem_select_t(p_true_flat: torch.Tensor, tau: float, k_min: int) -> torch.Tensor:
    hard = (p_true_flat < tau).nonzero(as_tuple=True)[0]
    if hard.numel() < k_min:
        k = min(k_min, p_true_flat.numel())
        order = torch.argsort(p_true_flat, stable=True)[:k]
        hard = torch.sort(order).values
    return hard


def _true_class_logp(prob_data: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label ids outside [0, {num_classes}) in reference")
    p = np.take_along_axis(prob_data.astype(np.float64), labels[None].astype(np.int64), axis=0)[0]
    return np.log(np.clip(p, _LOG_CLAMP, None))


def deep_supervision_loss(seg_traj: SegmentationTrajectory, y_ref: LabelMap, cfg: RsnConfig) -> float:
    """Step-weighted sum of mean voxel-wise cross-entropy against the reference."""
    if len(seg_traj) != cfg.steps + 1:
        raise ValueError(f"trajectory has {len(seg_traj)} steps, expected {cfg.steps + 1}")
    total = 0.0
    for t, p in enumerate(seg_traj.probs):
        p.grid.require_compatible(y_ref.grid)
        logp = _true_class_logp(p.data, y_ref.data, cfg.num_classes)
        total += cfg.step_weight(t) * float(-logp.mean())
    return total


def ohem_loss(seg_traj: SegmentationTrajectory, y_ref: LabelMap, cfg: RsnConfig) -> float:
    """Deep-supervised cross-entropy restricted per step to the hard-voxel set
    (mean over selected voxels; an empty selection contributes 0)."""
    if len(seg_traj) != cfg.steps + 1:
        raise ValueError(f"trajectory has {len(seg_traj)} steps, expected {cfg.steps + 1}")
    total = 0.0
    for t, p in enumerate(seg_traj.probs):
        p.grid.require_compatible(y_ref.grid)
        logp = _true_class_logp(p.data, y_ref.data, cfg.num_classes)
        selected = ohem_select(np.exp(logp), cfg.tau, cfg.resolved_k_min(logp.size))
        if selected.size == 0:
            continue
        total += cfg.step_weight(t) * float(-logp.reshape(-1)[selected].mean())
    return total


def _step_ce_t(logits: torch.Tensor, y_ref_t: torch.Tensor, cfg: RsnConfig) -> torch.Tensor:
    logp = F.log_softmax(logits.to(torch.float64), dim=1)
    lp_true = torch.gather(logp, 1, y_ref_t.unsqueeze(1)).flatten()
    if not cfg.use_ohem:
        return -lp_true.mean()
    with torch.no_grad():
        selected = ohem_select_t(lp_true.exp(), cfg.tau, cfg.resolved_k_min(lp_true.numel()))
    if selected.numel() == 0:
        return lp_true.sum() * 0.0
    return -lp_true[selected].mean()


def segmentation_training_step(net: SegmentationNet, x_cb_t: torch.Tensor, xc_steps: list,
                               prior_steps: list, y_ref_t: torch.Tensor,
                               tbptt_interval: int = 4) -> dict:
    """One supervised training iteration over N+1 recurrent steps with TBPTT.

    xc_steps / prior_steps hold the frozen registration rollout (t = 0..N);
    gradients reach only the segmentation parameters.
    """
    cfg = net.cfg
    n_steps = cfg.steps + 1
    if len(xc_steps) != n_steps or len(prior_steps) != n_steps:
        raise ValueError(f"need {n_steps} per-step inputs, got {len(xc_steps)}/{len(prior_steps)}")
    if int(y_ref_t.max()) >= cfg.num_classes or int(y_ref_t.min()) < 0:
        raise ValueError(f"label ids outside [0, {cfg.num_classes})")
    state = net.initial_state(x_cb_t.shape[2:])
    segment = None
    total = 0.0
    for t in range(n_steps):
        logits, state = net.step(net.build_input(xc_steps[t], prior_steps[t], x_cb_t), state)
        w = cfg.step_weight(t)
        if w != 0.0:
            step_loss = w * _step_ce_t(logits, y_ref_t, cfg)
            segment = step_loss if segment is None else segment + step_loss
            total += float(step_loss.detach())
        if (t + 1) % tbptt_interval == 0 or t == n_steps - 1:
            if segment is not None:
                backward(segment)
                segment = None
            if state is not None:
                state = state.detached()
    return {"L_seg_ohem": total}
