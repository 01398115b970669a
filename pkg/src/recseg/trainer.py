"""Alternating one-shot training of the registration and segmentation branches.

Each epoch builds a shuffled list of iterations: one registration iteration
per training pair, plus segmentation iterations referencing the labeled
exemplar (replicated to ceil(ratio * K)). A registration iteration updates
only the registration parameters with the unsupervised loss; a segmentation
iteration rolls the registration branch forward frozen (no gradients) and
updates only the segmentation parameters. The two parameter sets are never
touched in the same iteration.

Determinism contract: per-epoch shuffling comes from a PRNG keyed on
(seed, epoch), optimizers are checkpointed with the parameters, and execution
is single-threaded — identical seed and config reproduce checkpoints and loss
logs byte for byte, including across an interrupt/resume.
"""

import json
import math
import shutil
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np
import torch

from . import rvf
from .errors import ManifestError
from .fields import volume_to_tensor
from .nn import Adam, NonFiniteLossError, adam_step, set_deterministic
from .rrn import RegistrationNet, RrnConfig, registration_training_step, run_registration_nograd
from .rsn import RsnConfig, SegmentationNet, segmentation_training_step


@dataclass
class TrainConfig:
    mode: str = "one_shot"  # or "full_shot"
    schedule: str = "joint_alternating"  # or "two_step"
    epochs: int = 60
    replication_ratio: float = 0.1
    seed: int = 0
    lr: float = 2e-4
    tbptt_interval: int = 4
    log_interval: int = 1  # every iteration at desk scale; 500 reproduces sparse logging
    checkpoint_interval: int = 1  # epochs between checkpoints (the final epoch always saves)

    def __post_init__(self):
        if self.mode not in ("one_shot", "full_shot"):
            raise ValueError(f"mode must be 'one_shot' or 'full_shot', got {self.mode!r}")
        if self.schedule not in ("joint_alternating", "two_step"):
            raise ValueError(f"schedule must be 'joint_alternating' or 'two_step', got {self.schedule!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.replication_ratio <= 1:
            raise ValueError(f"replication_ratio must be in (0, 1], got {self.replication_ratio}")
        if self.tbptt_interval < 1:
            raise ValueError(f"tbptt_interval must be >= 1, got {self.tbptt_interval}")
        if self.log_interval < 1 or self.checkpoint_interval < 1:
            raise ValueError("log_interval and checkpoint_interval must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_dict(cls, doc: dict, path: str = "train") -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        for key in doc:
            if key not in known:
                raise ValueError(f"{path}.{key}: unknown config key")
        return cls(**doc)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Flat for the first half of the epochs, then linear decay to 0."""
    half = cfg.epochs // 2
    if epoch < half:
        return cfg.lr
    return cfg.lr * max(0.0, 1.0 - (epoch - half) / (cfg.epochs - half))


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class CaseEntry:
    id: str
    split: str
    x_c: Path
    x_cb: Path
    y_c: Path
    y_cb: Path | None = None
    gt_field: Path | None = None
    keypoints: Path | None = None
    exemplar: bool = False
    week: int | None = None
    tags: dict = field(default_factory=dict)


class DatasetManifest:
    """JSON listing of cases with file paths (relative to the manifest)."""

    def __init__(self, cases: list[CaseEntry], path: Path | None = None):
        self.cases = cases
        self.path = path
        # audit trail for the one-shot contract: which target-domain labels
        # the training loss actually read
        self.loaded_cbct_labels: set[str] = set()

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ManifestError(f"{path}: cannot read manifest: {e}") from e
        root = path.parent / doc.get("root", ".")
        cases = []
        seen = set()
        for i, row in enumerate(doc.get("cases", [])):
            for key in ("id", "split", "x_c", "x_cb", "y_c"):
                if key not in row:
                    raise ManifestError(f"{path}: cases[{i}] missing {key!r}")
            if row["id"] in seen:
                raise ManifestError(f"{path}: duplicate case id {row['id']!r}")
            seen.add(row["id"])
            if row["split"] not in ("train", "test"):
                raise ManifestError(f"{path}: cases[{i}].split must be 'train' or 'test'")
            cases.append(CaseEntry(
                id=row["id"], split=row["split"],
                x_c=root / row["x_c"], x_cb=root / row["x_cb"], y_c=root / row["y_c"],
                y_cb=(root / row["y_cb"]) if row.get("y_cb") else None,
                gt_field=(root / row["gt_field"]) if row.get("gt_field") else None,
                keypoints=(root / row["keypoints"]) if row.get("keypoints") else None,
                exemplar=bool(row.get("exemplar", False)),
                week=row.get("week"),
                tags=row.get("tags", {}),
            ))
        if not cases:
            raise ManifestError(f"{path}: manifest lists no cases")
        return cls(cases, path)

    def split(self, which: str) -> list[CaseEntry]:
        return [c for c in self.cases if c.split == which]

    def validate_for(self, cfg: TrainConfig):
        train = self.split("train")
        if not train:
            raise ManifestError("manifest has no training cases")
        if cfg.mode == "one_shot":
            n_ex = sum(c.exemplar for c in train)
            if n_ex != 1:
                raise ManifestError(f"one_shot mode needs exactly 1 exemplar training case, found {n_ex}")
            ex = next(c for c in train if c.exemplar)
            if ex.y_cb is None:
                raise ManifestError(f"exemplar case {ex.id!r} has no target-domain label")
        else:
            missing = [c.id for c in train if c.y_cb is None]
            if missing:
                raise ManifestError(f"full_shot mode needs labels on every training case; missing: {missing}")

    def load_cbct_label(self, case: CaseEntry):
        if case.y_cb is None:
            raise ManifestError(f"case {case.id!r} has no target-domain label")
        self.loaded_cbct_labels.add(case.id)
        return rvf.read_label(case.y_cb)


def labeled_training_cases(manifest: DatasetManifest, cfg: TrainConfig) -> list[CaseEntry]:
    train = manifest.split("train")
    if cfg.mode == "one_shot":
        return [c for c in train if c.exemplar]
    return [c for c in train if c.y_cb is not None]


def build_iteration_list(manifest: DatasetManifest, cfg: TrainConfig, epoch: int) -> list[tuple[str, str]]:
    """Shuffled (kind, case_id) list for one epoch: one 'reg' per training pair
    and ceil(ratio * K) 'seg' iterations per labeled case."""
    train = manifest.split("train")
    labeled = labeled_training_cases(manifest, cfg)
    if not labeled:
        raise ManifestError("no labeled training case available for segmentation iterations")
    reps = math.ceil(cfg.replication_ratio * len(train))
    items = [("reg", c.id) for c in train]
    for c in labeled:
        items += [("seg", c.id)] * reps
    rng = np.random.default_rng((cfg.seed, epoch))
    rng.shuffle(items)
    return items


def replicate_exemplar(manifest: DatasetManifest, ratio: float, seed: int = 0, epoch: int = 0) -> list[tuple[str, str]]:
    """One-shot iteration plan (registration pairs + replicated exemplar), shuffled."""
    cfg = TrainConfig(mode="one_shot", replication_ratio=ratio, seed=seed)
    manifest.validate_for(cfg)
    return build_iteration_list(manifest, cfg, epoch)


# ---------------------------------------------------------------------------
# training loop


class _CaseCache:
    """Loads each case's volumes once and keeps them as tensors."""

    def __init__(self, manifest: DatasetManifest, num_classes: int):
        self.manifest = manifest
        self.num_classes = num_classes
        self.by_id = {c.id: c for c in manifest.cases}
        self._images: dict[str, tuple] = {}
        self._labels: dict[str, tuple] = {}

    def images(self, case_id: str):
        if case_id not in self._images:
            c = self.by_id[case_id]
            x_c = rvf.read_volume(c.x_c)
            x_cb = rvf.read_volume(c.x_cb)
            x_c.grid.require_compatible(x_cb.grid)
            self._images[case_id] = (volume_to_tensor(x_c), volume_to_tensor(x_cb), x_c.grid)
        return self._images[case_id]

    def seg_tensors(self, case_id: str):
        """(one-hot source prior, target reference labels) for a labeled case."""
        if case_id not in self._labels:
            c = self.by_id[case_id]
            y_c = rvf.read_label(c.y_c)
            y_cb = self.manifest.load_cbct_label(c)
            prior0 = volume_to_tensor(y_c.one_hot(self.num_classes))
            y_ref = torch.from_numpy(y_cb.data.astype(np.int64)).unsqueeze(0)
            self._labels[case_id] = (prior0, y_ref)
        return self._labels[case_id]


class TrainingAborted(RuntimeError):
    def __init__(self, checkpoint: Path, cause: Exception):
        super().__init__(f"training aborted on non-finite loss; last finite state saved to {checkpoint}")
        self.checkpoint = checkpoint
        self.cause = cause


_LOG_KEYS = ("L_reg", "L_sim", "L_smooth", "L_seg_ohem")


class _Run:
    """Mutable state of one training run plus checkpoint/log plumbing."""

    def __init__(self, out_dir, rrn_net, rsn_net, train_cfg):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.rrn = rrn_net
        self.rsn = rsn_net
        self.cfg = train_cfg
        self.adam_g = Adam(rrn_net.params)
        self.adam_s = Adam(rsn_net.params)
        self.global_iter = 0
        self.log_path = self.out / "loss_log.ndjson"
        self._log_fh = None

    def log(self, record: dict):
        if self._log_fh is None:
            self._log_fh = open(self.log_path, "a")
        self._log_fh.write(json.dumps(record) + "\n")
        self._log_fh.flush()

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    def save_checkpoint(self, name: str, state: dict) -> Path:
        ckpt = self.out / name
        if ckpt.exists():
            shutil.rmtree(ckpt)
        self.rrn.save(ckpt / "rrn")
        self.adam_g.save(ckpt / "rrn")
        self.rsn.save(ckpt / "rsn")
        self.adam_s.save(ckpt / "rsn")
        (ckpt / "state.json").write_text(json.dumps(state | {"global_iter": self.global_iter}, indent=2))
        return ckpt

    def load_checkpoint(self, ckpt) -> dict:
        ckpt = Path(ckpt)
        rrn_store, _ = type(self.rrn.params).load(ckpt / "rrn", self.rrn.params.dtype)
        self.rrn.params.copy_values_from(rrn_store)
        self.adam_g.load(ckpt / "rrn")
        rsn_store, _ = type(self.rsn.params).load(ckpt / "rsn", self.rsn.params.dtype)
        self.rsn.params.copy_values_from(rsn_store)
        self.adam_s.load(ckpt / "rsn")
        state = json.loads((ckpt / "state.json").read_text())
        self.global_iter = int(state["global_iter"])
        return state

    def run_iteration(self, kind: str, case_id: str, cache: _CaseCache, lr: float):
        x_c_t, x_cb_t, _ = cache.images(case_id)
        if kind == "reg":
            self.rrn.params.zero_grad()
            losses = registration_training_step(self.rrn, x_c_t, x_cb_t, self.cfg.tbptt_interval)
            adam_step(self.rrn.params, self.adam_g, lr)
        else:
            prior0, y_ref = cache.seg_tensors(case_id)
            xs, priors = run_registration_nograd(self.rrn, x_c_t, x_cb_t, prior0)
            self.rsn.params.zero_grad()
            losses = segmentation_training_step(self.rsn, x_cb_t, xs, priors, y_ref, self.cfg.tbptt_interval)
            adam_step(self.rsn.params, self.adam_s, lr)
        self.global_iter += 1
        if self.global_iter % self.cfg.log_interval == 0:
            record = {"iter": self.global_iter}
            record |= {k: losses.get(k) for k in _LOG_KEYS}
            record["lr"] = lr
            self.log(record)


def _run_epochs(run: _Run, cache: _CaseCache, phase: str,
                start_epoch: int, iteration_plan, lr_of_epoch):
    """Drive epochs [start_epoch, cfg.epochs); abort with a checkpoint on non-finite loss."""
    cfg = run.cfg
    stem = "ckpt_epoch" if phase == "joint" else f"ckpt_{phase}"
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_of_epoch(epoch)
        for kind, case_id in iteration_plan(epoch):
            try:
                run.run_iteration(kind, case_id, cache, lr)
            except NonFiniteLossError as e:
                ckpt = run.save_checkpoint("ckpt_abort", {"phase": phase, "epoch": epoch, "aborted": str(e)})
                run.close()
                raise TrainingAborted(ckpt, e) from e
        last = epoch == cfg.epochs - 1
        if last or (epoch + 1) % cfg.checkpoint_interval == 0:
            run.save_checkpoint(f"{stem}_{epoch:04d}", {"phase": phase, "epoch": epoch})


def train(manifest: DatasetManifest, rrn_cfg: RrnConfig, rsn_cfg: RsnConfig, train_cfg: TrainConfig,
          out_dir, resume=None):
    """Alternating optimization per the shuffled iteration plan; returns
    (registration net, segmentation net, checkpoint path)."""
    if train_cfg.schedule == "two_step":
        return train_two_step(manifest, rrn_cfg, rsn_cfg, train_cfg, out_dir, resume)
    set_deterministic()
    manifest.validate_for(train_cfg)
    if rsn_cfg.steps != rrn_cfg.steps:
        raise ValueError(f"step counts differ: registration {rrn_cfg.steps} vs segmentation {rsn_cfg.steps}")
    rrn_net = RegistrationNet(rrn_cfg, seed=train_cfg.seed)
    rsn_net = SegmentationNet(rsn_cfg, seed=train_cfg.seed + 1)
    run = _Run(out_dir, rrn_net, rsn_net, train_cfg)
    start_epoch = 0
    if resume is not None:
        state = run.load_checkpoint(resume)
        start_epoch = int(state["epoch"]) + 1
    cache = _CaseCache(manifest, rsn_cfg.num_classes)
    _run_epochs(
        run, cache, "joint", start_epoch,
        iteration_plan=lambda e: build_iteration_list(manifest, train_cfg, e),
        lr_of_epoch=lambda e: lr_schedule(train_cfg, e),
    )
    final = run.save_checkpoint("ckpt_final", {"phase": "joint", "epoch": train_cfg.epochs - 1})
    run.close()
    return rrn_net, rsn_net, final


def train_two_step(manifest: DatasetManifest, rrn_cfg: RrnConfig, rsn_cfg: RsnConfig,
                   train_cfg: TrainConfig, out_dir, resume=None):
    """Registration epochs first, then segmentation epochs against the frozen
    registration parameters; iteration counts per epoch match the joint schedule."""
    set_deterministic()
    manifest.validate_for(train_cfg)
    if rsn_cfg.steps != rrn_cfg.steps:
        raise ValueError(f"step counts differ: registration {rrn_cfg.steps} vs segmentation {rsn_cfg.steps}")
    rrn_net = RegistrationNet(rrn_cfg, seed=train_cfg.seed)
    rsn_net = SegmentationNet(rsn_cfg, seed=train_cfg.seed + 1)
    run = _Run(out_dir, rrn_net, rsn_net, train_cfg)
    cache = _CaseCache(manifest, rsn_cfg.num_classes)

    def plan_phase(epoch, wanted):
        return [it for it in build_iteration_list(manifest, train_cfg, epoch) if it[0] == wanted]

    start_epoch, start_phase = 0, "reg"
    if resume is not None:
        state = run.load_checkpoint(resume)
        start_phase = state["phase"]
        start_epoch = int(state["epoch"]) + 1
        if start_epoch >= train_cfg.epochs and start_phase == "reg":
            start_phase, start_epoch = "seg", 0
    if start_phase == "reg":
        _run_epochs(run, cache, "reg", start_epoch,
                    iteration_plan=lambda e: plan_phase(e, "reg"),
                    lr_of_epoch=lambda e: lr_schedule(train_cfg, e))
        start_epoch = 0
    _run_epochs(run, cache, "seg", start_epoch,
                iteration_plan=lambda e: plan_phase(e, "seg"),
                lr_of_epoch=lambda e: lr_schedule(train_cfg, e))
    final = run.save_checkpoint("ckpt_final", {"phase": "seg", "epoch": train_cfg.epochs - 1})
    run.close()
    return rrn_net, rsn_net, final
