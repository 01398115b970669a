"""Command-line pipeline: cohort generation, training, inference, evaluation,
and gradient checking.

Configuration is a single JSON document with sections {rrn, rsn, train,
phantom, metrics}; unknown sections or keys are rejected, and every run
echoes its resolved configuration next to its outputs.

Exit codes: 0 success, 1 gradient-check failure, 2 config/schema problem,
3 manifest problem, 4 grid mismatch, 5 case-pairing failure.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from . import gradcheck as gradcheck_mod
from . import rvf, volume
from .errors import ConfigError, ManifestError, PairingError
from .metrics import CaseMetrics, MetricsReport, dsc, hd95, surface_dsc
from .nn import set_deterministic
from .phantom import PhantomSpec, generate_cohort, load_keypoints
from .rrn import RegistrationNet, RrnConfig, rrn_forward
from .rsn import RsnConfig, SegmentationNet, rsn_forward
from .trainer import DatasetManifest, TrainConfig, train
from .volume import GridMismatchError

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_SCHEMA = 2
EXIT_MANIFEST = 3
EXIT_GRID = 4
EXIT_PAIRING = 5

_SECTIONS = ("rrn", "rsn", "train", "phantom", "metrics")
_METRICS_KEYS = ("tolerance_mm", "class_id")


def _load_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _parse_config(doc: dict):
    for key in doc:
        if key not in _SECTIONS:
            raise ConfigError(f"{key}: unknown config section")
    for name in _SECTIONS:
        if name in doc and not isinstance(doc[name], dict):
            raise ConfigError(f"{name}: section must be a JSON object")
    try:
        rrn_cfg = RrnConfig.from_dict(doc.get("rrn", {}), "rrn")
        rsn_doc = dict(doc.get("rsn", {}))
        rsn_doc.setdefault("steps", rrn_cfg.steps)
        rsn_cfg = RsnConfig.from_dict(rsn_doc, "rsn")
        train_cfg = TrainConfig.from_dict(doc.get("train", {}), "train")
        phantom_spec = PhantomSpec.from_dict(doc.get("phantom", {}), "phantom")
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    metrics_doc = doc.get("metrics", {})
    for key in metrics_doc:
        if key not in _METRICS_KEYS:
            raise ConfigError(f"metrics.{key}: unknown config key")
    return rrn_cfg, rsn_cfg, train_cfg, phantom_spec, metrics_doc


def cmd_gen(args) -> int:
    doc = _load_json(args.spec) if args.spec else {}
    if set(doc) & set(_SECTIONS):
        doc = doc.get("phantom", {})
    try:
        spec = PhantomSpec.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if args.count < 2:
        raise ConfigError(f"--count must be >= 2, got {args.count}")
    out = Path(args.out)
    manifest_path = generate_cohort(spec, args.count, args.seed, out, exemplar_tag=args.exemplar_tag)
    (out / "resolved_spec.json").write_text(json.dumps(
        {"phantom": spec.to_dict(), "count": args.count, "seed": args.seed,
         "exemplar_tag": args.exemplar_tag}, indent=2))
    rows = json.loads(manifest_path.read_text())["cases"]
    n_train = sum(r["split"] == "train" for r in rows)
    print(f"wrote {len(rows)} cases ({n_train} train, {len(rows) - n_train} test) -> {manifest_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    rrn_cfg, rsn_cfg, train_cfg, _, _ = _parse_config(doc)
    manifest = DatasetManifest.load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(
        {"rrn": rrn_cfg.to_dict(), "rsn": rsn_cfg.to_dict(), "train": train_cfg.to_dict()}, indent=2))
    _, _, final = train(manifest, rrn_cfg, rsn_cfg, train_cfg, out, resume=args.resume)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def cmd_infer(args) -> int:
    set_deterministic()
    start = time.perf_counter()
    ckpt = Path(args.ckpt)
    rrn_net = RegistrationNet.load(ckpt / "rrn")
    rsn_net = SegmentationNet.load(ckpt / "rsn")
    x_c = rvf.read_volume(args.pct)
    y_c = rvf.read_label(args.pct_label)
    x_cb = rvf.read_volume(args.cbct)
    x_c.grid.require_compatible(x_cb.grid)
    x_c.grid.require_compatible(y_c.grid)
    traj = rrn_forward(x_c, x_cb, rrn_net, y_c=y_c, num_classes=rsn_net.cfg.num_classes)
    seg = rsn_forward(x_cb, traj, x_c, y_c, rsn_net)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rvf.write_rvf(out / "y_cb.rvf", seg.labels[-1])
    rvf.write_rvf(out / "field.rvf", traj.composed)
    if args.debug_steps:
        for t, phi in enumerate(traj.fields, start=1):
            rvf.write_rvf(out / f"phi_{t:02d}.rvf", phi)
        for t, p in enumerate(seg.probs):
            rvf.write_rvf(out / f"prob_{t:02d}.rvf", p)
    elapsed = time.perf_counter() - start
    (out / "run_info.json").write_text(json.dumps({
        "checkpoint": str(ckpt), "seconds": elapsed,
        "rrn": rrn_net.cfg.to_dict(), "rsn": rsn_net.cfg.to_dict(),
    }, indent=2))
    print(f"inference wall time: {elapsed:.2f} s")
    return EXIT_OK


def _gt_cases(gt_dir: Path) -> dict:
    """Map case id -> dict(label=..., week=..., keypoints=...) from either a
    cohort manifest directory or a flat directory of label files."""
    manifest_path = gt_dir / "manifest.json"
    cases = {}
    if manifest_path.exists():
        manifest = DatasetManifest.load(manifest_path)
        for entry in manifest.cases:
            if entry.split != "test" or entry.y_cb is None:
                continue
            cases[entry.id] = {"label": entry.y_cb, "week": entry.week, "keypoints": entry.keypoints}
    else:
        for path in sorted(gt_dir.glob("*.rvf")):
            cases[path.stem] = {"label": path, "week": None, "keypoints": None}
    if not cases:
        raise PairingError(f"{gt_dir}: no ground-truth cases found")
    return cases


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt = _gt_cases(Path(args.gt))
    report = MetricsReport()
    for case_id, info in sorted(gt.items()):
        pred_path = pred_dir / f"{case_id}.rvf"
        if not pred_path.exists():
            report.unmatched.append(case_id)
            continue
        pred = rvf.read_label(pred_path)
        truth = rvf.read_label(info["label"])
        row = CaseMetrics(
            case_id=case_id,
            dsc=dsc(pred, truth, args.class_id),
            sdsc=surface_dsc(pred, truth, args.tolerance, args.class_id),
            week=info["week"],
        )
        try:
            row.hd95_mm = hd95(pred, truth, args.class_id)
        except ValueError:
            row.hd95_mm = None  # empty mask: reported as missing
        field_path = pred_dir / f"{case_id}_field.rvf"
        if field_path.exists():
            field = rvf.read_field(field_path)
            row.sd_jacobian, row.folding_fraction = volume.jacobian_stats(field)
            if info["keypoints"] is not None:
                pairs = load_keypoints(info["keypoints"])
                row.tre_mean_mm, row.tre_sd_mm = volume.tre(field, pairs)
        report.add(row)
    stray = sorted(
        p.stem for p in pred_dir.glob("*.rvf")
        if not p.stem.endswith("_field") and p.stem not in gt
    )
    report.unmatched.extend(stray)
    report.write(args.out)
    print(json.dumps(report.summary(), indent=2))
    if report.unmatched:
        print(f"unmatched cases: {', '.join(report.unmatched)}", file=sys.stderr)
        return EXIT_PAIRING
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all(seed=args.seed, eps=args.eps, corrupt=args.corrupt)
    print(gradcheck_mod.format_table(results))
    failures = [r.name for r in results if not r.passed]
    if failures:
        print(f"gradient check failed: {failures[0]}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recseg",
                                     description="recurrent joint registration-segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic cohort")
    p.add_argument("--spec", help="JSON spec (phantom section or bare fields)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--exemplar-tag", default="median",
                   choices=["large", "small", "median", "superior", "inferior"])
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train on a cohort manifest")
    p.add_argument("--config", help="JSON config with rrn/rsn/train sections")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="segment one image pair with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pct", required=True)
    p.add_argument("--pct-label", required=True)
    p.add_argument("--cbct", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--debug-steps", action="store_true", help="write per-step fields and probabilities")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predicted labels against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tolerance", type=float, default=4.38, help="surface-overlap tolerance in mm")
    p.add_argument("--class-id", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=gradcheck_mod.DEFAULT_EPS)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except ManifestError as e:
        print(f"manifest error: {e}", file=sys.stderr)
        return EXIT_MANIFEST
    except GridMismatchError as e:
        print(f"grid mismatch: {e}", file=sys.stderr)
        return EXIT_GRID
    except PairingError as e:
        print(f"pairing error: {e}", file=sys.stderr)
        return EXIT_PAIRING
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
