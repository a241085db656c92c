"""Command-line entry points: dataset generation, training, inference,
evaluation, rigging, and a static server for the viewer.

Exit codes: 0 success, 2 configuration/usage error, 3 data/path error,
4 numeric failure. Every command writes a ``run_manifest.json`` next to its
outputs recording the materialized config, inputs, seed, and wall time.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__, backbone, container, evaluation, rigging, training
from .backbone import BundleError, SceneError
from .geometry import GeometryError, make_orbit_rig
from .keypoints import keypoints_from_json, keypoints_to_json
from .rigging import RiggingError
from .structure import adjacency_weights
from .training import NonFiniteLossError, TrainConfig, TrainingError, desk_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (TrainingError, GeometryError, SceneError, evaluation.EvaluationError)
_DATA_ERRORS = (
    BundleError,
    container.ContainerError,
    RiggingError,
    FileNotFoundError,
    NotADirectoryError,
)


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: dict,
                    outputs: dict, seed, t0: float) -> None:
    doc = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "code_version": __version__,
        "seed": seed,
        "wall_time_s": round(time.monotonic() - t0, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(doc, indent=1))


def cmd_generate_synthetic(args) -> int:
    t0 = time.monotonic()
    out_dir = Path(args.out)
    created = not out_dir.exists()
    spec = backbone.default_scene_spec(args.joints, appearance_seed=args.seed)
    rig = make_orbit_rig(
        args.views, args.elevation, args.radius, (args.image_size, args.image_size)
    )
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        names = []
        for i in range(args.count):
            sample = backbone.synth_generate(spec, rig, seed=args.seed + i)
            name = f"bundle_{i:05d}"
            backbone.write_bundle(sample, out_dir / name)
            names.append(name)
        index = backbone.write_dataset_index(
            out_dir, names, extra={"scene": asdict(spec), "seed": args.seed}
        )
    except Exception:
        if created and out_dir.exists():
            shutil.rmtree(out_dir)
        raise
    config = {
        "count": args.count,
        "joints": args.joints,
        "views": args.views,
        "image_size": args.image_size,
        "elevation": args.elevation,
        "radius": args.radius,
    }
    _write_manifest(out_dir, "generate-synthetic", config, {},
                    {"dataset": str(out_dir), "content_hash": index["content_hash"]},
                    args.seed, t0)
    print(f"wrote {args.count} bundles to {out_dir} (hash {index['content_hash'][:12]})")
    return EXIT_OK


def _load_config(args) -> TrainConfig:
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        config = TrainConfig.from_dict(doc)
    else:
        config = desk_config()
    overrides = {
        "seed": args.seed,
        "total_steps": args.steps,
        "num_views": args.views,
        "num_keypoints": args.keypoints,
        "grid_resolution": args.grid,
        "batch_size": args.batch_size,
    }
    fields = asdict(config)
    for key, val in overrides.items():
        if val is not None:
            fields[key] = val
    return TrainConfig.from_dict(fields)


def cmd_train(args) -> int:
    t0 = time.monotonic()
    config = _load_config(args)
    dataset_dir = Path(args.dataset)
    index = backbone.read_dataset_index(dataset_dir)
    dataset = backbone.load_dataset(dataset_dir)
    out_dir = Path(args.out)
    ckpt = training.train(
        dataset, config, out_dir, resume_from=args.resume,
        log_every=args.log_every, device=args.device,
    )
    _write_manifest(
        out_dir,
        "train",
        asdict(config),
        {"dataset": str(dataset_dir), "dataset_hash": index["content_hash"],
         "resume_from": args.resume},
        {"checkpoint": str(ckpt), "log": str(out_dir / "train_log.jsonl")},
        config.seed,
        t0,
    )
    print(f"final checkpoint: {ckpt}")
    return EXIT_OK


def cmd_infer(args) -> int:
    t0 = time.monotonic()
    model, config, _ = training.load_checkpoint_model(args.checkpoint)
    sample = backbone.read_bundle(args.bundle)
    if sample.layer_features is None:
        raise BundleError(f"{args.bundle}: bundle has no layer_features; cannot lift")
    expected = tuple(model.image_size)
    if sample.image_size != expected:
        raise TrainingError(
            f"checkpoint expects image size {expected}, bundle has {sample.image_size}"
        )
    feat_channels = [f.shape[0] for f in sample.layer_features]
    if feat_channels != model.layer_channels:
        raise TrainingError(
            f"checkpoint expects feature channels {model.layer_channels}, "
            f"bundle has {feat_channels}"
        )
    kps, pixels, valid = training.predict_keypoints(model, sample, config.num_views)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "keypoints.json").write_text(keypoints_to_json(kps))
    proj = {
        "views": [
            {
                "view": v,
                "pixels": [[float(x) for x in p] for p in pixels[v]],
                "valid": [bool(b) for b in valid[v]],
            }
            for v in range(pixels.shape[0])
        ]
    }
    (out_dir / "projections.json").write_text(json.dumps(proj, indent=1))
    if args.overlay:
        _write_overlays(sample, pixels, out_dir)
    _write_manifest(
        out_dir,
        "infer",
        asdict(config),
        {"checkpoint": str(args.checkpoint), "bundle": str(args.bundle)},
        {"keypoints": str(out_dir / "keypoints.json")},
        config.seed,
        t0,
    )
    print(f"keypoints written to {out_dir / 'keypoints.json'}")
    return EXIT_OK


def _write_overlays(sample, pixels, out_dir: Path) -> None:
    from PIL import Image, ImageDraw

    from .geometry import pixels_to_indices

    for v in range(pixels.shape[0]):
        img = (sample.images[v].transpose(1, 2, 0) * 255).astype(np.uint8)
        im = Image.fromarray(img)
        draw = ImageDraw.Draw(im)
        rc = pixels_to_indices(pixels[v], sample.image_size)
        for r, c in rc.tolist():
            draw.ellipse([c - 2, r - 2, c + 2, r + 2], outline=(255, 0, 0))
        im.save(out_dir / f"overlay_view{v}.png")


def cmd_evaluate(args) -> int:
    t0 = time.monotonic()
    model, config, _ = training.load_checkpoint_model(args.checkpoint)
    dataset_dir = Path(args.dataset)
    index = backbone.read_dataset_index(dataset_dir)
    dataset = backbone.load_dataset(dataset_dir)
    labeled = [s for s in dataset if s.ground_truth_joints is not None]
    if len(labeled) < 2:
        raise BundleError("evaluation needs at least 2 labeled samples")
    preds, gts = [], []
    for s in labeled:
        kps, _, _ = training.predict_keypoints(model, s, config.num_views)
        preds.append(kps.positions.numpy())
        gts.append(s.ground_truth_joints)
    preds = np.stack(preds)
    gts = np.stack(gts)
    n_train = max(1, int(round(args.train_frac * len(labeled))))
    n_train = min(n_train, len(labeled) - 1)
    spec = evaluation.RegressorSpec(kind=args.regressor)
    reg = evaluation.fit_regressor(preds[:n_train], gts[:n_train], spec, seed=args.seed)
    test_pred = reg.predict(preds[n_train:])
    mean, per_frame = evaluation.evaluate_sets(test_pred, gts[n_train:])
    report = evaluation.report_json(
        mean,
        per_frame,
        spec,
        index["content_hash"],
        extra={"train_frames": n_train, "test_frames": len(labeled) - n_train},
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report)
    _write_manifest(
        out_dir,
        "evaluate",
        asdict(config) | {"regressor": args.regressor, "train_frac": args.train_frac},
        {"checkpoint": str(args.checkpoint), "dataset": str(dataset_dir),
         "dataset_hash": index["content_hash"]},
        {"metrics": str(out_dir / "metrics.json")},
        args.seed,
        t0,
    )
    print(report)
    return EXIT_OK


def cmd_rig(args) -> int:
    t0 = time.monotonic()
    if args.keypoints:
        kps = keypoints_from_json(Path(args.keypoints).read_text())
        positions = kps.positions.numpy()
        n = len(positions)
        adjacency = np.full((n, n), 0.5)
        np.fill_diagonal(adjacency, 0.0)
        config_doc: dict = {"keypoints_file": args.keypoints}
        seed = 0
    elif args.checkpoint and args.bundle:
        model, config, _ = training.load_checkpoint_model(args.checkpoint)
        sample = backbone.read_bundle(args.bundle)
        kps, _, _ = training.predict_keypoints(model, sample, config.num_views)
        positions = kps.positions.numpy()
        with torch.no_grad():
            adjacency = adjacency_weights(model.adjacency_logits).numpy()
        config_doc = asdict(config)
        seed = config.seed
    else:
        raise TrainingError("rig needs either --keypoints or --checkpoint with --bundle")

    tree = rigging.build_mst(positions, adjacency)
    skeleton = rigging.orient_tree(positions, tree, adjacency=adjacency, root=args.root)
    if args.mesh == "capsule:auto":
        mesh = rigging.make_capsule_mesh(skeleton)
    else:
        mesh = rigging.read_obj(args.mesh)
    sigma = args.sigma if args.sigma is not None else rigging.default_sigma(skeleton)
    weights = rigging.skinning_weights(mesh, skeleton, sigma=sigma, alpha=args.alpha)
    out_dir = Path(args.out)
    rigging.export_rig_bundle(
        mesh, skeleton, weights, positions, adjacency, out_dir,
        params={"sigma": sigma, "alpha": args.alpha},
    )
    _write_manifest(
        out_dir,
        "rig",
        config_doc | {"sigma": sigma, "alpha": args.alpha},
        {"mesh": args.mesh, "checkpoint": args.checkpoint, "bundle": args.bundle,
         "keypoints": args.keypoints},
        {"rig_bundle": str(out_dir)},
        seed,
        t0,
    )
    print(f"rig bundle written to {out_dir}")
    return EXIT_OK


def cmd_serve_viewer(args) -> int:
    import http.server

    root = Path(args.root).resolve()
    if not root.is_dir():
        raise NotADirectoryError(f"viewer root {root} does not exist")
    bundle = Path(args.bundle).resolve() if args.bundle else None
    if bundle is not None and not bundle.is_dir():
        raise NotADirectoryError(f"rig bundle {bundle} does not exist")

    class Handler(http.server.SimpleHTTPRequestHandler):
        def __init__(self, *a, **kw):
            super().__init__(*a, directory=str(root), **kw)

        def translate_path(self, path):
            # mount the rig bundle at /bundle/ so the viewer auto-loads it
            clean = path.split("?", 1)[0].split("#", 1)[0]
            if bundle is not None and clean.startswith("/bundle/"):
                return str(bundle / clean[len("/bundle/"):])
            return super().translate_path(path)

    print(f"serving {root} at http://127.0.0.1:{args.port}/ (ctrl-c to stop)")
    if bundle is not None:
        print(f"rig bundle mounted at /bundle/ from {bundle}")
    with http.server.ThreadingHTTPServer(("127.0.0.1", args.port), Handler) as srv:
        srv.serve_forever()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelkp",
        description="Unsupervised 3D keypoint discovery, training, and rigging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-synthetic", help="emit a synthetic multi-view dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--joints", type=int, default=6)
    g.add_argument("--views", type=int, default=4)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--elevation", type=float, default=20.0)
    g.add_argument("--radius", type=float, default=2.5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate_synthetic)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file of TrainConfig fields")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--views", type=int, metavar="K")
    t.add_argument("--keypoints", type=int, metavar="N")
    t.add_argument("--grid", type=int, metavar="M")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--log-every", type=int, default=1)
    t.add_argument("--device", default="cpu", help="torch device passthrough")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict keypoints for one bundle")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--bundle", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--overlay", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="regressor-based metric evaluation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--regressor", choices=["linear", "mlp"], default="mlp")
    e.add_argument("--train-frac", type=float, default=0.8)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rig", help="build a rig bundle from keypoints")
    r.add_argument("--keypoints", help="keypoints JSON from infer")
    r.add_argument("--checkpoint")
    r.add_argument("--bundle")
    r.add_argument("--mesh", default="capsule:auto",
                   help="OBJ path, or 'capsule:auto' for a demo tube mesh")
    r.add_argument("--out", required=True)
    r.add_argument("--sigma", type=float)
    r.add_argument("--alpha", type=float, default=1.0)
    r.add_argument("--root", type=int)
    r.set_defaults(func=cmd_rig)

    s = sub.add_parser("serve-viewer", help="serve the viewer app over HTTP")
    s.add_argument("--root", required=True, help="viewer dist directory")
    s.add_argument("--bundle", help="rig bundle directory to mount at /bundle/")
    s.add_argument("--port", type=int, default=8674)
    s.set_defaults(func=cmd_serve_viewer)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NonFiniteLossError, FloatingPointError, OverflowError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
