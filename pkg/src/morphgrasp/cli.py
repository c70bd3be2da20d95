"""Command-line front end.

Exit codes: 0 success, 1 gradient check failed, 2 bad input or data, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .errors import CacheMiss, ConfigMismatch, MorphGraspError

EXIT_OK, EXIT_FAIL, EXIT_DATA, EXIT_USAGE = 0, 1, 2, 64
RUN_KEYS = ("manifest", "cache", "model", "train")

ROWS_HELP = """--format rows prints comma-separated lines with a fixed column order:
  diversity,<joint name>,<population std>   one line per joint, then
  diversity,mean,<mean over joints>
  residual,<input file>,<rms residual>      one line per input, then
  residual,rms,<rms over inputs>"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# run configuration


def load_run_config(path: str) -> dict:
    """Read a run config, rejecting unknown keys and resolving paths relative to the file."""
    from .model import ModelConfig
    from .training import TrainConfig

    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    unknown = set(raw) - set(RUN_KEYS)
    if unknown:
        raise ValueError(f"unknown run config keys: {sorted(unknown)}")
    if "manifest" not in raw:
        raise ValueError("run config needs a 'manifest' path")
    base = os.path.dirname(os.path.abspath(path))
    cfg = {
        "manifest": os.path.normpath(os.path.join(base, raw["manifest"])),
        "cache": os.path.normpath(os.path.join(base, raw["cache"])) if raw.get("cache") else None,
        "model": ModelConfig.from_dict(raw.get("model", {})).to_dict(),
        "train": TrainConfig.from_dict(raw.get("train", {})).to_dict(),
    }
    return cfg


def _open_dataset(run: dict):
    from .grasp_data import Cache, Manifest, default_cache_root

    manifest = Manifest.load(run["manifest"])
    return manifest, Cache(run["cache"] or default_cache_root(manifest))


# ----------------------------------------------------------------------------
# commands


def cmd_morph_compile(args) -> int:
    from .mesh_geometry import load_link_meshes, rest_link_summaries
    from .urdf_morph import build_morphology_graph, load_urdf

    if not os.path.isdir(args.mesh_dir):
        print(f"error: mesh directory not found: {args.mesh_dir}", file=sys.stderr)
        return EXIT_DATA
    tree = load_urdf(args.urdf)
    meshes = load_link_meshes(tree, args.mesh_dir)
    graph = build_morphology_graph(tree, rest_link_summaries(tree, meshes), args.feature_set, args.num_nodes)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(graph.dumps())
    real = graph.node_features[: graph.real_node_count]
    print(f"real_node_count {graph.real_node_count}")
    print(f"feature_set {graph.feature_set}")
    print(f"edges {len(graph.edges())}")
    print("feature_min " + " ".join(f"{x:.6g}" for x in real.min(axis=0)))
    print("feature_max " + " ".join(f"{x:.6g}" for x in real.max(axis=0)))
    return EXIT_OK


def cmd_sample(args) -> int:
    from .mesh_geometry import knn_graph, load_mesh, sample_surface, save_point_cloud

    if args.count < 1:
        raise UsageError("--count must be a positive integer")
    points = sample_surface(load_mesh(args.mesh), args.count, args.seed)
    k = min(args.k, args.count - 1)
    neighbors = knn_graph(points, k).neighbors if k > 0 else None
    save_point_cloud(args.out, points, neighbors, {"source": os.path.basename(args.mesh), "seed": args.seed})
    print(f"wrote {args.count} points to {args.out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    from .grasp_data import prepare_caches
    from .model import ModelConfig

    run = load_run_config(args.config)
    manifest, cache = _open_dataset(run)
    mc = ModelConfig.from_dict(run["model"])
    feature_sets = sorted({mc.feature_set, *args.feature_set})
    written = prepare_caches(manifest, cache, mc.S_O, mc.S_M, mc.knn_k, feature_sets, run["train"]["epsilon"])
    print(f"wrote {len(written)} cache files under {cache.root}")
    return EXIT_OK


def _apply_train_overrides(run: dict, args) -> dict:
    if args.variant:
        run["model"]["variant"] = args.variant
    if args.freeze_policy:
        run["model"]["freeze_policy"] = args.freeze_policy
    if args.holdout_gripper:
        run["train"]["holdout_grippers"] = list(args.holdout_gripper)
    if args.holdout_object:
        run["train"]["holdout_objects"] = list(args.holdout_object)
    if args.epochs is not None:
        run["train"]["epochs"] = args.epochs
    if args.seed is not None:
        run["train"]["seed"] = args.seed
        run["model"]["seed"] = args.seed
    if args.init_checkpoint:
        run["train"]["init_checkpoint"] = os.path.abspath(args.init_checkpoint)
    return run


def cmd_train(args) -> int:
    from .model import ModelConfig
    from .training import TrainConfig, load_samples, train
    from .urdf_morph import load_urdf

    run = _apply_train_overrides(load_run_config(args.config), args)
    mc = ModelConfig.from_dict(run["model"])
    tc = TrainConfig.from_dict(run["train"])
    run["model"], run["train"] = mc.to_dict(), tc.to_dict()
    os.makedirs(args.run_dir, exist_ok=True)
    echo = json.dumps(run, indent=1, sort_keys=True)
    with open(os.path.join(args.run_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(echo + "\n")
    print(echo)

    manifest, cache = _open_dataset(run)
    samples = load_samples(manifest, cache, mc, tc.holdout_grippers, tc.holdout_objects)
    trained = sorted({s.gripper_id for s in samples})
    dofs = {gid: load_urdf(manifest.grippers[gid].urdf_path).dof for gid in trained}
    result = train(samples, mc, tc, args.run_dir, run_info={"manifest": run["manifest"], "gripper_dof": dofs})
    first, last = result.curve[0][3], result.curve[-1][3]
    print(f"epochs {len(result.curve)} total loss {first:.6g} -> {last:.6g}")
    print(f"checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .grasp_data import GripperAssets, Manifest, sample_object_cloud
    from .mesh_geometry import load_link_meshes
    from .training import fit_grasp, grasp_to_dict, load_model, predict_contacts, write_json
    from .urdf_morph import load_urdf

    model, header = load_model(args.checkpoint)
    cfg = header["config"]
    manifest_path = args.manifest or cfg.get("run", {}).get("manifest")
    if not manifest_path:
        raise ValueError("no manifest recorded in the checkpoint; pass --manifest")
    manifest = Manifest.load(manifest_path)
    if args.gripper_id not in manifest.grippers:
        raise ConfigMismatch(f"gripper {args.gripper_id!r} is not in {manifest_path}")
    spec = manifest.grippers[args.gripper_id]
    tree = load_urdf(spec.urdf_path)
    known = cfg.get("run", {}).get("gripper_dof", {})
    if args.gripper_id in known and known[args.gripper_id] != tree.dof:
        raise ConfigMismatch(f"gripper {args.gripper_id!r}: checkpoint expects DoF {known[args.gripper_id]}, "
                             f"URDF has DoF {tree.dof}")
    assets = GripperAssets.from_parts(spec, tree, load_link_meshes(tree, spec.mesh_dir))
    points = sample_object_cloud(args.object_mesh, model.config.S_O, args.seed)
    contacts = predict_contacts(model, points, assets)
    object_id = os.path.splitext(os.path.basename(args.object_mesh))[0]
    fit = fit_grasp(assets, contacts.coordinates, object_id)
    write_json(args.out, {
        "gripper_id": args.gripper_id, "object_mesh": os.path.basename(args.object_mesh), "seed": args.seed,
        "contact_indices": contacts.indices.tolist(), "contact_points": contacts.coordinates.tolist(),
        "keypoint_links": list(assets.spec.keypoints.link_name),
        "joint_names": [j.name for j in assets.tree.revolute_joints],
        "grasp": grasp_to_dict(fit.grasp), "rms_residual": fit.rms, "ik_iterations": fit.iterations,
    })
    print(f"contacts {contacts.indices.tolist()} rms_residual {fit.rms:.6g} m")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import THRESHOLD, format_report, timed_gradcheck

    report, elapsed = timed_gradcheck(size=args.size, inject=args.inject_error)
    print(format_report(report, THRESHOLD, elapsed))
    return EXIT_OK if all(v < THRESHOLD for v in report.values()) else EXIT_FAIL


def _read_eval_inputs(paths):
    """Grasp records (and residuals, when known) from binary grasp files or predict outputs."""
    from .grasp_data import GraspRecord, read_grasps

    records, residuals, names = [], [], None
    for path in paths:
        if path.endswith(".json"):
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
            g = d["grasp"]
            records.append(GraspRecord(g["gripper_id"], g["object_id"], np.array(g["translation"]),
                                       np.array(g["rotation_wxyz"]), np.array(g["joint_angles"])))
            residuals.append((path, float(d["rms_residual"])))
            file_names = d.get("joint_names")
        else:
            header, recs = read_grasps(path)
            records += recs
            residuals += [(path, None)] * len(recs)
            file_names = header.get("joint_names")
        if file_names:
            if names is not None and list(file_names) != list(names):
                raise ConfigMismatch(f"{path}: joint names differ from earlier inputs")
            names = file_names
    if len({r.gripper_id for r in records}) > 1 or len({len(r.joint_angles) for r in records}) > 1:
        raise ConfigMismatch("all grasps must come from one gripper with one DoF")
    return records, residuals, names


def cmd_eval(args) -> int:
    from .metrics import diversity_metric, rms_residual

    records, residuals, names = _read_eval_inputs(args.inputs)
    rows = []
    if args.metric == "diversity":
        per_joint, mean = diversity_metric(records)
        names = names or [f"joint{i}" for i in range(len(per_joint))]
        rows = [("diversity", n, float(v)) for n, v in zip(names, per_joint)] + [("diversity", "mean", mean)]
    else:
        if any(r is None for _, r in residuals):
            raise ConfigMismatch("residual metric needs predict outputs (JSON with rms_residual)")
        rows = [("residual", p, r) for p, r in residuals]
        rows.append(("residual", "rms", rms_residual([r for _, r in residuals])))
    for metric, key, value in rows:
        print(f"{metric},{key},{value!r}" if args.format == "rows" else f"{key:24s} {value:.6f}")
    return EXIT_OK


def cmd_toy(args) -> int:
    from .toy import TOY_MODEL, TOY_TRAIN, make_toy_dataset, write_toy_dataset

    ds = make_toy_dataset(args.seed, num_grippers=args.grippers, grasps_per_pair=args.grasps_per_pair)
    manifest = write_toy_dataset(ds, args.out_dir)
    run = {"manifest": "manifest.json", "cache": "cache",
           "model": {**TOY_MODEL, "freeze_policy": "scratch"}, "train": dict(TOY_TRAIN)}
    path = os.path.join(args.out_dir, "run.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"{len(ds.grasps)} grasps, {len(ds.grippers)} grippers, {len(ds.objects)} objects")
    print(f"manifest {manifest}")
    print(f"run config {path}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .urdf_morph import FEATURE_SETS

    p = _Parser(prog="morphgrasp", description="Morphology-aware grasp contact prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("morph-compile", help="compile a URDF into a padded morphology graph")
    s.add_argument("urdf")
    s.add_argument("mesh_dir")
    s.add_argument("out")
    s.add_argument("--feature-set", choices=FEATURE_SETS, default="final")
    s.add_argument("--num-nodes", type=int, default=32)
    s.set_defaults(func=cmd_morph_compile)

    s = sub.add_parser("sample", help="sample a surface point cloud from a mesh")
    s.add_argument("mesh")
    s.add_argument("out")
    s.add_argument("--count", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=8, help="neighbours stored with the cloud")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("prepare", help="build the point-cloud, morphology and ground-truth caches")
    s.add_argument("config")
    s.add_argument("--feature-set", action="append", default=[], choices=FEATURE_SETS,
                   help="extra morphology feature sets to cache (repeatable)")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train from a run config")
    s.add_argument("config")
    s.add_argument("run_dir")
    s.add_argument("--variant", choices=("full", "point_cloud_only", "joints_only", "links_only"))
    s.add_argument("--freeze-policy", choices=("freeze", "finetune", "scratch"))
    s.add_argument("--holdout-gripper", action="append", default=[])
    s.add_argument("--holdout-object", action="append", default=[])
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--init-checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict contacts and fit a grasp")
    s.add_argument("checkpoint")
    s.add_argument("object_mesh")
    s.add_argument("gripper_id")
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--manifest", help="defaults to the manifest recorded in the checkpoint")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="compare autograd with central differences")
    s.add_argument("--size", choices=("tiny",), default="tiny")
    s.add_argument("--inject-error", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("eval", help="diversity or residual metrics over a grasp list",
                       epilog=ROWS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("inputs", nargs="+", help="binary grasp files or predict JSON outputs")
    s.add_argument("--metric", choices=("diversity", "residual"), default="diversity")
    s.add_argument("--format", choices=("table", "rows"), default="table")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("toy", help="generate the procedural toy dataset and a run config")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grippers", type=int, default=5)
    s.add_argument("--grasps-per-pair", type=int, default=1)
    s.set_defaults(func=cmd_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CacheMiss as e:
        print(f"error: {e} (run 'morphgrasp prepare' first)", file=sys.stderr)
        return EXIT_DATA
    except (MorphGraspError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
