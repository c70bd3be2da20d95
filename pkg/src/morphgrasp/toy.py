"""Procedural stand-in dataset: small revolute-finger grippers, primitive
objects, and grasps obtained by pulling each keypoint onto the object surface
with :func:`morphgrasp.ik.ik_fit`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .grasp_data import GraspRecord, GripperAssets, GripperSpec, write_grasps
from .ik import ik_fit, rest_grasp
from .mesh_geometry import (
    TriMesh,
    box_mesh,
    cylinder_mesh,
    load_link_meshes,
    sample_surface,
    save_obj,
    uv_sphere_mesh,
)
from .model import KeypointSpec
from .urdf_morph import forward_kinematics, parse_urdf, rest_pose

TOY_S_G = 128
TOY_MODEL = dict(n=64, gcn_hidden=64, S_O=128, S_G=TOY_S_G, S_M=16, N=6, heads=4, ff_width=64,
                 downsample_dim=16, ar_hidden=64, knn_k=8)
# full-batch overfitting schedule for the 8-sample toy set
TOY_TRAIN = dict(epochs=500, batch_size=8, lr=1e-3, lr_schedule="cosine")
PHALANX_WIDTH = 0.016
PHALANX_LIMITS = ((-0.3, 1.0), (0.0, 1.2), (0.0, 1.2))


@dataclass
class ToyGripper:
    gripper_id: str
    urdf: str
    meshes: dict[str, TriMesh]  # keyed by URDF mesh filename
    keypoints: KeypointSpec
    assets: GripperAssets


@dataclass
class ToyDataset:
    grippers: dict[str, ToyGripper]
    objects: dict[str, TriMesh]
    grasps: list[GraspRecord] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)

    def pairs(self) -> list[tuple[str, str]]:
        seen = []
        for g in self.grasps:
            if (g.gripper_id, g.object_id) not in seen:
                seen.append((g.gripper_id, g.object_id))
        return seen


def _fmt(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def gripper_urdf(name: str, num_fingers: int, lengths, radius: float, palm: float, phase: float = 0.0):
    """URDF text and box meshes for a palm with ``num_fingers`` three-phalanx fingers.

    Each finger ends in a mesh-less fixed ``tip`` link.
    """
    meshes = {"palm.obj": box_mesh((palm, palm, 0.02), (-palm / 2, -palm / 2, -0.02))}
    lines = [f'<robot name="{name}">', '  <link name="palm">',
             '    <visual><geometry><mesh filename="palm.obj"/></geometry></visual>', "  </link>"]
    joints = []
    for f in range(num_fingers):
        phi = phase + 2 * np.pi * f / num_fingers
        parent = "palm"
        origin = (radius * np.cos(phi), radius * np.sin(phi), 0.0)
        rpy = (0.0, 0.0, phi)
        for s, length in enumerate(lengths):
            link = f"f{f}_l{s}"
            mesh = f"{link}.obj"
            w = PHALANX_WIDTH
            meshes[mesh] = box_mesh((w, w, length), (-w / 2, -w / 2, 0.0))
            lines += [f'  <link name="{link}">',
                      f'    <visual><geometry><mesh filename="{mesh}"/></geometry></visual>', "  </link>"]
            lo, hi = PHALANX_LIMITS[s]
            joints += [f'  <joint name="j_{link}" type="revolute">',
                       f'    <parent link="{parent}"/><child link="{link}"/>',
                       f'    <origin xyz="{_fmt(origin)}" rpy="{_fmt(rpy)}"/>',
                       '    <axis xyz="0 -1 0"/>',
                       f'    <limit lower="{lo!r}" upper="{hi!r}" effort="1" velocity="1"/>',
                       "  </joint>"]
            parent, origin, rpy = link, (0.0, 0.0, length), (0.0, 0.0, 0.0)
        lines.append(f'  <link name="f{f}_tip"/>')
        joints += [f'  <joint name="j_f{f}_tip" type="fixed">',
                   f'    <parent link="{parent}"/><child link="f{f}_tip"/>',
                   f'    <origin xyz="{_fmt(origin)}"/>', "  </joint>"]
    return "\n".join(lines + joints + ["</robot>"]) + "\n", meshes


def keypoint_links(num_fingers: int, count: int = 6) -> list[str]:
    """Palm, then distal, middle and proximal phalanges finger by finger."""
    order = ["palm"] + [f"f{f}_l{s}" for s in (2, 1, 0) for f in range(num_fingers)]
    return order[:count]


def choose_keypoints(assets: GripperAssets, links: list[str]) -> KeypointSpec:
    """Per link, the sampled gripper point closest to the centre of the fingertips."""
    poses = forward_kinematics(assets.tree, None, rest_pose(assets.tree))
    tips = [n for n in assets.tree.link_names if n.endswith("_l2")]
    center = np.mean([poses[n][:3, 3] for n in tips], axis=0)
    owner = np.array(assets.point_links)
    idx = []
    for link in links:
        cand = np.nonzero(owner == link)[0]
        d = np.linalg.norm(assets.points[cand] - center, axis=1)
        idx.append(int(cand[np.argmin(d)]))
    return KeypointSpec(idx, list(links))


def toy_objects() -> dict[str, TriMesh]:
    return {
        "sphere": uv_sphere_mesh(0.035, 10, 20),
        "box": box_mesh((0.06, 0.045, 0.07), (-0.03, -0.0225, -0.035)),
        "cylinder": cylinder_mesh(0.028, 0.08, 20),
        "bar": box_mesh((0.11, 0.03, 0.03), (-0.055, -0.015, -0.015)),
    }


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    from .grasp_data import quat_to_matrix

    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def make_toy_dataset(seed: int = 0, num_grippers: int = 5, grasps_per_pair: int = 1,
                     S_G: int = TOY_S_G, num_keypoints: int = 6) -> ToyDataset:
    rng = np.random.default_rng(seed)
    grippers = {}
    for g in range(num_grippers):
        gid = f"toy{g}"
        fingers = 2 + (g % 2)
        lengths = tuple(rng.uniform(0.028, 0.045, size=3))
        radius = float(rng.uniform(0.03, 0.045))
        palm = float(2 * radius + 0.03)
        urdf, meshes = gripper_urdf(gid, fingers, lengths, radius, palm, phase=float(rng.uniform(0, np.pi)))
        tree = parse_urdf(urdf)
        link_meshes = load_link_meshes(tree, sources=meshes)
        probe = GripperSpec(gid, f"{gid}.urdf", "meshes", KeypointSpec([], []), S_G, seed + g)
        assets = GripperAssets.from_parts(probe, tree, link_meshes, check=False)
        kp = choose_keypoints(assets, keypoint_links(fingers, num_keypoints))
        assets.spec.keypoints = kp
        assets.check_keypoints()
        grippers[gid] = ToyGripper(gid, urdf, meshes, kp, assets)

    objects = toy_objects()
    ds = ToyDataset(grippers, objects)
    dense = {oid: sample_surface(m, 4000, seed + 1000 + i) for i, (oid, m) in enumerate(objects.items())}
    # approach rotations depend on the object only, so contacts are a function of gripper geometry
    approach = {}
    for i, oid in enumerate(objects):
        orng = np.random.default_rng([seed, 2000 + i])
        approach[oid] = [_random_rotation(orng) for _ in range(grasps_per_pair)]
    for gid, tg in grippers.items():
        a = tg.assets
        local = a.keypoint_local()
        poses = forward_kinematics(a.tree, None, rest_pose(a.tree))
        rest_kp = np.array([poses[l][:3, :3] @ p + poses[l][:3, 3] for l, p in zip(tg.keypoints.link_name, local)])
        center = rest_kp[1:].mean(axis=0)
        for oid in objects:
            for rot in approach[oid]:
                t = -rot @ center
                world = rest_kp @ rot.T + t
                d = np.linalg.norm(dense[oid][:, None, :] - world[None, :, :], axis=2)
                targets = dense[oid][np.argmin(d, axis=0)]
                init = rest_grasp(a.tree, gid, oid, t, rot)
                res = ik_fit(a.tree, tg.keypoints.link_name, local, targets, init, max_iters=100)
                ds.grasps.append(res.grasp)
                ds.residuals.append(res.rms)
    return ds


def write_toy_dataset(ds: ToyDataset, out_dir: str) -> str:
    """Write URDFs, meshes, grasp files and ``manifest.json``; returns the manifest path."""
    manifest = {"version": 1, "grippers": {}, "objects": {}, "grasps": []}
    for gid, tg in ds.grippers.items():
        mdir = os.path.join(out_dir, "grippers", gid, "meshes")
        os.makedirs(mdir, exist_ok=True)
        with open(os.path.join(out_dir, "grippers", gid, f"{gid}.urdf"), "w", encoding="utf-8") as fh:
            fh.write(tg.urdf)
        for fname, mesh in tg.meshes.items():
            save_obj(mesh, os.path.join(mdir, fname))
        manifest["grippers"][gid] = {
            "urdf": f"grippers/{gid}/{gid}.urdf", "mesh_dir": f"grippers/{gid}/meshes",
            "S_G": tg.assets.spec.S_G, "seed": tg.assets.spec.seed, "keypoints": tg.keypoints.to_list(),
        }
    os.makedirs(os.path.join(out_dir, "objects"), exist_ok=True)
    for i, (oid, mesh) in enumerate(ds.objects.items()):
        save_obj(mesh, os.path.join(out_dir, "objects", f"{oid}.obj"))
        manifest["objects"][oid] = {"mesh": f"objects/{oid}.obj", "seed": i}
    os.makedirs(os.path.join(out_dir, "grasps"), exist_ok=True)
    for gid, oid in ds.pairs():
        recs = [g for g in ds.grasps if g.gripper_id == gid and g.object_id == oid]
        rel = f"grasps/{gid}__{oid}.grasp"
        names = [j.name for j in ds.grippers[gid].assets.tree.revolute_joints]
        write_grasps(os.path.join(out_dir, rel), recs, names)
        manifest["grasps"].append(rel)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path
