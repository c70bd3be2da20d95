"""Grasp records, gripper assets, manifests, caches and contact ground truth.

Grasp file layout (little-endian)::

    bytes 0..7    magic b"MGGRSP01"
    bytes 8..11   uint32 length L of the JSON header
    L bytes       UTF-8 JSON: gripper_id, object_id, dof, joint_names, count
    then          count rows of (7 + dof) float64:
                  translation x y z, quaternion w x y z, joint angles

Manifest (JSON, paths relative to the manifest file)::

    {"version": 1,
     "grippers": {"<id>": {"urdf": ..., "mesh_dir": ..., "S_G": 1000, "seed": 0,
                           "keypoints": [{"link": ..., "gripper_point_index": ...}, ...]}},
     "objects":  {"<id>": {"mesh": ..., "seed": 0}},
     "grasps":   ["<grasp file>", ...]}

Cache layout under the cache root::

    objects/<object>.s<S_O>.k<k>.pcd          object cloud + k-NN graph (+ .json sidecar)
    grippers/<gripper>.s<S_G>.k<k>.pcd        gripper rest-pose cloud (+ sidecar with point links)
    morph/<gripper>.<feature_set>.m<S_M>.json morphology graph
    gt/<grasp file stem>.s<S_O>.json          per-grasp contact indices and map support
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import CacheMiss, CorruptFile, EmptyCloud, MissingJointAngle
from .mesh_geometry import (
    assemble_gripper_cloud,
    knn_graph,
    load_link_meshes,
    load_mesh,
    load_point_cloud,
    rest_link_summaries,
    sample_surface,
    save_point_cloud,
)
from .model import KeypointSpec
from .urdf_morph import (
    KinematicTree,
    MorphologyGraph,
    build_morphology_graph,
    config_from_vector,
    forward_kinematics,
    load_urdf,
    make_transform,
    rest_pose,
    transform_points,
)

GRASP_MAGIC = b"MGGRSP01"
CONTACT_EPSILON = 0.015
CACHE_ENV = "MORPHGRASP_CACHE"


@dataclass
class GraspRecord:
    gripper_id: str
    object_id: str
    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    joint_angles: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.joint_angles = np.asarray(self.joint_angles, dtype=np.float64).reshape(-1)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise ValueError(f"grasp quaternion is not unit length: {self.rotation}")

    @property
    def dof(self) -> int:
        return len(self.joint_angles)

    def root_transform(self) -> np.ndarray:
        return make_transform(self.translation, quat_to_matrix(self.rotation))

    def config(self, tree: KinematicTree) -> dict[str, float]:
        if self.dof != tree.dof:
            raise MissingJointAngle(f"grasp has {self.dof} joint angles, gripper needs {tree.dof}")
        return config_from_vector(tree, self.joint_angles)

    def check_limits(self, tree: KinematicTree, tol: float = 1e-12) -> None:
        lo, hi = tree.lower_limits(), tree.upper_limits()
        if self.dof != tree.dof or np.any(self.joint_angles < lo - tol) or np.any(self.joint_angles > hi + tol):
            raise ValueError(f"grasp joint angles outside the limits of gripper {self.gripper_id!r}")


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(r).as_quat()
    q = np.array([w, x, y, z])
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


# ----------------------------------------------------------------------------
# grasp files


def write_grasps(path, records: list[GraspRecord], joint_names: list[str] | None = None) -> None:
    if not records:
        raise ValueError("no grasps to write")
    g, o, dof = records[0].gripper_id, records[0].object_id, records[0].dof
    if any(r.gripper_id != g or r.object_id != o or r.dof != dof for r in records):
        raise ValueError("a grasp file holds one gripper/object pair with a fixed DoF")
    header = {"gripper_id": g, "object_id": o, "dof": dof, "count": len(records),
              "joint_names": list(joint_names or [])}
    blob = json.dumps(header, sort_keys=True).encode()
    rows = np.array([np.concatenate([r.translation, r.rotation, r.joint_angles]) for r in records], dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(GRASP_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rows.tobytes())


def read_grasps(path) -> tuple[dict, list[GraspRecord]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != GRASP_MAGIC or len(data) < 12:
        raise CorruptFile(f"{path}: not a grasp file")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + hlen])
    except ValueError as exc:
        raise CorruptFile(f"{path}: bad grasp header") from exc
    width = 7 + int(header["dof"])
    body = data[12 + hlen :]
    if len(body) != 8 * width * int(header["count"]):
        raise CorruptFile(f"{path}: grasp payload size does not match header")
    rows = np.frombuffer(body, dtype="<f8").reshape(-1, width)
    recs = [GraspRecord(header["gripper_id"], header["object_id"], r[:3], r[3:7], r[7:]) for r in rows]
    return header, recs


# ----------------------------------------------------------------------------
# grippers


@dataclass
class GripperSpec:
    gripper_id: str
    urdf_path: str
    mesh_dir: str
    keypoints: KeypointSpec
    S_G: int = 1000
    seed: int = 0


@dataclass
class GripperAssets:
    spec: GripperSpec
    tree: KinematicTree
    points: np.ndarray  # rest-pose cloud (S_G, 3)
    point_links: list[str]
    link_summaries: dict = field(default_factory=dict)

    @classmethod
    def load(cls, spec: GripperSpec) -> "GripperAssets":
        tree = load_urdf(spec.urdf_path)
        return cls.from_parts(spec, tree, load_link_meshes(tree, spec.mesh_dir))

    @classmethod
    def from_parts(cls, spec: GripperSpec, tree: KinematicTree, link_meshes: dict,
                   check: bool = True) -> "GripperAssets":
        points, links = assemble_gripper_cloud(tree, link_meshes, spec.S_G, spec.seed, return_links=True)
        assets = cls(spec, tree, points, links, rest_link_summaries(tree, link_meshes))
        if check:
            assets.check_keypoints()
        return assets

    def check_keypoints(self) -> None:
        kp = self.spec.keypoints
        if len(set(kp.link_name)) != len(kp.link_name):
            raise ValueError(f"gripper {self.spec.gripper_id!r}: keypoints must lie on distinct links")
        for idx, link in zip(kp.gripper_point_index, kp.link_name):
            if link not in self.tree.link_names:
                raise ValueError(f"gripper {self.spec.gripper_id!r}: unknown keypoint link {link!r}")
            if not 0 <= idx < len(self.points):
                raise ValueError(f"gripper {self.spec.gripper_id!r}: keypoint index {idx} out of range")
            if self.point_links[idx] != link:
                raise ValueError(f"gripper point {idx} lies on {self.point_links[idx]!r}, not {link!r}")

    def keypoint_local(self) -> np.ndarray:
        """Keypoints expressed in their own link frames (taken at the rest pose)."""
        return keypoint_local_positions(self.tree, self.spec.keypoints, self.points)

    def morphology(self, feature_set: str = "final", num_nodes: int = 32) -> MorphologyGraph:
        return build_morphology_graph(self.tree, self.link_summaries, feature_set, num_nodes)


def keypoint_local_positions(tree: KinematicTree, keypoints: KeypointSpec, rest_points: np.ndarray) -> np.ndarray:
    poses = forward_kinematics(tree, None, rest_pose(tree))
    out = []
    for idx, link in zip(keypoints.gripper_point_index, keypoints.link_name):
        out.append(transform_points(np.linalg.inv(poses[link]), rest_points[idx][None, :])[0])
    return np.array(out)


def keypoint_world_positions(tree: KinematicTree, links: list[str], local: np.ndarray,
                             root_transform: np.ndarray, config: dict) -> np.ndarray:
    poses = forward_kinematics(tree, root_transform, config)
    return np.array([transform_points(poses[l], p[None, :])[0] for l, p in zip(links, local)])


# ----------------------------------------------------------------------------
# ground truth


@dataclass
class ContactGroundTruth:
    indices: np.ndarray  # (N,)
    maps: np.ndarray  # (S_O, N) in {0, 1}

    def to_dict(self) -> dict:
        return {"indices": [int(i) for i in self.indices],
                "support": [np.nonzero(self.maps[:, i])[0].tolist() for i in range(self.maps.shape[1])]}

    @classmethod
    def from_dict(cls, d: dict, num_points: int) -> "ContactGroundTruth":
        idx = np.asarray(d["indices"], dtype=np.int64)
        maps = np.zeros((num_points, len(idx)))
        for i, sup in enumerate(d["support"]):
            maps[sup, i] = 1.0
        return cls(idx, maps)


def build_ground_truth(grasp: GraspRecord, gripper: GripperAssets, object_points: np.ndarray,
                       epsilon: float = CONTACT_EPSILON) -> ContactGroundTruth:
    object_points = np.asarray(object_points, dtype=np.float64)
    if len(object_points) == 0:
        raise EmptyCloud("object cloud is empty")
    kp = gripper.spec.keypoints
    world = keypoint_world_positions(gripper.tree, kp.link_name, gripper.keypoint_local(),
                                     grasp.root_transform(), grasp.config(gripper.tree))
    diff = object_points[:, None, :] - world[None, :, :]
    dist = np.sqrt(np.einsum("vik,vik->vi", diff, diff))
    indices = np.argmin(dist, axis=0)
    maps = (dist <= epsilon).astype(np.float64)
    maps[indices, np.arange(len(indices))] = 1.0
    return ContactGroundTruth(indices, maps)


# ----------------------------------------------------------------------------
# manifests and caches


@dataclass
class Manifest:
    root: str
    grippers: dict[str, GripperSpec]
    objects: dict[str, dict]
    grasp_files: list[str]

    @classmethod
    def load(cls, path) -> "Manifest":
        root = os.path.dirname(os.path.abspath(path))
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        grippers = {}
        for gid, g in d["grippers"].items():
            grippers[gid] = GripperSpec(
                gid, os.path.join(root, g["urdf"]), os.path.join(root, g["mesh_dir"]),
                KeypointSpec.from_list(g["keypoints"]), int(g.get("S_G", 1000)), int(g.get("seed", 0)),
            )
        objects = {oid: {"mesh": os.path.join(root, o["mesh"]), "seed": int(o.get("seed", 0))}
                   for oid, o in d["objects"].items()}
        return cls(root, grippers, objects, [os.path.join(root, p) for p in d.get("grasps", [])])


def default_cache_root(manifest: Manifest) -> str:
    return os.environ.get(CACHE_ENV) or os.path.join(manifest.root, "cache")


class Cache:
    """Reads and writes the preprocessed point clouds, morphology graphs and ground truth.

    Every read of an object or gripper is appended to ``access_log``.
    """

    def __init__(self, root: str):
        self.root = root
        self.access_log: list[tuple[str, str]] = []

    def object_path(self, oid, S, k):
        return os.path.join(self.root, "objects", f"{oid}.s{S}.k{k}.pcd")

    def gripper_path(self, gid, S, k):
        return os.path.join(self.root, "grippers", f"{gid}.s{S}.k{k}.pcd")

    def morph_path(self, gid, feature_set, S_M):
        return os.path.join(self.root, "morph", f"{gid}.{feature_set}.m{S_M}.json")

    def gt_path(self, grasp_file, S):
        stem = os.path.splitext(os.path.basename(grasp_file))[0]
        return os.path.join(self.root, "gt", f"{stem}.s{S}.json")

    def _need(self, path):
        if not os.path.exists(path):
            raise CacheMiss(f"missing cache file {path}")
        return path

    def read_object(self, oid, S, k):
        self.access_log.append(("object", oid))
        return load_point_cloud(self._need(self.object_path(oid, S, k)))

    def read_gripper(self, gid, S, k):
        self.access_log.append(("gripper", gid))
        return load_point_cloud(self._need(self.gripper_path(gid, S, k)))

    def read_morph(self, gid, feature_set, S_M) -> MorphologyGraph:
        with open(self._need(self.morph_path(gid, feature_set, S_M)), encoding="utf-8") as fh:
            return MorphologyGraph.loads(fh.read())

    def read_gt(self, grasp_file, S) -> list[ContactGroundTruth]:
        with open(self._need(self.gt_path(grasp_file, S)), encoding="utf-8") as fh:
            d = json.load(fh)
        return [ContactGroundTruth.from_dict(g, S) for g in d["grasps"]]


def sample_object_cloud(mesh_path: str, count: int, seed: int) -> np.ndarray:
    return sample_surface(load_mesh(mesh_path), count, seed)


def prepare_caches(manifest: Manifest, cache: Cache, S_O: int, S_M: int, k: int,
                   feature_sets=("final",), epsilon: float = CONTACT_EPSILON) -> list[str]:
    """Build every cache file the training loop reads; returns written paths."""
    written = []
    for sub in ("objects", "grippers", "morph", "gt"):
        os.makedirs(os.path.join(cache.root, sub), exist_ok=True)

    obj_points = {}
    for oid, o in manifest.objects.items():
        pts = sample_object_cloud(o["mesh"], S_O, o["seed"])
        graph = knn_graph(pts, k)
        path = cache.object_path(oid, S_O, k)
        save_point_cloud(path, pts, graph.neighbors, {"object_id": oid, "seed": o["seed"],
                                                       "source": os.path.basename(o["mesh"])})
        obj_points[oid] = pts
        written.append(path)

    assets = {}
    for gid, spec in manifest.grippers.items():
        a = GripperAssets.load(spec)
        assets[gid] = a
        graph = knn_graph(a.points, k)
        path = cache.gripper_path(gid, spec.S_G, k)
        names = sorted(set(a.point_links))
        save_point_cloud(path, a.points, graph.neighbors, {
            "gripper_id": gid, "seed": spec.seed, "links": names,
            "point_link_index": [names.index(l) for l in a.point_links]})
        written.append(path)
        for fs in feature_sets:
            mpath = cache.morph_path(gid, fs, S_M)
            with open(mpath, "w", encoding="utf-8") as fh:
                fh.write(a.morphology(fs, S_M).dumps())
            written.append(mpath)

    for gf in manifest.grasp_files:
        header, recs = read_grasps(gf)
        a = assets[header["gripper_id"]]
        pts = obj_points[header["object_id"]]
        gts = []
        for r in recs:
            r.check_limits(a.tree)
            gts.append(build_ground_truth(r, a, pts, epsilon).to_dict())
        path = cache.gt_path(gf, S_O)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"grasp_file": os.path.basename(gf), "epsilon": epsilon, "grasps": gts}, fh, sort_keys=True)
        written.append(path)
    return written
