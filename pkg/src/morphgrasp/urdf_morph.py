"""URDF parsing, forward kinematics and morphology-graph compilation.

Transforms are 4x4 homogeneous numpy arrays. URDF ``rpy`` is interpreted as
extrinsic X-Y-Z (fixed axis) rotations, i.e. ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

from __future__ import annotations

import functools
import json
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import (
    CycleDetected,
    MalformedXml,
    MissingJointAngle,
    TooManyLinks,
    UnknownLinkReference,
    UnsupportedJointKind,
)

MORPH_NODES = 32
MORPH_FEATURES = 9
FEATURE_SETS = ("final", "joints_only", "links_only")
SUPPORTED_JOINTS = ("revolute", "fixed")


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str
    parent_link: str
    child_link: str
    origin_xyz: np.ndarray
    origin_rpy: np.ndarray
    axis: np.ndarray
    limit_lower: float
    limit_upper: float
    chain_order: int

    @functools.cached_property
    def origin(self) -> np.ndarray:
        return make_transform(self.origin_xyz, rpy_to_matrix(self.origin_rpy))

    @functools.cached_property
    def _axis_terms(self) -> tuple[np.ndarray, np.ndarray]:
        x, y, z = self.axis
        k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
        return k, k @ k

    def motion(self, angle: float) -> np.ndarray:
        """``origin @ rot(axis, angle)`` for revolute joints, ``origin`` for fixed ones."""
        if self.kind != "revolute":
            return self.origin
        k, k2 = self._axis_terms
        t = self.origin.copy()
        t[:3, :3] = self.origin[:3, :3] @ (np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * k2)
        return t


@dataclass(frozen=True)
class LinkSpec:
    name: str
    mesh_ref: str | None = None
    mesh_scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    visual_origin: np.ndarray = field(default_factory=lambda: np.eye(4))


@dataclass(frozen=True)
class KinematicTree:
    links: list[LinkSpec]
    joints: list[JointSpec]
    root_link: str

    def link(self, name: str) -> LinkSpec:
        for link in self.links:
            if link.name == name:
                return link
        raise UnknownLinkReference(name)

    @property
    def link_names(self) -> list[str]:
        return [link.name for link in self.links]

    @property
    def revolute_joints(self) -> list[JointSpec]:
        return [j for j in self.joints if j.kind == "revolute"]

    @property
    def dof(self) -> int:
        return len(self.revolute_joints)

    def lower_limits(self) -> np.ndarray:
        return np.array([j.limit_lower for j in self.revolute_joints], dtype=np.float64)

    def upper_limits(self) -> np.ndarray:
        return np.array([j.limit_upper for j in self.revolute_joints], dtype=np.float64)

    @functools.cached_property
    def traversal(self) -> tuple[list[str], list[JointSpec]]:
        """(root links, joints ordered so every parent is placed before its children)."""
        children = {j.child_link for j in self.joints}
        roots = [n for n in self.link_names if n not in children]
        by_parent: dict[str, list[JointSpec]] = {}
        for j in self.joints:
            by_parent.setdefault(j.parent_link, []).append(j)
        order, frontier = [], list(roots)
        while frontier:
            nxt = []
            for parent in frontier:
                for j in by_parent.get(parent, ()):
                    order.append(j)
                    nxt.append(j.child_link)
            frontier = nxt
        return roots, order

    def children(self, link_name: str) -> list[JointSpec]:
        return [j for j in self.joints if j.parent_link == link_name]

    def parent_joint(self, link_name: str) -> JointSpec | None:
        for j in self.joints:
            if j.child_link == link_name:
                return j
        return None


@dataclass
class MorphologyGraph:
    node_features: np.ndarray  # (S_M, 9)
    adjacency: np.ndarray  # (S_M, S_M) in {0, 1}
    real_node_count: int
    link_index: dict[str, int]
    feature_set: str = "final"

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges (i <= j), self-connections included, sorted."""
        ii, jj = np.nonzero(np.triu(self.adjacency))
        return sorted(zip(ii.tolist(), jj.tolist()))

    def to_dict(self) -> dict:
        return {
            "format": "morphology-graph",
            "version": 1,
            "feature_set": self.feature_set,
            "num_nodes": self.num_nodes,
            "num_features": int(self.node_features.shape[1]),
            "real_node_count": self.real_node_count,
            "link_index": dict(self.link_index),
            "node_features": [float(x) for x in self.node_features.ravel()],
            "edges": [list(e) for e in self.edges()],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MorphologyGraph":
        s, f = int(d["num_nodes"]), int(d["num_features"])
        feats = np.asarray(d["node_features"], dtype=np.float64).reshape(s, f)
        adj = np.zeros((s, s), dtype=np.float64)
        for i, j in d["edges"]:
            adj[i, j] = adj[j, i] = 1.0
        return cls(feats, adj, int(d["real_node_count"]), dict(d["link_index"]), d["feature_set"])

    @classmethod
    def loads(cls, text: str) -> "MorphologyGraph":
        return cls.from_dict(json.loads(text))


# ----------------------------------------------------------------------------
# rigid transforms


def rpy_to_matrix(rpy) -> np.ndarray:
    r, p, y = (float(v) for v in rpy)
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def axis_angle_to_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula; ``axis`` must be unit length."""
    x, y, z = (float(v) for v in axis)
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def make_transform(xyz=(0.0, 0.0, 0.0), rotation=None) -> np.ndarray:
    t = np.eye(4)
    if rotation is not None:
        t[:3, :3] = rotation
    t[:3, 3] = xyz
    return t


def transform_points(transform: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ transform[:3, :3].T + transform[:3, 3]


# ----------------------------------------------------------------------------
# parsing


def _vec(text: str | None, default, what: str) -> np.ndarray:
    if text is None:
        return np.array(default, dtype=np.float64)
    try:
        values = [float(v) for v in text.split()]
    except ValueError as exc:
        raise MalformedXml(f"bad {what}: {text!r}") from exc
    if len(values) != 3:
        raise MalformedXml(f"{what} needs 3 numbers, got {text!r}")
    return np.array(values, dtype=np.float64)


def _origin(elem) -> tuple[np.ndarray, np.ndarray]:
    o = elem.find("origin") if elem is not None else None
    if o is None:
        return np.zeros(3), np.zeros(3)
    return _vec(o.get("xyz"), (0, 0, 0), "origin xyz"), _vec(o.get("rpy"), (0, 0, 0), "origin rpy")


def _parse_link(elem) -> LinkSpec:
    name = elem.get("name")
    if not name:
        raise MalformedXml("<link> without name")
    # visual geometry is preferred; collision is the fallback
    for tag in ("visual", "collision"):
        for geom_parent in elem.findall(tag):
            mesh = geom_parent.find("geometry/mesh")
            if mesh is not None and mesh.get("filename"):
                xyz, rpy = _origin(geom_parent)
                scale = _vec(mesh.get("scale"), (1, 1, 1), "mesh scale")
                return LinkSpec(name, mesh.get("filename"), scale, make_transform(xyz, rpy_to_matrix(rpy)))
    return LinkSpec(name)


def _parse_joint(elem, order: int) -> JointSpec:
    name = elem.get("name")
    kind = elem.get("type")
    if not name or not kind:
        raise MalformedXml("<joint> needs name and type attributes")
    if kind not in SUPPORTED_JOINTS:
        raise UnsupportedJointKind(f"joint {name!r} has unsupported type {kind!r}")
    parent, child = elem.find("parent"), elem.find("child")
    if parent is None or child is None or not parent.get("link") or not child.get("link"):
        raise MalformedXml(f"joint {name!r} needs <parent link> and <child link>")
    xyz, rpy = _origin(elem)
    axis = np.zeros(3)
    lower = upper = 0.0
    if kind == "revolute":
        axis_elem = elem.find("axis")
        axis = _vec(axis_elem.get("xyz") if axis_elem is not None else None, (1, 0, 0), "axis")
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise MalformedXml(f"joint {name!r} has a zero axis")
        axis = axis / norm
        limit = elem.find("limit")
        if limit is not None:
            try:
                lower = float(limit.get("lower", 0.0))
                upper = float(limit.get("upper", 0.0))
            except ValueError as exc:
                raise MalformedXml(f"joint {name!r} has non-numeric limits") from exc
        if lower > upper:
            raise MalformedXml(f"joint {name!r} has lower limit above upper limit")
    if parent.get("link") == child.get("link"):
        raise CycleDetected(f"joint {name!r} connects link {parent.get('link')!r} to itself")
    return JointSpec(name, kind, parent.get("link"), child.get("link"), xyz, rpy, axis, lower, upper, order)


def parse_urdf(xml_text: str) -> KinematicTree:
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root.tag != "robot":
        raise MalformedXml(f"expected <robot> root element, got <{root.tag}>")

    links = [_parse_link(e) for e in root.findall("link")]
    names = [link.name for link in links]
    if len(set(names)) != len(names):
        raise MalformedXml("duplicate link names")
    if not links:
        raise MalformedXml("URDF declares no links")
    joints = [_parse_joint(e, i) for i, e in enumerate(root.findall("joint"))]

    known = set(names)
    parent_of: dict[str, str] = {}
    for j in joints:
        for ref in (j.parent_link, j.child_link):
            if ref not in known:
                raise UnknownLinkReference(f"joint {j.name!r} references missing link {ref!r}")
        if j.child_link in parent_of:
            raise CycleDetected(f"link {j.child_link!r} has more than one parent joint")
        parent_of[j.child_link] = j.parent_link

    for start in names:
        seen = {start}
        cur = start
        while cur in parent_of:
            cur = parent_of[cur]
            if cur in seen:
                raise CycleDetected(f"kinematic loop through link {cur!r}")
            seen.add(cur)

    roots = [n for n in names if n not in parent_of]
    return KinematicTree(links, joints, roots[0])


def load_urdf(path: str | os.PathLike) -> KinematicTree:
    with open(path, encoding="utf-8") as fh:
        return parse_urdf(fh.read())


def resolve_mesh_path(mesh_ref: str, mesh_dir: str | os.PathLike) -> str:
    """Map a URDF mesh filename (possibly ``package://...``) into ``mesh_dir``."""
    ref = mesh_ref
    if "://" in ref:
        ref = ref.split("://", 1)[1]
    for candidate in (os.path.join(mesh_dir, ref), os.path.join(mesh_dir, os.path.basename(ref))):
        if os.path.exists(candidate):
            return candidate
    return os.path.join(mesh_dir, os.path.basename(ref))


# ----------------------------------------------------------------------------
# kinematics


def rest_pose(tree: KinematicTree) -> dict[str, float]:
    return {j.name: 0.5 * (j.limit_lower + j.limit_upper) for j in tree.revolute_joints}


def config_from_vector(tree: KinematicTree, angles) -> dict[str, float]:
    return {j.name: float(a) for j, a in zip(tree.revolute_joints, angles)}


def config_to_vector(tree: KinematicTree, config: Mapping[str, float]) -> np.ndarray:
    return np.array([config[j.name] for j in tree.revolute_joints], dtype=np.float64)


def forward_kinematics(
    tree: KinematicTree, root_transform: np.ndarray | None, config: Mapping[str, float]
) -> dict[str, np.ndarray]:
    """World transform of every link.

    Each child is placed at ``parent @ origin @ rot(axis, angle)``. Links that
    are not reachable from a joint (extra roots) get ``root_transform``.
    """
    base = np.eye(4) if root_transform is None else np.asarray(root_transform, dtype=np.float64)
    roots, order = tree.traversal
    poses = {name: base.copy() for name in roots}
    for j in order:
        if j.kind == "revolute":
            if j.name not in config:
                raise MissingJointAngle(j.name)
            local = j.motion(config[j.name])
        else:
            local = j.origin
        poses[j.child_link] = poses[j.parent_link] @ local
    return {name: poses[name] for name in tree.link_names}


# ----------------------------------------------------------------------------
# morphology graph


def build_morphology_graph(
    tree: KinematicTree,
    link_summaries: Mapping[str, tuple] | None = None,
    feature_set: str = "final",
    num_nodes: int = MORPH_NODES,
) -> MorphologyGraph:
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set {feature_set!r}; choose from {FEATURE_SETS}")
    n_real = len(tree.links)
    if n_real > num_nodes:
        raise TooManyLinks(f"{n_real} links exceed the {num_nodes}-node morphology graph")
    link_summaries = link_summaries or {}
    link_index = {name: i for i, name in enumerate(tree.link_names)}

    # offset / axis / limits come from the incoming joint; the first-listed joint wins
    incoming: dict[str, JointSpec] = {}
    for j in sorted(tree.joints, key=lambda j: j.chain_order):
        incoming.setdefault(j.child_link, j)

    feats = np.zeros((num_nodes, MORPH_FEATURES), dtype=np.float64)
    adj = np.zeros((num_nodes, num_nodes), dtype=np.float64)
    world = forward_kinematics(tree, None, rest_pose(tree)) if feature_set == "links_only" else None

    for name, row in link_index.items():
        joint = incoming.get(name)
        com, size = link_summaries.get(name, (np.zeros(3), np.zeros(3)))
        offset = joint.origin_xyz if joint is not None else np.zeros(3)
        if feature_set == "final":
            feats[row, 0:3] = offset
            feats[row, 3:6] = com
            feats[row, 6:9] = size
        elif feature_set == "joints_only":
            feats[row, 0:3] = offset
            if joint is not None and joint.kind == "revolute":
                feats[row, 3:6] = joint.axis
                feats[row, 6] = joint.limit_lower
                feats[row, 7] = joint.limit_upper
        else:
            feats[row, 0:3] = world[name][:3, 3]
            feats[row, 3:6] = com
            feats[row, 6:9] = size
        adj[row, row] = 1.0

    for j in tree.joints:
        a, b = link_index[j.parent_link], link_index[j.child_link]
        adj[a, b] = adj[b, a] = 1.0

    return MorphologyGraph(feats, adj, n_real, link_index, feature_set)
