"""Triangle meshes: loading, surface sampling, oriented bounding boxes, k-NN graphs.

Binary point-cloud cache layout (all little-endian)::

    bytes 0..7    magic b"MGPCLD01"
    bytes 8..15   uint64 S (point count)
    bytes 16..23  uint64 k (neighbours per point, 0 when no graph is stored)
    then          S*3 float64 point coordinates, row-major (x, y, z per point)
    then          S*k int64 neighbour indices, row-major (only when k > 0)

A JSON sidecar ``<file>.json`` records provenance (source mesh, seed, sha256 of
the binary file) and, for gripper clouds, the link each point was drawn from.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial import QhullError

from .errors import CorruptFile, EmptyMesh, NoMeshes, TooFewPoints, UnsupportedFormat
from .urdf_morph import KinematicTree, forward_kinematics, rest_pose, transform_points

log = logging.getLogger(__name__)

DEDUP_TOL = 1e-9
DEFAULT_K = 8
CLOUD_MAGIC = b"MGPCLD01"


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int64
    dropped_faces: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise CorruptFile("face index out of range")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def transformed(self, transform: np.ndarray) -> "TriMesh":
        return TriMesh(transform_points(transform, self.vertices), self.faces.copy())


@dataclass
class OrientedBox:
    rotation: np.ndarray  # columns are the box axes
    center: np.ndarray
    extents: np.ndarray  # full side lengths, descending

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))


@dataclass
class PointCloudGraph:
    points: np.ndarray
    neighbors: np.ndarray  # (S, k) int64
    k: int

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency with self-connections."""
        s = len(self.points)
        adj = np.eye(s)
        rows = np.repeat(np.arange(s), self.k)
        cols = self.neighbors.ravel()
        adj[rows, cols] = 1.0
        adj[cols, rows] = 1.0
        return adj


# ----------------------------------------------------------------------------
# loading


def canonicalize(vertices: np.ndarray, faces: np.ndarray) -> TriMesh:
    """Merge vertices closer than DEDUP_TOL, drop degenerate faces, and fix an
    order for vertices and faces that does not depend on the file format."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    keys = np.round(vertices / DEDUP_TOL).astype(np.int64) if len(vertices) else np.zeros((0, 3), np.int64)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    verts = vertices[first]
    faces = inverse[faces] if faces.size else faces

    n_in = len(faces)
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[distinct]
    if len(faces):
        a, b, c = (verts[faces[:, i]] for i in range(3))
        area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
        faces = faces[area2 > 0.0]
        # rotate each triangle so its smallest index leads (winding preserved), then sort
        shift = np.argmin(faces, axis=1)
        idx = (shift[:, None] + np.arange(3)[None, :]) % 3
        faces = np.take_along_axis(faces, idx, axis=1)
        faces = faces[np.lexsort(faces.T[::-1])]
    dropped = n_in - len(faces)
    if dropped:
        log.warning("dropped %d degenerate faces", dropped)
    return TriMesh(verts, faces, dropped)


def _parse_obj(text: str) -> tuple[list, list]:
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ValueError("face needs 3 vertices")
                for t in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[t], idx[t + 1]])
        except ValueError as exc:
            raise CorruptFile(f"OBJ line {lineno}: {exc}") from exc
    if any(i < 0 or i >= len(verts) for f in faces for i in f):
        raise CorruptFile("OBJ face references a missing vertex")
    return verts, faces


def _parse_stl(data: bytes) -> np.ndarray:
    """Return (F, 3, 3) triangle corner coordinates."""
    if len(data) >= 84:
        (n,) = struct.unpack("<I", data[80:84])
        if len(data) == 84 + 50 * n:
            rec = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
            tris = np.frombuffer(data, dtype=rec, count=n, offset=84)
            return tris["v"].astype(np.float64)
    if data.lstrip()[:5].lower() == b"solid":
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError as exc:
            raise CorruptFile("STL is neither valid binary nor ASCII") from exc
        corners = []
        for line in text.splitlines():
            parts = line.split()
            if parts and parts[0] == "vertex":
                try:
                    corners.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise CorruptFile(f"bad STL vertex line {line!r}") from exc
        if not corners or len(corners) % 3 or "endsolid" not in text:
            raise CorruptFile("ASCII STL is truncated")
        return np.asarray(corners, dtype=np.float64).reshape(-1, 3, 3)
    raise CorruptFile("STL size does not match its triangle count (truncated?)")


def load_mesh(path: str | os.PathLike, scale=None) -> TriMesh:
    ext = os.path.splitext(str(path))[1].lower()
    with open(path, "rb") as fh:
        data = fh.read()
    if ext == ".obj":
        try:
            verts, faces = _parse_obj(data.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorruptFile(f"{path}: OBJ is not text") from exc
        verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    elif ext == ".stl":
        tris = _parse_stl(data)
        verts = tris.reshape(-1, 3)
        faces = np.arange(len(verts), dtype=np.int64).reshape(-1, 3)
    else:
        raise UnsupportedFormat(f"{path}: only .obj and .stl meshes are supported")
    if scale is not None:
        verts = verts * np.asarray(scale, dtype=np.float64)
    return canonicalize(verts, faces)


def save_obj(mesh: TriMesh, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for f in mesh.faces:
            fh.write("f {} {} {}\n".format(*(int(i) + 1 for i in f)))


def save_stl(mesh: TriMesh, path: str | os.PathLike) -> None:
    """Binary STL (float32 corners, so only exactly representable meshes round-trip)."""
    tris = mesh.vertices[mesh.faces]
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, norms, out=np.zeros_like(normals), where=norms > 0)
    rec = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    arr = np.zeros(len(tris), dtype=rec)
    arr["normal"] = normals
    arr["v"] = tris
    with open(path, "wb") as fh:
        fh.write(b"\0" * 80)
        fh.write(struct.pack("<I", len(tris)))
        fh.write(arr.tobytes())


def merge_meshes(meshes: list[TriMesh]) -> tuple[TriMesh, np.ndarray]:
    """Concatenate meshes without vertex welding; also returns the source mesh of each face."""
    verts, faces, owner, offset = [], [], [], 0
    for i, m in enumerate(meshes):
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        owner.append(np.full(len(m.faces), i, dtype=np.int64))
        offset += len(m.vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(faces)), np.concatenate(owner)


# ----------------------------------------------------------------------------
# sampling


def sample_surface(mesh: TriMesh, count: int, seed: int, return_faces: bool = False):
    """Area-weighted uniform samples on the mesh surface."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise EmptyMesh("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    face_idx = np.searchsorted(cdf, rng.random(count), side="right")
    face_idx = np.minimum(face_idx, len(areas) - 1)
    uv = rng.random((count, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    a, b, c = (mesh.vertices[mesh.faces[face_idx, i]] for i in range(3))
    points = a + uv[:, :1] * (b - a) + uv[:, 1:] * (c - a)
    if return_faces:
        return points, face_idx
    return points


# ----------------------------------------------------------------------------
# oriented bounding boxes


def _box_for_rotation(points: np.ndarray, rot: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    local = points @ rot
    lo, hi = local.min(axis=0), local.max(axis=0)
    ext = hi - lo
    return float(np.prod(ext)), lo, hi


def _min_area_rect_angle(pts2: np.ndarray) -> float:
    """Angle of the minimum-area enclosing rectangle of 2D points (edge-flush search)."""
    try:
        hull = pts2[ConvexHull(pts2).vertices]
    except (QhullError, ValueError):
        hull = pts2
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2))
    best, best_a = np.inf, 0.0
    for a in angles:
        c, s = np.cos(a), np.sin(a)
        r = hull @ np.array([[c, -s], [s, c]])
        area = np.prod(r.max(axis=0) - r.min(axis=0))
        if area < best:
            best, best_a = area, a
    return float(best_a)


def _frame_from_normal(normal: np.ndarray) -> np.ndarray:
    n = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return np.column_stack([u, v, n])


def _small_rotation(axis_index: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    i, j = [(1, 2), (0, 2), (0, 1)][axis_index]
    r = np.eye(3)
    r[i, i] = r[j, j] = c
    r[i, j], r[j, i] = -s, s
    return r


def min_volume_obb(mesh_or_points) -> OrientedBox:
    """Smallest-volume box found from PCA, axis-aligned and hull-face-flush
    candidates, followed by coordinate-descent refinement of the rotation.

    Not the exact optimum, but never larger than the axis-aligned or PCA box.
    """
    points = mesh_or_points.vertices if isinstance(mesh_or_points, TriMesh) else np.asarray(mesh_or_points)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyMesh("cannot bound an empty mesh")

    try:
        hull = ConvexHull(points)
        pts = points[hull.vertices]
        normals = hull.equations[:, :3]
    except (QhullError, ValueError):
        pts, normals = points, np.zeros((0, 3))

    centered = pts - pts.mean(axis=0)
    candidates = [np.eye(3)]
    if len(pts) > 1:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        pca = vt.T
        if pca.shape[1] == 3:
            candidates.append(pca)
    # one candidate per distinct hull-face normal, with the best in-plane rectangle
    if len(normals):
        keys = np.round(np.where(normals[:, :1] < 0, -normals, normals), 9)
        _, first = np.unique(keys, axis=0, return_index=True)
        for n in normals[np.sort(first)]:
            frame = _frame_from_normal(n)
            ang = _min_area_rect_angle(pts @ frame[:, :2])
            c, s = np.cos(ang), np.sin(ang)
            inplane = frame[:, :2] @ np.array([[c, -s], [s, c]])
            candidates.append(np.column_stack([inplane, frame[:, 2]]))

    best_vol, best_rot = np.inf, np.eye(3)
    for rot in candidates:
        vol = _box_for_rotation(pts, rot)[0]
        if vol < best_vol:
            best_vol, best_rot = vol, rot

    step = np.radians(2.0)
    while step > 1e-6:
        improved = False
        for axis in range(3):
            for sign in (1.0, -1.0):
                rot = best_rot @ _small_rotation(axis, sign * step)
                vol = _box_for_rotation(pts, rot)[0]
                if vol < best_vol * (1.0 - 1e-12):
                    best_vol, best_rot, improved = vol, rot, True
        if not improved:
            step *= 0.5

    _, lo, hi = _box_for_rotation(points, best_rot)
    ext = hi - lo
    order = np.argsort(-ext, kind="stable")
    rot = best_rot[:, order]
    if np.linalg.det(rot) < 0:
        rot[:, 2] = -rot[:, 2]
    center = best_rot @ (0.5 * (lo + hi))
    return OrientedBox(rot, center, ext[order])


def link_summary(mesh: TriMesh, world_transform: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(centre, size) of the link's minimum-volume box, centre in the world frame."""
    if len(mesh.vertices) == 0:
        raise EmptyMesh("link mesh is empty")
    box = min_volume_obb(mesh)
    t = np.eye(4) if world_transform is None else world_transform
    com = transform_points(t, box.center[None, :])[0]
    return com, box.extents.copy()


# ----------------------------------------------------------------------------
# k-NN graphs


def knn_graph(points: np.ndarray, k: int = DEFAULT_K, chunk: int = 256) -> PointCloudGraph:
    """Exact k nearest neighbours (self excluded), ties broken by lower index."""
    points = np.asarray(points, dtype=np.float64)
    s = len(points)
    if k < 1 or s <= k:
        raise TooFewPoints(f"need more than k={k} points, got {s}")
    neighbors = np.empty((s, k), dtype=np.int64)
    for start in range(0, s, chunk):
        block = points[start : start + chunk]
        diff = block[:, None, :] - points[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2[np.arange(len(block)), np.arange(start, start + len(block))] = np.inf
        neighbors[start : start + len(block)] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return PointCloudGraph(points, neighbors, k)


# ----------------------------------------------------------------------------
# grippers


def load_link_meshes(tree: KinematicTree, mesh_dir: str | os.PathLike | None = None,
                     sources: Mapping[str, TriMesh] | None = None) -> dict[str, TriMesh]:
    """Meshes of every link that references one, in the link frame (visual origin applied).

    Meshes are read from ``mesh_dir``, or taken from ``sources`` (keyed by the
    URDF mesh filename) when given.
    """
    from .urdf_morph import resolve_mesh_path

    meshes = {}
    for link in tree.links:
        if link.mesh_ref is None:
            continue
        if sources is not None:
            raw = sources[link.mesh_ref]
            mesh = canonicalize(raw.vertices * link.mesh_scale, raw.faces)
        else:
            mesh = load_mesh(resolve_mesh_path(link.mesh_ref, mesh_dir), scale=link.mesh_scale)
        meshes[link.name] = mesh.transformed(link.visual_origin)
    return meshes


def rest_link_summaries(tree: KinematicTree, link_meshes: Mapping[str, TriMesh]) -> dict[str, tuple]:
    poses = forward_kinematics(tree, None, rest_pose(tree))
    return {name: link_summary(m, poses[name]) for name, m in link_meshes.items()}


def assemble_gripper_cloud(
    tree: KinematicTree,
    link_meshes: Mapping[str, TriMesh],
    count: int,
    seed: int,
    return_links: bool = False,
):
    """Sample the gripper surface at its canonical rest pose (identity root, mid-limit joints).

    With ``return_links`` also returns the link name each point was drawn from.
    """
    names = [n for n in tree.link_names if n in link_meshes]
    if not names:
        raise NoMeshes("gripper has no link meshes")
    poses = forward_kinematics(tree, None, rest_pose(tree))
    merged, owner = merge_meshes([link_meshes[n].transformed(poses[n]) for n in names])
    points, faces = sample_surface(merged, count, seed, return_faces=True)
    if return_links:
        return points, [names[i] for i in owner[faces]]
    return points


# ----------------------------------------------------------------------------
# cache files


def save_point_cloud(path: str | os.PathLike, points: np.ndarray, neighbors: np.ndarray | None = None,
                     meta: dict | None = None) -> None:
    points = np.ascontiguousarray(points, dtype="<f8")
    k = 0 if neighbors is None else int(neighbors.shape[1])
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<QQ", len(points), k))
        fh.write(points.tobytes())
        if k:
            fh.write(np.ascontiguousarray(neighbors, dtype="<i8").tobytes())
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    sidecar = {"format": "point-cloud", "version": 1, "count": len(points), "k": k, "sha256": digest}
    sidecar.update(meta or {})
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")


@dataclass
class CloudFile:
    points: np.ndarray
    neighbors: np.ndarray | None
    meta: dict = field(default_factory=dict)


def load_point_cloud(path: str | os.PathLike) -> CloudFile:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24 or data[:8] != CLOUD_MAGIC:
        raise CorruptFile(f"{path}: not a point-cloud cache")
    s, k = struct.unpack("<QQ", data[8:24])
    need = 24 + 24 * s + 8 * s * k
    if len(data) != need:
        raise CorruptFile(f"{path}: expected {need} bytes, found {len(data)}")
    points = np.frombuffer(data, dtype="<f8", count=3 * s, offset=24).reshape(s, 3).astype(np.float64)
    neighbors = None
    if k:
        neighbors = np.frombuffer(data, dtype="<i8", count=s * k, offset=24 + 24 * s).reshape(s, k).astype(np.int64)
    meta = {}
    side = str(path) + ".json"
    if os.path.exists(side):
        with open(side, encoding="utf-8") as fh:
            meta = json.load(fh)
    return CloudFile(points, neighbors, meta)


def box_mesh(extents=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box [origin, origin + extents] as 12 triangles."""
    ex = np.asarray(extents, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    verts = corners * ex + np.asarray(origin, dtype=np.float64)
    faces = [
        [0, 1, 3], [0, 3, 2],  # x = 0
        [4, 6, 7], [4, 7, 5],  # x = 1
        [0, 4, 5], [0, 5, 1],  # y = 0
        [2, 3, 7], [2, 7, 6],  # y = 1
        [0, 2, 6], [0, 6, 4],  # z = 0
        [1, 5, 7], [1, 7, 3],  # z = 1
    ]
    return canonicalize(verts, np.array(faces))


def uv_sphere_mesh(radius: float = 1.0, rings: int = 12, segments: int = 24) -> TriMesh:
    verts = [[0.0, 0.0, radius]]
    for i in range(1, rings):
        th = np.pi * i / rings
        for j in range(segments):
            ph = 2 * np.pi * j / segments
            verts.append([radius * np.sin(th) * np.cos(ph), radius * np.sin(th) * np.sin(ph), radius * np.cos(th)])
    verts.append([0.0, 0.0, -radius])
    faces = []
    for j in range(segments):
        faces.append([0, 1 + j, 1 + (j + 1) % segments])
    for i in range(rings - 2):
        a, b = 1 + i * segments, 1 + (i + 1) * segments
        for j in range(segments):
            j2 = (j + 1) % segments
            faces.append([a + j, b + j, b + j2])
            faces.append([a + j, b + j2, a + j2])
    last = len(verts) - 1
    base = 1 + (rings - 2) * segments
    for j in range(segments):
        faces.append([base + j, last, base + (j + 1) % segments])
    return canonicalize(np.array(verts), np.array(faces))


def cylinder_mesh(radius: float = 1.0, height: float = 1.0, segments: int = 24) -> TriMesh:
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    verts = np.vstack([bottom, top, [[0, 0, -height / 2]], [[0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for j in range(segments):
        j2 = (j + 1) % segments
        faces += [[j, j2, segments + j2], [j, segments + j2, segments + j]]
        faces += [[cb, j2, j], [ct, segments + j, segments + j2]]
    return canonicalize(verts, np.array(faces))
