"""Triangle mesh container, OBJ I/O, normalization and per-vertex geometry.

Meshes may consist of several edge-connected components (a face surface plus
eyeballs, for instance). Connectivity is edge-based: two vertices belong to
the same component iff they are joined by a path of mesh edges. All functions
here are pure; they never mutate their inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateMesh, EmptyMesh, IoError, ParseError


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle surface.

    vertices : (n, 3) float64, positions in meters
    faces : (m, 3) int64, each row three distinct vertex indices
    component_id : (n,) int64, edge-connectivity label per vertex
    landmark_indices : optional list of vertex indices
    uv : optional (n, 2) float64 coordinates in [0, 1]^2
    """

    vertices: np.ndarray
    faces: np.ndarray
    component_id: np.ndarray = field(default=None)  # type: ignore[assignment]
    landmark_indices: list[int] | None = None
    uv: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ParseError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ParseError(f"faces must be (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ParseError("face index out of range")
        if f.size:
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degen.any():
                raise ParseError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.component_id is None:
            _, labels = _edge_components(len(v), f)
            object.__setattr__(self, "component_id", labels)
        else:
            object.__setattr__(
                self, "component_id", np.asarray(self.component_id, dtype=np.int64)
            )
        if self.uv is not None:
            uv = np.asarray(self.uv, dtype=np.float64)
            if uv.shape != (len(v), 2):
                raise ParseError("uv must have one 2-vector per vertex")
            object.__setattr__(self, "uv", uv)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_components(self) -> int:
        return int(self.component_id.max()) + 1 if len(self.vertices) else 0

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same connectivity, new vertex positions."""
        return replace(self, vertices=np.asarray(vertices, dtype=np.float64))


@dataclass(frozen=True)
class NormalizationTransform:
    """Centering plus uniform scaling applied before inference and metrics.

    normalized = (p - center) * scale, so ``scale`` is 1 / original max radius.
    """

    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


def _edge_components(n: int, faces: np.ndarray) -> tuple[int, np.ndarray]:
    """Union-find over the edge list; labels ordered by smallest vertex index."""
    parent = np.arange(n, dtype=np.int64)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for a, b, c in faces:
        for i, j in ((a, b), (b, c), (a, c)):
            ri, rj = find(i), find(j)
            if ri != rj:
                # keep smaller root so labels come out ordered by min vertex
                if ri < rj:
                    parent[rj] = ri
                else:
                    parent[ri] = rj
    roots = np.array([find(i) for i in range(n)], dtype=np.int64)
    unique_roots, labels = np.unique(roots, return_inverse=True)
    return len(unique_roots), labels.astype(np.int64)


def connected_components(mesh: TriMesh) -> tuple[int, np.ndarray]:
    """Count edge-connected components and label each vertex.

    Labels lie in ``[0, count)`` and are assigned in order of the smallest
    vertex index contained in each component, so the labeling is deterministic
    under face reordering.
    """
    return _edge_components(mesh.n_vertices, mesh.faces)


def load_obj(path: str | Path) -> TriMesh:
    """Read an ASCII OBJ file (v/f records, vt optional, polygons fanned).

    Polygonal faces are fan-triangulated around their first vertex. Per-vertex
    uv is attached only when every face corner referencing a vertex uses the
    same vt index.
    """
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    vertices: list[list[float]] = []
    texcoords: list[list[float]] = []
    corners: list[list[tuple[int, int | None]]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
                vertices.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                if len(parts) < 3:
                    raise ValueError("texcoord needs 2 coordinates")
                texcoords.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                if len(parts) < 4:
                    raise ValueError("face needs at least 3 vertices")
                poly = []
                for token in parts[1:]:
                    fields = token.split("/")
                    vi = int(fields[0])
                    ti = None
                    if len(fields) > 1 and fields[1]:
                        ti = int(fields[1])
                    poly.append((vi, ti))
                corners.append(poly)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc

    nv, nt = len(vertices), len(texcoords)

    def resolve(idx: int, count: int, what: str) -> int:
        # OBJ is 1-based; negative indices count from the end.
        if idx > 0:
            res = idx - 1
        elif idx < 0:
            res = count + idx
        else:
            raise ParseError(f"{path}: {what} index 0 (OBJ is 1-based)")
        if not 0 <= res < count:
            raise ParseError(f"{path}: {what} index {idx} out of range")
        return res

    faces: list[list[int]] = []
    vert_uv: dict[int, int] = {}
    uv_consistent = nt > 0
    for poly in corners:
        resolved = []
        for vi, ti in poly:
            v = resolve(vi, nv, "vertex")
            if ti is not None:
                t = resolve(ti, nt, "texcoord")
                if vert_uv.setdefault(v, t) != t:
                    uv_consistent = False
            else:
                uv_consistent = False
            resolved.append(v)
        for k in range(1, len(resolved) - 1):
            faces.append([resolved[0], resolved[k], resolved[k + 1]])
    if not faces:
        raise EmptyMesh(f"{path}: no faces")

    uv = None
    if uv_consistent and len(vert_uv) == nv:
        uv = np.array([texcoords[vert_uv[i]] for i in range(nv)], dtype=np.float64)
    return TriMesh(np.array(vertices), np.array(faces), uv=uv)


def save_obj(mesh: TriMesh, path: str | Path) -> None:
    """Write vertices, optional uv, and faces as ASCII OBJ."""
    path = Path(path)
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    if mesh.uv is not None:
        for t in mesh.uv:
            lines.append(f"vt {float(t[0])!r} {float(t[1])!r}")
        for f in mesh.faces:
            lines.append(
                f"f {f[0] + 1}/{f[0] + 1} {f[1] + 1}/{f[1] + 1} {f[2] + 1}/{f[2] + 1}"
            )
    else:
        for f in mesh.faces:
            lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    path.write_text("\n".join(lines) + "\n")


def load_landmarks(path: str | Path) -> list[int]:
    """Read the sidecar JSON ``{"landmarks": [int, ...]}``."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    data = json.loads(path.read_text())
    if "landmarks" not in data:
        raise ParseError(f"{path}: missing 'landmarks' key")
    return [int(i) for i in data["landmarks"]]


def normalize_unit_sphere(mesh: TriMesh) -> tuple[TriMesh, NormalizationTransform]:
    """Center on the bounding-box centroid and scale so max vertex norm is 1.

    All components share a single transform. Raises DegenerateMesh when every
    vertex coincides.
    """
    v = mesh.vertices
    if len(v) == 0:
        raise DegenerateMesh("no vertices")
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    radius = float(np.linalg.norm(v - center, axis=1).max())
    if radius <= 0.0:
        raise DegenerateMesh("all vertices coincident")
    transform = NormalizationTransform(center=center, scale=1.0 / radius)
    return mesh.with_vertices(transform.apply(v)), transform


def face_areas_normals(
    vertices: np.ndarray, faces: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-face areas and unit normals (zero normal for degenerate faces)."""
    p0, p1, p2 = (vertices[faces[:, k]] for k in range(3))
    cross = np.cross(p1 - p0, p2 - p0)
    double_area = np.linalg.norm(cross, axis=1)
    areas = 0.5 * double_area
    normals = np.zeros_like(cross)
    ok = double_area > 0
    normals[ok] = cross[ok] / double_area[ok, None]
    return areas, normals


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length.

    Isolated vertices (no incident face) get (0, 0, 1). Zero-area faces
    contribute nothing.
    """
    v, f = mesh.vertices, mesh.faces
    p0, p1, p2 = (v[f[:, k]] for k in range(3))
    cross = np.cross(p1 - p0, p2 - p0)  # area-weighted face normal, factor 2
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], cross)
    norms = np.linalg.norm(acc, axis=1)
    out = np.zeros_like(acc)
    ok = norms > 1e-20
    out[ok] = acc[ok] / norms[ok, None]
    out[~ok] = (0.0, 0.0, 1.0)
    return out


def mean_edge_length(mesh: TriMesh) -> float:
    f, v = mesh.faces, mesh.vertices
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [0, 2]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    return float(np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1).mean())


# deterministic midpoint-subdivided icosahedron, used by tests and the
# synthetic head generator
def icosphere(level: int = 2, radius: float = 1.0) -> TriMesh:
    """Unit icosphere by repeated edge-midpoint subdivision."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    for _ in range(level):
        midpoint: dict[tuple[int, int], int] = {}
        vlist = list(verts)
        new_faces = []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                p = vlist[i] + vlist[j]
                vlist.append(p / np.linalg.norm(p))
                midpoint[key] = len(vlist) - 1
            return midpoint[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    return TriMesh(verts * radius, faces)
