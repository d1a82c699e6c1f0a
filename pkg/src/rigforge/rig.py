"""Blendshape rig assembly, evaluation, error metrics, and the rig file.

A rig is a neutral mesh plus N named displacement fields, each paired with
the activation vector that produced it. Posing is the exact linear blend
``V = V0 + sum_i w_i d_i`` with weights clamped to [0, 1].

The ``.rfrig`` container is a single file: a JSON manifest followed by one
little-endian f32 binary blob (neutral vertices, u32 faces, displacement
fields) guarded by CRC32, so a browser can view the payload as typed arrays
without copying. Byte layout is documented in docs/formats.md.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadConfig,
    ChecksumMismatch,
    IoError,
    LengthMismatch,
    SingleComponent,
    TopologyMismatch,
    VersionMismatch,
)
from .mesh import NormalizationTransform, TriMesh, face_areas_normals
from .network import FacsVector, ModelParams, forward
from .operators import SurfaceOperators


@dataclass
class BlendshapeRig:
    """Neutral mesh plus per-pose displacement fields (meters, n x 3 each)."""

    neutral: TriMesh
    pose_names: list[str]
    facs_vectors: list[FacsVector]
    displacements: np.ndarray  # (N, n, 3)
    transform: NormalizationTransform | None = None

    def __post_init__(self):
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        n = self.neutral.n_vertices
        if self.displacements.ndim != 3 or self.displacements.shape[1:] != (n, 3):
            raise LengthMismatch(
                f"displacements {self.displacements.shape} do not match {n} vertices"
            )
        if not (len(self.pose_names) == len(self.facs_vectors) == len(self.displacements)):
            raise LengthMismatch("pose table columns disagree in length")
        if len(set(self.pose_names)) != len(self.pose_names):
            raise BadConfig("pose names must be unique")

    @property
    def n_poses(self) -> int:
        return len(self.pose_names)


def build_rig(mesh: TriMesh, ops: SurfaceOperators, params: ModelParams,
              pose_set: list[tuple[str, FacsVector]],
              transform: NormalizationTransform | None = None) -> BlendshapeRig:
    """One deterministic forward pass per pose."""
    names = [name for name, _ in pose_set]
    facs = [fv for _, fv in pose_set]
    fields = np.stack([forward(mesh, ops, fv, params).data for fv in facs])
    return BlendshapeRig(
        neutral=mesh, pose_names=names, facs_vectors=facs,
        displacements=fields, transform=transform,
    )


def evaluate(rig: BlendshapeRig, weights) -> TriMesh:
    """Linear blend; weights clamped to [0, 1], faces unchanged."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (rig.n_poses,):
        raise LengthMismatch(f"expected {rig.n_poses} weights, got {w.shape}")
    w = np.clip(w, 0.0, 1.0)
    v = rig.neutral.vertices + np.tensordot(w, rig.displacements, axes=1)
    return rig.neutral.with_vertices(v)


# --- metrics --------------------------------------------------------------------


def _pose_errors(pred_vertices, gt_vertices) -> np.ndarray:
    if pred_vertices.shape != gt_vertices.shape:
        raise TopologyMismatch(
            f"vertex arrays {pred_vertices.shape} vs {gt_vertices.shape}"
        )
    return np.linalg.norm(pred_vertices - gt_vertices, axis=-1)


def metric_mae(pred_poses, gt_poses,
               transform: NormalizationTransform | None = None) -> tuple[float, float]:
    """Mean and 95th-percentile per-vertex error in millimeters.

    Accepts two BlendshapeRigs with identical topology or two sequences of
    (n, 3) vertex arrays. Errors pool over every pose and vertex; inputs are
    in normalized unit-sphere space (1 unit = 1 m) unless a transform is
    supplied to rescale raw coordinates into it. Q95 interpolates linearly
    between order statistics.
    """
    if isinstance(pred_poses, BlendshapeRig):
        if pred_poses.neutral.n_vertices != gt_poses.neutral.n_vertices or not np.array_equal(
            pred_poses.neutral.faces, gt_poses.neutral.faces
        ):
            raise TopologyMismatch("rig topologies differ")
        pred_list = pred_poses.neutral.vertices + pred_poses.displacements
        gt_list = gt_poses.neutral.vertices + gt_poses.displacements
    else:
        pred_list = [np.asarray(p, dtype=np.float64) for p in pred_poses]
        gt_list = [np.asarray(g, dtype=np.float64) for g in gt_poses]
    if len(pred_list) != len(gt_list):
        raise TopologyMismatch("pose counts differ")
    errs = np.concatenate(
        [_pose_errors(p, g).ravel() for p, g in zip(pred_list, gt_list)]
    )
    if transform is not None:
        errs = errs * transform.scale
    errs_mm = errs * 1000.0
    return float(errs_mm.mean()), float(np.percentile(errs_mm, 95, method="linear"))


def winding_numbers(queries: np.ndarray, vertices: np.ndarray,
                    faces: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Generalized winding number of each query against a triangle soup."""
    queries = np.asarray(queries, dtype=np.float64)
    out = np.zeros(len(queries))
    tri = vertices[faces]  # (m, 3, 3)
    for lo in range(0, len(queries), chunk):
        q = queries[lo : lo + chunk][:, None, :]  # (c, 1, 3)
        A = tri[None, :, 0, :] - q
        B = tri[None, :, 1, :] - q
        C = tri[None, :, 2, :] - q
        la = np.linalg.norm(A, axis=-1)
        lb = np.linalg.norm(B, axis=-1)
        lc = np.linalg.norm(C, axis=-1)
        num = np.einsum("qfi,qfi->qf", A, np.cross(B, C))
        den = (
            la * lb * lc
            + np.einsum("qfi,qfi->qf", A, B) * lc
            + np.einsum("qfi,qfi->qf", B, C) * la
            + np.einsum("qfi,qfi->qf", C, A) * lb
        )
        omega = 2.0 * np.arctan2(num, den)
        out[lo : lo + chunk] = omega.sum(axis=1) / (4.0 * np.pi)
    return out


def outer_component(mesh: TriMesh) -> int:
    """Label of the largest-surface-area component (the outer surface)."""
    areas, _ = face_areas_normals(mesh.vertices, mesh.faces)
    labels = mesh.component_id
    per_comp = np.zeros(mesh.n_components)
    np.add.at(per_comp, labels[mesh.faces[:, 0]], areas)
    return int(per_comp.argmax())


def metric_penetration(mesh: TriMesh) -> float:
    """Fraction of inner-component vertices escaping the outer surface.

    Containment uses the generalized winding number w.r.t. the outer
    component (largest area); |w| < 0.5 counts as outside.
    """
    if mesh.n_components < 2:
        raise SingleComponent("penetration needs at least two components")
    outer = outer_component(mesh)
    labels = mesh.component_id
    outer_faces = mesh.faces[labels[mesh.faces[:, 0]] == outer]
    inner_idx = np.nonzero(labels != outer)[0]
    w = winding_numbers(mesh.vertices[inner_idx], mesh.vertices, outer_faces)
    return float((np.abs(w) < 0.5).mean())


# --- rig file ---------------------------------------------------------------------
# layout (little-endian):
#   magic "RFRG" | u32 version | u32 manifest_len | manifest JSON (UTF-8)
#   u32 crc32(blob) | blob
# blob: f32 neutral[n*3] | u32 faces[m*3] | f32 displacements[N*n*3]

_RFRIG_MAGIC = b"RFRG"
_RFRIG_VERSION = 1


def save_rig(rig: BlendshapeRig, path) -> None:
    if rig.n_poses < 1:
        raise BadConfig("a rig needs at least one pose")
    n = rig.neutral.n_vertices
    m = rig.neutral.n_faces
    manifest = {
        "n_vertices": n,
        "n_faces": m,
        "n_poses": rig.n_poses,
        "pose_names": rig.pose_names,
        "facs_vectors": [fv.activations.tolist() for fv in rig.facs_vectors],
        "normalization": None
        if rig.transform is None
        else {"center": rig.transform.center.tolist(), "scale": rig.transform.scale},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    # pad so the payload starts 4-byte aligned: browsers take zero-copy
    # typed-array views directly over the blob
    mbytes += b" " * (-len(mbytes) % 4)
    blob = b"".join(
        [
            rig.neutral.vertices.astype("<f4").tobytes(),
            rig.neutral.faces.astype("<u4").tobytes(),
            rig.displacements.astype("<f4").tobytes(),
        ]
    )
    parts = [
        _RFRIG_MAGIC,
        struct.pack("<II", _RFRIG_VERSION, len(mbytes)),
        mbytes,
        struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF),
        blob,
    ]
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_rig(path) -> BlendshapeRig:
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != _RFRIG_MAGIC:
        raise ChecksumMismatch(f"{path}: bad magic")
    version, mlen = struct.unpack("<II", blob[4:12])
    if version != _RFRIG_VERSION:
        raise VersionMismatch(f"{path}: version {version}")
    manifest = json.loads(blob[12 : 12 + mlen].decode())
    off = 12 + mlen
    (crc,) = struct.unpack("<I", blob[off : off + 4])
    payload = blob[off + 4 :]
    n, m, npose = manifest["n_vertices"], manifest["n_faces"], manifest["n_poses"]
    expected = 4 * (n * 3) + 4 * (m * 3) + 4 * (npose * n * 3)
    if len(payload) != expected or zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch(f"{path}: payload corrupt")
    verts = np.frombuffer(payload, dtype="<f4", count=n * 3).reshape(n, 3)
    o = 4 * n * 3
    faces = np.frombuffer(payload, dtype="<u4", count=m * 3, offset=o).reshape(m, 3)
    o += 4 * m * 3
    disp = np.frombuffer(payload, dtype="<f4", count=npose * n * 3, offset=o)
    disp = disp.reshape(npose, n, 3)
    tf = None
    if manifest["normalization"] is not None:
        tf = NormalizationTransform(
            center=np.array(manifest["normalization"]["center"]),
            scale=manifest["normalization"]["scale"],
        )
    return BlendshapeRig(
        neutral=TriMesh(verts.astype(np.float64), faces.astype(np.int64)),
        pose_names=list(manifest["pose_names"]),
        facs_vectors=[FacsVector(np.array(a)) for a in manifest["facs_vectors"]],
        displacements=disp.astype(np.float64),
        transform=tf,
    )
