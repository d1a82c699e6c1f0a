"""Procedural head dataset: parametric heads, analytic rigs, 2D supervision.

Heads are star-shaped radial surfaces over an icosphere (ellipsoid base plus
chin/brow features and seeded smooth noise) with two eyeball spheres strictly
inside the closed face surface. Eyelid poses rotate lid vertices about the
lateral axis through the hidden eyeball center, so their correct magnitude
depends on eyeball geometry that is invisible from the face component alone;
rotating about that center also keeps distances to it constant, which makes
every analytic pose penetration-free by construction.

Heads sharing a tessellation level share topology, landmark indices, and the
spherical uv chart exactly, so interpolation is plain linear blending of
vertices and displacement fields.

Dataset roles: rigged-role samples keep their displacement fields under
``heads/<id>/rig``; unrigged-role samples keep only 2D supervision on disk,
with their analytic rigs sequestered under ``eval_gt/`` for evaluation only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import render as r2
from .errors import BadConfig, BadParams, TopologyMismatch
from .mesh import NormalizationTransform, TriMesh, icosphere, normalize_unit_sphere, save_obj
from .network import FacsVector
from .rig import BlendshapeRig

# action units, short code + full name as surfaced in viewers
AU_NAMES = [
    "c_JD JawDrop",
    "c_JL JawLeft",
    "c_JR JawRight",
    "c_ELD EyesLookDown",
    "c_ELL EyesLookLeft",
    "c_ELR EyesLookRight",
    "c_ELU EyesLookUp",
    "l_EC LeftEyeClosed",
    "r_EC RightEyeClosed",
    "l_OBR LeftOuterBrowRaiser",
    "r_OBR RightOuterBrowRaiser",
    "c_PK Pucker",
]
AU_CODES = [n.split()[0] for n in AU_NAMES]
AU_INDEX = {c: i for i, c in enumerate(AU_CODES)}

# corrective pose recipes: pairs of AU codes; eye-pair correctives use the
# exact composed rotation, region pairs use a damped sum
CORRECTIVE_PAIRS = [
    ("c_ELL", "c_ELU"),
    ("c_ELR", "c_ELU"),
    ("c_ELL", "c_ELD"),
    ("c_ELR", "c_ELD"),
    ("c_JD", "c_PK"),
    ("c_JD", "c_JL"),
    ("c_JD", "c_JR"),
    ("l_EC", "r_EC"),
]
CORRECTIVE_DAMP = 0.35

JAW_HINGE = np.array([0.0, -0.02, -0.05])  # raw (pre-normalization) units

# semantic directions on the unit head sphere (+z faces the camera, +y up;
# the subject's left is +x)
_DIR = {
    "chin": (0.0, -0.62, 0.78),
    "mouth": (0.0, -0.38, 0.92),
    "eye_l": (0.34, 0.25, 0.91),
    "eye_r": (-0.34, 0.25, 0.91),
    "brow_l": (0.33, 0.47, 0.82),
    "brow_r": (-0.33, 0.47, 0.82),
}
_DIRS = {k: np.asarray(v) / np.linalg.norm(v) for k, v in _DIR.items()}

LANDMARK_NAMES = [
    "lid_upper_l", "lid_lower_l", "lid_upper_r", "lid_lower_r",
    "chin", "mouth_corner_l", "mouth_corner_r",
]
EYELID_PAIRS = [(0, 1), (2, 3)]  # indices into the landmark list


@dataclass(frozen=True)
class HeadParams:
    seed: int = 0
    level: int = 3
    eye_level: int = 1
    radii: tuple = (0.46, 0.52, 0.47)
    chin_amp: float = 0.05
    brow_amp: float = 0.02
    socket_bulge: float = 0.0  # face profile around the eyes, +/- outward
    noise_amp: float = 0.012
    eye_radius: float = 0.07
    eye_depth: float = 0.78  # eyeball center as a fraction of local radius
    jaw_angle: float = 0.30
    jaw_shift: float = 0.015
    look_angle: float = 0.45
    look_protrusion: float = 0.8  # of the eye-to-surface gap along the socket
    lid_angle_ref: float = 0.5  # scaled by eye_radius / 0.07
    brow_raise: float = 0.025
    pucker: float = 0.35
    containment_margin: float = 0.2  # of eye radius

    def __post_init__(self):
        if min(self.radii) <= 0 or self.eye_radius <= 0:
            raise BadParams("radii must be positive")


@dataclass
class SyntheticHead:
    """Normalized multi-component head with its exact blendshape rig."""

    params: HeadParams
    rig: BlendshapeRig  # neutral TriMesh + analytic displacement fields
    landmark_pairs: list = field(default_factory=lambda: list(EYELID_PAIRS))

    @property
    def mesh(self) -> TriMesh:
        return self.rig.neutral

    @property
    def au_dim(self) -> int:
        return len(AU_NAMES)


def _smooth_window(dirs: np.ndarray, center: np.ndarray, a0: float, a1: float):
    """1 inside angular radius a0, cosine falloff to 0 at a1."""
    ang = np.arccos(np.clip(dirs @ center, -1.0, 1.0))
    w = np.zeros(len(dirs))
    w[ang <= a0] = 1.0
    ramp = (ang > a0) & (ang < a1)
    w[ramp] = 0.5 * (1.0 + np.cos(np.pi * (ang[ramp] - a0) / (a1 - a0)))
    return w


def _rotate_about(points, center, axis, angles):
    """Rodrigues rotation of each point by its own angle about (center, axis)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    p = points - center
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    kxp = np.cross(k, p)
    kdp = (p @ k)[:, None]
    return center + c * p + s * kxp + (1.0 - c) * kdp * k - points


def _radial_profile(dirs: np.ndarray, params: HeadParams, rng) -> np.ndarray:
    a, b, c = params.radii
    rho = 1.0 / np.sqrt(
        (dirs[:, 0] / a) ** 2 + (dirs[:, 1] / b) ** 2 + (dirs[:, 2] / c) ** 2
    )
    rho += params.chin_amp * _smooth_window(dirs, _DIRS["chin"], 0.15, 0.55)
    rho += params.brow_amp * _smooth_window(dirs, _DIRS["brow_l"], 0.10, 0.40)
    rho += params.brow_amp * _smooth_window(dirs, _DIRS["brow_r"], 0.10, 0.40)
    # decorrelates the eye-to-surface gap from eyeball-local geometry
    rho += params.socket_bulge * _smooth_window(dirs, _DIRS["eye_l"], 0.12, 0.42)
    rho += params.socket_bulge * _smooth_window(dirs, _DIRS["eye_r"], 0.12, 0.42)
    centers = rng.standard_normal((6, 3))
    centers /= np.linalg.norm(centers, axis=1)[:, None]
    amps = rng.uniform(-params.noise_amp, params.noise_amp, size=6)
    sharps = rng.uniform(2.0, 6.0, size=6)
    for cdir, amp, sharp in zip(centers, amps, sharps):
        rho += amp * np.exp(-sharp * (1.0 - dirs @ cdir))
    return rho


def _sphere_uv(dirs: np.ndarray) -> np.ndarray:
    u = np.arctan2(dirs[:, 2], dirs[:, 0]) / (2 * np.pi) + 0.5
    v = np.arccos(np.clip(dirs[:, 1], -1, 1)) / np.pi
    return np.stack([u, v], axis=1)


def _landmark_indices(level: int) -> list[int]:
    """Nearest unit-sphere vertices to semantic directions: identical for
    every head at the same tessellation level."""
    base = icosphere(level)
    dirs = base.vertices
    eye_off = 0.16

    def nearest(d):
        d = d / np.linalg.norm(d)
        return int(np.argmax(dirs @ d))

    lid_up_l = _DIRS["eye_l"] + np.array([0.0, eye_off, 0.0])
    lid_lo_l = _DIRS["eye_l"] - np.array([0.0, eye_off, 0.0])
    lid_up_r = _DIRS["eye_r"] + np.array([0.0, eye_off, 0.0])
    lid_lo_r = _DIRS["eye_r"] - np.array([0.0, eye_off, 0.0])
    mouth_l = _DIRS["mouth"] + np.array([0.25, 0.0, 0.0])
    mouth_r = _DIRS["mouth"] - np.array([0.25, 0.0, 0.0])
    return [
        nearest(lid_up_l), nearest(lid_lo_l), nearest(lid_up_r), nearest(lid_lo_r),
        nearest(_DIRS["chin"]), nearest(mouth_l), nearest(mouth_r),
    ]


def make_head(params: HeadParams) -> SyntheticHead:
    """Deterministic head + analytic rig; BadParams if an eyeball touches the
    face surface at neutral."""
    rng = np.random.default_rng(params.seed)
    base = icosphere(params.level)
    dirs = base.vertices
    rho = _radial_profile(dirs, params, rng)
    head_v = dirs * rho[:, None]
    n_head = len(head_v)

    eye_centers = {}
    for side, key in (("l", "eye_l"), ("r", "eye_r")):
        d = _DIRS[key]
        idx = int(np.argmax(dirs @ d))
        eye_centers[side] = d * (params.eye_depth * rho[idx])

    eye = icosphere(params.eye_level, radius=params.eye_radius)
    eye_l = eye.vertices + eye_centers["l"]
    eye_r = eye.vertices + eye_centers["r"]

    # strict containment of both eyeballs in the star-shaped head volume
    margin = params.containment_margin * params.eye_radius
    for pts in (eye_l, eye_r):
        pdirs = pts / np.linalg.norm(pts, axis=1)[:, None]
        prho = _radial_profile(pdirs, params, np.random.default_rng(params.seed))
        if np.any(np.linalg.norm(pts, axis=1) > prho - margin):
            raise BadParams("eyeball intersects or nearly touches the face surface")

    verts = np.vstack([head_v, eye_l, eye_r])
    faces = np.vstack(
        [base.faces, eye.faces + n_head, eye.faces + n_head + len(eye.vertices)]
    )
    eye_dirs = eye.vertices / params.eye_radius
    uv = np.vstack([_sphere_uv(dirs), _sphere_uv(eye_dirs), _sphere_uv(eye_dirs)])
    landmarks = _landmark_indices(params.level)
    mesh = TriMesh(verts, faces, landmark_indices=landmarks, uv=uv)

    slices = {
        "head": np.arange(n_head),
        "eye_l": np.arange(n_head, n_head + len(eye_l)),
        "eye_r": np.arange(n_head + len(eye_l), len(verts)),
    }
    fields = _base_fields(verts, dirs, slices, eye_centers, params)
    names, facs, disp = _assemble_poses(verts, fields, slices, eye_centers, params)

    normed, tf = normalize_unit_sphere(mesh)
    disp = disp * tf.scale
    rig = BlendshapeRig(
        neutral=normed, pose_names=names, facs_vectors=facs,
        displacements=disp, transform=tf,
    )
    return SyntheticHead(params=params, rig=rig)


def _base_fields(verts, head_dirs, slices, eye_centers, params: HeadParams):
    """Analytic displacement per action unit, raw (unnormalized) units."""
    n = len(verts)
    head_idx = slices["head"]
    fields = {code: np.zeros((n, 3)) for code in AU_CODES}

    jaw_w = np.zeros(n)
    jaw_w[head_idx] = _smooth_window(head_dirs, _DIRS["chin"], 0.35, 0.85)
    fields["c_JD"][head_idx] = _rotate_about(
        verts[head_idx], JAW_HINGE, (1.0, 0.0, 0.0), params.jaw_angle * jaw_w[head_idx]
    )
    fields["c_JL"][:, 0] = params.jaw_shift * jaw_w
    fields["c_JR"][:, 0] = -params.jaw_shift * jaw_w

    # gaze poses: rotation about the eyeball center plus a protrusion toward
    # the socket opening. The protrusion is a fraction of the gap between the
    # eyeball front and the face surface, so its correct magnitude depends on
    # face geometry invisible from the eyeball component alone.
    look = {
        "c_ELL": ((0.0, 1.0, 0.0), params.look_angle),
        "c_ELR": ((0.0, 1.0, 0.0), -params.look_angle),
        "c_ELU": ((1.0, 0.0, 0.0), -params.look_angle),
        "c_ELD": ((1.0, 0.0, 0.0), params.look_angle),
    }
    protrusion = _socket_protrusions(verts, head_dirs, slices, eye_centers, params)
    for code, (axis, ang) in look.items():
        for side in ("l", "r"):
            idx = slices[f"eye_{side}"]
            fields[code][idx] = _rotate_about(
                verts[idx], eye_centers[side], axis, np.full(len(idx), ang)
            ) + protrusion[side]

    lid_angle = params.lid_angle_ref * (params.eye_radius / 0.07)
    for side, code in (("l", "l_EC"), ("r", "r_EC")):
        lid_dir = _DIRS[f"eye_{side}"] + np.array([0.0, 0.18, 0.0])
        lid_dir /= np.linalg.norm(lid_dir)
        w = np.zeros(n)
        w[head_idx] = _smooth_window(head_dirs, lid_dir, 0.10, 0.30)
        fields[code][head_idx] = _rotate_about(
            verts[head_idx], eye_centers[side], (1.0, 0.0, 0.0),
            lid_angle * w[head_idx],
        )

    for side, code in (("l", "l_OBR"), ("r", "r_OBR")):
        w = np.zeros(n)
        w[head_idx] = _smooth_window(head_dirs, _DIRS[f"brow_{side}"], 0.12, 0.38)
        lift = np.array([0.0, 0.75, 0.25])
        fields[code] += params.brow_raise * w[:, None] * lift

    mouth_idx = int(np.argmax(head_dirs @ _DIRS["mouth"]))
    mouth_center = verts[head_idx][mouth_idx] * 0.95
    w = np.zeros(n)
    w[head_idx] = _smooth_window(head_dirs, _DIRS["mouth"], 0.12, 0.42)
    fields["c_PK"] = params.pucker * w[:, None] * (mouth_center - verts)
    fields["c_PK"][~np.isin(np.arange(n), head_idx)] = 0.0

    # region weights reused by corrective damping
    regions = {
        "c_JD": jaw_w, "c_JL": jaw_w, "c_JR": jaw_w,
        "c_PK": w,
    }
    for side, code in (("l", "l_EC"), ("r", "r_EC")):
        lid_dir = _DIRS[f"eye_{side}"] + np.array([0.0, 0.18, 0.0])
        lid_dir /= np.linalg.norm(lid_dir)
        rw = np.zeros(n)
        rw[head_idx] = _smooth_window(head_dirs, lid_dir, 0.10, 0.30)
        regions[code] = rw
    return {"fields": fields, "regions": regions, "protrusion": protrusion}


def _socket_protrusions(verts, head_dirs, slices, eye_centers, params: HeadParams):
    """Per-side rigid protrusion along the socket direction for gaze poses.

    The budget starts at look_protrusion times the axial eye-to-surface gap
    and shrinks until every protruded eyeball vertex keeps a 3% radial margin
    below the face profile (covers chord sag of the discrete surface).
    """
    out = {}
    for side, key in (("l", "eye_l"), ("r", "eye_r")):
        d = _DIRS[key]
        idx = int(np.argmax(head_dirs @ d))
        rho = np.linalg.norm(verts[slices["head"]][idx])
        front = np.linalg.norm(eye_centers[side]) + params.eye_radius
        delta = params.look_protrusion * max(rho - front, 0.0)
        pts = verts[slices[f"eye_{side}"]]
        while delta > 1e-6:
            p = pts + delta * d
            pn = np.linalg.norm(p, axis=1)
            pdirs = p / pn[:, None]
            prho = _radial_profile(pdirs, params, np.random.default_rng(params.seed))
            if np.all(pn <= prho * 0.97):
                break
            delta *= 0.85
        out[side] = delta * d if delta > 1e-6 else np.zeros(3)
    return out


def _assemble_poses(verts, bundle, slices, eye_centers, params: HeadParams):
    fields = bundle["fields"]
    regions = bundle["regions"]
    D = len(AU_CODES)
    names = ["neutral"]
    facs = [FacsVector.zeros(D)]
    disp = [np.zeros_like(verts)]
    for i, name in enumerate(AU_NAMES):
        names.append(name)
        facs.append(FacsVector.onehot(i, D))
        disp.append(fields[AU_CODES[i]])

    look_axes = {
        "c_ELL": ("y", params.look_angle), "c_ELR": ("y", -params.look_angle),
        "c_ELU": ("x", -params.look_angle), "c_ELD": ("x", params.look_angle),
    }
    for a, b in CORRECTIVE_PAIRS:
        act = np.zeros(D)
        act[AU_INDEX[a]] = 1.0
        act[AU_INDEX[b]] = 1.0
        full_a = AU_NAMES[AU_INDEX[a]].split()[1]
        full_b = AU_NAMES[AU_INDEX[b]].split()[1]
        names.append(f"x_{a.split('_')[1]}_{b.split('_')[1]} {full_a}+{full_b}")
        facs.append(FacsVector(act))
        if a in look_axes and b in look_axes:
            # exact composed gaze rotation (not the sum of rotations), with
            # the socket protrusion applied once
            d = np.zeros_like(verts)
            for side in ("l", "r"):
                idx = slices[f"eye_{side}"]
                p = verts[idx]
                for code in (a, b):
                    axis_name, ang = look_axes[code]
                    axis = (1.0, 0.0, 0.0) if axis_name == "x" else (0.0, 1.0, 0.0)
                    p = p + _rotate_about(p, eye_centers[side], axis, np.full(len(idx), ang))
                d[idx] = p - verts[idx] + bundle["protrusion"][side]
            disp.append(d)
        else:
            da, db = fields[a], fields[b]
            overlap = (regions.get(a, 0.0) * regions.get(b, 0.0))[:, None]
            disp.append(da + db - CORRECTIVE_DAMP * overlap * (da + db))
    return names, facs, np.stack(disp)


def interpolate_heads(a: SyntheticHead, b: SyntheticHead, alpha: float) -> SyntheticHead:
    """Linear blend of vertices, landmarks, and displacement fields."""
    ma, mb = a.mesh, b.mesh
    if ma.n_vertices != mb.n_vertices or not np.array_equal(ma.faces, mb.faces):
        raise TopologyMismatch("heads must share tessellation to interpolate")
    if a.rig.pose_names != b.rig.pose_names:
        raise TopologyMismatch("pose tables differ")
    verts = (1.0 - alpha) * ma.vertices + alpha * mb.vertices
    disp = (1.0 - alpha) * a.rig.displacements + alpha * b.rig.displacements
    mesh = TriMesh(
        verts, ma.faces.copy(),
        landmark_indices=list(ma.landmark_indices), uv=ma.uv.copy(),
    )
    rig = BlendshapeRig(
        neutral=mesh, pose_names=list(a.rig.pose_names),
        facs_vectors=list(a.rig.facs_vectors), displacements=disp,
        transform=a.rig.transform,
    )
    return SyntheticHead(params=a.params, rig=rig)


# --- dataset generation -----------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    rigged: int = 6
    unrigged: int = 8
    test_rigged: int = 2
    test_unrigged: int = 2
    interp_factor: int = 3
    levels: tuple = (3,)
    eye_levels: tuple = (1,)
    sup_res: tuple = (128, 128)
    cam_fov_deg: float = 45.0
    cam_distance: float = 3.0
    flow_noise_px: float = 0.5
    seed: int = 0
    # unrigged heads draw from a wider shape range than rigged ones so the
    # unrigged pool genuinely extends coverage toward the test distribution
    rigged_spread: float = 0.5
    unrigged_spread: float = 1.0

    def __post_init__(self):
        if self.rigged < 1 or self.unrigged < 1 or self.interp_factor < 1:
            raise BadConfig("counts must be >= 1")
        if self.test_rigged >= self.rigged or self.test_unrigged >= self.unrigged:
            raise BadConfig("test split must leave training heads")

    def camera(self) -> r2.Camera:
        return r2.Camera(
            fov_y=np.deg2rad(self.cam_fov_deg),
            position=(0.0, 0.0, self.cam_distance),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def sample_head_params(seed, index: int, level: int, eye_level: int,
                       spread: float = 1.0, attempt: int = 0) -> HeadParams:
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), index, attempt])
    u = lambda lo, hi: float(rng.uniform(lo, hi))
    s = spread
    return HeadParams(
        seed=int(rng.integers(2**31)),
        level=level,
        eye_level=eye_level,
        radii=(
            0.46 + s * u(-0.05, 0.05),
            0.52 + s * u(-0.06, 0.06),
            0.47 + s * u(-0.04, 0.05),
        ),
        chin_amp=0.05 + s * u(-0.02, 0.03),
        brow_amp=0.02 + s * u(-0.008, 0.012),
        socket_bulge=s * u(-0.012, 0.045),
        noise_amp=0.012 * s if s > 0 else 0.0,
        eye_radius=0.07 + s * u(-0.018, 0.02),
        eye_depth=0.77 + s * u(-0.08, 0.05),
    )


def sample_valid_head(seed, index: int, level: int, eye_level: int,
                      spread: float = 1.0, max_attempts: int = 16) -> SyntheticHead:
    """Deterministic rejection sampling over eyeball-containment failures."""
    for attempt in range(max_attempts):
        params = sample_head_params(seed, index, level, eye_level, spread, attempt)
        try:
            return make_head(params)
        except BadParams:
            continue
    raise BadParams(f"no valid head after {max_attempts} attempts (index {index})")


def head_directory(root, head_id: str) -> Path:
    return Path(root) / "heads" / head_id


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, lambda p: p.write_text(json.dumps(obj, indent=1, sort_keys=True)))


def render_supervision(head: SyntheticHead, pose_index: int, camera: r2.Camera,
                       res, noise_px: float = 0.0, rng=None):
    """Rendered 2D ground truth for one pose of one head.

    Returns (Supervision2D, hard neutral coverage). Gaussian pixel noise, when
    requested, corrupts the motion map on covered pixels only.
    """
    mesh = head.mesh
    v0 = mesh.vertices
    posed = v0 + head.rig.displacements[pose_index]
    targets = r2.rasterize(posed, mesh.faces, camera, res)
    flow_t, flow_aux = r2.render_displacement_with_aux(v0, posed, mesh.faces, camera, res)
    flow = flow_t.data
    coverage = flow_aux["coverage"]
    if noise_px > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        noise = rng.normal(0.0, noise_px, size=flow.shape)
        noise = noise / np.array(res, dtype=np.float64) * 0.5
        flow = flow + np.where(coverage[:, :, None], noise, 0.0)
    lmk = np.asarray(mesh.landmark_indices, dtype=np.int64)
    screen, _ = r2.project_screen(posed[lmk], camera, res)
    lmk2d = screen.data[:, :2] / np.array(res, dtype=np.float64)
    sup = r2.Supervision2D(
        image=targets.image.data, mask=targets.mask.data,
        flow=flow, landmarks_2d=lmk2d,
    )
    return sup, coverage


def write_supervision(head: SyntheticHead, out_dir: Path, camera, res,
                      noise_px: float, seed_key) -> None:
    for pose_index in range(head.rig.n_poses):
        rng = np.random.default_rng([*seed_key, pose_index])
        sup, _ = render_supervision(head, pose_index, camera, res, noise_px, rng)
        pdir = out_dir / "sup2d" / f"{pose_index:03d}"
        pdir.mkdir(parents=True, exist_ok=True)
        _atomic_write(pdir / "image.png", lambda p: r2.save_png(p, sup.image))
        _atomic_write(pdir / "mask.png", lambda p: r2.save_png(p, sup.mask))
        _atomic_write(pdir / "flow.rftn", lambda p: r2.save_tensor(p, sup.flow))
        _write_json(pdir / "lmk.json", {"landmarks_2d": sup.landmarks_2d.tolist()})


def write_rig_fields(head: SyntheticHead, rig_dir: Path) -> None:
    rig_dir.mkdir(parents=True, exist_ok=True)
    _write_json(
        rig_dir / "poses.json",
        {
            "pose_names": head.rig.pose_names,
            "facs_vectors": [f.activations.tolist() for f in head.rig.facs_vectors],
            "au_names": AU_NAMES,
        },
    )
    for i in range(head.rig.n_poses):
        _atomic_write(
            rig_dir / f"pose_{i:03d}.rftn",
            lambda p, i=i: r2.save_tensor(p, head.rig.displacements[i]),
        )


def write_head(head: SyntheticHead, out_dir: Path, with_rig: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "neutral.obj", lambda p: save_obj(head.mesh, p))
    _write_json(
        out_dir / "landmarks.json",
        {
            "landmarks": list(map(int, head.mesh.landmark_indices)),
            "pairs": [list(p) for p in head.landmark_pairs],
            "names": LANDMARK_NAMES,
        },
    )
    if with_rig:
        write_rig_fields(head, out_dir / "rig")


def _interp_plan(bases: list[tuple[str, SyntheticHead]], total_new: int, rng):
    """Deterministic same-topology pair selection for augmentation."""
    by_level: dict[int, list[int]] = {}
    for i, (_, head) in enumerate(bases):
        by_level.setdefault(head.params.level, []).append(i)
    groups = [g for g in by_level.values() if len(g) >= 2]
    if total_new > 0 and not groups:
        raise BadConfig("interpolation needs at least two heads per level")
    plan = []
    for j in range(total_new):
        g = groups[j % len(groups)]
        i_a, i_b = rng.choice(g, size=2, replace=False)
        alpha = float(rng.uniform(0.25, 0.75))
        plan.append((int(i_a), int(i_b), alpha))
    return plan


def generate_dataset(config: DatasetConfig, out_root) -> dict:
    """Build every head, interpolation, and supervision file; returns the
    manifest (also written to manifest.json)."""
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    camera = config.camera()
    entries = []

    def level_of(i):
        return config.levels[i % len(config.levels)], config.eye_levels[i % len(config.eye_levels)]

    roles = [("rigged", config.rigged, config.test_rigged, config.rigged_spread),
             ("unrigged", config.unrigged, config.test_unrigged, config.unrigged_spread)]
    heads: dict[str, SyntheticHead] = {}
    for role, count, test_count, spread in roles:
        train_bases = []
        for i in range(count):
            level, eye_level = level_of(i)
            head = sample_valid_head(
                [config.seed, 1 if role == "rigged" else 2], i, level, eye_level, spread
            )
            head_id = f"{role[0]}{i:03d}"
            split = "test" if i >= count - test_count else "train"
            heads[head_id] = head
            entries.append(
                {"id": head_id, "role": role, "split": split,
                 "level": level, "source": "base"}
            )
            if split == "train":
                train_bases.append((head_id, head))
        n_new = (config.interp_factor - 1) * len(train_bases)
        plan = _interp_plan(train_bases, n_new, rng)
        for j, (ia, ib, alpha) in enumerate(plan):
            id_a, head_a = train_bases[ia]
            id_b, head_b = train_bases[ib]
            head = interpolate_heads(head_a, head_b, alpha)
            head_id = f"{role[0]}i{j:03d}"
            heads[head_id] = head
            entries.append(
                {"id": head_id, "role": role, "split": "train",
                 "level": head.params.level,
                 "source": ["interp", id_a, id_b, alpha]}
            )

    for entry in entries:
        head = heads[entry["id"]]
        hdir = head_directory(root, entry["id"])
        rigged = entry["role"] == "rigged"
        write_head(head, hdir, with_rig=rigged)
        if not rigged:
            # sequestered ground truth: evaluation only, never training input
            write_rig_fields(head, root / "eval_gt" / entry["id"] / "rig")
        if entry["split"] == "train":
            write_supervision(
                head, hdir, camera, tuple(config.sup_res),
                config.flow_noise_px, seed_key=[config.seed, 7, _stable_key(entry["id"])],
            )

    first = heads[entries[0]["id"]].rig
    manifest = {
        "config": config.to_dict(),
        "au_names": AU_NAMES,
        "pose_names": first.pose_names,
        "facs_vectors": [f.activations.tolist() for f in first.facs_vectors],
        "landmark_pairs": [list(p) for p in EYELID_PAIRS],
        "heads": entries,
    }
    _write_json(root / "manifest.json", manifest)
    return manifest


def _stable_key(head_id: str) -> int:
    return int.from_bytes(head_id.encode(), "little") % (2**31)


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        from .errors import DatasetMissing

        raise DatasetMissing(f"no manifest at {path}")
    return json.loads(path.read_text())
