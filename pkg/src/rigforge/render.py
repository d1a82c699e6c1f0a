"""Differentiable rasterization, 2D supervision signals, and training losses.

Color/attribute channels use a hard front-most depth test with screen-space
barycentric interpolation; gradients flow through both the attribute values
and the barycentric weights. The silhouette mask is a soft aggregate
``1 - prod_f (1 - sigmoid(sign * d^2 / sigma))`` over faces near each pixel,
with ``d`` the pixel-to-triangle distance in normalized screen units.

Screen-space displacement maps encode per-vertex motion as
``offset / res * 0.5 + 0.5`` and are rasterized over the *neutral* geometry,
so their coverage and weights are constants: gradients reach the deformed
vertices only through the encoded attribute values. Values outside [0, 1]
are kept, not clamped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .errors import (
    BadConfig,
    ChecksumMismatch,
    MissingLandmarks,
    ShapeMismatch,
    VersionMismatch,
)

SIGMA_DEFAULT = 1e-5  # soft-mask sharpness, normalized screen units
GAMMA_DEFAULT = 1e-4  # reserved aggregate temperature; color uses a hard test
_SIG_CUTOFF = 30.0  # sigmoid support radius: exp(-30) is below f64 noise here

LIGHT_DIR = np.array([0.3, 0.4, 0.85])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.25
DIFFUSE = 0.7

STAGE1_WEIGHTS = (10.0, 1.0, 1.0, 0.0001)
STAGE2_WEIGHTS = (10.0, 1.0, 100.0, 0.5, 0.5)


@dataclass(frozen=True)
class Camera:
    """Perspective camera with look-at extrinsics; +z front view by default."""

    fov_y: float = np.deg2rad(20.0)
    aspect: float = 1.0
    position: tuple = (0.0, 0.0, 3.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.fov_y < np.pi:
            raise BadConfig(f"fov_y {self.fov_y} outside (0, pi)")
        if not self.near < self.far:
            raise BadConfig("near must be below far")

    def basis(self) -> np.ndarray:
        """Rows: right, up, forward in world space."""
        eye = np.asarray(self.position, dtype=np.float64)
        fwd = np.asarray(self.look_at, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        up = np.cross(right, fwd)
        return np.stack([right, up, fwd])


def project_screen(verts, camera: Camera, res: tuple[int, int]):
    """Project world points to (x_px, y_px, depth); origin at top-left.

    Returns (screen tensor (n, 3), behind flags (n,) ndarray). Vertices
    behind the near plane or beyond far are flagged and must be excluded
    from rasterization.
    """
    W, H = res
    v = ad.as_tensor(verts)
    if v.data.ndim != 2 or v.data.shape[1] != 3:
        raise ShapeMismatch(f"expected (n, 3) vertices, got {v.shape}")
    R = camera.basis()
    eye = np.asarray(camera.position, dtype=np.float64)
    cam = ad.matmul(ad.sub(v, eye), R.T.copy())  # columns: right, up, forward
    x, y, z = cam[:, 0:1], cam[:, 1:2], cam[:, 2:3]
    tan_half = np.tan(camera.fov_y / 2.0)
    x_ndc = ad.div(x, ad.mul(z, tan_half * camera.aspect))
    y_ndc = ad.div(y, ad.mul(z, tan_half))
    x_px = ad.mul(ad.add(ad.mul(x_ndc, 0.5), 0.5), float(W))
    y_px = ad.mul(ad.sub(0.5, ad.mul(y_ndc, 0.5)), float(H))
    screen = ad.concat([x_px, y_px, z], axis=1)
    zdata = cam.data[:, 2]
    behind = (zdata < camera.near) | (zdata > camera.far)
    return screen, behind


# --- hard attribute rasterization ----------------------------------------------


def _candidate_pairs(screen_xy: np.ndarray, faces: np.ndarray, valid: np.ndarray,
                     res: tuple[int, int], inflate: float = 0.0):
    """Flattened (face, pixel) candidates from inflated screen bboxes.

    Returns (pair_face, px, py) where px/py are pixel-center coordinates.
    """
    W, H = res
    ok = valid[faces].all(axis=1)
    tri = screen_xy[faces]  # (m, 3, 2)
    lo = np.floor(tri.min(axis=1) - inflate - 0.5).astype(np.int64)
    hi = np.ceil(tri.max(axis=1) + inflate - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], W - 1)
    hi[:, 1] = np.minimum(hi[:, 1], H - 1)
    wdt = hi[:, 0] - lo[:, 0] + 1
    hgt = hi[:, 1] - lo[:, 1] + 1
    keep = ok & (wdt > 0) & (hgt > 0)
    fids = np.nonzero(keep)[0]
    if len(fids) == 0:
        e = np.empty(0, dtype=np.int64)
        return e, e.astype(np.float64), e.astype(np.float64)
    counts = (wdt[fids] * hgt[fids]).astype(np.int64)
    total = int(counts.sum())
    pair_face = np.repeat(fids, counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    w_rep = wdt[pair_face]
    px = lo[pair_face, 0] + local % w_rep
    py = lo[pair_face, 1] + local // w_rep
    return pair_face, px + 0.5, py + 0.5


def _rasterize_forward(screen: np.ndarray, faces: np.ndarray, attrs: np.ndarray,
                       valid: np.ndarray, res: tuple[int, int], background):
    W, H = res
    C = attrs.shape[1]
    img = np.empty((H, W, C))
    img[...] = background
    zbuf = np.full((H, W), np.inf)
    pix_face = np.full((H, W), -1, dtype=np.int64)
    pix_bary = np.zeros((H, W, 3))
    pix_s = np.zeros((H, W))
    pair_face, px, py = _candidate_pairs(screen[:, :2], faces, valid, res)
    if len(pair_face) == 0:
        return img, zbuf, pix_face, pix_bary, pix_s
    tri = screen[faces[pair_face]]  # (P, 3, 3)
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    w0 = (v1[:, 0] - px) * (v2[:, 1] - py) - (v1[:, 1] - py) * (v2[:, 0] - px)
    w1 = (v2[:, 0] - px) * (v0[:, 1] - py) - (v2[:, 1] - py) * (v0[:, 0] - px)
    w2 = (v0[:, 0] - px) * (v1[:, 1] - py) - (v0[:, 1] - py) * (v1[:, 0] - px)
    s = w0 + w1 + w2
    sgn = np.sign(s)
    inside = (w0 * sgn >= 0) & (w1 * sgn >= 0) & (w2 * sgn >= 0) & (np.abs(s) > 1e-14)
    if not inside.any():
        return img, zbuf, pix_face, pix_bary, pix_s
    pair_face, px, py = pair_face[inside], px[inside], py[inside]
    v0, v1, v2 = v0[inside], v1[inside], v2[inside]
    w1, w2, s = w1[inside], w2[inside], s[inside]
    b1 = w1 / s
    b2 = w2 / s
    b0 = 1.0 - b1 - b2
    z = b0 * v0[:, 2] + b1 * v1[:, 2] + b2 * v2[:, 2]
    pix = (py - 0.5).astype(np.int64) * W + (px - 0.5).astype(np.int64)
    # front-most per pixel, ties resolved to the earlier face: lexsort is
    # keyed last-to-first, so order is (pixel, depth, face id)
    order = np.lexsort((pair_face, z, pix))
    first = np.ones(len(order), dtype=bool)
    pix_sorted = pix[order]
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    rows = pix[win] // W
    cols = pix[win] % W
    zbuf[rows, cols] = z[win]
    pix_face[rows, cols] = pair_face[win]
    pix_bary[rows, cols, 0] = b0[win]
    pix_bary[rows, cols, 1] = b1[win]
    pix_bary[rows, cols, 2] = b2[win]
    pix_s[rows, cols] = s[win]
    a = attrs[faces[pair_face[win]]]  # (Pw, 3, C)
    # affine form keeps constant attributes bit-exact
    vals = a[:, 0] + b1[win][:, None] * (a[:, 1] - a[:, 0]) + b2[win][:, None] * (
        a[:, 2] - a[:, 0]
    )
    img[rows, cols] = vals
    return img, zbuf, pix_face, pix_bary, pix_s


def _rot(q):
    """90-degree rotation used by the barycentric derivatives."""
    return np.stack([q[..., 1], -q[..., 0]], axis=-1)


def rasterize_attributes(screen, attrs, faces, valid, res, background=0.0):
    """Differentiable hard rasterization of per-vertex attributes.

    screen : (n, 3) tensor of pixel coordinates and depth from project_screen
    attrs : (n, C) tensor interpolated with screen-space barycentrics
    Returns ((H, W, C) tensor, aux dict with depth/coverage/face ids).
    Gradients propagate to both ``attrs`` and the xy part of ``screen``.
    """
    screen = ad.as_tensor(screen)
    attrs = ad.as_tensor(attrs)
    faces = np.asarray(faces, dtype=np.int64)
    if screen.shape[0] != attrs.shape[0]:
        raise ShapeMismatch("screen and attribute row counts differ")
    sdata = screen.data
    adata = attrs.data
    C = adata.shape[1]
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (C,))
    img, zbuf, pix_face, pix_bary, pix_s = _rasterize_forward(
        sdata, faces, adata, valid, res, bg
    )
    aux = {"depth": zbuf, "coverage": pix_face >= 0, "face_id": pix_face}

    covered = pix_face >= 0
    fids = pix_face[covered]
    bary = pix_bary[covered]
    s_all = pix_s[covered]
    rr, cc = np.nonzero(covered)
    pxy = np.stack([cc + 0.5, rr + 0.5], axis=-1)

    def vjp(g):
        gcov = g[covered]  # (P, C)
        n = sdata.shape[0]
        grad_attrs = np.zeros_like(adata)
        tri = faces[fids]  # (P, 3)
        for k in range(3):
            np.add.at(grad_attrs, tri[:, k], bary[:, [k]] * gcov)
        # barycentric motion term
        grad_screen = np.zeros_like(sdata)
        v = sdata[:, :2][tri]  # (P, 3, 2)
        a = adata[tri]  # (P, 3, C)
        sk = np.einsum("pc,pkc->pk", gcov, a)  # (P, 3)
        S = (sk * bary).sum(axis=1)  # (P,)
        d0 = _rot(v[:, 2] - pxy)  # rot(v2 - p)
        d1 = _rot(v[:, 1] - pxy)  # rot(v1 - p)
        d2 = _rot(v[:, 0] - pxy)  # rot(v0 - p)
        e0 = _rot(v[:, 1] - v[:, 2])
        e1 = _rot(v[:, 2] - v[:, 0])
        e2 = _rot(v[:, 0] - v[:, 1])
        inv_s = 1.0 / s_all
        g0 = (-sk[:, [1]] * d0 + sk[:, [2]] * d1 - S[:, None] * e0) * inv_s[:, None]
        g1 = (sk[:, [0]] * d0 - sk[:, [2]] * d2 - S[:, None] * e1) * inv_s[:, None]
        g2 = (-sk[:, [0]] * d1 + sk[:, [1]] * d2 - S[:, None] * e2) * inv_s[:, None]
        gs2 = np.zeros((n, 2))
        np.add.at(gs2, tri[:, 0], g0)
        np.add.at(gs2, tri[:, 1], g1)
        np.add.at(gs2, tri[:, 2], g2)
        grad_screen[:, :2] = gs2
        return grad_screen, grad_attrs

    out = ad.custom_node([screen, attrs], img, vjp)
    return out, aux


# --- soft silhouette mask -------------------------------------------------------


def _soft_terms(qxy: np.ndarray, faces: np.ndarray, pair_face, qpx, qpy):
    """Per-pair signed squared distance to the triangle, argmin edge and its
    projection parameter, all in normalized screen units."""
    tri = qxy[faces[pair_face]]  # (P, 3, 2)
    p = np.stack([qpx, qpy], axis=-1)
    d2_edges = np.empty((len(pair_face), 3))
    t_edges = np.empty((len(pair_face), 3))
    for e, (ia, ib) in enumerate(((0, 1), (1, 2), (2, 0))):
        a = tri[:, ia]
        b = tri[:, ib]
        ab = b - a
        denom = (ab * ab).sum(axis=1)
        t = ((p - a) * ab).sum(axis=1) / np.where(denom > 1e-30, denom, 1.0)
        t = np.clip(np.where(denom > 1e-30, t, 0.0), 0.0, 1.0)
        dd = p - a - t[:, None] * ab
        d2_edges[:, e] = (dd * dd).sum(axis=1)
        t_edges[:, e] = t
    edge = d2_edges.argmin(axis=1)
    rng = np.arange(len(pair_face))
    d2 = d2_edges[rng, edge]
    t_star = t_edges[rng, edge]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    area = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (
        v1[:, 1] - v0[:, 1]
    ) * (v2[:, 0] - v0[:, 0])
    sa = np.where(area >= 0, 1.0, -1.0)
    c0 = ((v1[:, 0] - qpx) * (v2[:, 1] - qpy) - (v1[:, 1] - qpy) * (v2[:, 0] - qpx)) * sa
    c1 = ((v2[:, 0] - qpx) * (v0[:, 1] - qpy) - (v2[:, 1] - qpy) * (v0[:, 0] - qpx)) * sa
    c2 = ((v0[:, 0] - qpx) * (v1[:, 1] - qpy) - (v0[:, 1] - qpy) * (v1[:, 0] - qpx)) * sa
    sign = np.where((c0 >= 0) & (c1 >= 0) & (c2 >= 0), 1.0, -1.0)
    return d2, sign, edge, t_star


def rasterize_soft_mask(screen, faces, valid, res, sigma=SIGMA_DEFAULT):
    """Soft silhouette in [0, 1]: 1 - prod over faces of (1 - sigmoid term).

    Distances are measured between pixel centers and triangles in normalized
    screen coordinates (pixel / resolution). Differentiable w.r.t. screen xy.
    """
    if sigma <= 0:
        raise BadConfig("sigma must be positive")
    screen = ad.as_tensor(screen)
    faces = np.asarray(faces, dtype=np.int64)
    W, H = res
    sdata = screen.data
    scale = np.array([W, H], dtype=np.float64)
    qxy = sdata[:, :2] / scale
    rcut_px = float(np.sqrt(_SIG_CUTOFF * sigma) * max(W, H))
    pair_face, px, py = _candidate_pairs(sdata[:, :2], faces, valid, res, inflate=rcut_px)
    qpx = px / W
    qpy = py / H
    pix = (py - 0.5).astype(np.int64) * W + (px - 0.5).astype(np.int64)
    d2, sign, edge, t_star = _soft_terms(qxy, faces, pair_face, qpx, qpy)
    arg = np.clip(sign * d2 / sigma, -700.0, 700.0)
    D = 1.0 / (1.0 + np.exp(-arg))
    log_p = np.zeros(H * W)
    with np.errstate(divide="ignore"):
        log_terms = np.log1p(-D)
    np.add.at(log_p, pix, log_terms)
    prod = np.exp(log_p).reshape(H, W)
    mask = 1.0 - prod

    def vjp(g):
        one_minus = 1.0 - D
        safe = one_minus > 0.0
        leave_out = np.zeros_like(D)
        leave_out[safe] = np.exp(log_p[pix[safe]] - log_terms[safe])
        gD = g.ravel()[pix] * leave_out
        gd2 = gD * (sign / sigma) * D * one_minus
        tri_idx = faces[pair_face]
        ia = np.choose(edge, [tri_idx[:, 0], tri_idx[:, 1], tri_idx[:, 2]])
        ib = np.choose(edge, [tri_idx[:, 1], tri_idx[:, 2], tri_idx[:, 0]])
        a = qxy[ia]
        b = qxy[ib]
        p = np.stack([qpx, qpy], axis=-1)
        diff = p - (a + t_star[:, None] * (b - a))  # p - closest point
        coeff = gd2[:, None]
        grad_q = np.zeros_like(qxy)
        np.add.at(grad_q, ia, -2.0 * coeff * (1.0 - t_star[:, None]) * diff)
        np.add.at(grad_q, ib, -2.0 * coeff * t_star[:, None] * diff)
        grad_screen = np.zeros_like(sdata)
        grad_screen[:, :2] = grad_q / scale
        return (grad_screen,)

    return ad.custom_node([screen], mask, vjp)


# --- shading and full render ----------------------------------------------------


def vertex_normals_diff(verts, faces: np.ndarray):
    """Area-weighted vertex normals as a differentiable graph (eps-guarded)."""
    v = ad.as_tensor(verts)
    faces = np.asarray(faces, dtype=np.int64)
    p0 = ad.gather_rows(v, faces[:, 0])
    p1 = ad.gather_rows(v, faces[:, 1])
    p2 = ad.gather_rows(v, faces[:, 2])
    e1 = ad.sub(p1, p0)
    e2 = ad.sub(p2, p0)
    cx = ad.sub(ad.mul(e1[:, 1:2], e2[:, 2:3]), ad.mul(e1[:, 2:3], e2[:, 1:2]))
    cy = ad.sub(ad.mul(e1[:, 2:3], e2[:, 0:1]), ad.mul(e1[:, 0:1], e2[:, 2:3]))
    cz = ad.sub(ad.mul(e1[:, 0:1], e2[:, 1:2]), ad.mul(e1[:, 1:2], e2[:, 0:1]))
    fc = ad.concat([cx, cy, cz], axis=1)
    n = v.shape[0]
    acc = ad.scatter_add_rows(fc, faces[:, 0], n)
    acc = ad.add(acc, ad.scatter_add_rows(fc, faces[:, 1], n))
    acc = ad.add(acc, ad.scatter_add_rows(fc, faces[:, 2], n))
    norm = ad.sqrt(ad.add(ad.sum_(ad.mul(acc, acc), axis=1, keepdims=True), 1e-24))
    return ad.div(acc, norm)


def lambert_shading(verts, faces: np.ndarray):
    """Per-vertex gray shading: ambient plus one directional light."""
    normals = vertex_normals_diff(verts, faces)
    ndotl = ad.sum_(ad.mul(normals, LIGHT_DIR), axis=1, keepdims=True)
    return ad.add(ad.mul(ad.relu(ndotl), DIFFUSE), AMBIENT)


@dataclass
class RenderTargets:
    """Rendered supervision channels; image/mask/flow are autodiff tensors."""

    image: ad.Tensor  # (H, W, 3) in [0, 1], white background
    mask: ad.Tensor  # (H, W) soft silhouette
    flow: ad.Tensor | None  # (H, W, 2) per the 0.5-centered encoding
    depth: np.ndarray  # (H, W), +inf on background
    coverage: np.ndarray  # (H, W) bool, hard coverage


@dataclass
class Supervision2D:
    """Ground-truth channels; plain arrays (no gradients flow into targets)."""

    image: np.ndarray
    mask: np.ndarray
    flow: np.ndarray | None = None
    landmarks_2d: np.ndarray | None = None  # (L, 2) normalized screen coords

    def __post_init__(self):
        if self.mask.shape != self.image.shape[:2]:
            raise ShapeMismatch("mask and image resolutions differ")
        if self.flow is not None and self.flow.shape[:2] != self.image.shape[:2]:
            raise ShapeMismatch("flow and image resolutions differ")


def rasterize(verts, faces, camera: Camera, res, sigma=SIGMA_DEFAULT,
              gamma=GAMMA_DEFAULT, flow_attr=None, flow_screen=None) -> RenderTargets:
    """Render shading image, soft mask, depth, and optionally a flow map.

    ``flow_attr``/``flow_screen`` rasterize an extra 2-channel attribute over
    an alternative (typically neutral) geometry; see render_displacement.
    """
    if gamma <= 0:
        raise BadConfig("gamma must be positive")
    verts = ad.as_tensor(verts)
    faces = np.asarray(faces, dtype=np.int64)
    W, H = res
    screen, behind = project_screen(verts, camera, res)
    valid = ~behind
    if len(faces) == 0:
        white = ad.Tensor(np.ones((H, W, 3)))
        return RenderTargets(
            image=white,
            mask=ad.Tensor(np.zeros((H, W))),
            flow=None,
            depth=np.full((H, W), np.inf),
            coverage=np.zeros((H, W), dtype=bool),
        )
    shade = lambert_shading(verts, faces)
    rastered, aux = rasterize_attributes(screen, shade, faces, valid, res, background=1.0)
    image = ad.concat([rastered, rastered, rastered], axis=2)
    mask = rasterize_soft_mask(screen, faces, valid, res, sigma=sigma)
    flow = None
    if flow_attr is not None:
        fscreen = flow_screen if flow_screen is not None else screen
        flow, _ = rasterize_attributes(
            fscreen, flow_attr, faces, valid, res, background=0.5
        )
    return RenderTargets(
        image=image, mask=mask, flow=flow, depth=aux["depth"], coverage=aux["coverage"]
    )


def render_displacement(v0, v_deformed, faces, camera: Camera, res):
    """Screen-space motion of each pixel, encoded as offset/res * 0.5 + 0.5.

    The map is rasterized over the neutral geometry; coverage and weights are
    constants there, so gradients reach both vertex sets only through the
    per-vertex encoded offsets. Zero deformation encodes exactly 0.5.
    """
    flow, _ = render_displacement_with_aux(v0, v_deformed, faces, camera, res)
    return flow


def render_displacement_with_aux(v0, v_deformed, faces, camera: Camera, res):
    """render_displacement plus the neutral-geometry raster aux (coverage)."""
    v0_t = ad.as_tensor(v0)
    vd_t = ad.as_tensor(v_deformed)
    if v0_t.shape != vd_t.shape:
        raise ShapeMismatch("vertex count mismatch between neutral and deformed")
    faces = np.asarray(faces, dtype=np.int64)
    W, H = res
    s0, behind0 = project_screen(v0_t, camera, res)
    sd, _ = project_screen(vd_t, camera, res)
    offset = ad.sub(sd[:, :2], s0[:, :2])
    encoded = ad.add(ad.mul(ad.div(offset, np.array([float(W), float(H)])), 0.5), 0.5)
    # neutral geometry is the raster support: detach it from the graph
    neutral_screen = ad.Tensor(s0.data.copy())
    flow, aux = rasterize_attributes(
        neutral_screen, encoded, faces, ~behind0, res, background=0.5
    )
    return flow, aux


# --- losses ---------------------------------------------------------------------


def _mean_abs(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    return ad.mean(ad.abs_(ad.sub(pred, target)))


def loss_stage1(pred: RenderTargets, gt: Supervision2D, displacements,
                weights=STAGE1_WEIGHTS):
    """Weighted image + mask + screen-displacement + regularization loss.

    The displacement term is a mean squared 2-vector difference over pixels
    covered in both silhouette masks (threshold 0.5). Regularization is the
    mean squared displacement norm. Returns (total, terms dict).
    """
    if pred.image.shape[:2] != gt.image.shape[:2]:
        raise ShapeMismatch("prediction and ground truth resolutions differ")
    a1, a2, a3, a4 = weights
    d = ad.as_tensor(displacements)
    terms = {
        "img": _mean_abs(pred.image, gt.image),
        "mask": _mean_abs(pred.mask, gt.mask),
        "flow": _flow_term(pred, gt),
        "reg": ad.div(ad.sum_(ad.mul(d, d)), float(d.shape[0])),
    }
    total = ad.add(
        ad.add(ad.mul(terms["img"], a1), ad.mul(terms["mask"], a2)),
        ad.add(ad.mul(terms["flow"], a3), ad.mul(terms["reg"], a4)),
    )
    return total, terms


def _flow_term(pred: RenderTargets, gt: Supervision2D) -> ad.Tensor:
    if pred.flow is None or gt.flow is None:
        return ad.Tensor(0.0)
    joint = (pred.mask.data > 0.5) & (gt.mask > 0.5)
    count = int(joint.sum())
    if count == 0:
        return ad.Tensor(0.0)
    diff = ad.sub(pred.flow, gt.flow)
    sq = ad.mul(diff, diff)
    masked = ad.mul(sq, joint[:, :, None].astype(np.float64))
    return ad.div(ad.sum_(masked), float(count))


def loss_stage2(pred: RenderTargets, gt: Supervision2D, v_hat, v_gt,
                landmark_indices=None, eyelid_pairs=None,
                camera: Camera | None = None, res=None,
                weights=STAGE2_WEIGHTS):
    """Image + mask + 3D MSE + landmark + eye-closure loss.

    The 3D term is the mean squared vertex error in meters^2. Landmark terms
    compare projected landmark vertices with gt 2D landmarks in normalized
    screen coordinates; the eye-closure term compares the vertical offsets of
    paired upper/lower eyelid landmarks. Returns (total, terms dict).
    """
    a1, a2, a3, a4, a5 = weights
    v_hat = ad.as_tensor(v_hat)
    diff = ad.sub(v_hat, np.asarray(v_gt, dtype=np.float64))
    terms = {
        "img": _mean_abs(pred.image, gt.image),
        "mask": _mean_abs(pred.mask, gt.mask),
        "mse3d": ad.div(ad.sum_(ad.mul(diff, diff)), float(v_hat.shape[0])),
    }
    use_lmk = a4 != 0.0 or a5 != 0.0
    if use_lmk:
        if landmark_indices is None or gt.landmarks_2d is None:
            raise MissingLandmarks("landmark supervision requested without annotations")
        if camera is None or res is None:
            raise MissingLandmarks("landmark projection needs camera and resolution")
        W, H = res
        lmk_idx = np.asarray(landmark_indices, dtype=np.int64)
        screen, _ = project_screen(ad.gather_rows(v_hat, lmk_idx), camera, res)
        norm_xy = ad.div(screen[:, :2], np.array([float(W), float(H)]))
        terms["lmk"] = ad.mean(ad.abs_(ad.sub(norm_xy, gt.landmarks_2d)))
        if eyelid_pairs:
            pairs = np.asarray(eyelid_pairs, dtype=np.int64)
            # pairs index into the landmark list, not the mesh
            y = norm_xy[:, 1:2]
            off_pred = ad.sub(ad.gather_rows(y, pairs[:, 0]), ad.gather_rows(y, pairs[:, 1]))
            off_gt = gt.landmarks_2d[pairs[:, 0], 1] - gt.landmarks_2d[pairs[:, 1], 1]
            terms["ec"] = ad.mean(ad.abs_(ad.sub(off_pred, off_gt[:, None])))
        else:
            terms["ec"] = ad.Tensor(0.0)
    else:
        terms["lmk"] = ad.Tensor(0.0)
        terms["ec"] = ad.Tensor(0.0)
    total = ad.add(
        ad.add(ad.mul(terms["img"], a1), ad.mul(terms["mask"], a2)),
        ad.add(
            ad.mul(terms["mse3d"], a3),
            ad.add(ad.mul(terms["lmk"], a4), ad.mul(terms["ec"], a5)),
        ),
    )
    return total, terms


# --- image and tensor files -------------------------------------------------------


def save_png(path, array: np.ndarray) -> None:
    """8-bit PNG from float data in [0, 1], grayscale or RGB."""
    arr = np.clip(np.asarray(array), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    img = Image.open(Path(path))
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


_RFTN_MAGIC = b"RFTN"
_RFTN_VERSION = 1


def save_tensor(path, array: np.ndarray) -> None:
    """Raw f64 tensor container: magic, version, ndim, dims, data (LE)."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = _RFTN_MAGIC + struct.pack("<II", _RFTN_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + dims + arr.tobytes())


def load_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _RFTN_MAGIC:
        raise ChecksumMismatch(f"{path}: bad magic")
    version, ndim = struct.unpack("<II", blob[4:12])
    if version != _RFTN_VERSION:
        raise VersionMismatch(f"{path}: version {version}")
    dims = struct.unpack(f"<{ndim}Q", blob[12 : 12 + 8 * ndim])
    count = int(np.prod(dims))
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=12 + 8 * ndim)
    if arr.size != count or len(blob) != 12 + 8 * ndim + 8 * count:
        raise ChecksumMismatch(f"{path}: truncated")
    return arr.reshape(dims).copy()


def flow_to_color(flow: np.ndarray) -> np.ndarray:
    """Color-wheel visualization of an encoded flow map (hue=angle, sat=mag)."""
    u = flow[..., 0] - 0.5
    v = flow[..., 1] - 0.5
    mag = np.sqrt(u * u + v * v)
    ang = np.arctan2(v, u)
    hue = (ang + np.pi) / (2 * np.pi)
    sat = np.clip(mag / max(mag.max(), 1e-12), 0, 1)
    i = np.floor(hue * 6).astype(int) % 6
    f = hue * 6 - np.floor(hue * 6)
    p = 1 - sat
    q = 1 - f * sat
    t = 1 - (1 - f) * sat
    ones = np.ones_like(hue)
    lut = [
        (ones, t, p), (q, ones, p), (p, ones, t),
        (p, q, ones), (t, p, ones), (ones, p, q),
    ]
    rgb = np.zeros(flow.shape[:2] + (3,))
    for idx, (r, g, b) in enumerate(lut):
        sel = i == idx
        rgb[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return rgb
