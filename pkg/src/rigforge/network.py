"""Pose-conditioned deformation network over surface operators.

Per-vertex position and normal features are embedded, refined by a stack of
conditional diffusion blocks (heat diffusion with learnable per-channel times,
a per-vertex MLP, latent fusion, residual add), and decoded to a per-vertex
3D displacement. The conditioning latent concatenates a pooled whole-mesh
feature from a small 2-block encoder branch with the activation vector, so
information can cross disconnected components. The output head starts at
zero: an untrained model predicts the neutral mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import BadConfig, OperatorMismatch, ShapeMismatch
from .mesh import TriMesh, vertex_normals
from .operators import SurfaceOperators

AU_DIM_DEFAULT = 48


@dataclass(frozen=True)
class FacsVector:
    """Activation-unit weights in [0, 1]; training poses are multi-hot."""

    activations: np.ndarray
    pose_id: int | None = None

    def __post_init__(self):
        a = np.asarray(self.activations, dtype=np.float64)
        if a.ndim != 1:
            raise ShapeMismatch("activations must be a vector")
        if (a < 0).any() or (a > 1).any():
            raise BadConfig("activations must lie in [0, 1]")
        object.__setattr__(self, "activations", a)

    @property
    def dim(self) -> int:
        return len(self.activations)

    @staticmethod
    def zeros(dim: int = AU_DIM_DEFAULT) -> "FacsVector":
        return FacsVector(np.zeros(dim))

    @staticmethod
    def onehot(index: int, dim: int = AU_DIM_DEFAULT) -> "FacsVector":
        a = np.zeros(dim)
        a[index] = 1.0
        return FacsVector(a, pose_id=index)


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    blocks: int = 4
    global_width: int = 32
    global_feature: int = 64
    facs_dim: int = 12
    fusion_hidden: int | None = None  # defaults to width
    k_eigen: int = 128
    use_global_encoder: bool = True
    mass_weighted_pooling: bool = True
    init_diffusion_time: float = 0.01  # ~squared mean edge length at desk scale

    def __post_init__(self):
        for name in ("width", "blocks", "global_width", "global_feature", "facs_dim"):
            if getattr(self, name) <= 0:
                raise BadConfig(f"{name} must be positive")
        if self.fusion_hidden is not None and self.fusion_hidden <= 0:
            raise BadConfig("fusion_hidden must be positive")

    @property
    def fusion_width(self) -> int:
        return self.fusion_hidden if self.fusion_hidden is not None else self.width

    @property
    def latent_dim(self) -> int:
        g = self.global_feature if self.use_global_encoder else 0
        return g + self.facs_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class ModelParams:
    """Named parameter arrays plus their config; arrays update in place."""

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def count_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def tensors(self) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=True) for k, v in self.arrays.items()}


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    w, gl = cfg.width, cfg.latent_dim
    fh = cfg.fusion_width
    shapes: dict[str, tuple] = {"embed.w": (6, w), "embed.b": (w,)}
    for i in range(cfg.blocks):
        p = f"block{i}"
        shapes[f"{p}.time_raw"] = (w,)
        shapes[f"{p}.mlp.w1"] = (w, w)
        shapes[f"{p}.mlp.b1"] = (w,)
        shapes[f"{p}.mlp.w2"] = (w, w)
        shapes[f"{p}.mlp.b2"] = (w,)
        shapes[f"{p}.fusion.w1"] = (w + gl, fh)
        shapes[f"{p}.fusion.b1"] = (fh,)
        shapes[f"{p}.fusion.w2"] = (fh, w)
        shapes[f"{p}.fusion.b2"] = (w,)
    shapes["head.w"] = (w, 3)
    shapes["head.b"] = (3,)
    if cfg.use_global_encoder:
        wg = cfg.global_width
        shapes["genc.embed.w"] = (6, wg)
        shapes["genc.embed.b"] = (wg,)
        for j in range(2):
            p = f"genc.block{j}"
            shapes[f"{p}.time_raw"] = (wg,)
            shapes[f"{p}.mlp.w1"] = (wg, wg)
            shapes[f"{p}.mlp.b1"] = (wg,)
            shapes[f"{p}.mlp.w2"] = (wg, wg)
            shapes[f"{p}.mlp.b2"] = (wg,)
        shapes["genc.proj.w"] = (wg, cfg.global_feature)
        shapes["genc.proj.b"] = (cfg.global_feature,)
    return shapes


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministic uniform fan-in initialization; zeroed output head."""
    rng = np.random.default_rng(seed)
    raw_time = float(np.log(np.expm1(max(config.init_diffusion_time, 1e-8))))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith("time_raw"):
            arrays[name] = np.full(shape, raw_time)
        elif name.startswith("head."):
            arrays[name] = np.zeros(shape)
        elif name.endswith(".b") or ".b1" in name or ".b2" in name:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config=config, arrays=arrays)


def count_params(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in _param_shapes(config).values()))


def input_features(mesh: TriMesh) -> np.ndarray:
    """Constant per-vertex network inputs: position and normal."""
    return np.concatenate([mesh.vertices, vertex_normals(mesh)], axis=1)


def _check_ops(mesh: TriMesh, ops: SurfaceOperators) -> None:
    if ops.n != mesh.n_vertices:
        raise OperatorMismatch(
            f"operators built for {ops.n} vertices, mesh has {mesh.n_vertices}"
        )


def _mlp(x, t, prefix):
    h = ad.relu(ad.add(ad.matmul(x, t[f"{prefix}.w1"]), t[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, t[f"{prefix}.w2"]), t[f"{prefix}.b2"])


def _diffuse(x, t, prefix, ops: SurfaceOperators):
    times = ad.softplus(t[f"{prefix}.time_raw"])
    return ad.spectral_diffuse_node(x, times, ops.basis, ops.M)


def conditional_block(features, latent, ops: SurfaceOperators, tensors, prefix):
    """diffuse -> per-vertex MLP -> concat replicated latent -> fusion -> +x."""
    n = features.shape[0]
    h = _diffuse(features, tensors, prefix, ops)
    h = _mlp(h, tensors, f"{prefix}.mlp")
    lat = ad.broadcast_to(latent, (n, latent.shape[1]))
    z = ad.concat([h, lat], axis=1)
    u = _mlp(z, tensors, f"{prefix}.fusion")
    return ad.add(features, u)


def _pool_weights(cfg: ModelConfig, ops: SurfaceOperators) -> np.ndarray:
    if cfg.mass_weighted_pooling:
        w = ops.M / ops.M.sum()
    else:
        w = np.full(ops.n, 1.0 / ops.n)
    return w[None, :]  # (1, n)


def global_encode(mesh: TriMesh, ops: SurfaceOperators, params: ModelParams,
                  tensors=None):
    """Whole-mesh feature: 2 diffusion blocks, projection, pooled over all
    vertices of all components (mass-weighted by default)."""
    cfg = params.config
    if not cfg.use_global_encoder:
        raise BadConfig("global encoder disabled in this config")
    _check_ops(mesh, ops)
    t = tensors if tensors is not None else params.tensors()
    x = ad.Tensor(input_features(mesh))
    y = ad.add(ad.matmul(x, t["genc.embed.w"]), t["genc.embed.b"])
    for j in range(2):
        p = f"genc.block{j}"
        y = ad.add(y, _mlp(_diffuse(y, t, p, ops), t, f"{p}.mlp"))
    per_vertex = ad.add(ad.matmul(y, t["genc.proj.w"]), t["genc.proj.b"])
    return ad.matmul(ad.Tensor(_pool_weights(cfg, ops)), per_vertex)  # (1, g)


def forward(mesh: TriMesh, ops: SurfaceOperators, facs: FacsVector,
            params: ModelParams, tensors=None):
    """Predict the per-vertex displacement that deforms the neutral mesh.

    Returns an (n, 3) tensor in the mesh's (normalized) units. Deterministic
    and differentiable w.r.t. every parameter tensor when ``tensors`` from a
    recording tape are supplied.
    """
    cfg = params.config
    _check_ops(mesh, ops)
    if facs.dim != cfg.facs_dim:
        raise ShapeMismatch(
            f"activation vector has dim {facs.dim}, model expects {cfg.facs_dim}"
        )
    t = tensors if tensors is not None else params.tensors()
    if cfg.use_global_encoder:
        g0 = global_encode(mesh, ops, params, tensors=t)
        latent = ad.concat([g0, ad.Tensor(facs.activations[None, :])], axis=1)
    else:
        latent = ad.Tensor(facs.activations[None, :])
    x = ad.Tensor(input_features(mesh))
    h = ad.add(ad.matmul(x, t["embed.w"]), t["embed.b"])
    for i in range(cfg.blocks):
        h = conditional_block(h, latent, ops, t, f"block{i}")
    return ad.add(ad.matmul(h, t["head.w"]), t["head.b"])


def save_model(path, params: ModelParams, adam_state=None) -> None:
    ad.save_checkpoint(
        path, params.arrays, meta={"model_config": params.config.to_dict()},
        adam_state=adam_state,
    )


def load_model(path):
    """Returns (ModelParams, adam_state-or-None)."""
    arrays, meta, adam_state = ad.load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    return ModelParams(config=cfg, arrays=arrays), adam_state
