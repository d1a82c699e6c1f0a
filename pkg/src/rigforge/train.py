"""Two-stage training, the evaluation harness, and run configuration.

Stage 1 optimizes the 2D objective (image, mask, screen-displacement,
regularization) over rigged- and unrigged-role samples; stage 2 fine-tunes on
rigged samples only with 3D vertex supervision plus image/mask/landmark
terms. Batches are one sample per optimizer step (meshes vary in size), with
optional gradient accumulation. Single-worker runs are bit-deterministic for
a fixed seed.

Ablation tags mirror the cumulative supervision structure:
  full         stage 1 on both roles with the displacement term, stage 2
  no-flow      stage 1 without the screen-displacement term
  no-unrigged  stage 1 on rigged heads only, no displacement term
  no-2d        stage 2 only, 3D vertex term alone
  no-global    full schedule without the whole-mesh encoder branch

A file audit log enforces the supervision firewall: training may never read
sequestered ground truth, and stage 2 may not touch unrigged 2D files.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import render as r2
from .errors import (
    BadConfig,
    CheckpointMismatch,
    DatasetMissing,
    NonFiniteLoss,
)
from .mesh import TriMesh, load_obj, normalize_unit_sphere
from .network import (
    FacsVector,
    ModelConfig,
    ModelParams,
    forward,
    init_model,
    load_model,
    save_model,
)
from .operators import SurfaceOperators, build_operators, load_operators, save_operators
from .rig import BlendshapeRig, build_rig, evaluate, metric_mae, metric_penetration
from .synthdata import load_manifest

ABLATIONS = ("full", "no-global", "no-2d", "no-unrigged", "no-flow")


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 4
    max_steps: int | None = None
    lr: float = 1e-4
    warmup_frac: float = 0.05
    weights: tuple | None = None  # defaults per stage
    accum: int = 1
    cosine_restarts: int = 1  # 1 = single decay cycle

    def __post_init__(self):
        if self.epochs < 1:
            raise BadConfig("epochs must be >= 1")
        if any(w < 0 for w in (self.weights or ())):
            raise BadConfig("loss weights must be nonnegative")
        if self.accum < 1 or self.cosine_restarts < 1:
            raise BadConfig("accum and cosine_restarts must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    dataset_root: str
    out_dir: str
    seed: int = 0
    ablation: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=StageConfig)

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise BadConfig(f"unknown ablation {self.ablation!r}")

    @staticmethod
    def from_json(path) -> "RunConfig":
        raw = json.loads(Path(path).read_text())
        return RunConfig.from_dict(raw)

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        model = ModelConfig(**raw.get("model", {}))
        s1 = StageConfig(**{**raw.get("stage1", {})})
        s2 = StageConfig(**{**raw.get("stage2", {})})
        if s1.weights is not None:
            s1 = StageConfig(**{**asdict(s1), "weights": tuple(s1.weights)})
        if s2.weights is not None:
            s2 = StageConfig(**{**asdict(s2), "weights": tuple(s2.weights)})
        return RunConfig(
            dataset_root=raw["dataset_root"],
            out_dir=raw["out_dir"],
            seed=raw.get("seed", 0),
            ablation=raw.get("ablation", "full"),
            model=model,
            stage1=s1,
            stage2=s2,
        )

    def model_for_ablation(self) -> ModelConfig:
        if self.ablation == "no-global":
            return ModelConfig(**{**self.model.to_dict(), "use_global_encoder": False})
        return self.model


def lr_schedule(step: int, total_steps: int, lr: float, warmup_steps: int,
                cycles: int = 1) -> float:
    """Linear warmup to lr, then cosine decay to zero (optionally restarted)."""
    if step < 0:
        raise BadConfig("step must be nonnegative")
    if warmup_steps > 0 and step < warmup_steps:
        return lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    cycle = max(span // cycles, 1)
    phase = min((step - warmup_steps) % cycle if step < total_steps else cycle, cycle)
    if step >= total_steps:
        return 0.0
    return lr * 0.5 * (1.0 + np.cos(np.pi * phase / cycle))


# --- dataset access with firewall audit -------------------------------------------


@dataclass
class Sample:
    head_id: str
    role: str
    split: str
    mesh: TriMesh
    ops: SurfaceOperators
    landmarks: np.ndarray
    pairs: list
    sup_dir: Path | None
    rig_fields: np.ndarray | None  # (P, n, 3), rigged role only


class DataStore:
    """Loads dataset samples; records every file it opens.

    In training mode any access to sequestered ground truth raises.
    """

    def __init__(self, root, k_eigen: int, training: bool = True):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        self.k_eigen = k_eigen
        self.training = training
        self.audit: list[str] = []
        self.pose_names: list[str] = self.manifest["pose_names"]
        self.facs = [FacsVector(np.array(a)) for a in self.manifest["facs_vectors"]]
        self.camera = r2.Camera(
            fov_y=np.deg2rad(self.manifest["config"]["cam_fov_deg"]),
            position=(0.0, 0.0, self.manifest["config"]["cam_distance"]),
        )
        self.res = tuple(self.manifest["config"]["sup_res"])

    def _touch(self, path: Path) -> Path:
        rel = str(Path(path).relative_to(self.root))
        if self.training and rel.startswith("eval_gt"):
            raise DatasetMissing(f"firewall: training may not read {rel}")
        self.audit.append(rel)
        return path

    def entries(self, split=None, role=None):
        out = []
        for h in self.manifest["heads"]:
            if split and h["split"] != split:
                continue
            if role and h["role"] != role:
                continue
            out.append(h)
        return out

    def load_sample(self, entry: dict, with_rig: bool) -> Sample:
        hdir = self.root / "heads" / entry["id"]
        if not (hdir / "neutral.obj").exists():
            raise DatasetMissing(f"missing {hdir / 'neutral.obj'}")
        mesh = load_obj(self._touch(hdir / "neutral.obj"))
        lmk = json.loads(self._touch(hdir / "landmarks.json").read_text())
        ops = self._operators(hdir, mesh)
        rig_fields = None
        if with_rig:
            rig_fields = self._load_rig_fields(hdir / "rig", mesh.n_vertices)
        return Sample(
            head_id=entry["id"], role=entry["role"], split=entry["split"],
            mesh=mesh, ops=ops, landmarks=np.array(lmk["landmarks"]),
            pairs=[tuple(p) for p in lmk["pairs"]],
            sup_dir=hdir / "sup2d", rig_fields=rig_fields,
        )

    def load_eval_rig_fields(self, entry: dict, n_vertices: int) -> np.ndarray:
        """Ground-truth fields for evaluation; sequestered for unrigged roles."""
        if self.training:
            raise DatasetMissing("evaluation ground truth unavailable in training mode")
        if entry["role"] == "rigged":
            rdir = self.root / "heads" / entry["id"] / "rig"
        else:
            rdir = self.root / "eval_gt" / entry["id"] / "rig"
        return self._load_rig_fields(rdir, n_vertices)

    def _load_rig_fields(self, rdir: Path, n: int) -> np.ndarray:
        meta = json.loads(self._touch(rdir / "poses.json").read_text())
        fields = [
            r2.load_tensor(self._touch(rdir / f"pose_{i:03d}.rftn"))
            for i in range(len(meta["pose_names"]))
        ]
        out = np.stack(fields)
        if out.shape[1] != n:
            raise DatasetMissing(f"{rdir}: field size mismatch")
        return out

    def _operators(self, hdir: Path, mesh: TriMesh) -> SurfaceOperators:
        k = min(self.k_eigen, mesh.n_vertices - 1)
        cache = hdir / f"ops_k{k}.rfop"
        if cache.exists():
            return load_operators(self._touch(cache))
        ops = build_operators(mesh, k=k)
        save_operators(ops, cache)
        self.audit.append(str(cache.relative_to(self.root)))
        return ops

    @lru_cache(maxsize=128)
    def _sup_cached(self, head_id: str, pose_index: int):
        pdir = self.root / "heads" / head_id / "sup2d" / f"{pose_index:03d}"
        image = r2.load_png(self._touch(pdir / "image.png"))
        mask = r2.load_png(self._touch(pdir / "mask.png"))
        flow = r2.load_tensor(self._touch(pdir / "flow.rftn"))
        lmk = json.loads(self._touch(pdir / "lmk.json").read_text())
        return r2.Supervision2D(
            image=image, mask=mask, flow=flow,
            landmarks_2d=np.array(lmk["landmarks_2d"]),
        )

    def supervision(self, sample: Sample, pose_index: int) -> r2.Supervision2D:
        return self._sup_cached(sample.head_id, pose_index)

    def write_audit(self, path) -> None:
        Path(path).write_text("\n".join(self.audit) + "\n")


# --- training loops ----------------------------------------------------------------


def _loss_dump(out_dir: Path, stage: int, step: int, terms: dict) -> None:
    diag = {
        "stage": stage,
        "step": step,
        "terms": {k: float(v.data) for k, v in terms.items()},
    }
    (out_dir / f"nonfinite_stage{stage}.json").write_text(json.dumps(diag, indent=1))


class _CsvLog:
    def __init__(self, path, fields):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(fields)

    def row(self, values):
        self.writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in values])

    def close(self):
        self.fh.close()


def _step_pairs(samples, n_poses, rng):
    pairs = [(i, p) for i in range(len(samples)) for p in range(n_poses)]
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


class _Accumulator:
    """Averages gradients over a window; add() is True when a step is due."""

    def __init__(self, window: int):
        self.window = window
        self._sum: dict | None = None
        self._count = 0

    def add(self, grads: dict) -> bool:
        if self._sum is None:
            self._sum = {k: g.copy() for k, g in grads.items()}
        else:
            for k, g in grads.items():
                if k in self._sum:
                    self._sum[k] += g
                else:
                    self._sum[k] = g.copy()
        self._count += 1
        return self._count >= self.window

    def take(self) -> dict:
        out = {k: g / self._count for k, g in self._sum.items()}
        self._sum = None
        self._count = 0
        return out


def train_stage1(cfg: RunConfig) -> Path:
    """Optimize the 2D objective over both roles; returns the checkpoint path."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.ablation == "no-2d":
        raise BadConfig("the no-2d ablation has no stage 1")
    model_cfg = cfg.model_for_ablation()
    store = DataStore(cfg.dataset_root, model_cfg.k_eigen, training=True)
    include_unrigged = cfg.ablation not in ("no-unrigged",)
    entries = store.entries(split="train")
    if not include_unrigged:
        entries = [e for e in entries if e["role"] == "rigged"]
    if not entries:
        raise DatasetMissing("no training samples")
    samples = [store.load_sample(e, with_rig=False) for e in entries]

    weights = list(cfg.stage1.weights or r2.STAGE1_WEIGHTS)
    if cfg.ablation in ("no-flow", "no-unrigged"):
        weights[2] = 0.0
    use_flow = weights[2] != 0.0

    params = init_model(model_cfg, seed=cfg.seed)
    state = ad.adam_init(params.arrays)
    n_poses = len(store.pose_names)
    steps_per_epoch = len(samples) * n_poses
    total = cfg.stage1.epochs * steps_per_epoch
    if cfg.stage1.max_steps is not None:
        total = min(total, cfg.stage1.max_steps)
    warmup = int(cfg.stage1.warmup_frac * total)
    log = _CsvLog(out_dir / "loss_stage1.csv",
                  ["step", "lr", "total", "img", "mask", "flow", "reg"])
    step = 0
    rng_master = np.random.default_rng([cfg.seed, 101])
    accum = _Accumulator(cfg.stage1.accum)
    try:
        done = False
        for epoch in range(cfg.stage1.epochs):
            if done:
                break
            for si, pose in _step_pairs(samples, n_poses, rng_master):
                s = samples[si]
                total_t, terms, grads = _stage1_step(
                    s, pose, store, params, tuple(weights), use_flow
                )
                val = float(total_t.data)
                if not np.isfinite(val):
                    _loss_dump(out_dir, 1, step, terms)
                    raise NonFiniteLoss(f"stage 1 loss {val} at step {step}")
                if not accum.add(grads):
                    continue
                lr = lr_schedule(step, total, cfg.stage1.lr, warmup,
                                 cfg.stage1.cosine_restarts)
                ad.adam_step(params.arrays, accum.take(), state, lr=lr)
                log.row([step, lr, val] + [float(terms[k].data) for k in
                                           ("img", "mask", "flow", "reg")])
                step += 1
                if step >= total:
                    done = True
                    break
            save_model(out_dir / f"stage1_epoch{epoch}.rfck", params, adam_state=state)
    finally:
        log.close()
        store.write_audit(out_dir / "audit_stage1.log")
    ckpt = out_dir / "stage1.rfck"
    save_model(ckpt, params, adam_state=state)
    return ckpt


def _stage1_step(s: Sample, pose: int, store: DataStore, params: ModelParams,
                 weights, use_flow: bool):
    gt = store.supervision(s, pose)
    v0 = s.mesh.vertices
    with ad.Tape() as tape:
        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.arrays.items()}
        d_hat = forward(s.mesh, s.ops, store.facs[pose], params, tensors=tensors)
        posed = ad.add(d_hat, v0)
        targets = r2.rasterize(posed, s.mesh.faces, store.camera, store.res)
        if use_flow:
            targets.flow = r2.render_displacement(
                v0, posed, s.mesh.faces, store.camera, store.res
            )
        total, terms = r2.loss_stage1(targets, gt, d_hat, weights=weights)
        ad.backward(tape, total)
    grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
    return total, terms, grads


def train_stage2(cfg: RunConfig, stage1_ckpt: Path | None) -> Path:
    """Fine-tune on rigged-role samples with 3D supervision."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.model_for_ablation()
    if stage1_ckpt is not None:
        params, _ = load_model(stage1_ckpt)
        if params.config != model_cfg:
            raise CheckpointMismatch(
                f"checkpoint config {params.config} differs from run config"
            )
    else:
        params = init_model(model_cfg, seed=cfg.seed)
    store = DataStore(cfg.dataset_root, model_cfg.k_eigen, training=True)
    entries = store.entries(split="train", role="rigged")
    if not entries:
        raise DatasetMissing("stage 2 needs rigged training samples")
    samples = [store.load_sample(e, with_rig=True) for e in entries]

    weights = tuple(cfg.stage2.weights or r2.STAGE2_WEIGHTS)
    if cfg.ablation == "no-2d":
        weights = (0.0, 0.0, weights[2], 0.0, 0.0)
    use_2d = weights[0] != 0.0 or weights[1] != 0.0

    state = ad.adam_init(params.arrays)
    n_poses = len(store.pose_names)
    steps_per_epoch = len(samples) * n_poses
    total = cfg.stage2.epochs * steps_per_epoch
    if cfg.stage2.max_steps is not None:
        total = min(total, cfg.stage2.max_steps)
    warmup = int(cfg.stage2.warmup_frac * total)
    log = _CsvLog(out_dir / "loss_stage2.csv",
                  ["step", "lr", "total", "img", "mask", "mse3d", "lmk", "ec"])
    step = 0
    rng_master = np.random.default_rng([cfg.seed, 202])
    accum = _Accumulator(cfg.stage2.accum)
    try:
        done = False
        for epoch in range(cfg.stage2.epochs):
            if done:
                break
            for si, pose in _step_pairs(samples, n_poses, rng_master):
                s = samples[si]
                total_t, terms, grads = _stage2_step(
                    s, pose, store, params, weights, use_2d
                )
                val = float(total_t.data)
                if not np.isfinite(val):
                    _loss_dump(out_dir, 2, step, terms)
                    raise NonFiniteLoss(f"stage 2 loss {val} at step {step}")
                if not accum.add(grads):
                    continue
                lr = lr_schedule(step, total, cfg.stage2.lr, warmup,
                                 cfg.stage2.cosine_restarts)
                ad.adam_step(params.arrays, accum.take(), state, lr=lr)
                log.row([step, lr, val] + [float(terms[k].data) for k in
                                           ("img", "mask", "mse3d", "lmk", "ec")])
                step += 1
                if step >= total:
                    done = True
                    break
            save_model(out_dir / f"stage2_epoch{epoch}.rfck", params, adam_state=state)
    finally:
        log.close()
        store.write_audit(out_dir / "audit_stage2.log")
    ckpt = out_dir / "stage2.rfck"
    save_model(ckpt, params, adam_state=state)
    return ckpt


def _stage2_step(s: Sample, pose: int, store: DataStore, params: ModelParams,
                 weights, use_2d: bool):
    v0 = s.mesh.vertices
    v_gt = v0 + s.rig_fields[pose]
    gt = store.supervision(s, pose) if use_2d else r2.Supervision2D(
        image=np.ones(store.res[::-1] + (3,)), mask=np.zeros(store.res[::-1]),
        landmarks_2d=np.zeros((len(s.landmarks), 2)),
    )
    with ad.Tape() as tape:
        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.arrays.items()}
        d_hat = forward(s.mesh, s.ops, store.facs[pose], params, tensors=tensors)
        posed = ad.add(d_hat, v0)
        if use_2d:
            targets = r2.rasterize(posed, s.mesh.faces, store.camera, store.res)
        else:
            targets = r2.RenderTargets(
                image=ad.Tensor(gt.image), mask=ad.Tensor(gt.mask), flow=None,
                depth=np.zeros(store.res[::-1]),
                coverage=np.zeros(store.res[::-1], dtype=bool),
            )
        total, terms = r2.loss_stage2(
            targets, gt, posed, v_gt,
            landmark_indices=s.landmarks, eyelid_pairs=s.pairs,
            camera=store.camera, res=store.res, weights=weights,
        )
        ad.backward(tape, total)
    grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
    return total, terms, grads


# --- evaluation --------------------------------------------------------------------

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "ablation", "split", "seed", "mae_mm", "mae_q95_mm", "penetration",
        "per_pose", "per_head", "per_role", "neutral_ratio",
        "look_eye_face_ratio", "n_heads",
    ],
    "properties": {
        "ablation": {"type": "string"},
        "split": {"type": "string"},
        "seed": {"type": "integer"},
        "mae_mm": {"type": "number"},
        "mae_q95_mm": {"type": "number"},
        "penetration": {"type": "number"},
        "neutral_ratio": {"type": "number"},
        "look_eye_face_ratio": {"type": "number"},
        "n_heads": {"type": "integer"},
        "per_pose": {"type": "object"},
        "per_head": {"type": "object"},
        "per_role": {"type": "object"},
    },
}


def evaluate_checkpoint(ckpt_path, dataset_root, split="test",
                        ablation: str = "full", seed: int = 0,
                        report_path=None) -> dict:
    """Build rigs for every head in the split and score them against the
    (possibly sequestered) analytic ground truth."""
    params, _ = load_model(ckpt_path)
    store = DataStore(dataset_root, params.config.k_eigen, training=False)
    entries = store.entries(split=split)
    if not entries:
        raise DatasetMissing(f"no heads in split {split!r}")
    all_err = []
    per_pose_err = {name: [] for name in store.pose_names}
    per_pose_pen = {name: [] for name in store.pose_names}
    per_head = {}
    per_role_err = {"rigged": [], "unrigged": []}
    neutral_ratios = []
    eye_ratios = []
    from .rig import outer_component

    look_poses = [i for i, n in enumerate(store.pose_names) if "EyesLook" in n]
    for entry in entries:
        s = store.load_sample(entry, with_rig=False)
        gt_fields = store.load_eval_rig_fields(entry, s.mesh.n_vertices)
        pred = build_rig(
            s.mesh, s.ops, params,
            list(zip(store.pose_names, store.facs)),
        )
        errs = np.linalg.norm(pred.displacements - gt_fields, axis=2) * 1000.0
        all_err.append(errs.ravel())
        per_role_err[entry["role"]].append(errs.ravel())
        pen = []
        for i, name in enumerate(store.pose_names):
            per_pose_err[name].append(errs[i])
            posed = s.mesh.with_vertices(s.mesh.vertices + pred.displacements[i])
            p = metric_penetration(posed)
            per_pose_pen[name].append(p)
            pen.append(p)
        gt_norm = np.linalg.norm(gt_fields, axis=2)
        pred_neutral = np.linalg.norm(pred.displacements[0], axis=1).mean()
        neutral_ratios.append(pred_neutral / max(gt_norm.mean(), 1e-12))
        face = outer_component(s.mesh)
        inner = s.mesh.component_id != face
        for i in look_poses:
            d = np.linalg.norm(pred.displacements[i], axis=1)
            eye_ratios.append(d[inner].mean() / max(d[~inner].mean(), 1e-12))
        per_head[entry["id"]] = {
            "role": entry["role"],
            "mae_mm": float(errs.mean()),
            "q95_mm": float(np.percentile(errs.ravel(), 95, method="linear")),
            "penetration": float(np.mean(pen)),
        }
    pooled = np.concatenate(all_err)
    report = {
        "ablation": ablation,
        "split": split,
        "seed": seed,
        "n_heads": len(entries),
        "mae_mm": float(pooled.mean()),
        "mae_q95_mm": float(np.percentile(pooled, 95, method="linear")),
        "penetration": float(
            np.mean([np.mean(v) for v in per_pose_pen.values()])
        ),
        "neutral_ratio": float(np.mean(neutral_ratios)),
        "look_eye_face_ratio": float(np.mean(eye_ratios)) if eye_ratios else 0.0,
        "per_pose": {
            name: {
                "mae_mm": float(np.concatenate(per_pose_err[name]).mean()),
                "penetration": float(np.mean(per_pose_pen[name])),
            }
            for name in store.pose_names
        },
        "per_head": per_head,
        "per_role": {
            role: {
                "mae_mm": float(np.concatenate(v).mean()) if v else -1.0,
                "q95_mm": float(
                    np.percentile(np.concatenate(v), 95, method="linear")
                ) if v else -1.0,
            }
            for role, v in per_role_err.items()
        },
    }
    import jsonschema

    jsonschema.validate(report, EVAL_REPORT_SCHEMA)
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def infer_rig(ckpt_path, mesh_path, out_path, pose_set=None,
              au_names=None) -> dict:
    """OBJ -> normalize -> operators -> rig -> .rfrig, with timing breakdown."""
    from .rig import save_rig
    from .synthdata import AU_NAMES

    params, _ = load_model(ckpt_path)
    mesh = load_obj(mesh_path)
    t0 = time.perf_counter()
    normed, tf = normalize_unit_sphere(mesh)
    ops = build_operators(normed, k=min(params.config.k_eigen, normed.n_vertices - 1))
    t_pre = time.perf_counter() - t0
    if pose_set is None:
        names = au_names or AU_NAMES
        D = params.config.facs_dim
        pose_set = [("neutral", FacsVector.zeros(D))] + [
            (name, FacsVector.onehot(i, D)) for i, name in enumerate(names[:D])
        ]
    t0 = time.perf_counter()
    rig = build_rig(normed, ops, params, pose_set, transform=tf)
    t_fwd = time.perf_counter() - t0
    save_rig(rig, out_path)
    return {"precompute_s": t_pre, "forward_s": t_fwd, "poses": rig.n_poses}
