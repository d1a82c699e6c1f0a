"""Command-line interface.

Commands: gen-data, precompute, train, eval, infer, pose. The RIGFORGE_THREADS
environment variable caps numeric-library parallelism (set before numpy loads);
runs are bit-deterministic in the default single-worker mode.
"""

import argparse
import json
import os
import sys


def _apply_thread_cap():
    cap = os.environ.get("RIGFORGE_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def main(argv=None):
    _apply_thread_cap()
    parser = argparse.ArgumentParser(prog="rigforge")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic head dataset")
    p.add_argument("--config", help="dataset config JSON", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("precompute", help="build and cache surface operators")
    p.add_argument("--mesh", required=True)
    p.add_argument("--k", type=int, default=128)
    p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--init-ckpt", default=None, help="stage-1 checkpoint for stage 2")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ablation", default="full",
                   choices=("full", "no-global", "no-2d", "no-unrigged", "no-flow"))
    p.add_argument("--out", default=None, help="report JSON path")

    p = sub.add_parser("infer", help="predict a blendshape rig for a mesh")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pose", help="evaluate a rig at given weights, write OBJ")
    p.add_argument("--rig", required=True)
    p.add_argument("--weights", required=True, help="JSON {pose name: weight}")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    return _dispatch(args)


def _dispatch(args):
    if args.command == "gen-data":
        from .synthdata import DatasetConfig, generate_dataset

        cfg = DatasetConfig() if args.config is None else DatasetConfig(
            **json.loads(open(args.config).read())
        )
        manifest = generate_dataset(cfg, args.out)
        print(f"wrote {len(manifest['heads'])} heads to {args.out}")
        return 0

    if args.command == "precompute":
        from .mesh import load_obj, normalize_unit_sphere
        from .operators import build_operators, save_operators

        mesh, _ = normalize_unit_sphere(load_obj(args.mesh))
        k = min(args.k, mesh.n_vertices - 1)
        ops = build_operators(mesh, k=k)
        out = args.out or (os.path.splitext(args.mesh)[0] + f"_k{k}.rfop")
        save_operators(ops, out)
        print(f"cached operators (n={ops.n}, k={ops.k}) at {out}")
        return 0

    if args.command == "train":
        from .train import RunConfig, train_stage1, train_stage2

        cfg = RunConfig.from_json(args.config)
        if args.stage == 1:
            ckpt = train_stage1(cfg)
        else:
            ckpt = train_stage2(cfg, args.init_ckpt)
        print(f"checkpoint: {ckpt}")
        return 0

    if args.command == "eval":
        from .train import evaluate_checkpoint

        out = args.out or "eval_report.json"
        report = evaluate_checkpoint(
            args.ckpt, args.dataset, split=args.split,
            ablation=args.ablation, report_path=out,
        )
        print(json.dumps(
            {k: report[k] for k in ("mae_mm", "mae_q95_mm", "penetration")},
            indent=1,
        ))
        print(f"report: {out}")
        return 0

    if args.command == "infer":
        from .train import infer_rig

        timing = infer_rig(args.ckpt, args.mesh, args.out)
        print(
            f"precompute {timing['precompute_s']:.2f}s, "
            f"forward {timing['forward_s']:.2f}s, {timing['poses']} poses -> {args.out}"
        )
        return 0

    if args.command == "pose":
        import numpy as np

        from .mesh import save_obj
        from .rig import evaluate, load_rig

        rig = load_rig(args.rig)
        wmap = json.loads(open(args.weights).read())
        w = np.array([float(wmap.get(name, 0.0)) for name in rig.pose_names])
        save_obj(evaluate(rig, w), args.out)
        print(f"wrote {args.out}")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
