#!/usr/bin/env python3
"""Committed ablation benchmark: dataset, four training runs, eval reports.

Regenerates benchmarks/ from scratch with fixed seeds. Expect a couple of
hours on a desktop CPU. Reports land in benchmarks/report_<ablation>.json and
are asserted by tests/test_acceptance.py.
"""

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from rigforge.network import ModelConfig
from rigforge.synthdata import DatasetConfig, generate_dataset
from rigforge.train import (
    RunConfig,
    StageConfig,
    evaluate_checkpoint,
    train_stage1,
    train_stage2,
)

BENCH_SEED = 0

DATASET = DatasetConfig(
    rigged=6, unrigged=8, test_rigged=2, test_unrigged=2,
    interp_factor=3, levels=(2, 2, 3), eye_levels=(1,),
    sup_res=(96, 96), cam_fov_deg=45.0, cam_distance=3.0,
    flow_noise_px=0.5, seed=BENCH_SEED,
)

MODEL = ModelConfig(width=64, blocks=4, global_width=32, global_feature=64,
                    facs_dim=12, k_eigen=160)

STAGE1 = dict(epochs=50, max_steps=2200, lr=1e-3, accum=2)
STAGE2 = dict(epochs=50, max_steps=1600, lr=1e-3, accum=2)

ABLATIONS = ("full", "no-flow", "no-unrigged", "no-global", "no-2d")


def run_one(ablation: str, data_root: Path, bench_dir: Path) -> dict:
    out_dir = bench_dir / f"run_{ablation}"
    cfg = RunConfig(
        dataset_root=str(data_root), out_dir=str(out_dir), seed=BENCH_SEED,
        ablation=ablation, model=MODEL,
        stage1=StageConfig(**STAGE1), stage2=StageConfig(**STAGE2),
    )
    t0 = time.time()
    ck1 = None
    if ablation != "no-2d":
        ck1 = train_stage1(cfg)
    ck2 = train_stage2(cfg, ck1)
    report = evaluate_checkpoint(
        ck2, data_root, split="test", ablation=ablation, seed=BENCH_SEED,
        report_path=bench_dir / f"report_{ablation}.json",
    )
    report["wall_minutes"] = round((time.time() - t0) / 60, 1)
    print(f"[{ablation}] test MAE {report['mae_mm']:.3f} mm, q95 "
          f"{report['mae_q95_mm']:.3f}, penetration {report['penetration']:.4f} "
          f"({report['wall_minutes']} min)")
    return report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="benchmarks")
    ap.add_argument("--data", default=None, help="reuse an existing dataset root")
    ap.add_argument("--ablations", nargs="*", default=list(ABLATIONS))
    args = ap.parse_args()
    bench_dir = Path(args.out)
    bench_dir.mkdir(parents=True, exist_ok=True)
    if args.data:
        data_root = Path(args.data)
    else:
        data_root = bench_dir / "dataset"
        if data_root.exists():
            shutil.rmtree(data_root)
        t0 = time.time()
        generate_dataset(DATASET, data_root)
        print(f"dataset generated in {(time.time() - t0) / 60:.1f} min")
    (bench_dir / "benchmark_config.json").write_text(json.dumps({
        "seed": BENCH_SEED,
        "dataset": DATASET.to_dict(),
        "model": MODEL.to_dict(),
        "stage1": STAGE1,
        "stage2": STAGE2,
    }, indent=1, sort_keys=True))
    for ablation in args.ablations:
        run_one(ablation, data_root, bench_dir)


if __name__ == "__main__":
    main()
