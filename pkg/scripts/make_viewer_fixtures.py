#!/usr/bin/env python3
"""Golden fixtures for the viewer tests.

Writes a real analytic-rig file, five random weight vectors with their
engine-evaluated OBJ outputs (via the same code path as `rigforge pose`),
and a 96-pose rig carrying the full FACS slider name set.
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from rigforge.cli import main as cli_main
from rigforge.mesh import icosphere
from rigforge.network import FacsVector
from rigforge.rig import BlendshapeRig, save_rig
from rigforge.synthdata import HeadParams, make_head

FIXTURES = Path(__file__).resolve().parent.parent / "frontend" / "test" / "fixtures"

FACS_48 = [
    "neutral", "c_COR Corrugator", "c_CR ChinRaiser", "c_CRUL ChinRaiserUpperLip",
    "c_ELD EyesLookDown", "c_ELL EyesLookLeft", "c_ELR EyesLookRight",
    "c_ELU EyesLookUp", "c_FN Funneler", "c_FP FlatPucker", "c_JD JawDrop",
    "c_JL JawLeft", "c_JR JawRight", "c_LLS LowerLipSuck", "c_LP LipPresser",
    "c_LPT LipsTogether", "c_ML MouthLeft", "c_MR MouthRight", "c_PK Pucker",
    "c_ULS UpperLipSuck", "l_BL LeftBrowLowerer", "l_CHP LeftCheekPuff",
    "l_CHR LeftCheekRaiser", "l_DM LeftDimpler", "l_EC LeftEyeClosed",
    "l_EULR LeftEyeUpperLidRaiser", "l_IBR LeftInnerBrowRaiser",
    "l_LCD LeftLipCornerDown", "l_LCP LeftLipCornerPuller",
    "l_LLD LeftLowerLipDepressor", "l_LS LeftLipStretcher",
    "l_NW LeftNoseWrinkler", "l_OBR LeftOuterBrowRaiser",
    "l_ULR LeftUpperLipRaiser", "r_BL RightBrowLowerer", "r_CHP RightCheekPuff",
    "r_CHR RightCheekRaiser", "r_DM RightDimpler", "r_EC RightEyeClosed",
    "r_EULR RightEyeUpperLidRaiser", "r_IBR RightInnerBrowRaiser",
    "r_LCD RightLipCornerDown", "r_LCP RightLipCornerPuller",
    "r_LLD RightLowerLipDepressor", "r_LS RightLipStretcher",
    "r_NW RightNoseWrinkler", "r_OBR RightOuterBrowRaiser",
    "r_ULR RightUpperLipRaiser",
]


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    head = make_head(HeadParams(level=1, eye_level=0))
    rig_path = FIXTURES / "head.rfrig"
    save_rig(head.rig, rig_path)

    rng = np.random.default_rng(42)
    for i in range(5):
        w = np.round(rng.uniform(0, 1, size=head.rig.n_poses), 3)
        mapping = {name: float(w[j]) for j, name in enumerate(head.rig.pose_names)}
        wpath = FIXTURES / f"weights_{i}.json"
        wpath.write_text(json.dumps(mapping, indent=1))
        cli_main([
            "pose", "--rig", str(rig_path), "--weights", str(wpath),
            "--out", str(FIXTURES / f"expected_{i}.obj"),
        ])

    # single-slider golden: pose index 1 (first action unit) at weight 1
    single = {head.rig.pose_names[1]: 1.0}
    (FIXTURES / "weights_single.json").write_text(json.dumps(single, indent=1))
    cli_main([
        "pose", "--rig", str(rig_path),
        "--weights", str(FIXTURES / "weights_single.json"),
        "--out", str(FIXTURES / "expected_single.obj"),
    ])

    # 96-pose rig: the full slider name set over a tiny mesh
    mesh = icosphere(0)
    names = FACS_48 + [f"x_{i:02d} Corrective{i:02d}" for i in range(48)]
    disp = rng.standard_normal((96, mesh.n_vertices, 3)) * 0.01
    disp[0] = 0.0
    facs = [FacsVector.zeros(48)] + [FacsVector.onehot(i % 48, 48) for i in range(1, 96)]
    rig96 = BlendshapeRig(mesh, names, facs, disp)
    save_rig(rig96, FIXTURES / "poses96.rfrig")
    print(f"fixtures written to {FIXTURES}")


if __name__ == "__main__":
    main()
