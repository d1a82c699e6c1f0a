import { LoadedRig, RigFormatError, blendPose, loadRigFile, sliderGroups } from "./rfrig.js";
import { Viewer } from "./viewer.js";

let rig: LoadedRig | null = null;
let weights: Float64Array = new Float64Array(0);
let blended: Float32Array = new Float32Array(0);
let viewer: Viewer;
let dirty = true;

const PRESETS: Record<string, Record<string, number>> = {
  "Jaw Drop": { "c_JD JawDrop": 1 },
  "Blink": { "l_EC LeftEyeClosed": 1, "r_EC RightEyeClosed": 1 },
  "Gaze Left": { "c_ELL EyesLookLeft": 1 },
  "Half Smile": { "l_OBR LeftOuterBrowRaiser": 0.6, "c_PK Pucker": 0.4 },
  "Reset": {},
};

function $(id: string): HTMLElement {
  return document.getElementById(id)!;
}

function banner(message: string | null): void {
  const el = $("banner");
  el.textContent = message ?? "";
  el.style.display = message ? "block" : "none";
}

function setRig(next: LoadedRig): void {
  rig = next;
  weights = new Float64Array(rig.manifest.n_poses);
  blended = new Float32Array(rig.neutral.length);
  viewer.setTopology(rig.faces, rig.manifest.n_vertices);
  buildSliders();
  banner(null);
  $("meta").textContent =
    `${rig.manifest.n_vertices} vertices, ${rig.manifest.n_faces} faces, ` +
    `${rig.manifest.n_poses} poses`;
  dirty = true;
}

function buildSliders(): void {
  const host = $("sliders");
  host.innerHTML = "";
  if (!rig) return;
  for (const group of sliderGroups(rig.manifest.pose_names)) {
    const section = document.createElement("details");
    section.open = true;
    const title = document.createElement("summary");
    title.textContent = group.label;
    section.appendChild(title);
    for (const pose of group.poses) {
      const row = document.createElement("label");
      row.className = "slider-row";
      const name = document.createElement("span");
      name.textContent = pose.name;
      const input = document.createElement("input");
      input.type = "range";
      input.min = "0";
      input.max = "1";
      input.step = "0.01";
      input.value = "0";
      input.dataset.pose = String(pose.index);
      input.addEventListener("input", () => {
        weights[pose.index] = Number(input.value);
        dirty = true;
      });
      row.appendChild(name);
      row.appendChild(input);
      section.appendChild(row);
    }
    host.appendChild(section);
  }
  const presets = $("presets");
  presets.innerHTML = "";
  for (const [label, mapping] of Object.entries(PRESETS)) {
    const btn = document.createElement("button");
    btn.textContent = label;
    btn.addEventListener("click", () => applyPreset(mapping));
    presets.appendChild(btn);
  }
}

function applyPreset(mapping: Record<string, number>): void {
  if (!rig) return;
  weights.fill(0);
  rig.manifest.pose_names.forEach((name, i) => {
    if (name in mapping) weights[i] = mapping[name];
  });
  document.querySelectorAll<HTMLInputElement>("#sliders input").forEach((input) => {
    input.value = String(weights[Number(input.dataset.pose)] ?? 0);
  });
  dirty = true;
}

function exportWeights(): void {
  if (!rig) return;
  const mapping: Record<string, number> = {};
  rig.manifest.pose_names.forEach((name, i) => {
    if (weights[i] > 0) mapping[name] = weights[i];
  });
  const blob = new Blob([JSON.stringify(mapping, null, 1)], { type: "application/json" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "weights.json";
  a.click();
  URL.revokeObjectURL(a.href);
}

async function loadFromBytes(buffer: ArrayBuffer): Promise<void> {
  try {
    setRig(loadRigFile(buffer));
  } catch (err) {
    if (err instanceof RigFormatError) {
      banner(`Could not load rig: ${err.message}`);
    } else {
      banner(`Could not load rig: ${String(err)}`);
    }
  }
}

function frame(): void {
  if (rig && dirty) {
    blendPose(rig, weights, blended);
    viewer.updatePositions(blended);
    dirty = false;
  }
  viewer.render();
  requestAnimationFrame(frame);
}

function init(): void {
  viewer = new Viewer($("canvas") as HTMLCanvasElement);
  ($("file") as HTMLInputElement).addEventListener("change", async (e) => {
    const file = (e.target as HTMLInputElement).files?.[0];
    if (file) await loadFromBytes(await file.arrayBuffer());
  });
  $("flat").addEventListener("change", (e) => {
    viewer.flatShading = (e.target as HTMLInputElement).checked;
  });
  $("export").addEventListener("click", exportWeights);
  const params = new URLSearchParams(window.location.search);
  const url = params.get("rig");
  if (url) {
    fetch(url)
      .then((r) => r.arrayBuffer())
      .then(loadFromBytes)
      .catch((err) => banner(`Fetch failed: ${err}`));
  }
  requestAnimationFrame(frame);
}

init();
