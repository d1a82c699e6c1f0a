/**
 * .rfrig parser and pose blending.
 *
 * File layout (little-endian):
 *   magic "RFRG" | u32 version | u32 manifestLen | manifest JSON (UTF-8)
 *   u32 crc32(blob) | blob
 * blob: f32 neutral[n*3] | u32 faces[m*3] | f32 displacements[N*n*3]
 *
 * The typed-array views are zero-copy into the file buffer and must never be
 * written to; blending always targets a caller-owned output buffer.
 */

export interface RigManifest {
  n_vertices: number;
  n_faces: number;
  n_poses: number;
  pose_names: string[];
  facs_vectors: number[][];
  normalization: { center: number[]; scale: number } | null;
}

export interface LoadedRig {
  manifest: RigManifest;
  neutral: Float32Array; // n*3
  faces: Uint32Array; // m*3
  /** one Float32Array view of length n*3 per pose */
  displacements: Float32Array[];
}

export class RigFormatError extends Error {
  constructor(message: string, readonly kind: "checksum" | "version") {
    super(message);
  }
}

const MAGIC = 0x47524652; // "RFRG" read as LE u32
const VERSION = 1;

/** CRC-32 (IEEE 802.3), matching zlib.crc32. */
export function crc32(bytes: Uint8Array): number {
  let crc = 0xffffffff;
  for (let i = 0; i < bytes.length; i++) {
    crc ^= bytes[i];
    for (let k = 0; k < 8; k++) {
      crc = (crc >>> 1) ^ (0xedb88320 & -(crc & 1));
    }
  }
  return (crc ^ 0xffffffff) >>> 0;
}

export function loadRigFile(buffer: ArrayBuffer): LoadedRig {
  const view = new DataView(buffer);
  if (buffer.byteLength < 12 || view.getUint32(0, true) !== MAGIC) {
    throw new RigFormatError("not a rig file (bad magic)", "checksum");
  }
  const version = view.getUint32(4, true);
  if (version !== VERSION) {
    throw new RigFormatError(`unsupported rig version ${version}`, "version");
  }
  const manifestLen = view.getUint32(8, true);
  if (12 + manifestLen + 4 > buffer.byteLength) {
    throw new RigFormatError("truncated manifest", "checksum");
  }
  const manifestBytes = new Uint8Array(buffer, 12, manifestLen);
  const manifest = JSON.parse(new TextDecoder().decode(manifestBytes)) as RigManifest;
  const crcStored = view.getUint32(12 + manifestLen, true);
  const blobOffset = 16 + manifestLen;
  const n = manifest.n_vertices;
  const m = manifest.n_faces;
  const N = manifest.n_poses;
  const expected = 4 * (n * 3) + 4 * (m * 3) + 4 * (N * n * 3);
  if (blobOffset + expected !== buffer.byteLength) {
    throw new RigFormatError("truncated payload", "checksum");
  }
  const blob = new Uint8Array(buffer, blobOffset, expected);
  if (crc32(blob) !== crcStored) {
    throw new RigFormatError("payload checksum mismatch", "checksum");
  }
  let off = blobOffset;
  const neutral = new Float32Array(buffer, off, n * 3);
  off += 4 * n * 3;
  const faces = new Uint32Array(buffer, off, m * 3);
  off += 4 * m * 3;
  const displacements: Float32Array[] = [];
  for (let p = 0; p < N; p++) {
    displacements.push(new Float32Array(buffer, off, n * 3));
    off += 4 * n * 3;
  }
  return { manifest, neutral, faces, displacements };
}

/**
 * V = V0 + sum_i w_i d_i with weights clamped to [0, 1].
 * Writes into `out` (allocated when omitted) and never touches rig buffers.
 */
export function blendPose(
  rig: LoadedRig,
  weights: ArrayLike<number>,
  out?: Float32Array,
): Float32Array {
  const n3 = rig.neutral.length;
  if (weights.length !== rig.displacements.length) {
    throw new Error(
      `expected ${rig.displacements.length} weights, got ${weights.length}`,
    );
  }
  const result = out ?? new Float32Array(n3);
  result.set(rig.neutral);
  for (let p = 0; p < weights.length; p++) {
    let w = Number(weights[p]);
    if (!(w > 0)) continue;
    if (w > 1) w = 1;
    const d = rig.displacements[p];
    for (let i = 0; i < n3; i++) {
      result[i] += w * d[i];
    }
  }
  return result;
}

export interface SliderGroup {
  label: string;
  poses: { index: number; name: string }[];
}

const GROUP_LABELS: Record<string, string> = {
  c_: "Core",
  l_: "Left",
  r_: "Right",
  x_: "Corrective",
};

/** Group pose sliders by their short-code prefix (c_/l_/r_/x_, then rest).
 * Every pose gets a slider, including the zero-displacement neutral. */
export function sliderGroups(poseNames: string[]): SliderGroup[] {
  const groups = new Map<string, SliderGroup>();
  poseNames.forEach((name, index) => {
    const prefix = name.slice(0, 2);
    const label = GROUP_LABELS[prefix] ?? "Other";
    if (!groups.has(label)) {
      groups.set(label, { label, poses: [] });
    }
    groups.get(label)!.poses.push({ index, name });
  });
  const order = ["Core", "Left", "Right", "Corrective", "Other"];
  return order
    .filter((label) => groups.has(label))
    .map((label) => groups.get(label)!);
}
