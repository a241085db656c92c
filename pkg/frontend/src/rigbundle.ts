/**
 * RigBundle parsing and validation: the versioned on-disk contract shared
 * with the core pipeline (rig.json + mesh.obj + manifest.json + raw weights).
 * All functions are environment-agnostic (strings and ArrayBuffers in), so
 * both the browser app and node tests use the same code path.
 */

import type { Skeleton } from "./lbs.js";

export const RIG_BUNDLE_FORMAT_VERSION = 1;
export const WEIGHT_ROW_SUM_TOLERANCE = 1e-6;

export class BundleValidationError extends Error {
  constructor(public field: string, message: string) {
    super(`${field}: ${message}`);
    this.name = "BundleValidationError";
  }
}

export interface RigBundle {
  skeleton: Skeleton;
  keypoints: number[][];
  adjacency: number[][];
  params: Record<string, number>;
  /** Rest vertices, length 3V. Never mutated by the viewer. */
  vertices: Float64Array;
  /** Triangle indices, length 3F. */
  faces: Uint32Array;
  /** Row-major V x L skinning weights. */
  weights: Float64Array;
  numVertices: number;
  numEdges: number;
}

export interface BundleFiles {
  rigJson: string;
  meshObj: string;
  manifestJson: string;
  binaries: Map<string, ArrayBuffer>;
}

export function parseObj(text: string): { vertices: Float64Array; faces: Uint32Array } {
  const verts: number[] = [];
  const faces: number[] = [];
  for (const line of text.split("\n")) {
    const parts = line.trim().split(/\s+/);
    if (parts[0] === "v") {
      verts.push(Number(parts[1]), Number(parts[2]), Number(parts[3]));
    } else if (parts[0] === "f") {
      const idx = parts.slice(1).map((tok) => Number(tok.split("/")[0]) - 1);
      for (let i = 1; i + 1 < idx.length; i++) {
        faces.push(idx[0], idx[i], idx[i + 1]);
      }
    }
  }
  if (verts.length === 0) {
    throw new BundleValidationError("mesh", "no vertices found in OBJ");
  }
  return { vertices: new Float64Array(verts), faces: new Uint32Array(faces) };
}

interface ManifestEntry {
  file: string;
  dtype: string;
  shape: number[];
  byte_order: string;
}

function readWeights(manifestJson: string, binaries: Map<string, ArrayBuffer>): {
  weights: Float64Array;
  shape: number[];
} {
  const manifest = JSON.parse(manifestJson);
  const entry: ManifestEntry | undefined = manifest?.entries?.weights;
  if (!entry) throw new BundleValidationError("weights", "manifest has no weights entry");
  if (entry.byte_order !== "little") {
    throw new BundleValidationError("weights", `unsupported byte order ${entry.byte_order}`);
  }
  const buf = binaries.get(entry.file);
  if (!buf) throw new BundleValidationError("weights", `missing binary file ${entry.file}`);
  const count = entry.shape.reduce((a, b) => a * b, 1);
  let weights: Float64Array;
  if (entry.dtype === "float64") {
    if (buf.byteLength !== count * 8) {
      throw new BundleValidationError(
        "weights",
        `expected ${count * 8} bytes for shape [${entry.shape}], found ${buf.byteLength}`,
      );
    }
    weights = new Float64Array(buf.slice(0));
  } else if (entry.dtype === "float32") {
    if (buf.byteLength !== count * 4) {
      throw new BundleValidationError(
        "weights",
        `expected ${count * 4} bytes for shape [${entry.shape}], found ${buf.byteLength}`,
      );
    }
    weights = Float64Array.from(new Float32Array(buf.slice(0)));
  } else {
    throw new BundleValidationError("weights", `unsupported dtype ${entry.dtype}`);
  }
  return { weights, shape: entry.shape };
}

function validateSkeleton(skeleton: Skeleton): void {
  const n = skeleton.joints.length;
  if (skeleton.edges.length !== n - 1) {
    throw new BundleValidationError(
      "skeleton.edges",
      `need N-1=${n - 1} edges, found ${skeleton.edges.length}`,
    );
  }
  if (skeleton.root < 0 || skeleton.root >= n) {
    throw new BundleValidationError("skeleton.root", `root ${skeleton.root} out of range`);
  }
  const reachable = new Set<number>([skeleton.root]);
  for (const [p, c] of skeleton.edges) {
    if (!reachable.has(p)) {
      throw new BundleValidationError(
        "skeleton.edges",
        `edge (${p},${c}): parent not yet reachable from root`,
      );
    }
    if (reachable.has(c)) {
      throw new BundleValidationError("skeleton.edges", `joint ${c} has two parents`);
    }
    reachable.add(c);
  }
  if (reachable.size !== n) {
    throw new BundleValidationError("skeleton.edges", "edges do not span all joints");
  }
}

function validateWeightRows(weights: Float64Array, numV: number, numL: number): void {
  for (let v = 0; v < numV; v++) {
    let sum = 0;
    for (let l = 0; l < numL; l++) {
      const w = weights[v * numL + l];
      if (w < 0) {
        throw new BundleValidationError(
          "weights",
          `skinning weights must be nonnegative (vertex ${v})`,
        );
      }
      sum += w;
    }
    if (Math.abs(sum - 1) > WEIGHT_ROW_SUM_TOLERANCE) {
      throw new BundleValidationError(
        "weights",
        `skinning weight rows must sum to 1 (vertex ${v} sums to ${sum.toFixed(6)})`,
      );
    }
  }
}

export function parseRigBundle(files: BundleFiles): RigBundle {
  const rig = JSON.parse(files.rigJson);
  if (rig.format_version !== RIG_BUNDLE_FORMAT_VERSION) {
    throw new BundleValidationError(
      "format_version",
      `unknown rig bundle version ${rig.format_version}`,
    );
  }
  const skeleton: Skeleton = {
    joints: rig.joints,
    edges: rig.edges.map((e: number[]) => [e[0], e[1]] as [number, number]),
    root: rig.root,
  };
  validateSkeleton(skeleton);
  const { vertices, faces } = parseObj(files.meshObj);
  const numV = vertices.length / 3;
  const numL = skeleton.edges.length;
  const { weights, shape } = readWeights(files.manifestJson, files.binaries);
  if (shape.length !== 2 || shape[0] !== numV || shape[1] !== numL) {
    throw new BundleValidationError(
      "weights",
      `expected shape [${numV}, ${numL}], manifest declares [${shape}]`,
    );
  }
  validateWeightRows(weights, numV, numL);
  return {
    skeleton,
    keypoints: rig.keypoints ?? [],
    adjacency: rig.adjacency ?? [],
    params: rig.params ?? {},
    vertices,
    faces,
    weights,
    numVertices: numV,
    numEdges: numL,
  };
}
