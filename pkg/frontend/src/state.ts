/**
 * Viewer state: the immutable loaded bundle plus a pose layered on top as
 * per-edge axis-angle rotations. Rest pose is always recoverable by reset.
 */

import { axisAngleToMatrix, lbsDeform, posedJoints, type Mat3 } from "./lbs.js";
import type { RigBundle } from "./rigbundle.js";

export const POSE_FORMAT_VERSION = 1;

export interface ViewerState {
  bundle: RigBundle;
  /** Per-edge axis-angle rotations (angle = vector norm, radians). */
  rotations: number[][];
  /** Selected edge index, or null. */
  selection: number | null;
}

export function createState(bundle: RigBundle): ViewerState {
  return {
    bundle,
    rotations: bundle.skeleton.edges.map(() => [0, 0, 0]),
    selection: null,
  };
}

export function resetPose(state: ViewerState): void {
  state.rotations = state.bundle.skeleton.edges.map(() => [0, 0, 0]);
}

export function setEdgeRotation(state: ViewerState, edge: number, axisAngle: number[]): void {
  if (edge < 0 || edge >= state.rotations.length) {
    throw new Error(`edge index ${edge} out of range`);
  }
  state.rotations[edge] = [axisAngle[0], axisAngle[1], axisAngle[2]];
}

export function rotationMatrices(state: ViewerState): Mat3[] {
  return state.rotations.map((v) => axisAngleToMatrix(v));
}

/** Deformed vertex buffer for the current pose (length 3V). */
export function deformedVertices(state: ViewerState, out?: Float64Array): Float64Array {
  return lbsDeform(
    state.bundle.vertices,
    state.bundle.skeleton,
    rotationMatrices(state),
    state.bundle.weights,
    out,
  );
}

/** Posed joint positions for skeleton overlay (length 3N). */
export function currentJoints(state: ViewerState): Float64Array {
  return posedJoints(state.bundle.skeleton, rotationMatrices(state));
}

/** Pose export; re-loadable by the core pipeline to reproduce the geometry. */
export function exportPoseJson(state: ViewerState): string {
  return JSON.stringify(
    { format_version: POSE_FORMAT_VERSION, rotations: state.rotations },
    null,
    1,
  );
}

export function importPoseJson(state: ViewerState, text: string): void {
  const doc = JSON.parse(text);
  if (doc.format_version !== POSE_FORMAT_VERSION) {
    throw new Error(`unknown pose format version ${doc.format_version}`);
  }
  if (!Array.isArray(doc.rotations) || doc.rotations.length !== state.rotations.length) {
    throw new Error(
      `pose has ${doc.rotations?.length} rotations, rig has ${state.rotations.length} edges`,
    );
  }
  state.rotations = doc.rotations.map((v: number[]) => [v[0], v[1], v[2]]);
}

/** ASCII OBJ export of the current deformed mesh. */
export function exportDeformedObj(state: ViewerState): string {
  const verts = deformedVertices(state);
  const lines = ["# posed mesh export"];
  for (let v = 0; v < state.bundle.numVertices; v++) {
    lines.push(`v ${verts[3 * v]} ${verts[3 * v + 1]} ${verts[3 * v + 2]}`);
  }
  const faces = state.bundle.faces;
  for (let f = 0; f < faces.length; f += 3) {
    lines.push(`f ${faces[f] + 1} ${faces[f + 1] + 1} ${faces[f + 2] + 1}`);
  }
  return lines.join("\n") + "\n";
}
