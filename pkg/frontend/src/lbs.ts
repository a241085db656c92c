/**
 * Forward-kinematic linear blend skinning, mirroring the core pipeline's
 * deformation contract exactly: each edge rotates about its parent joint's
 * rest position, transforms compose root-to-leaf, and every vertex is the
 * weight-blended sum of its per-edge rigid transforms.
 */

export interface Skeleton {
  /** Rest joint positions, length N, each [x, y, z]. */
  joints: number[][];
  /** Directed (parent, child) pairs in parent-before-child order, length N-1. */
  edges: [number, number][];
  root: number;
}

/** Row-major 3x3 matrix. */
export type Mat3 = Float64Array;

export function identityMat3(): Mat3 {
  return new Float64Array([1, 0, 0, 0, 1, 0, 0, 0, 1]);
}

export function axisAngleToMatrix(v: readonly number[]): Mat3 {
  const angle = Math.hypot(v[0], v[1], v[2]);
  if (angle < 1e-12) return identityMat3();
  const x = v[0] / angle, y = v[1] / angle, z = v[2] / angle;
  const c = Math.cos(angle), s = Math.sin(angle), cc = 1 - c;
  return new Float64Array([
    c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s,
    y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s,
    z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc,
  ]);
}

function matMul(a: Mat3, b: Mat3): Mat3 {
  const out = new Float64Array(9);
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      out[3 * i + j] =
        a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
    }
  }
  return out;
}

function matVec(a: Mat3, v: readonly number[] | Float64Array): Float64Array {
  return new Float64Array([
    a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
    a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
    a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
  ]);
}

export function isOrthonormal(r: Mat3, tol = 1e-5): boolean {
  // R^T R == I and det == +1
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let dot = 0;
      for (let k = 0; k < 3; k++) dot += r[3 * k + i] * r[3 * k + j];
      if (Math.abs(dot - (i === j ? 1 : 0)) > tol) return false;
    }
  }
  const det =
    r[0] * (r[4] * r[8] - r[5] * r[7]) -
    r[1] * (r[3] * r[8] - r[5] * r[6]) +
    r[2] * (r[3] * r[7] - r[4] * r[6]);
  return Math.abs(det - 1) <= tol;
}

/** For each edge, the index of its parent edge (-1 at the root). */
export function parentEdgeIndices(skeleton: Skeleton): number[] {
  const childToEdge = new Map<number, number>();
  skeleton.edges.forEach(([, c], l) => childToEdge.set(c, l));
  return skeleton.edges.map(([p]) => childToEdge.get(p) ?? -1);
}

export interface EdgeTransforms {
  rots: Mat3[];
  trans: Float64Array[];
}

/** Composed global rigid transform per edge (rotation about the parent
 * joint's rest position, accumulated down the tree). */
export function edgeTransforms(skeleton: Skeleton, rotations: Mat3[]): EdgeTransforms {
  const count = skeleton.edges.length;
  if (rotations.length !== count) {
    throw new Error(`need ${count} rotations, got ${rotations.length}`);
  }
  const parentEdge = parentEdgeIndices(skeleton);
  const rots: Mat3[] = new Array(count);
  const trans: Float64Array[] = new Array(count);
  for (let l = 0; l < count; l++) {
    const [p] = skeleton.edges[l];
    const pivot = skeleton.joints[p];
    const localR = rotations[l];
    const rp = matVec(localR, pivot);
    const localT = new Float64Array([pivot[0] - rp[0], pivot[1] - rp[1], pivot[2] - rp[2]]);
    const pe = parentEdge[l];
    if (pe < 0) {
      rots[l] = localR;
      trans[l] = localT;
    } else {
      rots[l] = matMul(rots[pe], localR);
      const t = matVec(rots[pe], localT);
      trans[l] = new Float64Array([
        t[0] + trans[pe][0],
        t[1] + trans[pe][1],
        t[2] + trans[pe][2],
      ]);
    }
  }
  return { rots, trans };
}

/**
 * Deform vertices by weight-blended per-edge transforms.
 *
 * @param vertices rest positions, length 3V
 * @param weights  row-major V x L skinning matrix
 * @param out      optional output buffer (length 3V) for reuse across frames
 */
export function lbsDeform(
  vertices: Float64Array,
  skeleton: Skeleton,
  rotations: Mat3[],
  weights: Float64Array,
  out?: Float64Array,
): Float64Array {
  const numV = vertices.length / 3;
  const numL = skeleton.edges.length;
  if (weights.length !== numV * numL) {
    throw new Error(
      `weights length ${weights.length} does not match V=${numV} x L=${numL}`,
    );
  }
  for (const r of rotations) {
    if (!isOrthonormal(r)) throw new Error("rotation is not orthonormal with det +1");
  }
  const { rots, trans } = edgeTransforms(skeleton, rotations);
  const result = out ?? new Float64Array(vertices.length);
  for (let v = 0; v < numV; v++) {
    const x = vertices[3 * v], y = vertices[3 * v + 1], z = vertices[3 * v + 2];
    let ox = 0, oy = 0, oz = 0;
    for (let l = 0; l < numL; l++) {
      const w = weights[v * numL + l];
      if (w === 0) continue;
      const r = rots[l], t = trans[l];
      ox += w * (r[0] * x + r[1] * y + r[2] * z + t[0]);
      oy += w * (r[3] * x + r[4] * y + r[5] * z + t[1]);
      oz += w * (r[6] * x + r[7] * y + r[8] * z + t[2]);
    }
    result[3 * v] = ox;
    result[3 * v + 1] = oy;
    result[3 * v + 2] = oz;
  }
  return result;
}

/** Joint positions after applying per-edge rotations (root stays put). */
export function posedJoints(skeleton: Skeleton, rotations: Mat3[]): Float64Array {
  const { rots, trans } = edgeTransforms(skeleton, rotations);
  const out = new Float64Array(skeleton.joints.length * 3);
  skeleton.joints.forEach((j, i) => out.set(j, 3 * i));
  skeleton.edges.forEach(([, c], l) => {
    const moved = matVec(rots[l], skeleton.joints[c]);
    out[3 * c] = moved[0] + trans[l][0];
    out[3 * c + 1] = moved[1] + trans[l][1];
    out[3 * c + 2] = moved[2] + trans[l][2];
  });
  return out;
}
