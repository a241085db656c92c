/**
 * Browser viewer: load a rig bundle, orbit around the mesh, select joints,
 * rotate them with a gizmo or sliders, watch the mesh deform live, and export
 * the pose (JSON) or the deformed mesh (OBJ).
 */

import * as THREE from "three";
import { OrbitControls } from "three/addons/controls/OrbitControls.js";
import { TransformControls } from "three/addons/controls/TransformControls.js";

import { parseRigBundle, BundleValidationError, type RigBundle } from "./rigbundle.js";
import {
  createState,
  currentJoints,
  deformedVertices,
  exportDeformedObj,
  exportPoseJson,
  resetPose,
  setEdgeRotation,
  type ViewerState,
} from "./state.js";

const FRAME_BUDGET_MS = 33;

let state: ViewerState | null = null;
let meshGeometry: THREE.BufferGeometry | null = null;
let meshObject: THREE.Mesh | null = null;
let boneSegments: THREE.LineSegments | null = null;
let jointSpheres: THREE.Mesh[] = [];
let deformBuffer: Float64Array | null = null;

const scene = new THREE.Scene();
scene.background = new THREE.Color(0x13151a);
const camera = new THREE.PerspectiveCamera(45, 1, 0.01, 100);
camera.position.set(2.2, 1.4, 2.2);
const renderer = new THREE.WebGLRenderer({ antialias: true });
document.getElementById("canvas-host")!.appendChild(renderer.domElement);
const orbit = new OrbitControls(camera, renderer.domElement);
const gizmo = new TransformControls(camera, renderer.domElement);
gizmo.setMode("rotate");
gizmo.setSize(0.6);
const gizmoPivot = new THREE.Object3D();
scene.add(gizmoPivot);
scene.add(gizmo.getHelper());
gizmo.addEventListener("dragging-changed", (ev: { value?: unknown }) => {
  orbit.enabled = !ev.value;
});

scene.add(new THREE.AmbientLight(0xffffff, 0.45));
const key = new THREE.DirectionalLight(0xffffff, 1.4);
key.position.set(3, 4, 2);
scene.add(key);
scene.add(new THREE.AxesHelper(0.5));

function resize() {
  const host = document.getElementById("canvas-host")!;
  const w = host.clientWidth, h = host.clientHeight;
  renderer.setSize(w, h, false);
  camera.aspect = w / h;
  camera.updateProjectionMatrix();
}
window.addEventListener("resize", resize);

function showError(message: string) {
  const el = document.getElementById("error")!;
  el.textContent = message;
  el.style.display = message ? "block" : "none";
}

function statusLine(message: string) {
  document.getElementById("status")!.textContent = message;
}

// -- bundle loading -----------------------------------------------------------

async function loadFromFileList(files: FileList) {
  const byName = new Map<string, File>();
  for (const f of Array.from(files)) byName.set(f.name, f);
  const need = (name: string): File => {
    const f = byName.get(name);
    if (!f) throw new BundleValidationError(name, "file not provided");
    return f;
  };
  try {
    const binaries = new Map<string, ArrayBuffer>();
    for (const f of Array.from(files)) {
      if (f.name.endsWith(".bin")) binaries.set(f.name, await f.arrayBuffer());
    }
    const bundle = parseRigBundle({
      rigJson: await need("rig.json").text(),
      meshObj: await need("mesh.obj").text(),
      manifestJson: await need("manifest.json").text(),
      binaries,
    });
    installBundle(bundle);
  } catch (err) {
    showError(String(err));
  }
}

async function loadFromServer(base: string) {
  try {
    const get = async (name: string) => {
      const res = await fetch(`${base}/${name}`);
      if (!res.ok) throw new BundleValidationError(name, `fetch failed (${res.status})`);
      return res;
    };
    const manifestJson = await (await get("manifest.json")).text();
    const binaries = new Map<string, ArrayBuffer>();
    const manifest = JSON.parse(manifestJson);
    for (const entry of Object.values(manifest.entries ?? {}) as { file: string }[]) {
      binaries.set(entry.file, await (await get(entry.file)).arrayBuffer());
    }
    const bundle = parseRigBundle({
      rigJson: await (await get("rig.json")).text(),
      meshObj: await (await get("mesh.obj")).text(),
      manifestJson,
      binaries,
    });
    installBundle(bundle);
  } catch (err) {
    showError(String(err));
  }
}

function disposeSceneObjects() {
  if (meshObject) scene.remove(meshObject);
  if (boneSegments) scene.remove(boneSegments);
  for (const s of jointSpheres) scene.remove(s);
  jointSpheres = [];
  gizmo.detach();
}

function installBundle(bundle: RigBundle) {
  disposeSceneObjects();
  showError("");
  state = createState(bundle);
  deformBuffer = new Float64Array(bundle.vertices.length);

  meshGeometry = new THREE.BufferGeometry();
  const positions = new Float32Array(bundle.vertices);
  meshGeometry.setAttribute("position", new THREE.BufferAttribute(positions, 3));
  meshGeometry.setIndex(new THREE.BufferAttribute(bundle.faces, 1));
  meshGeometry.computeVertexNormals();
  meshObject = new THREE.Mesh(
    meshGeometry,
    new THREE.MeshStandardMaterial({ color: 0x7fa8d0, roughness: 0.65, side: THREE.DoubleSide }),
  );
  scene.add(meshObject);

  const boneGeo = new THREE.BufferGeometry();
  boneGeo.setAttribute(
    "position",
    new THREE.BufferAttribute(new Float32Array(bundle.skeleton.edges.length * 6), 3),
  );
  boneSegments = new THREE.LineSegments(
    boneGeo,
    new THREE.LineBasicMaterial({ color: 0xffc24d, depthTest: false }),
  );
  boneSegments.renderOrder = 2;
  scene.add(boneSegments);

  const sphereGeo = new THREE.SphereGeometry(0.02, 12, 8);
  bundle.skeleton.joints.forEach((_, ji) => {
    const isRoot = ji === bundle.skeleton.root;
    const sphere = new THREE.Mesh(
      sphereGeo,
      new THREE.MeshBasicMaterial({ color: isRoot ? 0xff5f5f : 0xffe9a8, depthTest: false }),
    );
    sphere.renderOrder = 3;
    sphere.userData.jointIndex = ji;
    scene.add(sphere);
    jointSpheres.push(sphere);
  });

  populateJointList();
  statusLine(
    `loaded: ${bundle.numVertices} vertices, ${bundle.skeleton.joints.length} joints, ` +
      `${bundle.numEdges} bones`,
  );
  refreshPose();
  fitCamera();
}

function fitCamera() {
  if (!meshGeometry) return;
  meshGeometry.computeBoundingSphere();
  const s = meshGeometry.boundingSphere!;
  orbit.target.copy(s.center);
  camera.position.copy(s.center).add(new THREE.Vector3(1, 0.7, 1).multiplyScalar(s.radius * 3));
  orbit.update();
}

// -- pose editing -------------------------------------------------------------

function edgeForJoint(ji: number): number | null {
  if (!state) return null;
  const idx = state.bundle.skeleton.edges.findIndex(([, c]) => c === ji);
  return idx >= 0 ? idx : null;
}

function populateJointList() {
  const list = document.getElementById("joint-list") as HTMLSelectElement;
  list.innerHTML = "";
  if (!state) return;
  const opt0 = document.createElement("option");
  opt0.value = "";
  opt0.textContent = "(no selection)";
  list.appendChild(opt0);
  state.bundle.skeleton.edges.forEach(([p, c], l) => {
    const opt = document.createElement("option");
    opt.value = String(l);
    opt.textContent = `bone ${l}: joint ${p} -> joint ${c}`;
    list.appendChild(opt);
  });
  list.onchange = () => selectEdge(list.value === "" ? null : Number(list.value));
}

function selectEdge(edge: number | null) {
  if (!state) return;
  state.selection = edge;
  const list = document.getElementById("joint-list") as HTMLSelectElement;
  list.value = edge === null ? "" : String(edge);
  syncSliders();
  attachGizmo();
}

function syncSliders() {
  const rot = state && state.selection !== null ? state.rotations[state.selection] : [0, 0, 0];
  (["rx", "ry", "rz"] as const).forEach((id, i) => {
    (document.getElementById(id) as HTMLInputElement).value = rot[i].toFixed(3);
  });
}

function sliderChanged() {
  if (!state || state.selection === null) return;
  const v = (["rx", "ry", "rz"] as const).map(
    (id) => Number((document.getElementById(id) as HTMLInputElement).value) || 0,
  );
  setEdgeRotation(state, state.selection, v);
  refreshPose();
  attachGizmo();
}

function attachGizmo() {
  if (!state || state.selection === null) {
    gizmo.detach();
    return;
  }
  const joints = currentJoints(state);
  const child = state.bundle.skeleton.edges[state.selection][1];
  gizmoPivot.position.set(joints[3 * child], joints[3 * child + 1], joints[3 * child + 2]);
  const rot = state.rotations[state.selection];
  const angle = Math.hypot(rot[0], rot[1], rot[2]);
  const q = new THREE.Quaternion();
  if (angle > 1e-12) {
    q.setFromAxisAngle(new THREE.Vector3(rot[0] / angle, rot[1] / angle, rot[2] / angle), angle);
  }
  gizmoPivot.quaternion.copy(q);
  gizmo.attach(gizmoPivot);
}

gizmo.addEventListener("objectChange", () => {
  if (!state || state.selection === null) return;
  const q = gizmoPivot.quaternion;
  const angle = 2 * Math.acos(Math.min(1, Math.abs(q.w)));
  let axisAngle = [0, 0, 0];
  const s = Math.sqrt(1 - q.w * q.w);
  if (angle > 1e-9 && s > 1e-9) {
    const sign = q.w < 0 ? -1 : 1;
    axisAngle = [
      (sign * q.x / s) * angle,
      (sign * q.y / s) * angle,
      (sign * q.z / s) * angle,
    ];
  }
  setEdgeRotation(state, state.selection, axisAngle);
  syncSliders();
  refreshPose();
});

function refreshPose() {
  if (!state || !meshGeometry || !boneSegments) return;
  const t0 = performance.now();
  deformBuffer = deformedVertices(state, deformBuffer ?? undefined);
  const attr = meshGeometry.getAttribute("position") as THREE.BufferAttribute;
  (attr.array as Float32Array).set(deformBuffer);
  attr.needsUpdate = true;
  meshGeometry.computeVertexNormals();

  const joints = currentJoints(state);
  const boneAttr = boneSegments.geometry.getAttribute("position") as THREE.BufferAttribute;
  state.bundle.skeleton.edges.forEach(([p, c], l) => {
    boneAttr.setXYZ(2 * l, joints[3 * p], joints[3 * p + 1], joints[3 * p + 2]);
    boneAttr.setXYZ(2 * l + 1, joints[3 * c], joints[3 * c + 1], joints[3 * c + 2]);
  });
  boneAttr.needsUpdate = true;
  jointSpheres.forEach((sphere, ji) => {
    sphere.position.set(joints[3 * ji], joints[3 * ji + 1], joints[3 * ji + 2]);
  });
  const ms = performance.now() - t0;
  statusLine(`deform: ${ms.toFixed(1)} ms (budget ${FRAME_BUDGET_MS} ms)`);
}

// -- selection by clicking ----------------------------------------------------

const raycaster = new THREE.Raycaster();
renderer.domElement.addEventListener("pointerdown", (ev) => {
  if (!state || gizmo.dragging) return;
  const rect = renderer.domElement.getBoundingClientRect();
  const ndc = new THREE.Vector2(
    ((ev.clientX - rect.left) / rect.width) * 2 - 1,
    -((ev.clientY - rect.top) / rect.height) * 2 + 1,
  );
  raycaster.setFromCamera(ndc, camera);
  const hits = raycaster.intersectObjects(jointSpheres, false);
  if (hits.length > 0) {
    const ji = hits[0].object.userData.jointIndex as number;
    const edge = edgeForJoint(ji);
    if (edge !== null) selectEdge(edge);
  }
});

// -- toolbar ------------------------------------------------------------------

function download(name: string, text: string, mime: string) {
  const blob = new Blob([text], { type: mime });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = name;
  a.click();
  URL.revokeObjectURL(a.href);
}

document.getElementById("file-input")!.addEventListener("change", (ev) => {
  const files = (ev.target as HTMLInputElement).files;
  if (files && files.length) void loadFromFileList(files);
});
document.getElementById("btn-reset")!.addEventListener("click", () => {
  if (!state) return;
  resetPose(state);
  syncSliders();
  refreshPose();
  attachGizmo();
});
document.getElementById("btn-export-pose")!.addEventListener("click", () => {
  if (state) download("pose.json", exportPoseJson(state), "application/json");
});
document.getElementById("btn-export-mesh")!.addEventListener("click", () => {
  if (state) download("posed_mesh.obj", exportDeformedObj(state), "text/plain");
});
for (const id of ["rx", "ry", "rz"]) {
  document.getElementById(id)!.addEventListener("change", sliderChanged);
  document.getElementById(id)!.addEventListener("input", sliderChanged);
}

// auto-load when served next to a bundle directory
void fetch("./bundle/rig.json", { method: "HEAD" })
  .then((res) => {
    if (res.ok) return loadFromServer("./bundle");
  })
  .catch(() => undefined);

resize();
renderer.setAnimationLoop(() => {
  orbit.update();
  renderer.render(scene, camera);
});
