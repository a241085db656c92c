"""Regression-based keypoint evaluation: fit a regressor from discovered
keypoints to ground-truth joints, then score with MPJPE, N-MPJPE, and P-MPJPE.

Conventions: frames are flattened per row as [x1 y1 z1 ... xN yN zN]; N-MPJPE
centers both poses at their centroids and applies the closed-form
error-minimizing uniform scale; P-MPJPE applies a full similarity Procrustes
alignment (translation, rotation, uniform scale, reflection-corrected).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)


class EvaluationError(ValueError):
    """Shape mismatch or invalid regressor configuration."""


@dataclass(frozen=True)
class RegressorSpec:
    kind: str = "mlp"  # "linear" (no bias) or "mlp"
    hidden: tuple[int, int] = (50, 50)
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise EvaluationError(f"unknown regressor kind '{self.kind}'")
        if self.activation != "relu":
            raise EvaluationError(f"unsupported activation '{self.activation}'")


@dataclass
class PoseError:
    mpjpe: float
    n_mpjpe: float
    p_mpjpe: float


def _flatten_frames(x: np.ndarray) -> np.ndarray:
    if x.ndim != 3 or x.shape[2] != 3:
        raise EvaluationError(f"expected (D, J, 3) array, got {x.shape}")
    return x.reshape(x.shape[0], -1)


class LinearRegressor:
    """Bias-free least-squares map from flattened keypoints to joints."""

    def __init__(self, weight: np.ndarray, n_in_points: int, n_out_points: int):
        self.weight = weight  # (3N, 3J)
        self.n_in_points = n_in_points
        self.n_out_points = n_out_points

    def predict(self, kps: np.ndarray) -> np.ndarray:
        x = _flatten_frames(kps)
        return (x @ self.weight).reshape(len(x), self.n_out_points, 3)


class MlpRegressor:
    """Two-hidden-layer ReLU MLP, trained with Adam and early stopping."""

    def __init__(self, net: nn.Module, n_in_points: int, n_out_points: int):
        self.net = net
        self.n_in_points = n_in_points
        self.n_out_points = n_out_points

    def predict(self, kps: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(_flatten_frames(kps)).float()
        with torch.no_grad():
            y = self.net(x).numpy()
        return y.reshape(len(x), self.n_out_points, 3).astype(np.float64)


def fit_regressor(
    pred_kps: np.ndarray,
    gt_joints: np.ndarray,
    spec: RegressorSpec,
    seed: int = 0,
    max_epochs: int = 200,
):
    """Fit ``spec.kind`` on D paired frames of (D, N, 3) -> (D, J, 3).

    The linear kind solves bias-free least squares in closed form (minimum
    norm if underdetermined, with a warning). The MLP trains full-batch Adam
    with early stopping on a 10% held-out split; fully seeded.
    """
    x = _flatten_frames(pred_kps)
    y = _flatten_frames(gt_joints)
    if len(x) != len(y):
        raise EvaluationError(f"frame counts differ: {len(x)} vs {len(y)}")
    if len(x) < 1:
        raise EvaluationError("need at least one paired frame")
    n_in = pred_kps.shape[1]
    n_out = gt_joints.shape[1]

    if spec.kind == "linear":
        if len(x) < x.shape[1]:
            logger.warning(
                "linear regressor underdetermined: %d frames < %d features; "
                "returning the minimum-norm solution",
                len(x),
                x.shape[1],
            )
        weight, *_ = np.linalg.lstsq(x, y, rcond=None)
        return LinearRegressor(weight, n_in, n_out)

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = nn.Sequential(
            nn.Linear(x.shape[1], spec.hidden[0]),
            nn.ReLU(),
            nn.Linear(spec.hidden[0], spec.hidden[1]),
            nn.ReLU(),
            nn.Linear(spec.hidden[1], y.shape[1]),
        )
        if max_epochs > 0:
            _train_mlp(net, x, y, seed, max_epochs)
    net.eval()
    return MlpRegressor(net, n_in, n_out)


def _train_mlp(net, x: np.ndarray, y: np.ndarray, seed: int, max_epochs: int,
               patience: int = 25) -> None:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_val = max(1, len(x) // 10) if len(x) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx = order
        val_idx = order
    xt = torch.from_numpy(x[train_idx]).float()
    yt = torch.from_numpy(y[train_idx]).float()
    xv = torch.from_numpy(x[val_idx]).float()
    yv = torch.from_numpy(y[val_idx]).float()
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    best_val = float("inf")
    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    stale = 0
    for _ in range(max_epochs):
        opt.zero_grad()
        loss = ((net(xt) - yt) ** 2).mean()
        loss.backward()
        opt.step()
        with torch.no_grad():
            val = float(((net(xv) - yv) ** 2).mean())
        if val < best_val - 1e-9:
            best_val = val
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    net.load_state_dict(best_state)


# -- metrics ----------------------------------------------------------------


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise EvaluationError(f"pose shapes must match (J, 3): {pred.shape} vs {gt.shape}")
    return pred, gt


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance over joints."""
    pred, gt = _check_pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def n_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """MPJPE after centroid centering and the optimal uniform scale.

    scale = <pred, gt> / <pred, pred> on the centered poses; an all-zero
    centered prediction degenerates to scale 0 (logged).
    """
    pred, gt = _check_pair(pred, gt)
    p0 = pred - pred.mean(axis=0)
    g0 = gt - gt.mean(axis=0)
    pp = float((p0 * p0).sum())
    if pp == 0.0:
        logger.warning("n_mpjpe: centered prediction is all zeros; scale set to 0")
        scale = 0.0
    else:
        scale = float((p0 * g0).sum()) / pp
    return float(np.linalg.norm(scale * p0 - g0, axis=1).mean())


def similarity_align(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, dict]:
    """Procrustes: rotation, uniform scale, translation aligning pred to gt.

    Closed form via SVD of the cross-covariance, reflection-corrected to a
    proper rotation. Returns (aligned_pred, params). Collinear/degenerate
    configurations are still aligned (SVD is total) but flagged in params.
    """
    pred, gt = _check_pair(pred, gt)
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    cov = g0.T @ p0  # 3x3
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d])
    rot = u @ fix @ vt
    pp = float((p0 * p0).sum())
    degenerate = s[1] < 1e-12 * max(s[0], 1e-300)
    if degenerate:
        logger.warning("similarity_align: degenerate (near-collinear) configuration")
    scale = float((s * np.diag(fix)).sum()) / pp if pp > 0 else 0.0
    aligned = scale * p0 @ rot.T + mu_g
    return aligned, {"rotation": rot, "scale": scale, "translation": mu_g - scale * rot @ mu_p,
                     "degenerate": bool(degenerate)}


def p_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """MPJPE after similarity Procrustes alignment of pred onto gt."""
    aligned, _ = similarity_align(pred, gt)
    return mpjpe(aligned, np.asarray(gt, dtype=np.float64))


def pose_error(pred: np.ndarray, gt: np.ndarray) -> PoseError:
    return PoseError(
        mpjpe=mpjpe(pred, gt), n_mpjpe=n_mpjpe(pred, gt), p_mpjpe=p_mpjpe(pred, gt)
    )


def evaluate_sets(
    pred_kps: np.ndarray, gt_joints: np.ndarray
) -> tuple[PoseError, np.ndarray]:
    """Mean PoseError over frames plus the per-frame MPJPE distribution."""
    if len(pred_kps) != len(gt_joints):
        raise EvaluationError("frame counts differ")
    errs = [pose_error(p, g) for p, g in zip(pred_kps, gt_joints)]
    per_frame = np.array([e.mpjpe for e in errs])
    mean = PoseError(
        mpjpe=float(np.mean([e.mpjpe for e in errs])),
        n_mpjpe=float(np.mean([e.n_mpjpe for e in errs])),
        p_mpjpe=float(np.mean([e.p_mpjpe for e in errs])),
    )
    return mean, per_frame


def report_json(
    mean: PoseError,
    per_frame_mpjpe: np.ndarray,
    spec: RegressorSpec,
    dataset_hash: str,
    extra: dict | None = None,
) -> str:
    qs = [0.05, 0.25, 0.5, 0.75, 0.95]
    doc = {
        "metrics": {
            "mpjpe": mean.mpjpe,
            "n_mpjpe": mean.n_mpjpe,
            "p_mpjpe": mean.p_mpjpe,
        },
        "per_frame_mpjpe_quantiles": {
            str(q): float(v) for q, v in zip(qs, np.quantile(per_frame_mpjpe, qs))
        },
        "regressor": {"kind": spec.kind, "hidden": list(spec.hidden), "activation": spec.activation},
        "dataset_hash": dataset_hash,
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1)
