"""Self-supervised multi-view reconstruction training.

Each step runs the full pipeline — aggregate, head, unproject, fuse, volume
net, integral regression, projection to every supervised view, edge-map
rendering, reconstruction — and applies one optimizer step on the combined
perceptual + mask objective. Deterministic given the config seed; resumable
from checkpoints with exact continuation.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import container
from .backbone import MultiViewSample
from .geometry import CameraRig, rig_to_json
from .lifting import Unprojector
from .model import KeypointModel, project_keypoints
from .structure import EdgeMap, adjacency_weights, default_sigma_line, render_edge_map

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    """Configuration or data failure in the training loop."""


class NonFiniteLossError(TrainingError):
    """The objective produced NaN/inf; a diagnostic dump was written."""


@dataclass
class TrainConfig:
    """All hyperparameters in one serializable record.

    Full-scale defaults follow the reference recipe (4 views, 18 keypoints,
    72-voxel grid, AdamW at 1e-4 with the reconstruction net at 1e-3,
    lambda_vgg 1.0 / lambda_mask 0.5, 20k steps); ``desk_config`` shrinks the
    model for CPU-scale runs.
    """

    num_views: int = 4
    num_keypoints: int = 18
    grid_resolution: int = 72
    agg_channels: int = 32
    lambda_vgg: float = 1.0
    lambda_mask: float = 0.5
    lr_main: float = 1e-4
    lr_recon: float = 1e-3
    total_steps: int = 20000
    batch_size: int = 4
    seed: int = 0
    sigma_line: float = 0.0  # 0 -> resolution-scaled default
    aug_rotate_deg: float = 15.0
    aug_translate_frac: float = 0.05
    aug_scale_min: float = 0.9
    aug_scale_max: float = 1.1
    logit_gain: float = 5.0
    grad_clip: float = 5.0
    weight_decay: float = 0.01
    perceptual_seed: int = 71
    recon_channels: int = 16
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.num_views < 1:
            raise TrainingError(f"num_views must be >= 1, got {self.num_views}")
        if self.lambda_vgg < 0 or self.lambda_mask < 0:
            raise TrainingError("loss weights must be nonnegative")
        if self.total_steps <= 0:
            raise TrainingError(f"total_steps must be positive, got {self.total_steps}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.aug_scale_max < self.aug_scale_min:
            raise TrainingError("aug scale range is inverted")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise TrainingError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def sigma_for(self, image_size: tuple[int, int]) -> float:
        return self.sigma_line if self.sigma_line > 0 else default_sigma_line(image_size)


def desk_config(**overrides) -> TrainConfig:
    """CPU-tractable defaults: 8 keypoints, 24-voxel grid, 2000 steps.

    The main learning rate is raised to 3e-4 (vs the full-scale 1e-4) so the
    short desk-scale schedule converges decisively.
    """
    base = dict(
        num_keypoints=8,
        grid_resolution=24,
        agg_channels=16,
        total_steps=2000,
        batch_size=2,
        recon_channels=12,
        lr_main=3e-4,
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ReconOutput:
    predicted: Tensor  # (3, H, W) in [0, 1]
    edge_map: Tensor  # (1, H, W)


def affine_params(config: TrainConfig, gen: torch.Generator) -> tuple[float, float, float, float]:
    """(angle_rad, tx, ty, scale) drawn from the config's augmentation ranges."""
    u = torch.rand(4, generator=gen)
    angle = math.radians(config.aug_rotate_deg) * (2 * float(u[0]) - 1)
    tx = config.aug_translate_frac * (2 * float(u[1]) - 1)
    ty = config.aug_translate_frac * (2 * float(u[2]) - 1)
    scale = config.aug_scale_min + (config.aug_scale_max - config.aug_scale_min) * float(u[3])
    return angle, tx, ty, scale


def apply_affine(image: Tensor, angle: float, tx: float, ty: float, scale: float) -> Tensor:
    """Rotate/scale/translate an image (3, H, W), bilinear, zero fill outside.

    Translation is in fractions of the image size. Exact identity parameters
    skip resampling entirely.
    """
    if angle == 0.0 and tx == 0.0 and ty == 0.0 and scale == 1.0:
        return image.clone()
    c, s = math.cos(angle), math.sin(angle)
    # sampling grid = inverse of the content transform
    inv = torch.tensor(
        [[c / scale, s / scale, 0.0], [-s / scale, c / scale, 0.0]],
        dtype=image.dtype,
    )
    shift = torch.tensor([2 * tx, 2 * ty], dtype=image.dtype)
    inv[:, 2] = -inv[:, :2] @ shift
    grid = F.affine_grid(inv[None], [1, *image.shape], align_corners=False)
    out = F.grid_sample(
        image[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    return out[0]


def affine_augment(image: Tensor, config: TrainConfig, gen: torch.Generator) -> Tensor:
    return apply_affine(image, *affine_params(config, gen))


class ReconNet(nn.Module):
    """Small encoder-decoder: appearance code from the augmented input image,
    decoded under edge-map conditioning (channel concat at each scale).

    Reflection padding throughout, so constant inputs stay spatially constant.
    """

    def __init__(self, base: int = 16):
        super().__init__()
        conv = lambda ci, co, stride: nn.Conv2d(
            ci, co, 3, stride=stride, padding=1, padding_mode="reflect"
        )
        self.enc1 = conv(3, base, 1)
        self.enc2 = conv(base, 2 * base, 2)
        self.enc3 = conv(2 * base, 3 * base, 2)
        self.dec2 = conv(3 * base + 1, 2 * base, 1)
        self.dec1 = conv(2 * base + 1, base, 1)
        self.out = conv(base, 3, 1)
        self.act = nn.LeakyReLU(0.1)

    def encode(self, appearance: Tensor) -> Tensor:
        x = self.act(self.enc1(appearance))
        x = self.act(self.enc2(x))
        return self.act(self.enc3(x))  # (B, 3*base, H/4, W/4)

    def decode(self, code: Tensor, edge: Tensor) -> Tensor:
        e2 = F.avg_pool2d(edge, 2)
        x = F.interpolate(code, scale_factor=2, mode="nearest")
        x = self.act(self.dec2(torch.cat([x, e2], dim=1)))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.act(self.dec1(torch.cat([x, edge], dim=1)))
        return torch.sigmoid(self.out(x))

    def forward(self, appearance: Tensor, edge: Tensor) -> Tensor:
        return self.decode(self.encode(appearance), edge)


def reconstruct_view(appearance: Tensor, edge_map, net: ReconNet) -> ReconOutput:
    """Predict one target view from an appearance image and an edge map."""
    edge = edge_map.values if isinstance(edge_map, EdgeMap) else edge_map
    pred = net(appearance[None], edge[None])[0]
    return ReconOutput(predicted=pred, edge_map=edge)


class PerceptualPyramid(nn.Module):
    """Fixed multi-scale conv features for the perceptual loss.

    Four stride-2 stages with frozen, seed-determined random weights; a
    pretrained extractor with the same interface can be substituted.
    """

    def __init__(self, seed: int = 71, base: int = 16):
        super().__init__()
        chans = [3, base, 2 * base, 4 * base, 4 * base]
        gen = torch.Generator().manual_seed(seed)
        layers = []
        for ci, co in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(ci, co, 3, stride=2, padding=1, padding_mode="reflect")
            with torch.no_grad():
                w = torch.randn(conv.weight.shape, generator=gen)
                conv.weight.copy_(w * (2.0 / math.sqrt(ci * 9)))
                conv.bias.zero_()
            layers.append(conv)
        self.stages = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images: Tensor) -> list[Tensor]:
        x = images
        feats = []
        for stage in self.stages:
            x = F.leaky_relu(stage(x), 0.1)
            feats.append(x)
        return feats


def perceptual_loss(pred: Tensor, ref: Tensor, extractor: PerceptualPyramid) -> Tensor:
    """Sum over scales of the feature-count-normalized L1 distance.

    Accepts (3, H, W) or (B, 3, H, W); batched input returns per-item losses.
    """
    unbatched = pred.ndim == 3
    if unbatched:
        pred, ref = pred[None], ref[None]
    fp = extractor(pred)
    fr = extractor(ref)
    per_item = None
    for a, b in zip(fp, fr):
        term = (a - b).abs().mean(dim=(1, 2, 3))
        per_item = term if per_item is None else per_item + term
    return per_item[0] if unbatched else per_item


def mask_loss(edge_map, mask: Tensor) -> Tensor:
    """Mean squared error between an edge map and a binary foreground mask."""
    edge = edge_map.values if isinstance(edge_map, EdgeMap) else edge_map
    edge = edge.reshape(edge.shape[-2:]) if edge.ndim == 3 else edge
    if edge.shape != mask.shape:
        raise TrainingError(f"edge map {tuple(edge.shape)} vs mask {tuple(mask.shape)}")
    binary = ((mask == 0) | (mask == 1)).all()
    if not bool(binary):
        raise TrainingError("mask must be binary {0, 1}")
    return ((edge - mask.to(edge.dtype)) ** 2).mean()


def total_loss(per_view: list[tuple[Tensor, Tensor]], config: TrainConfig) -> Tensor:
    """(1/K) * sum_k (lambda_vgg * L_vgg_k + lambda_mask * L_mask_k)."""
    k = len(per_view)
    acc = None
    for l_vgg, l_mask in per_view:
        term = config.lambda_vgg * l_vgg + config.lambda_mask * l_mask
        acc = term if acc is None else acc + term
    return acc / k


@dataclass
class _PreparedSample:
    stack: list[Tensor]  # per layer (C_l, K, h, w) float32
    images: Tensor  # (K, 3, H, W)
    masks: Tensor  # (K, H, W) float32 binary
    rig: CameraRig
    rig_key: str


def _prepare_sample(sample: MultiViewSample, k: int) -> _PreparedSample:
    if sample.layer_features is None:
        raise TrainingError("sample has no layer_features; lifting requires them")
    if sample.num_views < k:
        raise TrainingError(f"sample has {sample.num_views} views, config wants {k}")
    rig = CameraRig(cameras=sample.rig.cameras[:k], image_size=sample.rig.image_size)
    return _PreparedSample(
        stack=[torch.from_numpy(f[:, :k].copy()).float() for f in sample.layer_features],
        images=torch.from_numpy(sample.images[:k].copy()).float(),
        masks=torch.from_numpy(sample.masks[:k].astype(np.float32)),
        rig=rig,
        rig_key=rig_to_json(rig),
    )


class Trainer:
    """Owns the models, optimizer, RNG, and the step loop."""

    def __init__(
        self,
        dataset: list[MultiViewSample],
        config: TrainConfig,
        out_dir: Path | str,
        perceptual: PerceptualPyramid | None = None,
        device: str = "cpu",
    ):
        if not dataset:
            raise TrainingError("dataset is empty")
        self.device = torch.device(device)
        if self.device.type == "cuda" and not torch.cuda.is_available():
            raise TrainingError("device 'cuda' requested but CUDA is not available")
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        k = config.num_views
        self.samples = [_prepare_sample(s, k) for s in dataset]
        first = self.samples[0]
        self.image_size = tuple(first.images.shape[-2:])
        self.layer_channels = [s.shape[0] for s in first.stack]
        for s in self.samples[1:]:
            if [t.shape[0] for t in s.stack] != self.layer_channels:
                raise TrainingError("samples disagree on feature channel counts")
        self.sigma_line = config.sigma_for(self.image_size)

        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.model = KeypointModel(
                layer_channels=self.layer_channels,
                image_size=self.image_size,
                num_keypoints=config.num_keypoints,
                grid_resolution=config.grid_resolution,
                agg_channels=config.agg_channels,
                logit_gain=config.logit_gain,
            )
            self.recon = ReconNet(base=config.recon_channels)
        self.perceptual = perceptual or PerceptualPyramid(seed=config.perceptual_seed)
        self.model.to(self.device)
        self.recon.to(self.device)
        self.perceptual.to(self.device)

        self.optimizer = torch.optim.AdamW(
            [
                {"params": list(self.model.parameters()), "lr": config.lr_main},
                {"params": list(self.recon.parameters()), "lr": config.lr_recon},
            ],
            weight_decay=config.weight_decay,
        )
        self.gen = torch.Generator().manual_seed(config.seed + 1)
        self.step_idx = 0
        self._unprojectors: dict[str, Unprojector] = {}
        self.log_path = self.out_dir / "train_log.jsonl"

    def _unprojector(self, prepared: _PreparedSample) -> Unprojector:
        up = self._unprojectors.get(prepared.rig_key)
        if up is None:
            up = Unprojector(prepared.rig, self.model.grid)
            self._unprojectors[prepared.rig_key] = up
        return up

    def _forward_group(self, items: list[_PreparedSample]) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
        """Forward a rig-homogeneous batch; returns (total, per-view terms)."""
        cfg = self.config
        k = cfg.num_views
        b = len(items)
        stack = [
            torch.stack([it.stack[l] for it in items]).to(self.device)
            for l in range(len(self.layer_channels))
        ]
        unprojector = self._unprojector(items[0])
        kps, _, _ = self.model(stack, unprojector)
        pixels, valid = project_keypoints(kps, items[0].rig)  # (B, K, N, 2)

        weights = adjacency_weights(self.model.adjacency_logits)
        edges = torch.stack(
            [
                torch.stack(
                    [
                        render_edge_map(
                            pixels[i, v],
                            weights,
                            self.image_size,
                            self.sigma_line,
                            valid=valid[i, v],
                            view_index=v,
                        ).values
                        for v in range(k)
                    ]
                )
                for i in range(b)
            ]
        )  # (B, K, 1, H, W)

        appearance = torch.stack(
            [affine_augment(it.images[0], cfg, self.gen) for it in items]
        ).to(self.device)
        code = self.recon.encode(appearance)  # (B, C, H/4, W/4)
        code_rep = code.repeat_interleave(k, dim=0)
        preds = self.recon.decode(code_rep, edges.reshape(b * k, 1, *self.image_size))
        refs = (
            torch.stack([it.images for it in items])
            .reshape(b * k, 3, *self.image_size)
            .to(self.device)
        )
        l_vgg_items = perceptual_loss(preds, refs, self.perceptual).reshape(b, k)

        masks = torch.stack([it.masks for it in items]).to(self.device)  # (B, K, H, W)
        l_mask_items = ((edges[:, :, 0] - masks) ** 2).mean(dim=(2, 3))  # (B, K)

        per_view = [
            (l_vgg_items[:, v].mean().double(), l_mask_items[:, v].mean().double())
            for v in range(k)
        ]
        return total_loss(per_view, cfg), per_view

    def train_step(self) -> dict:
        cfg = self.config
        idx = torch.randint(len(self.samples), (cfg.batch_size,), generator=self.gen)
        items = [self.samples[int(i)] for i in idx]
        groups: dict[str, list[_PreparedSample]] = {}
        for it in items:
            groups.setdefault(it.rig_key, []).append(it)

        t0 = time.monotonic()
        self.optimizer.zero_grad(set_to_none=True)
        totals, all_views = [], None
        for group in groups.values():
            tot, per_view = self._forward_group(group)
            w = len(group) / len(items)
            totals.append(tot * w)
            scaled = [(v * w, m * w) for v, m in per_view]
            if all_views is None:
                all_views = scaled
            else:
                all_views = [(a + v, b_ + m) for (a, b_), (v, m) in zip(all_views, scaled)]
        loss = sum(totals)
        if not torch.isfinite(loss):
            self._dump_diagnostic(idx, all_views, loss)
            raise NonFiniteLossError(f"non-finite loss at step {self.step_idx + 1}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(
            [p for g in self.optimizer.param_groups for p in g["params"]], cfg.grad_clip
        )
        self.optimizer.step()
        self.step_idx += 1
        return {
            "step": self.step_idx,
            "loss": float(loss.detach()),
            "per_view_vgg": [float(v.detach()) for v, _ in all_views],
            "per_view_mask": [float(m.detach()) for _, m in all_views],
            "batch": [int(i) for i in idx],
            "wall_time_s": time.monotonic() - t0,
        }

    def _dump_diagnostic(self, idx, per_view, loss) -> None:
        doc = {
            "step": self.step_idx + 1,
            "batch": [int(i) for i in idx],
            "loss": repr(loss),
            "per_view": [
                {"vgg": float(v), "mask": float(m)} for v, m in (per_view or [])
            ],
        }
        path = self.out_dir / f"diagnostic_step{self.step_idx + 1}.json"
        path.write_text(json.dumps(doc, indent=1))
        logger.error("non-finite loss; diagnostic dumped to %s", path)

    def run(self, log_every: int = 1) -> Path:
        cfg = self.config
        mode = "a" if self.step_idx else "w"
        last = None
        with self.log_path.open(mode) as log:
            while self.step_idx < cfg.total_steps:
                record = self.train_step()
                last = record
                if record["step"] % log_every == 0 or record["step"] == cfg.total_steps:
                    log.write(json.dumps(record) + "\n")
                if (
                    record["step"] % cfg.checkpoint_every == 0
                    and record["step"] < cfg.total_steps
                ):
                    self.save_checkpoint(
                        self.out_dir / f"checkpoint_{record['step']:06d}.zip", record
                    )
        final = self.out_dir / "checkpoint_final.zip"
        self.save_checkpoint(final, last)
        return final

    # -- checkpointing ----------------------------------------------------

    def save_checkpoint(self, path: Path | str, metrics: dict | None = None) -> None:
        tensors: dict[str, np.ndarray] = {}
        for name, t in self.model.state_dict().items():
            tensors[f"model/{name}"] = t.detach().cpu().numpy()
        for name, t in self.recon.state_dict().items():
            tensors[f"recon/{name}"] = t.detach().cpu().numpy()
        opt_sd = self.optimizer.state_dict()
        for pid, state in opt_sd["state"].items():
            for key, val in state.items():
                tensors[f"optim/state/{pid}/{key}"] = np.asarray(
                    val.detach().cpu() if torch.is_tensor(val) else val
                )
        tensors["rng/data"] = self.gen.get_state().numpy()
        meta = {
            "kind": "checkpoint",
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": asdict(self.config),
            "step": self.step_idx,
            "arch": {
                "layer_channels": self.layer_channels,
                "image_size": list(self.image_size),
            },
            "optim_param_groups": [
                {k: v for k, v in g.items()} for g in opt_sd["param_groups"]
            ],
            "metrics": metrics or {},
        }
        container.write_zip(path, tensors, meta)

    def restore(self, path: Path | str) -> None:
        tensors, meta = _read_checkpoint(path)
        if meta["config"] != asdict(self.config):
            raise TrainingError("checkpoint config does not match trainer config")
        self.model.load_state_dict(_collect(tensors, "model/"))
        self.recon.load_state_dict(_collect(tensors, "recon/"))
        state: dict[int, dict] = {}
        for name, arr in tensors.items():
            if not name.startswith("optim/state/"):
                continue
            _, _, pid, key = name.split("/", 3)
            state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
        self.optimizer.load_state_dict(
            {"state": state, "param_groups": meta["optim_param_groups"]}
        )
        self.gen.set_state(torch.from_numpy(tensors["rng/data"].copy()))
        self.step_idx = meta["step"]


def _collect(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, Tensor]:
    return {
        name[len(prefix):]: torch.from_numpy(arr.copy())
        for name, arr in tensors.items()
        if name.startswith(prefix)
    }


def _read_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    tensors, meta = container.read_zip(path)
    if meta.get("kind") != "checkpoint":
        raise TrainingError(f"{path}: not a training checkpoint")
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise TrainingError(f"{path}: unknown checkpoint version {meta.get('format_version')!r}")
    return tensors, meta


def load_checkpoint_model(path: Path | str) -> tuple[KeypointModel, TrainConfig, dict]:
    """Rebuild the keypoint model (eval mode) from a checkpoint."""
    tensors, meta = _read_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    arch = meta["arch"]
    model = KeypointModel(
        layer_channels=arch["layer_channels"],
        image_size=tuple(arch["image_size"]),
        num_keypoints=config.num_keypoints,
        grid_resolution=config.grid_resolution,
        agg_channels=config.agg_channels,
        logit_gain=config.logit_gain,
    )
    model.load_state_dict(_collect(tensors, "model/"))
    model.eval()
    return model, config, meta


def train(
    dataset: list[MultiViewSample],
    config: TrainConfig,
    out_dir: Path | str,
    resume_from: Path | str | None = None,
    perceptual: PerceptualPyramid | None = None,
    log_every: int = 1,
    device: str = "cpu",
) -> Path:
    """Train to ``config.total_steps`` and return the final checkpoint path."""
    trainer = Trainer(dataset, config, out_dir, perceptual=perceptual, device=device)
    if resume_from is not None:
        trainer.restore(resume_from)
    return trainer.run(log_every=log_every)


def predict_keypoints(model: KeypointModel, sample: MultiViewSample, num_views: int):
    """Run the keypoint path on one sample; returns (KeypointSet3D, pixels, valid)."""
    prepared = _prepare_sample(sample, num_views)
    unprojector = Unprojector(prepared.rig, model.grid)
    with torch.no_grad():
        kps, _, _ = model(prepared.stack, unprojector)
        pixels, valid = project_keypoints(kps, prepared.rig)
    return kps, pixels, valid
