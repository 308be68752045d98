"""Patch-based training with an adaptive-moment optimizer, plus evaluation.

Defaults follow the residual-network host's usual recipe: mean absolute error
loss, Adam with step size 1e-4 halved at the half-way point of the step
budget, 24x24 LR patches.  All randomness (patch sampling, initialization)
flows from the single run seed, so a run is reproducible bit-for-bit given the
same seed, configuration, and BLAS thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, NumericError, Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .data import DataError, DatasetManifest, make_lr
from .layers import ParamSet, init_params
from .metrics import psnr, ssim
from .networks import ModelSpec, forward_multimodal, self_ensemble

__all__ = [
    "TrainConfig",
    "TrainResult",
    "Adam",
    "mae_loss",
    "LoadedSplit",
    "load_split",
    "model_modalities",
    "train_model",
    "MetricsReport",
    "evaluate_model",
    "evaluate_bicubic",
]


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    patch: int = 24
    seed: int = 0
    precision: str = "single"  # "single" for training, "double" for checking
    val_every: int | None = None  # default: 5% of the step budget
    log_every: int = 50
    out_dir: Path | None = None

    @property
    def dtype(self):
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        return np.float32 if self.precision == "single" else np.float64


class Adam:
    """Adaptive moment estimation over a ParamSet (beta 0.9/0.999, eps 1e-8)."""

    def __init__(self, params: ParamSet, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_blobs(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out["adam.m." + name] = self.m[name]
            out["adam.v." + name] = self.v[name]
        return out


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error as a (1, 1, 1, 1) tensor."""
    diff = ad.sub(pred, target)
    return ad.scale(ad.sum_all(ad.absolute(diff)), 1.0 / diff.data.size)


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------


@dataclass
class LoadedSplit:
    """HR slices per record (modality order fixed) with precomputed LR pairs."""

    ids: list[str]
    hr: list[list[np.ndarray]]  # [record][modality] (H, W)
    lr: list[list[np.ndarray]]  # [record][modality] (H/s, W/s)


def model_modalities(spec: ModelSpec, manifest: DatasetManifest) -> list[str]:
    """Which dataset modalities feed the model's branches, in branch order.

    A single-contrast model consumes only the dataset's target modality; a
    model matching the full modality count consumes them all in manifest
    order (its target_index must then agree with the manifest).
    """
    if spec.n_modalities == 1:
        return [manifest.target]
    if spec.n_modalities == len(manifest.modalities):
        if spec.target_index != manifest.target_index:
            raise DataError(
                f"model target_index {spec.target_index} disagrees with dataset "
                f"target {manifest.target!r} (index {manifest.target_index})"
            )
        return list(manifest.modalities)
    raise DataError(
        f"model expects {spec.n_modalities} modalities but dataset has "
        f"{len(manifest.modalities)}"
    )


def load_split(
    manifest: DatasetManifest, split: str, scale: int, modalities: list[str] | None = None
) -> LoadedSplit:
    records = manifest.split_records(split)
    if not records:
        raise DataError(f"dataset has no records in split {split!r}")
    modalities = modalities or manifest.modalities
    ids, hrs, lrs = [], [], []
    for rec in records:
        images = manifest.load_record(rec)
        hr = [images[mod] for mod in modalities]
        ids.append(rec.record_id)
        hrs.append(hr)
        lrs.append([make_lr(img, scale) for img in hr])
    return LoadedSplit(ids=ids, hr=hrs, lr=lrs)


def _sample_batch(split: LoadedSplit, rng, batch: int, patch: int, scale: int,
                  target_index: int, dtype):
    """Aligned multimodal LR patches plus the HR target patch."""
    n_mod = len(split.lr[0])
    lr_batch = [np.empty((batch, 1, patch, patch), dtype=dtype) for _ in range(n_mod)]
    hr_batch = np.empty((batch, 1, patch * scale, patch * scale), dtype=dtype)
    for b in range(batch):
        ri = int(rng.integers(len(split.lr)))
        lh, lw = split.lr[ri][0].shape
        top = int(rng.integers(lh - patch + 1))
        left = int(rng.integers(lw - patch + 1))
        for m in range(n_mod):
            lr_batch[m][b, 0] = split.lr[ri][m][top : top + patch, left : left + patch]
        hr_batch[b, 0] = split.hr[ri][target_index][
            top * scale : (top + patch) * scale, left * scale : (left + patch) * scale
        ]
    return [Tensor(x) for x in lr_batch], Tensor(hr_batch)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    spec: ModelSpec
    params: ParamSet
    best_params: ParamSet
    best_val_psnr: float
    loss_history: list[float]
    checkpoint_path: Path | None


def train_model(
    spec: ModelSpec,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    log=None,
) -> TrainResult:
    """Minimize MAE between the super-resolved target modality and ground truth.

    Emits ``step=<n> loss=<v> wall=<s>`` log lines, validates every 5% of the
    step budget (tracking the best validation PSNR), and aborts with the step
    number on a non-finite loss.
    """
    log = log or (lambda s: None)
    dtype = cfg.dtype
    mods = model_modalities(spec, manifest)
    train_split = load_split(manifest, "train", spec.scale, mods)
    try:
        val_split = load_split(manifest, "val", spec.scale, mods)
    except DataError:
        val_split = None

    params = init_params(spec, cfg.seed, dtype=dtype)
    log(f"params={params.total_size()} tensors={len(params)}")
    opt = Adam(params)
    rng = np.random.default_rng(cfg.seed + 1)
    val_every = cfg.val_every or max(1, cfg.steps // 20)

    best_psnr = -np.inf
    best_params = params.copy()
    losses: list[float] = []
    ckpt_path = Path(cfg.out_dir) / "best.ckpt" if cfg.out_dir else None
    t0 = time.perf_counter()

    for step in range(1, cfg.steps + 1):
        lr_now = cfg.lr * (0.5 if step > cfg.steps // 2 else 1.0)
        lrs, target = _sample_batch(
            train_split, rng, cfg.batch_size, cfg.patch, spec.scale, spec.target_index, dtype
        )
        params.zero_grad()
        try:
            with Graph() as g:
                pred = forward_multimodal(lrs, spec, params, training=True)
                loss = mae_loss(pred, target)
                g.backward(loss)
        except NumericError as e:
            raise NumericError(f"non-finite loss at step {step}: {e}") from e
        loss_val = float(loss.data.reshape(()))
        if not np.isfinite(loss_val):
            raise NumericError(f"non-finite loss at step {step}")
        losses.append(loss_val)
        opt.step(lr_now)

        if step % cfg.log_every == 0 or step == 1:
            log(f"step={step} loss={loss_val:.6f} wall={time.perf_counter() - t0:.2f}")
        if val_split is not None and (step % val_every == 0 or step == cfg.steps):
            report = _quick_eval(spec, params, val_split)
            log(
                f"step={step} val_psnr={report[0]:.4f} val_ssim={report[1]:.5f} "
                f"wall={time.perf_counter() - t0:.2f}"
            )
            if report[0] > best_psnr:
                best_psnr = report[0]
                best_params = params.copy()
                if ckpt_path is not None:
                    save_checkpoint(
                        ckpt_path,
                        Checkpoint.from_paramset(spec, best_params, step, opt.state_blobs()),
                    )

    if val_split is None:
        best_params = params.copy()
        if ckpt_path is not None:
            save_checkpoint(
                ckpt_path, Checkpoint.from_paramset(spec, best_params, cfg.steps, opt.state_blobs())
            )
    return TrainResult(
        spec=spec,
        params=params,
        best_params=best_params,
        best_val_psnr=float(best_psnr),
        loss_history=losses,
        checkpoint_path=ckpt_path,
    )


def _forward_full(spec, params, lr_imgs, dtype, ensemble=False):
    """Full-slice inference on one record; returns the (H, W) prediction."""
    arrs = [img[None, None].astype(dtype) for img in lr_imgs]

    def run(batch_arrs):
        tensors = [Tensor(a) for a in batch_arrs]
        return forward_multimodal(tensors, spec, params, training=False).data

    if ensemble:
        out = self_ensemble(run, arrs, spec)
        out = np.clip(out, 0.0, 1.0)
    else:
        out = run(arrs)
    return out[0, 0]


def _quick_eval(spec, params, split: LoadedSplit) -> tuple[float, float]:
    dtype = next(iter(params.items()))[1].data.dtype
    ps, ss = [], []
    for hr, lr in zip(split.hr, split.lr):
        pred = _forward_full(spec, params, lr, dtype)
        truth = hr[spec.target_index]
        ps.append(psnr(pred, truth))
        ss.append(ssim(pred, truth))
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-image PSNR/SSIM rows plus their arithmetic means."""

    rows: list[tuple[str, float, float]]
    config_echo: dict = field(default_factory=dict)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def table(self) -> str:
        lines = ["id\tpsnr\tssim"]
        lines += [f"{rid}\t{p:.4f}\t{s:.5f}" for rid, p, s in self.rows]
        lines.append(f"aggregate\t{self.psnr_mean:.4f}\t{self.ssim_mean:.5f}")
        return "\n".join(lines) + "\n"


def evaluate_model(
    spec: ModelSpec,
    params: ParamSet,
    manifest: DatasetManifest,
    split: str = "test",
    ensemble: bool = False,
) -> MetricsReport:
    data = load_split(manifest, split, spec.scale, model_modalities(spec, manifest))
    dtype = next(iter(params.items()))[1].data.dtype
    rows = []
    for rid, hr, lr in zip(data.ids, data.hr, data.lr):
        pred = _forward_full(spec, params, lr, dtype, ensemble=ensemble)
        truth = hr[spec.target_index]
        rows.append((rid, psnr(pred, truth), ssim(pred, truth)))
    return MetricsReport(rows=rows, config_echo={"split": split, "ensemble": ensemble})


def evaluate_bicubic(manifest: DatasetManifest, scale: int, split: str = "test") -> MetricsReport:
    """The interpolation baseline: bicubic upscale of the target-modality LR."""
    from .resize import bicubic_resize

    data = load_split(manifest, split, scale)
    k = manifest.target_index
    rows = []
    for rid, hr, lr in zip(data.ids, data.hr, data.lr):
        truth = hr[k]
        pred = np.clip(bicubic_resize(lr[k], *truth.shape), 0.0, 1.0)
        rows.append((rid, psnr(pred, truth), ssim(pred, truth)))
    return MetricsReport(rows=rows, config_echo={"split": split, "baseline": "bicubic"})
