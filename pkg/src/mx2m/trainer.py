"""Alternating source/target training, LR schedule, pseudo-labels and ablation runs."""
from __future__ import annotations

import itertools
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import yaml

from . import numcore as nc
from .geom import PatchGrid
from .losses import STRATEGIES, LossFlags, LossWeights, compose
from .model import PLACEMENTS, ModelConfig, Mx2MModel, make_batch, save_checkpoint
from .xmask import NO_MASK, MaskMode, MaskParams, sample_plan

log = logging.getLogger(__name__)

BASELINE_MODES = ("full", "source_only", "target_oracle")


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    lr_milestones: tuple = (0.8, 0.9)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask: MaskParams = field(default_factory=lambda: MaskParams(16, 0.15, 0.2, 0.2))
    weights: LossWeights = field(default_factory=LossWeights)
    f2d: int = 16
    f3d: int = 16
    conv_layers: int = 3
    xmrp_mid: int = 64
    voxel_size: float = 0.05
    voxel_scales: tuple = (1, 3)
    strategy: str = "xMRP"
    dxmf_placement: str = "prediction"
    pl_mode: bool = False
    pl_threshold: float | None = None
    baseline_mode: str = "full"
    kl_direction: str = "forward"
    log_interval: int = 50
    checkpoint_interval: int = 0

    def __post_init__(self):
        if isinstance(self.mask, dict):
            self.mask = MaskParams(**self.mask)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.lr_milestones = tuple(self.lr_milestones)
        self.voxel_scales = tuple(self.voxel_scales)
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        ms = self.lr_milestones
        if any(not 0 < m < 1 for m in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError(f"lr_milestones must be strictly increasing in (0, 1): {ms}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.dxmf_placement not in PLACEMENTS:
            raise ValueError(f"dxmf_placement must be one of {PLACEMENTS}")
        if self.baseline_mode not in BASELINE_MODES:
            raise ValueError(f"baseline_mode must be one of {BASELINE_MODES}")

    def model_config(self, n_classes):
        return ModelConfig(n_classes=n_classes, f2d=self.f2d, f3d=self.f3d,
                           conv_layers=self.conv_layers, xmrp_mid=self.xmrp_mid,
                           voxel_size=self.voxel_size, voxel_scales=self.voxel_scales, placement=self.dxmf_placement)

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["voxel_scales"] = list(self.voxel_scales)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Budget for the desk-scale benchmark: 300 iterations of 4 scenes, p=8 patches."""
    base = TrainConfig(iterations=300, batch_size=4, mask=MaskParams(8, 0.15, 0.2, 0.2), log_interval=50)
    return replace(base, **overrides)


def load_config(path) -> TrainConfig:
    """Read a YAML (nested key/value) training config."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return TrainConfig.from_dict(data)


def dump_config(config: TrainConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)


def lr_at(iteration, config: TrainConfig):
    """Step schedule: divide by 10 at each milestone fraction of the run."""
    k = sum(iteration >= m * config.iterations for m in config.lr_milestones)
    return config.lr / 10 ** k


class NonFiniteLoss(nc.NumericError):
    pass


@dataclass
class TrainResult:
    model: Mx2MModel
    log: list
    config: TrainConfig


def _plans(rng, config: TrainConfig, grid, count, masking):
    if not masking:
        return [NO_MASK] * count
    plans = [sample_plan(rng, config.mask, grid) for _ in range(count)]
    if config.strategy == "only2D":
        plans = [p if p.mode != MaskMode.MASK_3D else NO_MASK for p in plans]
    elif config.strategy == "only3D":
        plans = [p if p.mode != MaskMode.MASK_2D else NO_MASK for p in plans]
    return plans


def _step_domain(model, domain, scenes, labels, plans, config, grid, norm, flags):
    batch = make_batch(scenes, *norm, config.voxel_size, plans, grid, labels=labels,
                       voxel_scales=config.voxel_scales)
    try:
        heads = model.forward(batch)
        total, breakdown = compose(domain, heads, batch, config.weights, flags)
    except nc.NumericError as exc:
        raise NonFiniteLoss(f"{domain} forward: {exc}") from None
    bad = [k for k, v in breakdown.items() if not np.isfinite(v)]
    if bad:
        raise NonFiniteLoss(f"non-finite {domain} loss term(s): {', '.join(bad)}")
    total.backward()
    return breakdown


def train(config: TrainConfig, source_ds, target_ds, pseudo_labels=None, out_dir=None) -> TrainResult:
    """Run the alternating optimization; pure function of (config, datasets).

    Each iteration draws one source and one target batch with replacement
    and fresh mask plans, accumulates both domains' gradients and takes a
    single Adam step over all parameters.
    """
    if len(source_ds) == 0 or len(target_ds) == 0:
        raise ValueError("empty dataset")
    if config.pl_mode and pseudo_labels is None:
        raise ValueError("pl_mode requires pseudo_labels")
    n_classes = source_ds.n_classes
    model = Mx2MModel(config.model_config(n_classes), seed=config.seed)
    params = model.parameters()
    state = nc.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    cam = source_ds.camera
    grid = PatchGrid(config.mask.p, cam.width, cam.height)
    norm = (source_ds.norm_mean, source_ds.norm_std)
    rng = nc.seeded_rng(config.seed, 1)

    mode = config.baseline_mode
    labeled_ds = target_ds if mode == "target_oracle" else source_ds
    masking = mode == "full" and (config.mask.m2d + config.mask.m3d) > 0
    src_flags = LossFlags(config.strategy, False, seg_only=mode != "full",
                          kl_direction=config.kl_direction, xmrp=masking)
    tgt_flags = LossFlags(config.strategy, config.pl_mode, kl_direction=config.kl_direction, xmrp=masking)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    records = []
    t0 = time.perf_counter()
    bs = config.batch_size
    for it in range(config.iterations):
        state.lr = lr_at(it, config)
        model.zero_grad()
        si = rng.integers(0, len(labeled_ds), bs)
        ti = rng.integers(0, len(target_ds), bs)
        s_plans = _plans(rng, config, grid, bs, masking)
        t_plans = _plans(rng, config, grid, bs, masking)
        src = _step_domain(model, "source", [labeled_ds[i] for i in si], None, s_plans,
                           config, grid, norm, src_flags)
        tgt = {}
        if mode == "full":
            if config.pl_mode:
                labels = [pseudo_labels[i] for i in ti]
            else:
                labels = [np.full(target_ds[i].n_points, -1) for i in ti]
            tgt = _step_domain(model, "target", [target_ds[i] for i in ti], labels, t_plans,
                               config, grid, norm, tgt_flags)
        nc.adam_step(params, [p.grad if p.grad is not None else np.zeros(p.shape) for p in params], state)

        last = it == config.iterations - 1
        if (it + 1) % config.log_interval == 0 or it == 0 or last:
            rec = {"iteration": it + 1, "lr": state.lr, "source": src, "target": tgt,
                   "wall_time": round(time.perf_counter() - t0, 3)}
            records.append(rec)
            log.info("it %d lr %.1e src %.4f tgt %.4f", it + 1, state.lr, src["total"], tgt.get("total", 0.0))
        if out_dir and config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0 and not last:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{it + 1:07d}.bin"), model, config.to_dict())
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint_final.bin"), model, config.to_dict())
        write_log(os.path.join(out_dir, "train_log.jsonl"), records)
    return TrainResult(model, records, config)


def write_log(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ------------------------------------------------------------- pseudo-labels

def predict_probs(model: Mx2MModel, dataset, norm=None, batch_size=8):
    """Per-scene (2D softmax, 3D softmax) arrays from an unmasked forward pass."""
    norm = norm or (dataset.norm_mean, dataset.norm_std)
    if model.config.n_classes != dataset.n_classes:
        raise ValueError(f"model predicts {model.config.n_classes} classes, dataset has {dataset.n_classes}")
    out = []
    for start in range(0, len(dataset), batch_size):
        scenes = dataset.scenes[start:start + batch_size]
        batch = make_batch(scenes, *norm, model.config.voxel_size, voxel_scales=model.config.voxel_scales)
        heads = model.forward(batch)
        p2 = nc._softmax_np(heads.p2d.data)
        p3 = nc._softmax_np(heads.p3d.data)
        for a, b in zip(batch.offsets[:-1], batch.offsets[1:]):
            out.append((p2[a:b], p3[a:b]))
    return out


def generate_pseudo_labels(model: Mx2MModel, target_ds, threshold=None):
    """Argmax of the mean 2D/3D softmax per point (lowest index wins ties).

    With ``threshold`` set, points whose averaged confidence falls below it
    are marked -1 (unlabeled).
    """
    labels = []
    for p2, p3 in predict_probs(model, target_ds):
        avg = (p2 + p3) / 2
        lab = avg.argmax(1).astype(np.int64)
        if threshold is not None:
            lab[avg.max(1) < threshold] = -1
        labels.append(lab)
    return labels


def write_pseudo_labels(path, labels):
    with open(path, "wb") as fh:
        np.savez(fh, **{f"scene_{i:06d}": np.asarray(l, dtype=np.int64) for i, l in enumerate(labels)})


def read_pseudo_labels(path):
    with np.load(path) as data:
        keys = sorted(data.files)
        return [data[k] for k in keys]


# ------------------------------------------------------------------ ablation

def expand_grid(base: TrainConfig, grid: dict):
    """Cartesian product of ``{field: [values]}`` applied on top of ``base``."""
    if not grid:
        return [base]
    keys = sorted(grid)
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


def run_ablation(base: TrainConfig, grid: dict, source_ds, target_ds, eval_ds, seeds=(0,),
                 pseudo_labels=None):
    """Train and evaluate every grid point for every seed; returns result rows."""
    from .metrics import evaluate

    configs = expand_grid(base, grid)
    if not configs:
        raise ValueError("empty ablation grid")
    rows = []
    for cfg in configs:
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            result = train(run_cfg, source_ds, target_ds, pseudo_labels=pseudo_labels)
            report = evaluate(result.model, eval_ds, norm=(source_ds.norm_mean, source_ds.norm_std))
            row = {k: getattr(run_cfg, k) for k in sorted(grid)}
            row.update(seed=seed, miou_2d=report.miou_2d, miou_3d=report.miou_3d, miou_avg=report.miou_avg)
            rows.append(row)
    return rows
