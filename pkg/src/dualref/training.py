"""Segmentation + classification losses, AdamW, and the episode training loop.

Patch scores in [0, 2] map to probabilities via p = clamp(S/2, eps, 1-eps);
the mapping is monotone, so ranking metrics are unaffected. Gradients flow
only through the attention parameters: nearest-neighbor scores and residual
maps enter the graph as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor2
from .episodes import Episode, SamplerConfig, sample_train_episode, _Index
from .errors import DataError, NumericError
from .features import DatasetManifest, read_feature_file
from .model import ModelParams, forward_scores, init_params
from .scoring import nearest_normal, residual


@dataclass(frozen=True)
class LossConfig:
    seg_weight: float = 1.0  # balance between classification and segmentation
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0
    prob_clamp_eps: float = 1e-6

    def __post_init__(self):
        if self.seg_weight < 0 or self.focal_gamma < 0:
            raise DataError("seg_weight and focal_gamma must be >= 0")
        if not 0.0 < self.focal_alpha < 1.0:
            raise DataError(f"focal_alpha must be in (0,1), got {self.focal_alpha}")
        if not 0.0 < self.prob_clamp_eps <= 1e-2:
            raise DataError(f"prob_clamp_eps must be in (0, 1e-2], got {self.prob_clamp_eps}")


def _as_probability(score_node: Tensor2, cfg: LossConfig) -> Tensor2:
    eps = cfg.prob_clamp_eps
    return ad.clamp(ad.scale(score_node, 0.5), eps, 1.0 - eps)


def seg_loss(fused_node: Tensor2, mask_bits: np.ndarray, cfg: LossConfig) -> Tensor2:
    """Alpha-balanced focal loss plus Dice loss over per-patch scores."""
    n = fused_node.rows
    if mask_bits.shape != (n,) or fused_node.cols != 1:
        raise DataError(
            f"seg_loss: scores {fused_node.shape} vs mask {mask_bits.shape}"
        )
    dt = fused_node.data.dtype
    p = _as_probability(fused_node, cfg)
    m = ad.constant(mask_bits.reshape(n, 1), dtype=dt)
    one_minus_p = ad.shift(ad.scale(p, -1.0), 1.0)
    one_minus_m = ad.constant(1.0 - mask_bits.reshape(n, 1), dtype=dt)

    pos = ad.mul(m, ad.mul(ad.power(one_minus_p, cfg.focal_gamma), ad.log(p)))
    neg = ad.mul(one_minus_m, ad.mul(ad.power(p, cfg.focal_gamma), ad.log(one_minus_p)))
    focal = ad.sub(
        ad.scale(ad.mean_all(pos), -cfg.focal_alpha),
        ad.scale(ad.mean_all(neg), 1.0 - cfg.focal_alpha),
    )

    overlap = ad.scale(ad.sum_all(ad.mul(p, m)), 2.0)
    total = ad.add(ad.sum_all(p), ad.sum_all(m))
    dice = ad.shift(
        ad.scale(ad.div(ad.shift(overlap, cfg.dice_eps), ad.shift(total, cfg.dice_eps)), -1.0),
        1.0,
    )
    return ad.add(focal, dice)


def cls_loss(image_score_node: Tensor2, label: int, cfg: LossConfig) -> Tensor2:
    """Binary cross-entropy on the clamped image-score probability."""
    if label not in (0, 1):
        raise DataError(f"label must be 0/1, got {label}")
    p = _as_probability(image_score_node, cfg)
    if label == 1:
        return ad.scale(ad.log(p), -1.0)
    return ad.scale(ad.log(ad.shift(ad.scale(p, -1.0), 1.0)), -1.0)


def total_loss(seg: Tensor2, cls: Tensor2, cfg: LossConfig) -> Tensor2:
    return ad.add(cls, ad.scale(seg, cfg.seg_weight))


@dataclass
class OptimizerState:
    """Decoupled-weight-decay adaptive moment state (one slot per parameter)."""

    base_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    milestones: tuple[int, ...] = (10, 15)
    lr_decay: float = 0.1
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at_epoch(self, epoch: int) -> float:
        passed = sum(1 for ms in self.milestones if epoch >= ms)
        return self.base_lr * self.lr_decay ** passed


def optimizer_step(params: ModelParams, state: OptimizerState, lr: float) -> None:
    state.step += 1
    t = state.step
    for name, tensor in params.named_tensors():
        if tensor.grad is None:
            raise DataError(f"parameter {name} has no gradient")
        g = tensor.grad
        if not np.isfinite(g).all():
            raise NumericError(f"parameter {name} has a non-finite gradient")
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / (1.0 - state.beta1 ** t)
        v_hat = state.v[name] / (1.0 - state.beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * tensor.data
        tensor.data = tensor.data - (lr * update).astype(tensor.data.dtype)


@dataclass(frozen=True)
class TrainConfig:
    num_proxies: int = 25
    epochs: int = 20
    episodes_per_epoch: int = 500
    score_fraction: float = 0.01


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    episode: int
    cls_loss: float
    seg_loss: float
    total_loss: float
    lr: float


def write_trace(rows: list[TraceRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(
                f"{r.epoch}\t{r.episode}\t{r.cls_loss:.8e}\t{r.seg_loss:.8e}"
                f"\t{r.total_loss:.8e}\t{r.lr:.8e}\n"
            )


def episode_inputs(ep: Episode) -> dict[str, np.ndarray]:
    """Frozen per-episode arrays: NN scores and residuals carry no gradient."""
    nn_q = nearest_normal(ep.query, ep.refs.normals)
    res_qn = residual(ep.query, ep.refs.normals, nn=nn_q)
    abnormal_feats = ep.refs.stacked_abnormal_features()
    res_an = residual(abnormal_feats, ep.refs.normals)
    return {
        "query_feats": ep.query.values,
        "abnormal_feats": abnormal_feats,
        "abnormal_residuals": res_an.values,
        "abnormal_mask_bits": ep.refs.stacked_abnormal_mask(),
        "query_residuals": res_qn.values,
        "normal_score_values": nn_q.distances,
    }


def train_episode_step(
    params: ModelParams,
    ep: Episode,
    loss_cfg: LossConfig,
    opt: OptimizerState,
    lr: float,
    score_fraction: float = 0.01,
) -> tuple[float, float, float]:
    inputs = episode_inputs(ep)
    with Tape() as tape:
        fused, img = forward_scores(params, score_fraction=score_fraction, **inputs)
        seg = seg_loss(fused, ep.query_mask.bits, loss_cfg)
        cls = cls_loss(img, ep.label, loss_cfg)
        loss = total_loss(seg, cls, loss_cfg)
        params.zero_grads()
        tape.backward(loss)
    optimizer_step(params, opt, lr)
    return cls.item(), seg.item(), loss.item()


def train(
    manifest: DatasetManifest,
    sampler_cfg: SamplerConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    opt: OptimizerState,
    seed: int,
    dtype=np.float32,
    cache: dict | None = None,
    log_every: int = 0,
) -> tuple[ModelParams, list[TraceRow]]:
    """Run the full episode loop; deterministic per (manifest, configs, seed)."""
    first = manifest.by_split("test") or manifest.records
    if not first:
        raise DataError("empty manifest")
    channels = read_feature_file(first[0].feature_path).c
    params = init_params(train_cfg.num_proxies, channels, seed, dtype=dtype)
    rng = np.random.Generator(np.random.Philox(key=(seed, 0xE915)))
    index = _Index(manifest)
    if cache is None:
        cache = {}
    rows: list[TraceRow] = []
    for epoch in range(1, train_cfg.epochs + 1):
        lr = opt.lr_at_epoch(epoch)
        for episode_i in range(1, train_cfg.episodes_per_epoch + 1):
            ep = sample_train_episode(manifest, sampler_cfg, rng, cache=cache, index=index)
            cls_v, seg_v, total_v = train_episode_step(
                params, ep, loss_cfg, opt, lr, train_cfg.score_fraction
            )
            rows.append(TraceRow(epoch, episode_i, cls_v, seg_v, total_v, lr))
            if log_every and episode_i % log_every == 0:
                print(
                    f"epoch {epoch} episode {episode_i}: "
                    f"loss {total_v:.4f} (cls {cls_v:.4f} seg {seg_v:.4f}) lr {lr:.2e}"
                )
    return params, rows
