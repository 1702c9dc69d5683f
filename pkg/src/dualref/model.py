"""The trainable core: two cross-attention stages over reference residuals.

Stage one attends from learnable proxies over abnormal reference patches
(keys), aggregating normal-abnormal residuals (values) under an additive
mask that zeroes attention on non-anomalous patches. Stage two attends
from the resulting residual proxies over query-normal residuals (keys),
aggregating raw query features (values). Each stage ends with a minimal
single-head self-attention block (residual connection, no normalization).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor2
from .errors import DataError, FormatError
from .features import PatchFeatureMap
from .scoring import STAGE_ABNORMAL, STAGE_FUSED, ResidualMap, ScoreMap

CHECKPOINT_MAGIC = b"NAGP"
CHECKPOINT_VERSION = 1

DEFAULT_MASK_VALUE = -1e9


@dataclass
class AttentionBlockParams:
    wq: Tensor2
    wk: Tensor2
    wv: Tensor2
    wo: Tensor2


@dataclass
class ModelParams:
    """All learnable state: proxies, two projection triples, two SA blocks."""

    proxies: Tensor2  # (M, C)
    mine_q: Tensor2  # (C, C) stage-one projections
    mine_k: Tensor2
    mine_v: Tensor2
    learn_q: Tensor2  # (C, C) stage-two projections
    learn_k: Tensor2
    learn_v: Tensor2
    sa1: AttentionBlockParams
    sa2: AttentionBlockParams
    mask_value: float = DEFAULT_MASK_VALUE

    def __post_init__(self):
        if self.num_proxies < 1:
            raise DataError("need at least one proxy")
        if self.mask_value > -1e8:
            raise DataError(f"mask_value must be <= -1e8, got {self.mask_value}")

    @property
    def num_proxies(self) -> int:
        return self.proxies.rows

    @property
    def channels(self) -> int:
        return self.proxies.cols

    @property
    def attn_scale(self) -> float:
        # scaling factor d equals the channel dimension
        return float(self.channels)

    def named_tensors(self) -> list[tuple[str, Tensor2]]:
        """Fixed parameter order; also the checkpoint serialization order."""
        return [
            ("proxies", self.proxies),
            ("mine_q", self.mine_q), ("mine_k", self.mine_k), ("mine_v", self.mine_v),
            ("learn_q", self.learn_q), ("learn_k", self.learn_k), ("learn_v", self.learn_v),
            ("sa1.wq", self.sa1.wq), ("sa1.wk", self.sa1.wk),
            ("sa1.wv", self.sa1.wv), ("sa1.wo", self.sa1.wo),
            ("sa2.wq", self.sa2.wq), ("sa2.wk", self.sa2.wk),
            ("sa2.wv", self.sa2.wv), ("sa2.wo", self.sa2.wo),
        ]

    def zero_grads(self) -> None:
        for _, t in self.named_tensors():
            t.zero_grad()


def init_params(
    num_proxies: int,
    channels: int,
    seed: int,
    mask_value: float = DEFAULT_MASK_VALUE,
    dtype=np.float32,
    requires_grad: bool = True,
) -> ModelParams:
    """Draw proxies and projections from N(0, 1/C), deterministic per seed."""
    if num_proxies < 1 or channels < 1:
        raise DataError("num_proxies and channels must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=seed))
    sd = 1.0 / np.sqrt(channels)

    def mk(rows, cols):
        return Tensor2(rng.normal(0.0, sd, size=(rows, cols)),
                       requires_grad=requires_grad, dtype=dtype)

    def block():
        return AttentionBlockParams(mk(channels, channels), mk(channels, channels),
                                    mk(channels, channels), mk(channels, channels))

    return ModelParams(
        proxies=mk(num_proxies, channels),
        mine_q=mk(channels, channels), mine_k=mk(channels, channels),
        mine_v=mk(channels, channels),
        learn_q=mk(channels, channels), learn_k=mk(channels, channels),
        learn_v=mk(channels, channels),
        sa1=block(), sa2=block(),
        mask_value=mask_value,
    )


def self_attention_block(block: AttentionBlockParams, x: Tensor2) -> Tensor2:
    """Single-head self-attention with a residual connection, no norm layer."""
    d = float(x.cols)
    q = ad.matmul(x, block.wq)
    k = ad.matmul(x, block.wk)
    v = ad.matmul(x, block.wv)
    attn = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d)))
    return ad.add(ad.matmul(ad.matmul(attn, v), block.wo), x)


def residual_mining(
    params: ModelParams,
    abnormal_feats: Tensor2,  # (K2*L, C) stacked abnormal reference patches
    abnormal_residuals: Tensor2,  # (K2*L, C) their residuals vs the normal bank
    abnormal_mask_bits: np.ndarray,  # (K2*L,) 1 marks an anomalous patch
) -> Tensor2:
    """Aggregate masked reference residuals into residual proxies (M, C)."""
    n = abnormal_feats.rows
    if abnormal_residuals.shape != abnormal_feats.shape:
        raise DataError(
            f"residuals shape {abnormal_residuals.shape} != features {abnormal_feats.shape}"
        )
    if abnormal_mask_bits.shape != (n,):
        raise DataError(f"mask shape {abnormal_mask_bits.shape} != ({n},)")
    if not abnormal_mask_bits.any():
        raise DataError("abnormal reference mask has no set bits")
    q = ad.matmul(params.proxies, params.mine_q)
    k = ad.matmul(abnormal_feats, params.mine_k)
    v = ad.matmul(abnormal_residuals, params.mine_v)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(params.attn_scale))
    additive = ad.constant(
        (params.mask_value * (1.0 - abnormal_mask_bits)).reshape(1, n),
        dtype=abnormal_feats.data.dtype,
    )
    attn = ad.softmax_rows(scores, additive)
    return self_attention_block(params.sa1, ad.matmul(attn, v))


def anomaly_feature_learning(
    params: ModelParams,
    residual_proxies: Tensor2,  # (M, C)
    query_residuals: Tensor2,  # (L, C)
    query_feats: Tensor2,  # (L, C)
) -> Tensor2:
    """Match residual proxies against query residuals; aggregate query
    features into anomaly proxies (M, C)."""
    if query_residuals.shape != query_feats.shape:
        raise DataError(
            f"residuals shape {query_residuals.shape} != features {query_feats.shape}"
        )
    q = ad.matmul(residual_proxies, params.learn_q)
    k = ad.matmul(query_residuals, params.learn_k)
    v = ad.matmul(query_feats, params.learn_v)
    attn = ad.softmax_rows(
        ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(params.attn_scale))
    )
    return self_attention_block(params.sa2, ad.matmul(attn, v))


def abnormal_guided_score_node(anomaly_proxies: Tensor2, query_feats: Tensor2) -> Tensor2:
    """Mean clamped cosine similarity of each query patch to the proxies, (L, 1).

    Proxy rows are L2-normalized first; query rows are unit norm already.
    """
    m = anomaly_proxies.rows
    sim = ad.matmul(query_feats, ad.transpose(ad.normalize_rows_t(anomaly_proxies)))
    ones = ad.constant(np.full((m, 1), 1.0 / m), dtype=query_feats.data.dtype)
    return ad.matmul(ad.clamp(sim, 0.0, 1.0), ones)


def abnormal_guided_score(
    anomaly_proxies: Tensor2, query: PatchFeatureMap
) -> ScoreMap:
    feats = ad.constant(query.values, dtype=anomaly_proxies.data.dtype)
    node = abnormal_guided_score_node(anomaly_proxies, feats)
    return ScoreMap(query.h, query.w, node.data.reshape(-1).copy(), STAGE_ABNORMAL)


def fuse_scores(normal_scores: ScoreMap, abnormal_scores: ScoreMap) -> ScoreMap:
    if normal_scores.values.shape != abnormal_scores.values.shape:
        raise DataError(
            f"score length mismatch: {normal_scores.values.shape} vs "
            f"{abnormal_scores.values.shape}"
        )
    return ScoreMap(
        normal_scores.h, normal_scores.w,
        normal_scores.values + abnormal_scores.values, STAGE_FUSED,
    )


def image_score(fused: ScoreMap, fraction: float = 0.01) -> float:
    """Mean of the top-fraction highest patch scores."""
    k = ad.top_fraction_count(fused.values.size, fraction)
    picked = np.argsort(-fused.values, kind="stable")[:k]
    return float(fused.values[picked].mean())


def forward_scores(
    params: ModelParams,
    query_feats: np.ndarray,
    abnormal_feats: np.ndarray,
    abnormal_residuals: np.ndarray,
    abnormal_mask_bits: np.ndarray,
    query_residuals: np.ndarray,
    normal_score_values: np.ndarray,
    score_fraction: float = 0.01,
) -> tuple[Tensor2, Tensor2]:
    """Full graph from frozen inputs to (fused per-patch scores, image score).

    Returns graph nodes so callers can train on them or read forward values.
    """
    dt = params.proxies.data.dtype
    f_a = ad.constant(abnormal_feats, dtype=dt)
    r_an = ad.constant(abnormal_residuals, dtype=dt)
    f_q = ad.constant(query_feats, dtype=dt)
    r_qn = ad.constant(query_residuals, dtype=dt)
    s_n = ad.constant(normal_score_values.reshape(-1, 1), dtype=dt)

    mined = residual_mining(params, f_a, r_an, abnormal_mask_bits)
    learned = anomaly_feature_learning(params, mined, r_qn, f_q)
    s_a = abnormal_guided_score_node(learned, f_q)
    fused = ad.add(s_n, s_a)
    return fused, ad.mean_top_fraction(fused, score_fraction)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Fixed-order float32 little-endian dump of all parameter matrices."""
    chunks = [CHECKPOINT_MAGIC,
              struct.pack("<III", CHECKPOINT_VERSION,
                          params.num_proxies, params.channels)]
    for _, t in params.named_tensors():
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(
    path: str | Path,
    mask_value: float = DEFAULT_MASK_VALUE,
    dtype=np.float32,
    requires_grad: bool = False,
) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, m, c = struct.unpack("<III", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    shapes = [(m, c)] + [(c, c)] * 14
    expected = 16 + sum(r * k for r, k in shapes) * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: payload length {len(raw)} != expected {expected}")
    mats = []
    offset = 16
    for rows, cols in shapes:
        nbytes = rows * cols * 4
        arr = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=offset)
        mats.append(Tensor2(arr.reshape(rows, cols).copy(),
                            requires_grad=requires_grad, dtype=dtype))
        offset += nbytes
    return ModelParams(
        proxies=mats[0],
        mine_q=mats[1], mine_k=mats[2], mine_v=mats[3],
        learn_q=mats[4], learn_k=mats[5], learn_v=mats[6],
        sa1=AttentionBlockParams(*mats[7:11]),
        sa2=AttentionBlockParams(*mats[11:15]),
        mask_value=mask_value,
    )
