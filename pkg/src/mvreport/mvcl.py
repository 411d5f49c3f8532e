"""Stage-1 objective: multi-positive contrastive loss across views,
multi-view fusion, and instance-/token-wise cross-modal alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .data import Batch, stack_views
from .encoders import (
    ProjectedPair,
    VisualFeatures,
    encode_text,
    encode_views,
    per_view_globals,
    project_and_pool,
)
from .errors import NumericalAbort, ParameterError

log = logging.getLogger(__name__)


@dataclass
class MpcDistributions:
    q: Tensor                 # [K, K-1] row-stochastic, differentiable
    p: np.ndarray             # [K, K-1] row-stochastic ground truth
    anchor_index_map: list    # row -> (study_index, view_index)


@dataclass
class LossBreakdown:
    mpc: float
    inst: float
    tok: float
    total: float


def _drop_diagonal(square: Tensor, k: int) -> Tensor:
    """[K, K] -> [K, K-1] with the diagonal removed, autodiff-safe."""
    flat = ad.reshape(square, (k * k,))
    trimmed = ad.narrow(flat, 0, 0, k * k - 1)
    folded = ad.reshape(trimmed, (k - 1, k + 1))
    off = ad.narrow(folded, 1, 1, k)
    return ad.reshape(off, (k, k - 1))


def mpc_distributions(v_globals: Tensor, batch: Batch, tau1: float) -> MpcDistributions | None:
    """Contrastive (q) and ground-truth (p) distributions over the K views
    of multi-view studies. Returns None when K < 2 (mpc not applicable).

    ``v_globals`` holds one l2-normalized global vector per view in study
    order ([M_imgs, d]).
    """
    if tau1 <= 0:
        raise ParameterError(f"tau1 must be positive, got {tau1}")
    index_map = []
    keep_rows = []
    offset = 0
    for si, study in enumerate(batch.studies):
        for vi in range(study.num_views):
            if study.num_views > 1:
                index_map.append((si, vi))
                keep_rows.append(offset + vi)
        offset += study.num_views
    k = len(keep_rows)
    if k < 2:
        return None

    pool = ad.gather_rows(v_globals, np.asarray(keep_rows))
    sims = ad.matmul(pool, ad.swap_last2(pool))  # [K, K]
    q = ad.softmax_rows(_drop_diagonal(sims, k), temperature=tau1)

    same = np.zeros((k, k), dtype=np.float32)
    for i, (si, _) in enumerate(index_map):
        for j, (sj, _) in enumerate(index_map):
            if i != j and si == sj:
                same[i, j] = 1.0
    flat = same.reshape(-1)[:-1].reshape(k - 1, k + 1)[:, 1:].reshape(k, k - 1)
    p = flat / flat.sum(axis=1, keepdims=True)
    return MpcDistributions(q=q, p=p, anchor_index_map=index_map)


def mpc_loss(dists: MpcDistributions | None) -> Tensor:
    """Cross entropy between p and q, averaged over the K rows; zero when
    mpc is not applicable."""
    if dists is None:
        return ad.constant(0.0)
    return ad.cross_entropy_rows(ad.constant(dists.p), dists.q)


def multi_view_fuse(vis: VisualFeatures, batch: Batch, params: dict) -> Tensor:
    """Fuse each study's views into anchor-shaped features [B, p, d1].

    Anchor positions query the auxiliary views' features at the same
    spatial position (cross-attention over the view axis), followed by a
    skip connection and layer normalization. Single-view studies bypass
    fusion and pass their anchor features through unchanged.
    """
    gain, bias = params["stage1.fuse.ln.g"], params["stage1.fuse.ln.b"]
    offsets = batch.view_offsets()
    fused_rows = []
    for study, offset in zip(batch.studies, offsets):
        m = study.num_views
        study_feats = ad.narrow(vis.per_view, 0, offset, m)  # [m, p, d1]
        anchor = ad.narrow(study_feats, 0, study.anchor_index, 1)  # [1, p, d1]
        if m == 1:
            fused_rows.append(anchor)
            continue
        aux_parts = []
        if study.anchor_index > 0:
            aux_parts.append(ad.narrow(study_feats, 0, 0, study.anchor_index))
        if study.anchor_index < m - 1:
            aux_parts.append(ad.narrow(study_feats, 0, study.anchor_index + 1, m - 1 - study.anchor_index))
        aux = ad.concat(aux_parts, axis=0) if len(aux_parts) > 1 else aux_parts[0]  # [m-1, p, d1]
        queries = ad.transpose(anchor, (1, 0, 2))        # [p, 1, d1]
        keys = ad.transpose(aux, (1, 0, 2))              # [p, m-1, d1]
        attended = ad.scaled_dot_attention(queries, keys, keys)  # [p, 1, d1]
        attended = ad.transpose(attended, (1, 0, 2))     # [1, p, d1]
        fused_rows.append(ad.layer_norm(anchor + attended, gain, bias))
    return ad.concat(fused_rows, axis=0)


def global_ground_truth(reports) -> np.ndarray:
    """p^g rows: uniform over studies whose reports are string-identical."""
    b = len(reports)
    match = np.array([[1.0 if reports[i] == reports[j] else 0.0 for j in range(b)] for i in range(b)],
                     dtype=np.float32)
    return match / match.sum(axis=1, keepdims=True)


@dataclass
class AlignmentDistributions:
    q_v2t: Tensor
    q_t2v: Tensor
    p_g: np.ndarray


def instance_alignment_loss(pp: ProjectedPair, reports, tau2: float):
    """Bidirectional instance-level alignment between global visual and
    textual embeddings (returns the loss and the distributions)."""
    if tau2 <= 0:
        raise ParameterError(f"tau2 must be positive, got {tau2}")
    sims = ad.matmul(pp.vis_global, ad.swap_last2(pp.txt_global))  # [B, B]
    q_v2t = ad.softmax_rows(sims, temperature=tau2)
    q_t2v = ad.softmax_rows(ad.swap_last2(sims), temperature=tau2)
    p_g = global_ground_truth(reports)
    p_const = ad.constant(p_g)
    loss = ad.cross_entropy_rows(p_const, q_v2t) + ad.cross_entropy_rows(p_const, q_t2v)
    return loss, AlignmentDistributions(q_v2t=q_v2t, q_t2v=q_t2v, p_g=p_g)


def token_alignment_loss(pp: ProjectedPair, tau2: float) -> Tensor:
    """Single-positive InfoNCE per unmasked text token against its
    attention-pooled visual context, negatives from the same study.

    Studies with fewer than two unmasked tokens contribute nothing.
    """
    if tau2 <= 0:
        raise ParameterError(f"tau2 must be positive, got {tau2}")
    b = pp.txt.shape[0]
    per_study_losses = []
    total_tokens = 0
    for i in range(b):
        unmasked = np.flatnonzero(pp.txt_mask[i])
        n_tok = len(unmasked)
        if n_tok < 2:
            continue
        txt_i = ad.reshape(ad.narrow(pp.txt, 0, i, 1), pp.txt.shape[1:])  # [L, d]
        if unmasked[-1] == n_tok - 1 and unmasked[0] == 0:
            tokens = ad.narrow(txt_i, 0, 0, n_tok)
        else:
            tokens = ad.gather_rows(txt_i, unmasked)
        vis_i = ad.reshape(ad.narrow(pp.vis, 0, i, 1), pp.vis.shape[1:])  # [p, d]
        contexts = ad.scaled_dot_attention(tokens, vis_i, vis_i)          # [n_tok, d]
        t_norm = ad.l2_normalize(tokens)
        c_norm = ad.l2_normalize(contexts)
        logits = ad.matmul(t_norm, ad.swap_last2(c_norm))  # [n_tok, n_tok]
        logp = ad.log_softmax_rows(logits, temperature=tau2)
        diag = ad.take_last(logp, np.arange(n_tok))
        per_study_losses.append(-ad.tsum(diag))
        total_tokens += n_tok
    if not per_study_losses:
        return ad.constant(0.0)
    total = per_study_losses[0]
    for extra in per_study_losses[1:]:
        total = total + extra
    return total * (1.0 / total_tokens)


def stage1_forward(batch: Batch, params: dict, vocab, config: RunConfig):
    """All Stage-1 losses for one batch; returns the total plus its parts."""
    vis = encode_views(stack_views(batch), params, config)
    view_globals = per_view_globals(vis)
    dists = mpc_distributions(view_globals, batch, config.tau1)
    loss_mpc = mpc_loss(dists)
    fused = multi_view_fuse(vis, batch, params)
    text = encode_text([s.factual_serialization for s in batch.studies], params, vocab, config)
    pp = project_and_pool(fused, text, params)
    loss_inst, align = instance_alignment_loss(pp, [s.report for s in batch.studies], config.tau2)
    loss_tok = token_alignment_loss(pp, config.tau2)
    total = loss_mpc + loss_inst + loss_tok
    return total, loss_mpc, loss_inst, loss_tok, dists, align


def pretrain_step(batch: Batch, params: dict, vocab, optimizer, config: RunConfig) -> LossBreakdown:
    """One forward/backward/AdamW update on the Stage-1 objective."""
    total, loss_mpc, loss_inst, loss_tok, dists, align = stage1_forward(batch, params, vocab, config)
    breakdown = LossBreakdown(
        mpc=loss_mpc.item(), inst=loss_inst.item(), tok=loss_tok.item(),
        total=loss_mpc.item() + loss_inst.item() + loss_tok.item(),
    )
    if not np.isfinite(breakdown.total):
        dump = {
            "mpc": breakdown.mpc, "inst": breakdown.inst, "tok": breakdown.tok,
            "q_v2t": align.q_v2t.data.tolist(), "q_t2v": align.q_t2v.data.tolist(),
            "p_g": align.p_g.tolist(),
        }
        if dists is not None:
            dump["q_mpc"] = dists.q.data.tolist()
            dump["p_mpc"] = dists.p.tolist()
        raise NumericalAbort("non-finite Stage-1 loss", dump=dump)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    optimizer.zero_grad()
    return breakdown
