"""Stage-2 knowledge-guided generation: transition bridge over optional
indications, a memory-augmented decoder, the LM loss, and decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .data import Batch, stack_views
from .encoders import NEG_INF, encode_text, encode_views
from .errors import DimensionError, NumericalAbort
from .mvcl import multi_view_fuse
from .rng import Rng
from .text import BOS_ID, EOS_ID, PAD_ID, tokenize


@dataclass
class GenerationOutput:
    token_ids: list
    token_logprobs: list
    stopped_by: str  # "eos" | "max_len"


def init_stage2_params(config: RunConfig, vocab_size: int, rng: Rng) -> dict:
    """Fresh Stage-2 parameters: bridge, decoder, memory, output head.

    Bridge tokens start at zero so the absent-indication path begins as a
    near-identity (attention over zero values adds nothing).
    """

    def normal(shape, std):
        return ad.parameter(rng.normal(shape, std=std))

    def ones(shape):
        return ad.parameter(np.ones(shape, dtype=np.float32))

    def zeros(shape):
        return ad.parameter(np.zeros(shape, dtype=np.float32))

    dm = config.d1
    params = {}
    params["stage2.bridge.tokens"] = zeros((config.n_b, dm))
    for block in range(config.bridge_blocks):
        params[f"stage2.bridge.b{block}.ln.g"] = ones((dm,))
        params[f"stage2.bridge.b{block}.ln.b"] = zeros((dm,))

    params["stage2.dec.embed"] = normal((vocab_size, dm), std=0.02)
    params["stage2.dec.pos"] = normal((config.max_tokens + 2, dm), std=0.02)
    params["stage2.dec.memory"] = normal((config.memory_rows, dm), std=0.02)
    for layer in range(config.dec_layers):
        prefix = f"stage2.dec.l{layer}"
        for block in ("self", "cross"):
            for name in ("wq", "wk", "wv", "wo"):
                params[f"{prefix}.{block}.{name}"] = normal((dm, dm), std=1.0 / np.sqrt(dm))
        params[f"{prefix}.ln1.g"] = ones((dm,))
        params[f"{prefix}.ln1.b"] = zeros((dm,))
        params[f"{prefix}.ln2.g"] = ones((dm,))
        params[f"{prefix}.ln2.b"] = zeros((dm,))
        h = config.ffn_mult * dm
        params[f"{prefix}.ffn.w1"] = normal((dm, h), std=1.0 / np.sqrt(dm))
        params[f"{prefix}.ffn.b1"] = zeros((h,))
        params[f"{prefix}.ffn.w2"] = normal((h, dm), std=1.0 / np.sqrt(h))
        params[f"{prefix}.ffn.b2"] = zeros((dm,))
        params[f"{prefix}.ln3.g"] = ones((dm,))
        params[f"{prefix}.ln3.b"] = zeros((dm,))
    params["stage2.dec.out.w"] = normal((dm, vocab_size), std=1.0 / np.sqrt(dm))
    params["stage2.dec.out.b"] = zeros((vocab_size,))
    return params


def split_param_groups(params: dict):
    """(stage1-initialized, fresh stage-2) parameter groups by name prefix."""
    stage1 = {k: v for k, v in params.items() if k.startswith("stage1.")}
    stage2 = {k: v for k, v in params.items() if k.startswith("stage2.")}
    return stage1, stage2


def encode_indications(batch: Batch, params: dict, vocab, config: RunConfig) -> list:
    """Per-study indication token features (None where absent).

    Indications run through the Stage-1 text encoder; each present study
    yields its unmasked token rows as a [L_i, d2] tensor.
    """
    present = [i for i, s in enumerate(batch.studies) if s.indication]
    if not present:
        return [None] * batch.B
    token_lists = [tokenize(batch.studies[i].indication) for i in present]
    feats = encode_text(token_lists, params, vocab, config)
    out = [None] * batch.B
    for row, study_index in enumerate(present):
        n_tok = int(feats.pad_mask[row].sum())
        tokens = ad.reshape(ad.narrow(feats.tokens, 0, row, 1), feats.tokens.shape[1:])
        out[study_index] = ad.narrow(tokens, 0, 0, n_tok)
    return out


def bridge_forward(fused_vis: Tensor, indication_feats: list | None, params: dict, config: RunConfig) -> Tensor:
    """Condition fused visual tokens on [bridge ; indication] keys/values.

    The output shape always equals the input shape, whether or not an
    indication is present.
    """
    b = fused_vis.shape[0]
    if indication_feats is None:
        indication_feats = [None] * b
    bridge = params["stage2.bridge.tokens"]
    x = fused_vis
    for block in range(config.bridge_blocks):
        gain = params[f"stage2.bridge.b{block}.ln.g"]
        bias = params[f"stage2.bridge.b{block}.ln.b"]
        rows = []
        for i in range(b):
            study_x = ad.narrow(x, 0, i, 1)  # [1, p, dm]
            kv = bridge if indication_feats[i] is None else ad.concat([bridge, indication_feats[i]], axis=0)
            queries = ad.reshape(study_x, study_x.shape[1:])
            attended = ad.scaled_dot_attention(queries, kv, kv)  # [p, dm]
            out = ad.layer_norm(queries + attended, gain, bias)
            rows.append(ad.reshape(out, (1,) + out.shape))
        x = ad.concat(rows, axis=0)
    return x


def stage2_knowledge(batch: Batch, params: dict, vocab, config: RunConfig) -> Tensor:
    """Fused, bridge-conditioned visual tokens [B, p, dm] for the decoder."""
    vis = encode_views(stack_views(batch), params, config)
    fused = multi_view_fuse(vis, batch, params)
    ind_feats = encode_indications(batch, params, vocab, config)
    return bridge_forward(fused, ind_feats, params, config)


def decoder_forward(prefix_ids: np.ndarray, knowledge: Tensor, params: dict, config: RunConfig) -> Tensor:
    """Causal decoder logits [B, T, vocab] over the whole prefix.

    Cross-attention keys/values are the knowledge tokens concatenated
    with the learnable memory rows.
    """
    ids = np.asarray(prefix_ids, dtype=np.int64)
    b, t = ids.shape
    if t > config.max_tokens + 1:
        raise DimensionError(f"prefix length {t} exceeds max context {config.max_tokens + 1}")
    x = ad.gather_rows(params["stage2.dec.embed"], ids)
    pos = ad.narrow(params["stage2.dec.pos"], 0, 0, t)
    x = x + ad.reshape(pos, (1, t, x.shape[-1]))

    causal = np.triu(np.full((t, t), NEG_INF, dtype=np.float32), k=1)
    pad_keys = np.where(ids == PAD_ID, NEG_INF, 0.0).astype(np.float32)
    self_mask = causal[None, :, :] + pad_keys[:, None, :]
    # every query may at least attend to itself
    diag = np.arange(t)
    self_mask[:, diag, diag] = 0.0

    memory = params["stage2.dec.memory"]
    mem_rows = ad.stack0([memory] * b)  # [B, R, dm]
    kv_source = ad.concat([knowledge, mem_rows], axis=1)

    for layer in range(config.dec_layers):
        prefix = f"stage2.dec.l{layer}"
        q = ad.matmul(x, params[f"{prefix}.self.wq"])
        k = ad.matmul(x, params[f"{prefix}.self.wk"])
        v = ad.matmul(x, params[f"{prefix}.self.wv"])
        attended = ad.scaled_dot_attention(q, k, v, mask=self_mask)
        x = ad.layer_norm(x + ad.matmul(attended, params[f"{prefix}.self.wo"]),
                          params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
        cq = ad.matmul(x, params[f"{prefix}.cross.wq"])
        ck = ad.matmul(kv_source, params[f"{prefix}.cross.wk"])
        cv = ad.matmul(kv_source, params[f"{prefix}.cross.wv"])
        cross = ad.scaled_dot_attention(cq, ck, cv)
        x = ad.layer_norm(x + ad.matmul(cross, params[f"{prefix}.cross.wo"]),
                          params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
        hidden = ad.relu(ad.affine(x, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]))
        ffn = ad.affine(hidden, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
        x = ad.layer_norm(x + ffn, params[f"{prefix}.ln3.g"], params[f"{prefix}.ln3.b"])
    return ad.affine(x, params["stage2.dec.out.w"], params["stage2.dec.out.b"])


def report_target_ids(batch: Batch, vocab, config: RunConfig):
    """Teacher-forcing inputs/targets/mask for the batch's reports."""
    sequences = [vocab.encode(tokenize(s.report), max_len=config.max_tokens - 1) for s in batch.studies]
    max_len = max(len(seq) for seq in sequences) + 1  # room for EOS/BOS shift
    inputs = np.full((batch.B, max_len), PAD_ID, dtype=np.int64)
    targets = np.full((batch.B, max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((batch.B, max_len), dtype=np.float32)
    for i, seq in enumerate(sequences):
        inputs[i, 0] = BOS_ID
        inputs[i, 1 : 1 + len(seq)] = seq
        targets[i, : len(seq)] = seq
        targets[i, len(seq)] = EOS_ID
        mask[i, : len(seq) + 1] = 1.0
    return inputs, targets, mask


def lm_loss_from_ids(inputs, targets, mask, knowledge: Tensor, params: dict, config: RunConfig) -> Tensor:
    """Mean over studies of the per-study summed token NLL."""
    logits = decoder_forward(inputs, knowledge, params, config)
    logp = ad.log_softmax_rows(logits)
    token_logp = ad.take_last(logp, targets)  # [B, T]
    masked = token_logp * ad.constant(mask)
    per_study = ad.tsum(masked, axis=1)  # [B]
    return -ad.tmean(per_study)


def lm_loss(batch: Batch, params: dict, vocab, config: RunConfig) -> Tensor:
    knowledge = stage2_knowledge(batch, params, vocab, config)
    inputs, targets, mask = report_target_ids(batch, vocab, config)
    return lm_loss_from_ids(inputs, targets, mask, knowledge, params, config)


def finetune_step(batch: Batch, params: dict, vocab, optimizer, config: RunConfig) -> float:
    """One forward/backward/AdamW update on the LM objective."""
    loss = lm_loss(batch, params, vocab, config)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalAbort("non-finite Stage-2 LM loss", dump={"lm": value})
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    optimizer.zero_grad()
    return value


def _next_logprobs(prefix: list, knowledge: Tensor, params: dict, config: RunConfig) -> np.ndarray:
    ids = np.asarray([prefix], dtype=np.int64)
    logits = decoder_forward(ids, knowledge, params, config)
    logp = ad.log_softmax_rows(logits)
    return logp.data[0, -1].astype(np.float64)


def generate(study, params: dict, vocab, config: RunConfig, mode: str = "greedy", beam_width: int = 1) -> GenerationOutput:
    """Autoregressive decoding for one study; stops at EOS or max_tokens.

    Greedy picks the argmax each step; beam keeps ``beam_width``
    hypotheses ranked by summed logprob, ties resolved toward lower
    token ids so beam(1) reproduces greedy exactly.
    """
    batch = Batch([study])
    knowledge = stage2_knowledge(batch, params, vocab, config)
    if mode == "greedy":
        beam_width = 1
    elif mode != "beam":
        raise ValueError(f"unknown decoding mode: {mode}")

    # hypothesis: (ids-after-BOS tuple, logprobs tuple, score, finished)
    hyps = [((), (), 0.0, False)]
    for _ in range(config.max_tokens):
        candidates = []
        for ids, lps, score, finished in hyps:
            if finished:
                candidates.append((ids, lps, score, True))
                continue
            logp = _next_logprobs([BOS_ID, *ids], knowledge, params, config)
            order = np.argsort(-logp, kind="stable")[:beam_width]
            for tok in order:
                tok = int(tok)
                if tok == EOS_ID:
                    candidates.append((ids, lps, score + logp[tok], True))
                else:
                    candidates.append((ids + (tok,), lps + (logp[tok],), score + logp[tok], False))
        candidates.sort(key=lambda c: (-c[2], c[0]))
        hyps = candidates[:beam_width]
        if all(h[3] for h in hyps):
            break
    best = hyps[0]
    return GenerationOutput(
        token_ids=list(best[0]),
        token_logprobs=[float(v) for v in best[1]],
        stopped_by="eos" if best[3] else "max_len",
    )


def teacher_forced_logprobs(study, token_ids, params: dict, vocab, config: RunConfig) -> np.ndarray:
    """Per-token logprobs of a given sequence under the current model."""
    batch = Batch([study])
    knowledge = stage2_knowledge(batch, params, vocab, config)
    inputs = np.asarray([[BOS_ID, *token_ids]], dtype=np.int64)
    logits = decoder_forward(inputs, knowledge, params, config)
    logp = ad.log_softmax_rows(logits).data[0]
    return np.array([logp[t, tok] for t, tok in enumerate(token_ids)], dtype=np.float64)
