"""Losses, the two-pass adaptive training step, AR teacher training,
distillation, the training loop, and checkpoint selection/averaging.
"""

import csv
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .autodiff import NonFiniteError, Tensor, backprop, primitive_forward
from .data import DataError, EOS_ID, LENGTH_ID, PAD_ID, ParallelCorpus
from .masking import (
    MaskedPass,
    MaskingPolicy,
    adaptive_mask_y,
    compute_beta,
    mask_x,
    plan_second_pass,
    uniform_mask_y,
    uniform_second_pass,
)
from .model import ModelConfig, TransformerModel, load_checkpoint, save_checkpoint
from .optim import AdamState, LrSchedule, adam_step, clip_gradients, lr_at_step

METRICS_HEADER = "update,lr,l_cmlm,l_aday,l_length,valid_bleu_iter1,valid_bleu_iter10,wall_secs"


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    policy: MaskingPolicy = MaskingPolicy()
    ar_mode: bool = False
    max_updates: int = 3000
    tokens_per_batch: int = 1024
    base_lr: float = 5e-4
    warmup_steps: int = 400
    label_smoothing: float = 0.1
    length_loss_weight: float = 0.1
    clip_norm: float = 2.5
    valid_interval: int = 500
    average_best: int = 5
    seed: int = 1

    def __post_init__(self):
        if not (0.0 <= self.label_smoothing <= 0.3):
            raise ValueError(f"label_smoothing {self.label_smoothing} outside [0, 0.3]")
        if self.length_loss_weight < 0:
            raise ValueError("length_loss_weight must be >= 0")
        if self.max_updates < 0 or self.valid_interval < 1 or self.tokens_per_batch < 1:
            raise ValueError("bad max_updates/valid_interval/tokens_per_batch")


@dataclass
class LossReport:
    l_cmlm: float
    l_aday: float
    l_length: float
    l_total: float
    beta: float
    alpha_pass1: float
    masked_token_counts: list[int]
    grad_norm: float = 0.0


@dataclass
class CheckpointMeta:
    update: int
    valid_bleu: float
    path: str
    config_hash: str


# ---------------------------------------------------------------------
# losses


def masked_ce_loss(logits: Tensor, gold_ids: np.ndarray, mask: np.ndarray,
                   label_smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed NLL over masked positions only.

    logits (B, L, V), gold_ids (B, L), mask (B, L) bool; positions outside
    the mask contribute exactly zero (they never enter the graph).
    """
    mask = np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask.reshape(-1))
    if idx.size == 0:
        raise ValueError("masked_ce_loss over an empty mask set")
    B, L, V = logits.shape
    flat = logits.reshape((B * L, V))
    rows = primitive_forward("take_rows", (flat,), idx=idx)
    lp = primitive_forward("log_softmax", (rows,), axis=-1)
    picked = primitive_forward("gather_last", (lp,), idx=np.asarray(gold_ids).reshape(-1)[idx])
    eps = float(label_smoothing)
    nll = picked * (-(1.0 - eps))
    if eps > 0.0:
        nll = nll + lp.sum(axis=-1) * (-eps / V)
    return nll.mean()


def length_loss(length_logits: Tensor, target_lengths: np.ndarray) -> Tensor:
    """Plain CE over length classes; class i means length i+1."""
    C = length_logits.shape[-1]
    cls = np.clip(np.asarray(target_lengths), 1, C) - 1
    lp = primitive_forward("log_softmax", (length_logits,), axis=-1)
    picked = primitive_forward("gather_last", (lp,), idx=cls)
    return picked.mean() * -1.0


# ---------------------------------------------------------------------
# batch assembly


def pad_batch(seqs: list[np.ndarray], prepend_length_token: bool = False) -> np.ndarray:
    extra = 1 if prepend_length_token else 0
    width = max(len(s) for s in seqs) + extra
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        if prepend_length_token:
            out[i, 0] = LENGTH_ID
        out[i, extra:extra + len(s)] = s
    return out


def make_batches(corpus: ParallelCorpus, tokens_per_batch: int,
                 rng: np.random.Generator) -> list[list[int]]:
    """Length-bucketed batches under a padded-token budget; order shuffled."""
    longest = max(max(len(s) + 1, len(t)) for s, t in corpus.pairs)
    if longest > tokens_per_batch:
        raise DataError(f"tokens_per_batch {tokens_per_batch} < longest sentence cost {longest}")
    order = rng.permutation(len(corpus.pairs))
    order = order[np.argsort([len(corpus.pairs[i][1]) for i in order], kind="stable")]
    batches: list[list[int]] = []
    cur: list[int] = []
    width = 0
    for i in order:
        s, t = corpus.pairs[i]
        cost = max(len(s) + 1, len(t))
        new_width = max(width, cost)
        if cur and (len(cur) + 1) * new_width > tokens_per_batch:
            batches.append(cur)
            cur, width = [], 0
            new_width = cost
        cur.append(int(i))
        width = new_width
    if cur:
        batches.append(cur)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


# ---------------------------------------------------------------------
# training steps


def _decode_masked(model: TransformerModel, passes: list[MaskedPass], streams, train=True):
    """Encode the pass's masked sources and decode its y inputs; batched."""
    enc_in = pad_batch([p.x_masked for p in passes], prepend_length_token=True)
    y_in = pad_batch([p.y_input for p in passes])
    drop = streams.get(rngmod.DROPOUT)
    enc = model.encode(enc_in, train=train, rng=drop)
    logits = model.decode(y_in, enc, train=train, rng=drop)
    return enc, logits


def _padded_mask(passes: list[MaskedPass], width: int) -> np.ndarray:
    mask = np.zeros((len(passes), width), dtype=bool)
    for i, p in enumerate(passes):
        mask[i, p.mask_positions] = True
    return mask


def amom_train_step(
    model: TransformerModel,
    batch: list[tuple[np.ndarray, np.ndarray]],
    policy: MaskingPolicy,
    streams: rngmod.RngStreams,
    *,
    opt_state: AdamState | None = None,
    lr: float = 1e-3,
    label_smoothing: float = 0.1,
    length_loss_weight: float = 0.1,
    clip_norm: float = 2.5,
    apply_update: bool = True,
) -> LossReport:
    """One AMOM update: pass 1 (CMLM) + adaptive second pass per policy.

    Predictions feeding beta and the second-pass carry-over are argmax
    decodes outside the graph, so pass 1 receives no gradient from pass 2.
    """
    if not batch:
        raise ValueError("empty batch")
    srcs = [np.asarray(s) for s, _ in batch]
    tgts = [np.asarray(t) for _, t in batch]
    mask_y_rng = streams.get(rngmod.MASK_Y)
    mask_x_rng = streams.get(rngmod.MASK_X)

    # pass 1: uniform target masking + coupled source masking
    passes1: list[MaskedPass] = []
    for s, t in zip(srcs, tgts):
        p = uniform_mask_y(t, mask_y_rng)
        p.x_masked = mask_x(s, p.alpha, policy.phi, mask_x_rng)
        passes1.append(p)

    gold = pad_batch(tgts)
    width = gold.shape[1]
    mask1 = _padded_mask(passes1, width)
    enc, logits1 = _decode_masked(model, passes1, streams)
    l_cmlm = masked_ce_loss(logits1, gold, mask1, label_smoothing)
    l_len = length_loss(enc.length_logits, np.array([len(t) for t in tgts]))

    preds = np.argmax(logits1.data, axis=-1)
    betas = [compute_beta(preds[i, :len(t)], t, p.mask_positions)
             for i, (t, p) in enumerate(zip(tgts, passes1))]
    pred_conf = None
    if policy.confidence_based_flag:
        e = logits1.data - logits1.data.max(axis=-1, keepdims=True)
        probs = np.exp(e) / np.exp(e).sum(axis=-1, keepdims=True)
        pred_conf = np.take_along_axis(probs, preds[..., None], axis=-1)[..., 0]

    counts = [sum(p.n_mask for p in passes1)]
    l_aday_val = 0.0
    loss_terms = [l_cmlm]

    if policy.second_pass_strategy != "none":
        prev_passes, prev_preds, prev_conf = passes1, preds, pred_conf
        prev_betas = betas
        for _ in range(policy.n_refine_passes - 1):
            passes_k: list[MaskedPass] = []
            for i, (s, t) in enumerate(zip(srcs, tgts)):
                if policy.second_pass_strategy == "uniform":
                    pk = uniform_second_pass(prev_preds[i, :len(t)], t, prev_passes[i],
                                             policy, mask_y_rng)
                else:
                    plan = plan_second_pass(prev_betas[i], policy.effective_psi(),
                                            policy.psi_convention)
                    conf_i = prev_conf[i, :len(t)] if prev_conf is not None else None
                    pk = adaptive_mask_y(prev_preds[i, :len(t)], t, prev_passes[i], plan,
                                         policy, mask_y_rng, pred_conf=conf_i)
                pk.x_masked = mask_x(s, pk.alpha, policy.phi, mask_x_rng)
                passes_k.append(pk)
            mask_k = _padded_mask(passes_k, width)
            _, logits_k = _decode_masked(model, passes_k, streams)
            l_k = masked_ce_loss(logits_k, gold, mask_k, label_smoothing)
            loss_terms.append(l_k)
            l_aday_val += float(l_k.data)
            counts.append(sum(p.n_mask for p in passes_k))

            preds_k = np.argmax(logits_k.data, axis=-1)
            betas_k = [compute_beta(preds_k[i, :len(t)], t, p.mask_positions)
                       for i, (t, p) in enumerate(zip(tgts, passes_k))]
            conf_k = None
            if policy.confidence_based_flag:
                e = logits_k.data - logits_k.data.max(axis=-1, keepdims=True)
                probs = np.exp(e) / np.exp(e).sum(axis=-1, keepdims=True)
                conf_k = np.take_along_axis(probs, preds_k[..., None], axis=-1)[..., 0]
            prev_passes, prev_preds, prev_conf = passes_k, preds_k, conf_k
            prev_betas = betas_k

    l_total = loss_terms[0]
    for term in loss_terms[1:]:
        l_total = l_total + term
    if length_loss_weight > 0:
        l_total = l_total + l_len * length_loss_weight

    model.zero_grads()
    backprop(l_total)
    report = LossReport(
        l_cmlm=float(l_cmlm.data),
        l_aday=l_aday_val,
        l_length=float(l_len.data),
        l_total=float(l_total.data),
        beta=float(np.mean(betas)),
        alpha_pass1=float(np.mean([p.alpha for p in passes1])),
        masked_token_counts=counts,
    )
    if apply_update:
        params = model.parameters()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        report.grad_norm = clip_gradients(grads, clip_norm)
        if opt_state is None:
            raise ValueError("apply_update=True needs opt_state")
        adam_step(params, grads, opt_state, lr)
    return report


def ar_train_step(
    model: TransformerModel,
    batch: list[tuple[np.ndarray, np.ndarray]],
    streams: rngmod.RngStreams,
    *,
    opt_state: AdamState | None = None,
    lr: float = 1e-3,
    label_smoothing: float = 0.1,
    length_loss_weight: float = 0.1,
    clip_norm: float = 2.5,
    apply_update: bool = True,
) -> LossReport:
    """Left-to-right teacher step: causal decoder, EOS plays BOS, all
    non-pad target positions contribute to the loss."""
    srcs = [np.asarray(s) for s, _ in batch]
    tgts = [np.asarray(t) for _, t in batch]
    enc_in = pad_batch(srcs, prepend_length_token=True)
    gold = pad_batch(tgts)
    y_in = np.roll(gold, 1, axis=1)
    y_in[gold == PAD_ID] = PAD_ID
    y_in[:, 0] = EOS_ID  # EOS plays BOS
    mask = gold != PAD_ID

    drop = streams.get(rngmod.DROPOUT)
    enc = model.encode(enc_in, train=True, rng=drop)
    logits = model.decode(y_in, enc, train=True, rng=drop, causal=True)
    l_ce = masked_ce_loss(logits, gold, mask, label_smoothing)
    l_len = length_loss(enc.length_logits, np.array([len(t) for t in tgts]))
    l_total = l_ce + l_len * length_loss_weight if length_loss_weight > 0 else l_ce

    model.zero_grads()
    backprop(l_total)
    report = LossReport(float(l_ce.data), 0.0, float(l_len.data), float(l_total.data),
                        0.0, 0.0, [int(mask.sum())])
    if apply_update:
        params = model.parameters()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        report.grad_norm = clip_gradients(grads, clip_norm)
        if opt_state is None:
            raise ValueError("apply_update=True needs opt_state")
        adam_step(params, grads, opt_state, lr)
    return report


# ---------------------------------------------------------------------
# training loop


def train_loop(
    config: TrainConfig,
    corpus: ParallelCorpus,
    valid_corpus: ParallelCorpus | None,
    out_dir: str,
    log=print,
) -> list[CheckpointMeta]:
    """Run to max_updates, logging metrics and saving checkpoints.

    Validation BLEU (T=1 and T=10, length beam 1) is decoded every
    valid_interval updates with fixed settings so checkpoint metas are
    comparable; the averaged model of the best `average_best` checkpoints
    is written at the end.
    """
    from .inference import DecodeConfig, ar_greedy_decode_batch, decode_corpus  # cycle-free at call time
    from .metrics import corpus_bleu

    os.makedirs(out_dir, exist_ok=True)
    streams = rngmod.RngStreams(config.seed)
    model = TransformerModel(config.model, streams.get(rngmod.INIT))
    opt = AdamState()
    sched = LrSchedule(config.base_lr, config.warmup_steps)
    chash = model.config_hash()

    def strip_ids(ids) -> list[str]:
        out = []
        for t in ids:
            t = int(t)
            if t == EOS_ID:
                break
            if t != PAD_ID:
                out.append(str(t))
        return out

    def valid_bleu(T: int) -> float:
        if valid_corpus is None:
            return 0.0
        srcs = [s for s, _ in valid_corpus.pairs]
        if config.ar_mode:  # greedy decode; T has no meaning for a causal model
            outs = ar_greedy_decode_batch(model, srcs, config.model.max_positions - 1)
            hyp_toks = [strip_ids(h) for h in outs]
        else:
            hyps = decode_corpus(model, srcs, DecodeConfig(T=T, length_beam=1))
            hyp_toks = [strip_ids(h.tokens) for h in hyps]
        ref_toks = [strip_ids(r) for _, r in valid_corpus.pairs]
        return corpus_bleu(hyp_toks, ref_toks).bleu

    metrics_path = os.path.join(out_dir, "metrics.csv")
    metas: list[CheckpointMeta] = []
    t_start = time.perf_counter()

    def save_ckpt(update: int, bleu: float) -> None:
        path = os.path.join(out_dir, f"checkpoint_{update:06d}.amom")
        save_checkpoint(model, path, extra={"mode": "ar" if config.ar_mode else "nar",
                                            "update": str(update)})
        metas.append(CheckpointMeta(update, bleu, path, chash))

    with open(metrics_path, "w", newline="") as mf:
        writer = csv.writer(mf)
        writer.writerow(METRICS_HEADER.split(","))
        if config.max_updates == 0:
            save_ckpt(0, 0.0)
            _write_metas(out_dir, metas)
            return metas

        update = 0
        nonfinite_streak = 0
        interval_losses: list[LossReport] = []
        lr = lr_at_step(sched, 1)
        epoch = 0
        done = False
        while not done:
            epoch += 1
            for idxs in make_batches(corpus, config.tokens_per_batch,
                                     streams.get(rngmod.DATA_ORDER)):
                batch = [corpus.pairs[i] for i in idxs]
                lr = lr_at_step(sched, update + 1)
                try:
                    if config.ar_mode:
                        rep = ar_train_step(
                            model, batch, streams, opt_state=opt, lr=lr,
                            label_smoothing=config.label_smoothing,
                            length_loss_weight=config.length_loss_weight,
                            clip_norm=config.clip_norm)
                    else:
                        rep = amom_train_step(
                            model, batch, config.policy, streams, opt_state=opt, lr=lr,
                            label_smoothing=config.label_smoothing,
                            length_loss_weight=config.length_loss_weight,
                            clip_norm=config.clip_norm)
                    nonfinite_streak = 0
                except NonFiniteError as err:
                    nonfinite_streak += 1
                    log(f"update {update + 1}: non-finite step skipped ({err})")
                    if nonfinite_streak > 10:
                        raise NonFiniteError(
                            f"aborting: {nonfinite_streak} consecutive non-finite steps") from err
                    continue
                update += 1
                interval_losses.append(rep)

                if update % config.valid_interval == 0:
                    b1 = valid_bleu(1)
                    b10 = b1 if config.ar_mode else valid_bleu(10)
                    mean = lambda xs: float(np.mean(xs)) if xs else 0.0
                    writer.writerow([
                        update,
                        f"{lr:.8g}",
                        f"{mean([r.l_cmlm for r in interval_losses]):.6f}",
                        f"{mean([r.l_aday for r in interval_losses]):.6f}",
                        f"{mean([r.l_length for r in interval_losses]):.6f}",
                        f"{b1:.2f}",
                        f"{b10:.2f}",
                        f"{time.perf_counter() - t_start:.2f}",
                    ])
                    mf.flush()
                    save_ckpt(update, b10)
                    log(f"update {update}: lr={lr:.5f} "
                        f"l_cmlm={mean([r.l_cmlm for r in interval_losses]):.4f} "
                        f"l_aday={mean([r.l_aday for r in interval_losses]):.4f} "
                        f"bleu1={b1:.2f} bleu10={b10:.2f}")
                    interval_losses = []
                if update >= config.max_updates:
                    done = True
                    break

    if metas:
        avg = average_checkpoints(metas, k=config.average_best)
        save_checkpoint(avg, os.path.join(out_dir, "checkpoint_averaged.amom"),
                        extra={"mode": "ar" if config.ar_mode else "nar",
                               "update": str(config.max_updates)})
    _write_metas(out_dir, metas)
    return metas


def _write_metas(out_dir: str, metas: list[CheckpointMeta]) -> None:
    payload = [
        {"update": m.update, "valid_bleu": m.valid_bleu, "path": os.path.basename(m.path),
         "config_hash": m.config_hash}
        for m in metas
    ]
    with open(os.path.join(out_dir, "checkpoints.json"), "w") as f:
        json.dump(payload, f, indent=2)


def average_checkpoints(metas: list[CheckpointMeta], k: int = 5) -> TransformerModel:
    """Element-wise mean of the k best-by-valid-BLEU checkpoints."""
    if not metas:
        raise ValueError("no checkpoints to average")
    if len({m.config_hash for m in metas}) > 1:
        raise ValueError("config-hash mismatch among checkpoints")
    ranked = sorted(metas, key=lambda m: (-m.valid_bleu, m.update))
    chosen = ranked[: max(1, min(k, len(ranked)))]
    models = [load_checkpoint(m.path)[0] for m in chosen]
    out = models[0]
    for name, p in out.named_parameters():
        acc = np.zeros_like(p.data, dtype=np.float64)
        for m in models:
            acc += m.params[name].data
        p.data = (acc / len(models)).astype(np.float32)
    return out


# ---------------------------------------------------------------------
# knowledge distillation


def distill_corpus(
    teacher: TransformerModel,
    corpus: ParallelCorpus,
    max_output_length: int = 64,
    batch_size: int = 64,
) -> tuple[ParallelCorpus, int]:
    """Re-target each source with the AR teacher's greedy decode.

    Returns (distilled corpus, dropped count); empty teacher outputs are
    dropped and counted.
    """
    from .inference import ar_greedy_decode_batch

    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    dropped = 0
    for lo in range(0, len(corpus.pairs), batch_size):
        chunk = corpus.pairs[lo:lo + batch_size]
        hyps = ar_greedy_decode_batch(teacher, [s for s, _ in chunk], max_output_length)
        for (s, _), hyp in zip(chunk, hyps):
            if len(hyp) == 0:
                dropped += 1
                continue
            pairs.append((s.copy(), np.concatenate([hyp, [EOS_ID]]).astype(np.int64)))
    if not pairs:
        raise DataError("teacher produced empty outputs for every source")
    return ParallelCorpus(pairs, ["distilled"] * len(pairs)), dropped
