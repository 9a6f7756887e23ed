"""Mask-predict iterative decoding, length beam, AR greedy decoding.

Iteration 1 decodes a fully masked target and commits every slot;
refinement iterations t in {1..T-1} re-mask the n(t) lowest-score slots
and regenerate only those.  Kept slots keep their recorded scores.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .data import EOS_ID, MASK_ID, PAD_ID
from .model import EncoderOutput, TransformerModel, Tensor, predict_length_topk
from .training import pad_batch


@dataclass(frozen=True)
class DecodeConfig:
    T: int = 10
    length_beam: int = 3
    dedup_consecutive: bool = False
    max_output_length: int = 200

    def __post_init__(self):
        if self.T < 1 or self.length_beam < 1 or self.max_output_length < 1:
            raise ValueError(f"bad decode config: {self}")


@dataclass
class DecodeState:
    tokens: np.ndarray       # (L,) committed ids
    scores: np.ndarray       # (L,) log-prob of each committed token
    iteration: int
    n_forwards: int = 0
    trace: list = field(default_factory=list)


@dataclass
class Hypothesis:
    tokens: np.ndarray
    length: int
    mean_logprob: float


def schedule_mask_count(L_Y: int, T: int, t: int) -> int:
    """n = floor(L_Y*(T-t)/T), kept in [1, L_Y-1] so refinement neither
    remasks everything nor stalls; L_Y=1 has nothing to refine (0)."""
    if T < 2:
        raise ValueError(f"refinement needs T >= 2, got {T}")
    if not (1 <= t <= T - 1):
        raise ValueError(f"refinement iteration t={t} outside [1, {T - 1}]")
    if L_Y < 1:
        raise ValueError("L_Y must be positive")
    n = (L_Y * (T - t)) // T
    return min(max(n, 1), L_Y - 1)


def _log_probs_at(logits: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """logits (..., V), ids (...) -> log softmax picked at ids, float64."""
    logits = logits.astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logits, ids[..., None], axis=-1)
    return (picked - lse)[..., 0]


def _mask_predict_batch(
    model: TransformerModel,
    enc: EncoderOutput,
    lengths: list[int],
    T: int,
    collect_trace: bool = False,
):
    """Rows decode in parallel; row i owns slots [0, lengths[i])."""
    B = len(lengths)
    W = max(lengths)
    lengths_arr = np.asarray(lengths)
    active = np.arange(W)[None, :] < lengths_arr[:, None]
    tokens = np.where(active, MASK_ID, PAD_ID).astype(np.int64)
    scores = np.full((B, W), -np.inf)
    trace: list[tuple[np.ndarray, np.ndarray]] = []
    n_forwards = 0

    with no_grad():
        logits = model.decode(tokens, enc).data
        n_forwards += 1
        pred = np.argmax(logits, axis=-1)
        lp = _log_probs_at(logits, pred)
        tokens[active] = pred[active]
        scores[active] = lp[active]
        if collect_trace:
            trace.append((tokens.copy(), active.copy()))

        for t in range(1, T):
            remask = np.zeros((B, W), dtype=bool)
            for i in range(B):
                n = schedule_mask_count(int(lengths_arr[i]), T, t)
                if n == 0:
                    continue
                row = np.where(active[i], scores[i], np.inf)
                chosen = np.argsort(row, kind="stable")[:n]  # ties: lower index
                remask[i, chosen] = True
            if remask.any():
                tokens[remask] = MASK_ID
                scores[remask] = -np.inf
                logits = model.decode(tokens, enc).data
                n_forwards += 1
                pred = np.argmax(logits, axis=-1)
                lp = _log_probs_at(logits, pred)
                tokens[remask] = pred[remask]
                scores[remask] = lp[remask]
            if collect_trace:
                trace.append((tokens.copy(), remask))

    return tokens, scores, trace, n_forwards


def _encode_sources(model: TransformerModel, sources: list[np.ndarray]) -> EncoderOutput:
    with no_grad():
        return model.encode(pad_batch(sources, prepend_length_token=True))


def _tile_encoder(enc: EncoderOutput, counts: list[int]) -> EncoderOutput:
    reps = np.asarray(counts)
    return EncoderOutput(
        Tensor(np.repeat(enc.hidden.data, reps, axis=0)),
        Tensor(np.repeat(enc.length_logits.data, reps, axis=0)),
        np.repeat(enc.src_pad_mask, reps, axis=0),
    )


def mask_predict(model: TransformerModel, x_tokens: np.ndarray, L_Y: int,
                 config: DecodeConfig, collect_trace: bool = False) -> DecodeState:
    """Decode one source at a fixed target length."""
    if L_Y < 1:
        raise ValueError("L_Y must be >= 1")
    enc = _encode_sources(model, [np.asarray(x_tokens)])
    tokens, scores, trace, nf = _mask_predict_batch(
        model, enc, [int(L_Y)], config.T, collect_trace)
    return DecodeState(tokens[0], scores[0], config.T, nf, trace)


def _candidate_lengths(enc: EncoderOutput, row: int, config: DecodeConfig,
                       max_positions: int) -> list[int]:
    k = min(config.length_beam, enc.length_logits.shape[-1])
    cands = predict_length_topk(enc, k)[row]
    cap = min(config.max_output_length, max_positions)
    seen: list[int] = []
    for length, _ in cands:
        length = min(length, cap)
        if length not in seen:
            seen.append(length)
    return seen


def _pick_best(lengths: list[int], tokens: np.ndarray, scores: np.ndarray) -> Hypothesis:
    means = [float(scores[i, :L].mean()) for i, L in enumerate(lengths)]
    best = min(range(len(lengths)), key=lambda i: (-means[i], lengths[i]))
    L = lengths[best]
    return Hypothesis(tokens[best, :L].copy(), L, means[best])


def decode_with_length_beam(model: TransformerModel, x_tokens: np.ndarray,
                            config: DecodeConfig) -> Hypothesis:
    """Best mean-log-prob hypothesis over the top-B predicted lengths."""
    enc = _encode_sources(model, [np.asarray(x_tokens)])
    lengths = _candidate_lengths(enc, 0, config, model.config.max_positions)
    tiled = _tile_encoder(enc, [len(lengths)])
    tokens, scores, _, _ = _mask_predict_batch(model, tiled, lengths, config.T)
    return _pick_best(lengths, tokens, scores)


def decode_corpus(model: TransformerModel, sources: list[np.ndarray],
                  config: DecodeConfig, chunk_size: int = 64) -> list[Hypothesis]:
    """Batched decode_with_length_beam over a corpus, order preserved."""
    out: list[Hypothesis] = []
    for lo in range(0, len(sources), chunk_size):
        chunk = [np.asarray(s) for s in sources[lo:lo + chunk_size]]
        enc = _encode_sources(model, chunk)
        per_sentence = [_candidate_lengths(enc, i, config, model.config.max_positions)
                        for i in range(len(chunk))]
        counts = [len(c) for c in per_sentence]
        flat_lengths = [L for cands in per_sentence for L in cands]
        tiled = _tile_encoder(enc, counts)
        tokens, scores, _, _ = _mask_predict_batch(model, tiled, flat_lengths, config.T)
        offset = 0
        for cands in per_sentence:
            rows = slice(offset, offset + len(cands))
            out.append(_pick_best(cands, tokens[rows], scores[rows]))
            offset += len(cands)
    return out


# ---------------------------------------------------------------------
# autoregressive greedy decoding (teacher / latency baseline)


def ar_greedy_decode_batch(model: TransformerModel, sources: list[np.ndarray],
                           max_output_length: int) -> list[np.ndarray]:
    enc = _encode_sources(model, [np.asarray(s) for s in sources])
    B = len(sources)
    cap = min(max_output_length, model.config.max_positions - 1)
    prefix = np.full((B, 1), EOS_ID, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(B)]
    with no_grad():
        for _ in range(cap):
            logits = model.decode(prefix, enc, causal=True).data
            nxt = np.argmax(logits[:, -1, :], axis=-1)
            for i in range(B):
                if done[i]:
                    continue
                if nxt[i] == EOS_ID:
                    done[i] = True
                else:
                    outs[i].append(int(nxt[i]))
            if done.all():
                break
            col = np.where(done, PAD_ID, nxt)
            prefix = np.concatenate([prefix, col[:, None]], axis=1)
    return [np.asarray(o, dtype=np.int64) for o in outs]


def ar_greedy_decode(model: TransformerModel, x_tokens: np.ndarray,
                     max_output_length: int) -> np.ndarray:
    """Left-to-right argmax until EOS or the length cap; EOS not included."""
    return ar_greedy_decode_batch(model, [x_tokens], max_output_length)[0]


def dedup_consecutive(tokens):
    """Collapse maximal runs of equal adjacent tokens to one occurrence."""
    out = [k for k, _ in itertools.groupby(list(tokens))]
    if isinstance(tokens, np.ndarray):
        return np.asarray(out, dtype=tokens.dtype)
    return type(tokens)(out)
