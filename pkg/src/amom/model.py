"""Encoder-decoder transformer with a length head on the [LENGTH] slot.

Pre-LN residual blocks, sinusoidal positions, tied input/output
embeddings.  The decoder is non-causal by default (CMLM); the same
weights run autoregressively when decode() is given causal=True.
"""

import hashlib
import io
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, primitive_forward
from .data import LENGTH_ID, PAD_ID

CHECKPOINT_MAGIC = "AMOM1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    dropout_rate: float = 0.1
    max_positions: int = 256
    max_length_class: int = 200

    def __post_init__(self):
        ints = (
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.d_ffn,
            self.n_enc_layers,
            self.n_dec_layers,
            self.max_positions,
            self.max_length_class,
        )
        if any(v < 1 for v in ints):
            raise ValueError(f"all config extents must be positive: {self}")
        if self.vocab_size <= LENGTH_ID:
            raise ValueError(
                f"vocab_size {self.vocab_size} too small for reserved ids 0..{LENGTH_ID}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_length_class > self.max_positions:
            raise ValueError("max_length_class must be <= max_positions")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")


def toy_config(vocab_size: int, **overrides) -> ModelConfig:
    base = dict(d_model=64, n_heads=4, d_ffn=128, n_enc_layers=3, n_dec_layers=3,
                dropout_rate=0.1, max_positions=64, max_length_class=64)
    base.update(overrides)
    return ModelConfig(vocab_size=vocab_size, **base)


def small_config(vocab_size: int, **overrides) -> ModelConfig:
    base = dict(d_model=512, n_heads=4, d_ffn=1024, n_enc_layers=6, n_dec_layers=6,
                dropout_rate=0.1, max_positions=512, max_length_class=200)
    base.update(overrides)
    return ModelConfig(vocab_size=vocab_size, **base)


PRESETS = {"toy": toy_config, "small": small_config}


def _param_manifest(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, v, c = cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.max_length_class
    names: list[tuple[str, tuple[int, ...]]] = [("embed", (v, d))]

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            names.append((f"{prefix}.{w}", (d, d)))
            names.append((f"{prefix}.{w[1]}b", (d,)))

    def ln(prefix):
        names.append((f"{prefix}.gain", (d,)))
        names.append((f"{prefix}.bias", (d,)))

    def ffn(prefix):
        names.append((f"{prefix}.w1", (d, f)))
        names.append((f"{prefix}.b1", (f,)))
        names.append((f"{prefix}.w2", (f, d)))
        names.append((f"{prefix}.b2", (d,)))

    for i in range(cfg.n_enc_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    ln("enc.final_ln")
    for i in range(cfg.n_dec_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    ln("dec.final_ln")
    names.append(("len_head.w", (d, c)))
    names.append(("len_head.b", (c,)))
    return names


def count_params(cfg: ModelConfig) -> int:
    """Closed-form total; must equal the instantiated tensor sizes."""
    d, f, v, c = cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.max_length_class
    per_attn = 4 * (d * d + d)
    per_ln = 2 * d
    per_ffn = d * f + f + f * d + d
    enc_layer = 2 * per_ln + per_attn + per_ffn
    dec_layer = 3 * per_ln + 2 * per_attn + per_ffn
    return (
        v * d
        + cfg.n_enc_layers * enc_layer
        + per_ln
        + cfg.n_dec_layers * dec_layer
        + per_ln
        + d * c
        + c
    )


def sinusoidal_positions(max_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d_model)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


@dataclass
class EncoderOutput:
    hidden: Tensor          # (B, L_src, d)
    length_logits: Tensor   # (B, max_length_class); class i <-> length i+1
    src_pad_mask: np.ndarray  # (B, L_src) bool, True at PAD


class TransformerModel:
    def __init__(self, config: ModelConfig, init_rng: np.random.Generator | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._pos = Tensor(sinusoidal_positions(config.max_positions, config.d_model))
        for name, shape in _param_manifest(config):
            self.params[name] = Tensor(self._init_value(name, shape, init_rng), requires_grad=True)

    @staticmethod
    def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator | None) -> np.ndarray:
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            return np.ones(shape, dtype=np.float32)
        if len(shape) == 1:
            return np.zeros(shape, dtype=np.float32)
        if rng is None:
            return np.zeros(shape, dtype=np.float32)
        bound = shape[0] ** -0.5
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    # -- parameter plumbing --------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def config_hash(self) -> str:
        return hashlib.sha256(_config_text(self.config).encode()).hexdigest()[:16]

    def clone(self) -> "TransformerModel":
        other = TransformerModel(self.config)
        for name, p in self.params.items():
            other.params[name].data = p.data.copy()
        return other

    # -- building blocks -------------------------------------------------

    def _dropout(self, x: Tensor, train: bool, rng) -> Tensor:
        rate = self.config.dropout_rate
        if not train or rate == 0.0:
            return x
        return primitive_forward("dropout", (x,), rate=rate, rng=rng, training=True)

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        return primitive_forward(
            "layer_norm",
            (x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"]),
            axis=-1,
        )

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return x @ self.params[w] + self.params[b]

    def _embed(self, ids: np.ndarray, train: bool, rng) -> Tensor:
        cfg = self.config
        if ids.shape[-1] > cfg.max_positions:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_positions {cfg.max_positions}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError(f"token id outside [0, {cfg.vocab_size})")
        emb = primitive_forward("embedding_lookup", (self.params["embed"],), ids=ids)
        emb = emb * float(np.sqrt(cfg.d_model))
        pos = primitive_forward(
            "slice", (self._pos,), index=(slice(0, ids.shape[-1]), slice(None))
        )
        return self._dropout(emb + pos, train, rng)

    def _attention(self, q_in: Tensor, kv_in: Tensor, prefix: str, key_mask: np.ndarray,
                   causal: bool, train: bool, rng) -> Tensor:
        cfg = self.config
        B, Lq, d = q_in.shape
        Lk = kv_in.shape[1]
        h, dh = cfg.n_heads, d // cfg.n_heads

        def heads(t: Tensor, L: int) -> Tensor:
            return t.reshape((B, L, h, dh)).transpose((0, 2, 1, 3))

        q = heads(self._linear(q_in, f"{prefix}.wq", f"{prefix}.qb"), Lq)
        k = heads(self._linear(kv_in, f"{prefix}.wk", f"{prefix}.kb"), Lk)
        v = heads(self._linear(kv_in, f"{prefix}.wv", f"{prefix}.vb"), Lk)

        scores = (q @ k.transpose((0, 1, 3, 2))) * float(dh**-0.5)
        mask = key_mask[:, None, None, :]
        if causal:
            mask = mask | np.triu(np.ones((Lq, Lk), dtype=bool), k=1)[None, None]
        scores = primitive_forward("mask_fill", (scores,), mask=mask, value=-1e9)
        probs = primitive_forward("softmax", (scores,), axis=-1)
        ctx = (probs @ v).transpose((0, 2, 1, 3)).reshape((B, Lq, d))
        out = self._linear(ctx, f"{prefix}.wo", f"{prefix}.ob")
        return self._dropout(out, train, rng)

    def _ffn(self, x: Tensor, prefix: str, train: bool, rng) -> Tensor:
        hid = primitive_forward("relu", (self._linear(x, f"{prefix}.w1", f"{prefix}.b1"),))
        return self._dropout(self._linear(hid, f"{prefix}.w2", f"{prefix}.b2"), train, rng)

    # -- public forward passes -------------------------------------------

    def encode(self, x_ids: np.ndarray, train: bool = False, rng=None) -> EncoderOutput:
        """x_ids: (B, L) int ids, [LENGTH] prepended, PAD-padded."""
        x_ids = np.atleast_2d(np.asarray(x_ids))
        if not np.all(x_ids[:, 0] == LENGTH_ID):
            raise ValueError("encoder input must start with the [LENGTH] token")
        pad_mask = x_ids == PAD_ID
        h = self._embed(x_ids, train, rng)
        for i in range(self.config.n_enc_layers):
            sa_in = self._layer_norm(h, f"enc.{i}.ln1")
            h = h + self._attention(sa_in, sa_in, f"enc.{i}.attn", pad_mask, False, train, rng)
            h = h + self._ffn(self._layer_norm(h, f"enc.{i}.ln2"), f"enc.{i}.ffn", train, rng)
        h = self._layer_norm(h, "enc.final_ln")
        first = primitive_forward(
            "slice", (h,), index=(slice(None), slice(0, 1), slice(None))
        ).reshape((x_ids.shape[0], self.config.d_model))
        length_logits = self._linear(first, "len_head.w", "len_head.b")
        return EncoderOutput(h, length_logits, pad_mask)

    def decode(self, y_ids: np.ndarray, enc: EncoderOutput, train: bool = False,
               rng=None, causal: bool = False) -> Tensor:
        """y_ids: (B, L) decoder input ids; returns (B, L, vocab) logits."""
        y_ids = np.atleast_2d(np.asarray(y_ids))
        if y_ids.shape[0] != enc.hidden.shape[0]:
            raise ValueError(
                f"decoder batch {y_ids.shape[0]} != encoder batch {enc.hidden.shape[0]}"
            )
        tgt_pad = y_ids == PAD_ID
        h = self._embed(y_ids, train, rng)
        for i in range(self.config.n_dec_layers):
            sa_in = self._layer_norm(h, f"dec.{i}.ln1")
            h = h + self._attention(sa_in, sa_in, f"dec.{i}.self", tgt_pad, causal, train, rng)
            ca_in = self._layer_norm(h, f"dec.{i}.ln2")
            h = h + self._attention(ca_in, enc.hidden, f"dec.{i}.cross",
                                    enc.src_pad_mask, False, train, rng)
            h = h + self._ffn(self._layer_norm(h, f"dec.{i}.ln3"), f"dec.{i}.ffn", train, rng)
        h = self._layer_norm(h, "dec.final_ln")
        # tied output projection: the embedding matrix itself, transposed
        return h @ self.params["embed"].transpose((1, 0))


def predict_length_topk(enc: EncoderOutput, k: int) -> list[list[tuple[int, float]]]:
    """Top-k (length, log-prob) per batch row, ties broken by smaller length."""
    logits = enc.length_logits.data
    C = logits.shape[-1]
    if not (1 <= k <= C):
        raise ValueError(f"k must be in [1, {C}], got {k}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logprobs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = []
    for row in logprobs:
        lengths = np.arange(1, C + 1)
        order = np.lexsort((lengths, -row))
        out.append([(int(lengths[i]), float(row[i])) for i in order[:k]])
    return out


# ---------------------------------------------------------------------
# checkpoint format: "AMOM1" magic, text header, raw little-endian f32


def _config_text(cfg: ModelConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(cfg))


def save_checkpoint(model: TransformerModel, path: str, extra: dict[str, str] | None = None) -> None:
    with open(path, "wb") as f:
        header = io.StringIO()
        header.write(CHECKPOINT_MAGIC + "\n")
        header.write("[config]\n")
        header.write(_config_text(model.config))
        for key, val in (extra or {}).items():
            header.write(f"extra.{key}={val}\n")
        header.write("[manifest]\n")
        for name, p in model.named_parameters():
            dims = " ".join(str(d) for d in p.data.shape)
            header.write(f"{name} {dims}\n")
        header.write("[data]\n")
        f.write(header.getvalue().encode("utf-8"))
        for _, p in model.named_parameters():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[TransformerModel, dict[str, str]]:
    with open(path, "rb") as f:
        blob = f.read()
    marker = b"[data]\n"
    split = blob.find(marker)
    if split < 0:
        raise ValueError(f"{path}: missing [data] section")
    head = blob[:split].decode("utf-8").splitlines()
    raw = blob[split + len(marker):]
    if not head or head[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic, not a checkpoint")

    section = None
    cfg_kv: dict[str, str] = {}
    extra: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...]]] = []
    for line in head[1:]:
        if line in ("[config]", "[manifest]"):
            section = line
            continue
        if not line.strip():
            continue
        if section == "[config]":
            key, val = line.split("=", 1)
            if key.startswith("extra."):
                extra[key[len("extra."):]] = val
            else:
                cfg_kv[key] = val
        else:
            parts = line.split()
            manifest.append((parts[0], tuple(int(d) for d in parts[1:])))

    kwargs = {}
    for f_ in fields(ModelConfig):
        if f_.name not in cfg_kv:
            raise ValueError(f"{path}: config missing {f_.name}")
        raw_v = cfg_kv[f_.name]
        kwargs[f_.name] = float(raw_v) if f_.name == "dropout_rate" else int(raw_v)
    cfg = ModelConfig(**kwargs)

    model = TransformerModel(cfg)
    expected = _param_manifest(cfg)
    if manifest != expected:
        raise ValueError(f"{path}: manifest does not match config")
    offset = 0
    for name, shape in manifest:
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        model.params[name].data = arr.astype(np.float32, copy=True)
        offset += n * 4
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in data section")
    return model, extra
