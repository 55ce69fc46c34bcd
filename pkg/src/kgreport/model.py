"""Graph-conditioned report generator: restoration head, masked encoder, decoder.

The network ingests a fixed grid of visual features, restores a token per
graph slot, embeds the restored tokens together with one compressed visual
token, runs a visibility-masked multi-head encoder over them, and decodes
a report autoregressively with cross-attention into the encoder output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    BatchNormState,
    NonFiniteError,
    ShapeError,
    Tensor,
    batch_norm,
    concat,
    conv2d_3x3,
    layer_norm,
    masked_softmax,
    matmul,
    softmax,
    take_rows,
)
from .vocab import EOS, PAD, SOS, SPECIALS

log = logging.getLogger(__name__)

NUM_SPECIALS = len(SPECIALS)
MAX_SEQUENCE_LENGTH = 90
NORM_MODES = ("layernorm", "batchnorm")


@dataclass
class ModelConfig:
    """Hyperparameters; defaults are the full-scale preset."""

    vocab_size: int
    d_model: int = 512
    heads: int = 8
    encoder_layers: int = 6
    decoder_layers: int = 6
    max_t: int = MAX_SEQUENCE_LENGTH
    group_size: int = 6
    pe_base: float = 1000.0
    norm: str = "layernorm"
    n_slots: int = 84
    max_report_len: int = 120
    feature_rows: int = 12
    feature_dim: int = 1024
    ffn_dim: int = 0
    tied_output: bool = True

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d_model
        if self.vocab_size <= NUM_SPECIALS:
            raise ValueError(f"vocab_size must exceed {NUM_SPECIALS} special ids")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.group_size < 1 or self.n_slots < 1:
            raise ValueError("group_size and n_slots must be positive")
        if self.pe_base <= 0:
            raise ValueError("pe_base must be positive")
        if 1 + self.n_slots > self.max_t:
            raise ValueError(f"1 visual token + {self.n_slots} slots exceeds max_t {self.max_t}")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}, got {self.norm!r}")
        if self.feature_rows < 1 or self.feature_dim < 1:
            raise ValueError("feature grid must be non-empty")

    @property
    def n_groups(self) -> int:
        return math.ceil(self.n_slots / self.group_size)


def desk_config(vocab_size: int, **overrides) -> ModelConfig:
    """Small preset that trains in minutes on one CPU core."""
    base = dict(d_model=64, heads=2, encoder_layers=2, decoder_layers=2,
                n_slots=12, max_report_len=60)
    base.update(overrides)
    return ModelConfig(vocab_size, **base)


# -- position and sequence layout ---------------------------------------------


def position_encoding(pos: int, dim: int, d: int, base: float = 1000.0) -> float:
    """Sinusoid value at one (position, dimension) cell."""
    if not 0 <= dim < d:
        raise ValueError(f"dimension {dim} outside [0, {d})")
    angle = pos / base ** ((dim - dim % 2) / d)
    return math.sin(angle) if dim % 2 == 0 else math.cos(angle)


def position_encoding_matrix(length: int, d: int, base: float = 1000.0) -> np.ndarray:
    """Rows 0..length-1 of the sinusoid table, shape [length, d]."""
    pos = np.arange(length)[:, None]
    dim = np.arange(d)[None, :]
    angle = pos / base ** ((dim - dim % 2) / d)
    return np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class TokenSequence:
    """Encoder input layout: visual slot at position 0, then graph tokens."""

    tokens: np.ndarray
    group_of: np.ndarray
    pad_mask: np.ndarray
    max_length: int = MAX_SEQUENCE_LENGTH

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.group_of = np.asarray(self.group_of, dtype=np.int64)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        n = self.tokens.shape[0]
        if self.group_of.shape != (n,) or self.pad_mask.shape != (n,):
            raise ValueError("tokens, group_of, pad_mask must have equal length")
        if n < 1 or self.group_of[0] != 0:
            raise ValueError("position 0 is reserved for the visual token (group 0)")
        if n > self.max_length:
            raise ValueError(f"sequence length {n} exceeds maximum {self.max_length}")

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def graph_token_sequence(slot_ids, config: ModelConfig) -> TokenSequence:
    """Lay out restored slot tokens behind the visual position in 6-token groups."""
    ids = np.asarray(slot_ids, dtype=np.int64)
    tokens = np.concatenate([[PAD], ids])
    groups = np.concatenate([[0], 1 + np.arange(ids.shape[0]) // config.group_size])
    pad = np.concatenate([[True], ids != PAD])
    return TokenSequence(tokens, groups, pad, max_length=config.max_t)


def build_visible_matrix(seq: TokenSequence) -> np.ndarray:
    """Boolean attention visibility: same group, the visual token, or self."""
    g = seq.group_of
    vis = (g[:, None] == g[None, :])
    vis[0, :] = True
    vis[:, 0] = True
    real = seq.pad_mask
    vis &= real[:, None] & real[None, :]
    np.fill_diagonal(vis, True)
    return vis


# -- parameters ----------------------------------------------------------------


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init kind) for every learnable tensor."""
    c = config
    out = [
        ("token_table", (c.vocab_size, c.d_model), "xavier"),
        ("segment_table", (1 + c.n_groups, c.d_model), "xavier"),
        ("restore.conv.kernel", (1, 1, 3, 3), "xavier"),
        ("restore.conv.bias", (1,), "zeros"),
        ("restore.bn.gain", (1,), "ones"),
        ("restore.bn.bias", (1,), "zeros"),
        ("restore.time.weight", (c.n_slots, c.feature_rows), "xavier"),
        ("restore.time.bias", (c.n_slots, 1), "zeros"),
        ("restore.out.weight", (c.feature_dim, c.vocab_size), "xavier"),
        ("restore.out.bias", (c.vocab_size,), "zeros"),
        ("compress.weight", (c.feature_dim, c.d_model), "xavier"),
        ("compress.bias", (c.d_model,), "zeros"),
    ]
    for l in range(c.encoder_layers):
        out += _block_shapes(f"enc{l}", c, cross=False)
    for l in range(c.decoder_layers):
        out += _block_shapes(f"dec{l}", c, cross=True)
    out.append(("out.bias", (c.vocab_size,), "zeros"))
    if not c.tied_output:
        out.append(("out.weight", (c.d_model, c.vocab_size), "xavier"))
    return out


def _block_shapes(prefix: str, c: ModelConfig, cross: bool) -> list:
    d, f = c.d_model, c.ffn_dim
    names = ["self", "cross"] if cross else ["attn"]
    out = []
    for site in names:
        for w in ("wq", "wk", "wv", "wo"):
            out.append((f"{prefix}.{site}.{w}", (d, d), "xavier"))
        out.append((f"{prefix}.{site}_norm.gain", (d,), "ones"))
        out.append((f"{prefix}.{site}_norm.bias", (d,), "zeros"))
    out += [
        (f"{prefix}.ffn.w1", (d, f), "xavier"),
        (f"{prefix}.ffn.b1", (f,), "zeros"),
        (f"{prefix}.ffn.w2", (f, d), "xavier"),
        (f"{prefix}.ffn.b2", (d,), "zeros"),
        (f"{prefix}.ffn_norm.gain", (d,), "ones"),
        (f"{prefix}.ffn_norm.bias", (d,), "zeros"),
    ]
    return out


def _xavier(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    if len(shape) == 4:
        fan_in, fan_out = shape[1] * 9, shape[0] * 9
    else:
        fan_in, fan_out = shape[0], shape[-1]
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameter dict; draw order is fixed so a seed pins every value."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in parameter_shapes(config):
        if kind == "xavier":
            data = _xavier(rng, shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        else:
            data = np.ones(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(int(t.data.size) for t in params.values())


# -- the network ---------------------------------------------------------------


@dataclass
class CaseEncoding:
    """Everything the decoder and the losses need from one case's forward pass."""

    slot_logits: Tensor
    slot_ids: np.ndarray
    sequence: TokenSequence
    memory: Tensor
    visible: np.ndarray = field(repr=False, default=None)


class CGTModel:
    """Restoration head + visibility-masked encoder + autoregressive decoder."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        self.bn_states: dict[str, BatchNormState] = {"restore.bn": BatchNormState(1)}
        if config.norm == "batchnorm":
            for name, _, kind in parameter_shapes(config):
                if kind == "ones" and name != "restore.bn.gain":
                    site = name.rsplit(".", 1)[0]
                    self.bn_states[site] = BatchNormState(config.d_model)

    # -- feature heads ----------------------------------------------------

    def _check_features(self, features) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(features)
        want = (self.config.feature_rows, self.config.feature_dim)
        if x.data.shape != want:
            raise ShapeError(f"features must be {want}, got {x.data.shape}")
        if not np.isfinite(x.data).all():
            raise NonFiniteError("visual features contain non-finite values")
        return x

    def restore_subgraph(self, features, training: bool = False) -> Tensor:
        """Per-slot vocabulary logits from the visual feature grid."""
        p = self.params
        x = self._check_features(features)
        img = x.reshape(1, self.config.feature_rows, self.config.feature_dim)
        y = conv2d_3x3(img, p["restore.conv.kernel"], p["restore.conv.bias"])
        y = batch_norm(y, p["restore.bn.gain"], p["restore.bn.bias"],
                       self.bn_states["restore.bn"], training, channel_axis=0)
        y = y.relu().reshape(self.config.feature_rows, self.config.feature_dim)
        y = matmul(p["restore.time.weight"], y) + p["restore.time.bias"]
        return matmul(y, p["restore.out.weight"]) + p["restore.out.bias"]

    def slot_distributions(self, slot_logits: Tensor) -> Tensor:
        """Per-slot softmax over the non-special vocabulary (differentiable)."""
        content = np.arange(NUM_SPECIALS, self.config.vocab_size)
        sub = take_rows(slot_logits.transpose(), content).transpose()
        return softmax(sub)

    def expected_token_embeddings(self, slot_probs: Tensor) -> Tensor:
        """Probability-weighted mean of non-special token embeddings per slot."""
        content = np.arange(NUM_SPECIALS, self.config.vocab_size)
        table = take_rows(self.params["token_table"], content)
        return matmul(slot_probs, table)

    def discretize_subgraph(self, slot_logits: Tensor) -> np.ndarray:
        """Hard per-slot token ids; specials excluded, ties take the lowest id."""
        body = slot_logits.data[:, NUM_SPECIALS:]
        return NUM_SPECIALS + np.argmax(body, axis=1)

    def compress_visual_token(self, features) -> Tensor:
        """Mean over feature rows then affine to d_model; shape [1, d]."""
        x = self._check_features(features)
        pooled = x.mean(axis=0, keepdims=True)
        return matmul(pooled, self.params["compress.weight"]) + self.params["compress.bias"]

    # -- embedding and encoder ---------------------------------------------

    def embed_input(self, seq: TokenSequence, t_v: Tensor) -> Tensor:
        """Sum of content, position, and group-segment embeddings."""
        p = self.params
        if int(seq.group_of.max()) >= p["segment_table"].shape[0]:
            raise ValueError(f"group index {int(seq.group_of.max())} exceeds "
                             f"segment table of {p['segment_table'].shape[0]} rows")
        tok = take_rows(p["token_table"], seq.tokens[1:])
        rows = concat([t_v, tok], axis=0)
        pe = Tensor(position_encoding_matrix(len(seq), self.config.d_model,
                                             self.config.pe_base))
        seg = take_rows(p["segment_table"], seq.group_of)
        return rows + pe + seg

    def _norm(self, x: Tensor, site: str, training: bool) -> Tensor:
        gain = self.params[f"{site}.gain"]
        bias = self.params[f"{site}.bias"]
        if self.config.norm == "layernorm":
            return layer_norm(x, gain, bias)
        return batch_norm(x, gain, bias, self.bn_states[site], training, channel_axis=1)

    def _mha(self, q_in: Tensor, kv_in: Tensor, site: str, mask: np.ndarray) -> Tensor:
        p, c = self.params, self.config
        dh = c.d_model // c.heads
        nq, nk = q_in.shape[0], kv_in.shape[0]
        q = matmul(q_in, p[f"{site}.wq"]).reshape(nq, c.heads, dh).transpose(1, 0, 2)
        k = matmul(kv_in, p[f"{site}.wk"]).reshape(nk, c.heads, dh).transpose(1, 0, 2)
        v = matmul(kv_in, p[f"{site}.wv"]).reshape(nk, c.heads, dh).transpose(1, 0, 2)
        scores = matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        weights = masked_softmax(scores, mask)
        ctx = matmul(weights, v).transpose(1, 0, 2).reshape(nq, c.d_model)
        return matmul(ctx, p[f"{site}.wo"])

    def _ffn(self, x: Tensor, site: str) -> Tensor:
        p = self.params
        hidden = (matmul(x, p[f"{site}.w1"]) + p[f"{site}.b1"]).relu()
        return matmul(hidden, p[f"{site}.w2"]) + p[f"{site}.b2"]

    def encode(self, embedded: Tensor, visible: np.ndarray,
               training: bool = False) -> Tensor:
        """Stack of visibility-masked self-attention + FFN blocks."""
        x = embedded
        for l in range(self.config.encoder_layers):
            a = self._mha(x, x, f"enc{l}.attn", visible)
            x = self._norm(a + x, f"enc{l}.attn_norm", training)
            f = self._ffn(x, f"enc{l}.ffn")
            x = self._norm(f + x, f"enc{l}.ffn_norm", training)
            if not np.isfinite(x.data).all():
                raise NonFiniteError(f"encoder layer {l} produced non-finite values")
        return x

    def encode_case(self, features, training: bool = False) -> CaseEncoding:
        """Restore slots, assemble the token sequence, and run the encoder."""
        slot_logits = self.restore_subgraph(features, training)
        slot_ids = self.discretize_subgraph(slot_logits)
        seq = graph_token_sequence(slot_ids, self.config)
        t_v = self.compress_visual_token(features)
        visible = build_visible_matrix(seq)
        memory = self.encode(self.embed_input(seq, t_v), visible, training)
        return CaseEncoding(slot_logits, slot_ids, seq, memory, visible)

    # -- decoder -----------------------------------------------------------

    def decode(self, memory: Tensor, token_ids, memory_mask: np.ndarray | None = None,
               training: bool = False) -> Tensor:
        """Teacher-forced logits [t, vocab] for a report prefix (position 0 = start)."""
        p, c = self.params, self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        t = ids.shape[0]
        if t < 1 or ids[0] != SOS:
            raise ValueError("decoder prefix must start with the start-of-sequence id")
        if t > c.max_report_len + 1:
            raise ValueError(f"prefix length {t} exceeds maximum report length "
                             f"{c.max_report_len}")
        x = take_rows(p["token_table"], ids) + Tensor(
            position_encoding_matrix(t, c.d_model, c.pe_base))
        causal = np.tril(np.ones((t, t), dtype=bool))
        mem_mask = (np.ones(memory.shape[0], dtype=bool)
                    if memory_mask is None else np.asarray(memory_mask, dtype=bool))
        for l in range(c.decoder_layers):
            a = self._mha(x, x, f"dec{l}.self", causal)
            x = self._norm(a + x, f"dec{l}.self_norm", training)
            cr = self._mha(x, memory, f"dec{l}.cross", mem_mask)
            x = self._norm(cr + x, f"dec{l}.cross_norm", training)
            f = self._ffn(x, f"dec{l}.ffn")
            x = self._norm(f + x, f"dec{l}.ffn_norm", training)
            if not np.isfinite(x.data).all():
                raise NonFiniteError(f"decoder layer {l} produced non-finite values")
        if c.tied_output:
            return matmul(x, p["token_table"].transpose()) + p["out.bias"]
        return matmul(x, p["out.weight"]) + p["out.bias"]

    def decode_step(self, memory: Tensor, prefix_ids,
                    memory_mask: np.ndarray | None = None) -> np.ndarray:
        """Next-token logits for the last prefix position, shape [vocab]."""
        return self.decode(memory, prefix_ids, memory_mask).data[-1]

    def generate_greedy(self, features, return_slots: bool = False):
        """Argmax chain from the start id until end-of-sequence or the length cap."""
        enc = self.encode_case(features, training=False)
        ids = [SOS]
        for _ in range(self.config.max_report_len):
            nxt = int(np.argmax(self.decode_step(enc.memory, ids)))
            if nxt == EOS:
                break
            ids.append(nxt)
        else:
            log.info("generation reached max length %d without end token",
                     self.config.max_report_len)
        report = ids[1:]
        return (report, enc.slot_ids) if return_slots else report
