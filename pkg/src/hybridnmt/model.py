"""Attention-based LSTM encoder-decoder, with and without input-feeding.

Parameters live in a flat ``{name: ndarray}`` dict whose key order is the
fixed enumeration order used by checkpoints and parameter counting. Row
vectors throughout: a batch of hidden states is ``(B, H)``, a sentence's
states ``(B, T, H)``.

The step-level builders (:func:`layer_input`, :func:`lstm_layer_step`,
:func:`attention_block`, :func:`output_nll`) operate on an autograd tape and
are shared by the monolithic forward pass here and by the segment-per-task
executors in :mod:`hybridnmt.parallel`.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import tensor as T

PAD, BOS, EOS, UNK = 0, 1, 2, 3
N_RESERVED = 4


class Variant(str, Enum):
    INPUT_FEEDING = "input_feeding"
    NO_INPUT_FEEDING = "no_input_feeding"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32000
    emb_size: int = 512
    hidden_size: int = 1024
    depth: int = 4
    variant: Variant = Variant.INPUT_FEEDING
    dropout: float = 0.3
    precision: int = 32

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.vocab_size < N_RESERVED:
            raise ValueError("vocab_size must be >= 4 (PAD/BOS/EOS/UNK)")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if min(self.emb_size, self.hidden_size) < 1:
            raise ValueError("emb_size and hidden_size must be positive")
        T.dtype_for(self.precision)

    @property
    def input_feeding(self) -> bool:
        return self.variant is Variant.INPUT_FEEDING

    @property
    def dtype(self) -> np.dtype:
        return T.dtype_for(self.precision)

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)


# ----------------------------------------------------------------- parameters

EMBEDDING, LSTM_STACK, ATTN_SOFTMAX = "embedding", "lstm_stack", "attn_softmax"


def lstm_names(side: str, layer: int) -> tuple[str, str, str]:
    return f"{side}{layer}.wx", f"{side}{layer}.wh", f"{side}{layer}.b"


ATTN_PARAMS = ("attn.w_alpha", "attn.w_c", "out.w", "out.b")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor, in enumeration order."""
    V, E, H, L = config.vocab_size, config.emb_size, config.hidden_size, config.depth
    shapes = {"src_emb": (V, E), "tgt_emb": (V, E)}
    for side in ("enc", "dec"):
        for layer in range(1, L + 1):
            width = E if layer == 1 else H
            if side == "dec" and layer == 1 and config.input_feeding:
                width = E + H
            wx, wh, b = lstm_names(side, layer)
            shapes[wx] = (width, 4 * H)
            shapes[wh] = (H, 4 * H)
            shapes[b] = (4 * H,)
    shapes["attn.w_alpha"] = (H, H)
    shapes["attn.w_c"] = (H, 2 * H)
    shapes["out.w"] = (H, V)
    shapes["out.b"] = (V,)
    return shapes


def part_of(name: str) -> str:
    if name.endswith("_emb"):
        return EMBEDDING
    if name.startswith(("enc", "dec")):
        return LSTM_STACK
    if name.startswith(("attn.", "out.")):
        return ATTN_SOFTMAX
    raise KeyError(name)


@dataclass(frozen=True)
class PartCounts:
    embedding: int
    lstm_stack: int
    attn_softmax: int

    @property
    def total(self) -> int:
        return self.embedding + self.lstm_stack + self.attn_softmax


def param_count(config: ModelConfig) -> PartCounts:
    counts = {EMBEDDING: 0, LSTM_STACK: 0, ATTN_SOFTMAX: 0}
    for name, shape in param_shapes(config).items():
        counts[part_of(name)] += int(np.prod(shape))
    return PartCounts(counts[EMBEDDING], counts[LSTM_STACK], counts[ATTN_SOFTMAX])


def init_params(config: ModelConfig, seed: int, scale: float = 0.1) -> dict[str, np.ndarray]:
    """Uniform(-scale, scale) weights, zero biases except forget gates at 1.0.

    Tensors are drawn from one seeded stream in enumeration order.
    """
    rng = T.Rng(seed)
    H = config.hidden_size
    params = {}
    for name, shape in param_shapes(config).items():
        w = rng.uniform(-scale, scale, shape, dtype=config.dtype)
        if name.endswith(".b"):
            w[:] = 0.0
            if name != "out.b":
                w[H:2 * H] = 1.0
        params[name] = w
    return params


# ---------------------------------------------------------------------- batch


@dataclass
class Batch:
    """A padded mini-batch.

    ``tgt_in`` is ``BOS y_1 .. y_n`` and ``tgt_out`` is ``y_1 .. y_n EOS``.
    ``rows`` are the sentences' positions in the full mini-batch of size
    ``full_size``; dropout masks are drawn for the full batch and sliced by
    ``rows`` so shards see exactly the masks the whole batch would.
    """

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    rows: np.ndarray = None
    full_size: int = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.tgt_in = np.asarray(self.tgt_in, dtype=np.int64)
        self.tgt_out = np.asarray(self.tgt_out, dtype=np.int64)
        if self.rows is None:
            self.rows = np.arange(len(self.src))
        if self.full_size is None:
            self.full_size = len(self.src)

    @classmethod
    def from_pairs(cls, pairs) -> "Batch":
        """Build from ``[(src_ids, tgt_ids), ...]`` without BOS/EOS."""
        if not pairs:
            return cls(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)))
        M = max(len(s) for s, _ in pairs)
        N = max(len(t) for _, t in pairs) + 1
        B = len(pairs)
        src = np.full((B, M), PAD)
        tin = np.full((B, N), PAD)
        tout = np.full((B, N), PAD)
        for k, (s, t) in enumerate(pairs):
            if len(s) == 0:
                raise ValueError(f"sentence {k} has an empty source side")
            src[k, :len(s)] = s
            tin[k, 0] = BOS
            tin[k, 1:len(t) + 1] = t
            tout[k, :len(t)] = t
            tout[k, len(t)] = EOS
        return cls(src, tin, tout)

    def __len__(self):
        return len(self.src)

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt_out != PAD

    @property
    def src_tokens(self) -> int:
        return int(self.src_mask.sum())

    @property
    def tgt_tokens(self) -> int:
        return int(self.tgt_mask.sum())

    def select(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.src[idx], self.tgt_in[idx], self.tgt_out[idx],
                     self.rows[idx], self.full_size)


def check_ids(ids: np.ndarray, vocab_size: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"token id out of range [0, {vocab_size})")


# -------------------------------------------------------------------- dropout


@dataclass(frozen=True)
class Dropout:
    """Inverted-dropout masks keyed by (seed, step, site, t, layer)."""

    rate: float
    seed: int
    step: int = 0

    SITES = {"enc": 1, "dec": 2}

    def mask(self, side: str, t: int, layer: int, batch: Batch, width: int, dtype) -> np.ndarray:
        rng = T.Rng(self.seed).child(self.step, self.SITES[side], t, layer)
        keep = rng.random((batch.full_size, width)) >= self.rate
        m = keep.astype(dtype) / dtype.type(1.0 - self.rate)
        return m[batch.rows]


def _dropout(x: ag.Node, drop: Dropout | None, side, t, layer, batch) -> ag.Node:
    if drop is None or drop.rate == 0.0:
        return x
    return ag.scale(x, drop.mask(side, t, layer, batch, x.shape[-1], x.value.dtype))


# ----------------------------------------------------------------- step builders


def lstm_cell(x, h_prev, c_prev, wx, wh, b):
    """Numeric LSTM step on arrays; returns ``(h, c)``."""
    tape = ag.Tape()
    nodes = [tape.leaf(v) for v in (x, h_prev, c_prev, wx, wh, b)]
    hc = ag.lstm_cell(*nodes).value
    n = h_prev.shape[-1]
    return hc[:, :n], hc[:, n:]


def lstm_layer_step(tape: ag.Tape, params, side: str, layer: int,
                    x: ag.Node, h: ag.Node, c: ag.Node, keep: np.ndarray):
    """One LSTM step with carry-through on padded rows (``keep`` is (B,1) 0/1)."""
    wx, wh, b = (tape.param(n, params[n]) for n in lstm_names(side, layer))
    hc = ag.lstm_cell(x, h, c, wx, wh, b)
    n = h.shape[-1]
    h_new, c_new = ag.columns(hc, 0, n), ag.columns(hc, n, 2 * n)
    if keep.all():
        return h_new, c_new
    return ag.where_rows(keep, h_new, h), ag.where_rows(keep, c_new, c)


def layer_input(tape: ag.Tape, params, side: str, t: int, layer: int, batch: Batch,
                below: ag.Node | None, drop: Dropout | None,
                feed: ag.Node | None = None) -> ag.Node:
    """Input to ``(side, t, layer)``: dropped-out embedding or lower-layer output.

    ``feed`` is the previous attentional state for an input-feeding decoder.
    """
    if layer == 1:
        ids = batch.src[:, t] if side == "enc" else batch.tgt_in[:, t]
        table = tape.param("src_emb" if side == "enc" else "tgt_emb",
                           params["src_emb" if side == "enc" else "tgt_emb"])
        x = _dropout(ag.embedding(table, ids), drop, side, t, 0, batch)
        if feed is not None:
            x = ag.concat([x, feed], axis=-1)
        return x
    return _dropout(below, drop, side, t, layer - 1, batch)


def keep_column(batch: Batch, side: str, t: int) -> np.ndarray:
    ids = batch.src if side == "enc" else batch.tgt_in
    return ids[:, t:t + 1] != PAD


def attention_scores(tape, params, H: ag.Node, S: ag.Node, src_mask: np.ndarray) -> ag.Node:
    """alpha[b, i, j] = softmax_j(H_i W_alpha S_j) over unmasked source positions."""
    wa = tape.param("attn.w_alpha", params["attn.w_alpha"])
    raw = ag.bmm(ag.linear(H, wa), ag.swap_last(S))
    mask = np.broadcast_to(src_mask[:, None, :], raw.shape)
    return ag.softmax(raw, mask)


def attention_block(tape, params, H: ag.Node, S: ag.Node, src_mask: np.ndarray) -> ag.Node:
    """Attentional states H_c = tanh([H; C] W_c^T) with C = alpha S."""
    alpha = attention_scores(tape, params, H, S, src_mask)
    C = ag.bmm(alpha, S)
    wc = tape.param("attn.w_c", params["attn.w_c"])
    return ag.tanh(ag.linear(ag.concat([H, C], axis=-1), ag.swap_last(wc)))


def output_nll(tape, params, Hc: ag.Node, tgt_out: np.ndarray, weight: np.ndarray) -> ag.Node:
    """Summed token NLL of ``softmax(H_c F + f)`` against ``tgt_out``."""
    w = tape.param("out.w", params["out.w"])
    b = tape.param("out.b", params["out.b"])
    return ag.softmax_nll_sum(ag.linear(Hc, w, b), tgt_out, weight)


# ----------------------------------------------------------- whole-model passes


@dataclass
class EncDecStates:
    """Top-layer states; ``S`` is (B, M, H) and ``H`` is (B, N, H)."""

    S: np.ndarray
    src_mask: np.ndarray
    final: list = field(default_factory=list)  # per layer (h, c) at the last real step
    H: np.ndarray | None = None
    Hc: np.ndarray | None = None


def _zeros(tape, B, n, dtype):
    return tape.leaf(np.zeros((B, n), dtype=dtype))


def build_encoder(tape, params, config: ModelConfig, batch: Batch, drop=None):
    """Returns (list over t of top-layer h nodes, per-layer final (h, c) nodes)."""
    B, M = batch.src.shape
    Hd, L, dt = config.hidden_size, config.depth, config.dtype
    state = [(_zeros(tape, B, Hd, dt), _zeros(tape, B, Hd, dt)) for _ in range(L)]
    tops = []
    for t in range(M):
        keep = keep_column(batch, "enc", t)
        below = None
        for layer in range(1, L + 1):
            x = layer_input(tape, params, "enc", t, layer, batch, below, drop)
            h, c = lstm_layer_step(tape, params, "enc", layer, x, *state[layer - 1], keep)
            state[layer - 1] = (h, c)
            below = h
        tops.append(below)
    return tops, state


def build_decoder(tape, params, config: ModelConfig, batch: Batch, init_state, drop=None,
                  S: ag.Node | None = None):
    """Decoder over all target steps.

    Without input-feeding the returned value is the list of top-layer states
    H_t. With input-feeding the attentional state of each step is computed
    inline (needs ``S``) and the list of H_c,t is returned instead.
    """
    B, N = batch.tgt_in.shape
    Hd, L, dt = config.hidden_size, config.depth, config.dtype
    state = list(init_state)
    outs = []
    feed = _zeros(tape, B, Hd, dt) if config.input_feeding else None
    for t in range(N):
        keep = keep_column(batch, "dec", t)
        below = None
        for layer in range(1, L + 1):
            x = layer_input(tape, params, "dec", t, layer, batch, below, drop,
                            feed if layer == 1 else None)
            h, c = lstm_layer_step(tape, params, "dec", layer, x, *state[layer - 1], keep)
            state[layer - 1] = (h, c)
            below = h
        if config.input_feeding:
            Ht = ag.stack([below], axis=1)
            hc = ag.take(attention_block(tape, params, Ht, S, batch.src_mask), 0, axis=1)
            feed = hc
            outs.append(hc)
        else:
            outs.append(below)
    return outs


def build_loss_sum(tape, params, config: ModelConfig, batch: Batch, drop=None) -> ag.Node:
    """Summed NLL over non-PAD target tokens for one (sub-)batch."""
    check_ids(batch.src, config.vocab_size)
    check_ids(batch.tgt_in, config.vocab_size)
    check_ids(batch.tgt_out, config.vocab_size)
    tops, final = build_encoder(tape, params, config, batch, drop)
    S = ag.stack(tops, axis=1)
    outs = build_decoder(tape, params, config, batch, final, drop, S)
    if config.input_feeding:
        Hc = ag.stack(outs, axis=1)
    else:
        Hc = attention_block(tape, params, ag.stack(outs, axis=1), S, batch.src_mask)
    return output_nll(tape, params, Hc, batch.tgt_out, batch.tgt_mask)


def loss_and_grads(params, config: ModelConfig, batch: Batch, drop: Dropout | None = None,
                   n_tokens: int | None = None):
    """Token-mean loss and its gradient for every parameter.

    ``n_tokens`` overrides the normaliser (used when ``batch`` is one shard of
    a larger mini-batch); the returned loss is then this shard's contribution.
    """
    n_tokens = batch.tgt_tokens if n_tokens is None else n_tokens
    if n_tokens == 0:
        raise ValueError("batch has no non-PAD target tokens")
    tape = ag.Tape()
    for name, v in params.items():
        tape.param(name, v)
    total = build_loss_sum(tape, params, config, batch, drop)
    seed = np.asarray(1.0 / n_tokens, dtype=total.value.dtype)
    grads = tape.backward({total: seed})
    return float(total.value) / n_tokens, grads


def loss_graph(params, config: ModelConfig, batch: Batch) -> ag.TapeGraph:
    """Token-mean loss as a replayable graph (used for gradient checking)."""
    n_tokens = batch.tgt_tokens

    def build(tape, leaves):
        return ag.scale(build_loss_sum(tape, params, config, batch), 1.0 / n_tokens)

    return ag.TapeGraph(build, params)


# ----------------------------------------------- array-level convenience API


def encode(src: np.ndarray, params, config: ModelConfig) -> EncDecStates:
    src = np.asarray(src, dtype=np.int64)
    if src.size == 0:
        return EncDecStates(np.zeros((0, 0, config.hidden_size), config.dtype),
                            np.zeros((0, 0), bool))
    check_ids(src, config.vocab_size)
    batch = Batch(src, np.zeros((len(src), 1)), np.zeros((len(src), 1)))
    tape = ag.Tape()
    tops, final = build_encoder(tape, params, config, batch)
    S = np.stack([n.value for n in tops], axis=1)
    return EncDecStates(S, batch.src_mask, [(h.value, c.value) for h, c in final])


def decode_hidden(tgt_in: np.ndarray, enc: EncDecStates, params, config: ModelConfig,
                  feed_override: np.ndarray | None = None) -> EncDecStates:
    """Teacher-forced decoder states.

    Fills ``H`` (top-layer states) and, for the input-feeding variant, ``Hc``.
    ``feed_override`` forces the fed-back attentional state to a constant,
    which is how the two variants are compared directly.
    """
    tgt_in = np.asarray(tgt_in, dtype=np.int64)
    check_ids(tgt_in, config.vocab_size)
    B, N = tgt_in.shape
    batch = Batch(np.ones((B, 1)), tgt_in, tgt_in)
    tape = ag.Tape()
    init = [(tape.leaf(h), tape.leaf(c)) for h, c in enc.final]
    L, Hd, dt = config.depth, config.hidden_size, config.dtype
    state = list(init)
    S = tape.leaf(enc.S)
    feed = tape.leaf(np.zeros((B, Hd), dt)) if config.input_feeding else None
    H, Hc = [], []
    for t in range(N):
        keep = keep_column(batch, "dec", t)
        below = None
        for layer in range(1, L + 1):
            x = layer_input(tape, params, "dec", t, layer, batch, below, None,
                            feed if layer == 1 else None)
            h, c = lstm_layer_step(tape, params, "dec", layer, x, *state[layer - 1], keep)
            state[layer - 1] = (h, c)
            below = h
        H.append(below.value)
        if config.input_feeding:
            hc = ag.take(attention_block(tape, params, ag.stack([below], 1), S, enc.src_mask),
                         0, axis=1)
            Hc.append(hc.value)
            feed = tape.leaf(feed_override) if feed_override is not None else hc
    out = EncDecStates(enc.S, enc.src_mask, enc.final, np.stack(H, axis=1))
    if config.input_feeding:
        out.Hc = np.stack(Hc, axis=1)
    return out


def context_vectors(alpha: np.ndarray, S: np.ndarray) -> np.ndarray:
    return np.matmul(alpha, S)


def context_decoded(H: np.ndarray, C: np.ndarray, w_c: np.ndarray) -> np.ndarray:
    if H.shape != C.shape:
        raise T.DimensionError(f"context_decoded: H {H.shape} vs C {C.shape}")
    return T.elementwise("tanh", T.concat([H, C], axis=-1) @ w_c.T)


def attention_weights(H: np.ndarray, S: np.ndarray, w_alpha: np.ndarray,
                      src_mask: np.ndarray) -> np.ndarray:
    """Array form of :func:`attention_scores` for a batch (B, N, H) x (B, M, H)."""
    raw = np.matmul(H @ w_alpha, np.swapaxes(S, -1, -2))
    return T.softmax_rows(raw, np.broadcast_to(src_mask[:, None, :], raw.shape))


def output_probs(Hc: np.ndarray, out_w: np.ndarray, out_b: np.ndarray) -> np.ndarray:
    return T.softmax_rows(Hc @ out_w + out_b)


def nll_loss(P: np.ndarray, tgt: np.ndarray, tgt_mask: np.ndarray) -> float:
    """Mean of ``-log P[tgt]`` over unmasked target positions."""
    tgt_mask = np.asarray(tgt_mask, bool)
    n = int(tgt_mask.sum())
    if n == 0:
        raise ValueError("nll_loss: no non-PAD target tokens")
    picked = np.take_along_axis(P, np.asarray(tgt)[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        nll = -np.log(picked[tgt_mask].astype(np.float64))
    return float(T.check_finite(nll, "nll_loss").sum() / n)


# ----------------------------------------------------------------- checkpoint

MAGIC = b"HNMT"
CKPT_VERSION = 1


def save_checkpoint(path, params, config: ModelConfig) -> None:
    """Binary layout (little-endian):

    magic ``HNMT``, u32 version, u32 V, u32 E, u32 H, u32 L, u32 variant
    (1 = input-feeding), f32 dropout, u32 precision, u32 tensor count, then for
    each tensor in enumeration order: u16 name length, name (UTF-8), u8 ndim,
    u32 dims, f32 data (row-major).
    """
    shapes = param_shapes(config)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<6If2I", CKPT_VERSION, config.vocab_size, config.emb_size,
                            config.hidden_size, config.depth, int(config.input_feeding),
                            config.dropout, config.precision, len(shapes)))
        for name, shape in shapes.items():
            arr = np.asarray(params[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != {shape}")
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = 4
    version, V, E, H, L, feeding, dropout, precision, count = struct.unpack_from("<6If2I", data, off)
    off += struct.calcsize("<6If2I")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig(V, E, H, L, Variant.INPUT_FEEDING if feeding else Variant.NO_INPUT_FEEDING,
                         round(dropout, 6), precision)
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        params[name] = arr.astype(config.dtype)
    if list(params) != list(param_shapes(config)):
        raise ValueError(f"{path}: tensor set does not match its config header")
    return params, config
