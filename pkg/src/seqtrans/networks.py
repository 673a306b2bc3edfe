"""Transcription, prediction, and joint networks with their classifier heads.

The transcription network is a 1D-CNN head (four same-padded convolutions,
two average poolings that cut the frame rate by 4) followed by a stack of
post-norm transformer layers whose feed-forward blocks are two 1D
convolutions. The prediction network embeds label ids and runs stacked
LSTMs; the joint network combines one transcription row and one prediction
row through a tanh bottleneck into transducer logits.

Checkpoints are binary: magic "STCK", u32 version, then per leaf in tree
order: u32 name length, UTF-8 name, u32 rank, u32 extents, little-endian
float64 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamTree, Tensor
from .errors import ConfigError, DataError

CHECKPOINT_MAGIC = b"STCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TranscriptionConfig:
    feat_dim: int = 128
    cnn_head_out: int = 512
    cnn_head_kernel: int = 3
    pool_kernel: int = 2
    n_layers: int = 15
    d_model: int = 512
    n_heads: int = 8
    ffn_conv_kernel: int = 3
    ffn_conv1_out: int = 2048
    ffn_conv2_out: int = 512
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.ffn_conv2_out != self.d_model:
            raise ConfigError("second feed-forward conv must project back to d_model")
        if self.cnn_head_out != self.d_model:
            raise ConfigError("cnn_head_out must equal d_model (the head feeds the stack directly)")


@dataclass(frozen=True)
class PredictionConfig:
    embed_dim: int = 256
    lstm_layers: int = 2
    lstm_cell: int = 1024
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.lstm_layers < 1:
            raise ConfigError("need at least one LSTM layer")


@dataclass(frozen=True)
class JointConfig:
    joint_dim: int = 1024

    def __post_init__(self) -> None:
        if self.joint_dim < 1:
            raise ConfigError("joint_dim must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    transcription: TranscriptionConfig
    prediction: PredictionConfig
    joint: JointConfig
    d_lm: int

    @property
    def d_trans(self) -> int:
        return self.d_lm + 1

    @property
    def d_ctc(self) -> int:
        return self.d_trans


@dataclass
class Model:
    cfg: ModelConfig
    params: ParamTree


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> ParamTree:
    rng = np.random.default_rng(seed)
    tc, pc, jc = cfg.transcription, cfg.prediction, cfg.joint
    tree = ParamTree()

    ch_in = tc.feat_dim
    for i in range(4):
        k = tc.cnn_head_kernel
        tree.add(f"trans.head.conv{i}.w",
                 _uniform(rng, k * ch_in, k * tc.cnn_head_out, (k, ch_in, tc.cnn_head_out)))
        tree.add(f"trans.head.conv{i}.b", np.zeros(tc.cnn_head_out))
        ch_in = tc.cnn_head_out

    d, dj = tc.d_model, jc.joint_dim
    for i in range(tc.n_layers):
        p = f"trans.layer{i}"
        for name in ("wq", "wk", "wv", "wo"):
            tree.add(f"{p}.attn.{name}", _uniform(rng, d, d, (d, d)))
            tree.add(f"{p}.attn.{name[-1]}b", np.zeros(d))
        tree.add(f"{p}.ln1.g", np.ones(d))
        tree.add(f"{p}.ln1.b", np.zeros(d))
        k = tc.ffn_conv_kernel
        tree.add(f"{p}.ffn.conv1.w", _uniform(rng, k * d, k * tc.ffn_conv1_out, (k, d, tc.ffn_conv1_out)))
        tree.add(f"{p}.ffn.conv1.b", np.zeros(tc.ffn_conv1_out))
        tree.add(f"{p}.ffn.conv2.w",
                 _uniform(rng, k * tc.ffn_conv1_out, k * tc.ffn_conv2_out, (k, tc.ffn_conv1_out, tc.ffn_conv2_out)))
        tree.add(f"{p}.ffn.conv2.b", np.zeros(tc.ffn_conv2_out))
        tree.add(f"{p}.ln2.g", np.ones(d))
        tree.add(f"{p}.ln2.b", np.zeros(d))

    # embedding row 0 is the start-of-sequence context
    tree.add("pred.embed", rng.normal(0.0, pc.embed_dim ** -0.5, size=(cfg.d_trans, pc.embed_dim)))
    in_dim = pc.embed_dim
    for i in range(pc.lstm_layers):
        h = pc.lstm_cell
        tree.add(f"pred.lstm{i}.wx", _uniform(rng, in_dim, 4 * h, (in_dim, 4 * h)))
        tree.add(f"pred.lstm{i}.wh", _uniform(rng, h, 4 * h, (h, 4 * h)))
        tree.add(f"pred.lstm{i}.b", np.zeros(4 * h))
        in_dim = h

    tree.add("joint.w_tr", _uniform(rng, d, dj, (d, dj)))
    tree.add("joint.w_pr", _uniform(rng, pc.lstm_cell, dj, (pc.lstm_cell, dj)))
    tree.add("joint.w_o", _uniform(rng, dj, cfg.d_trans, (dj, cfg.d_trans)))
    tree.add("ctc.w", _uniform(rng, d, cfg.d_ctc, (d, cfg.d_ctc)))
    tree.add("lm.w", _uniform(rng, pc.lstm_cell, cfg.d_lm, (pc.lstm_cell, cfg.d_lm)))
    return tree


PREDICTION_PREFIXES = ("pred.",)
LM_HEAD = "lm.w"


def is_prediction_param(name: str) -> bool:
    return name.startswith(PREDICTION_PREFIXES)


def is_transcription_param(name: str) -> bool:
    return name.startswith("trans.")


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _maybe_dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode forward needs an rng for dropout masks")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.dropout(x, mask)


def output_length(t: int) -> int:
    return (t // 2) // 2


def cnn_head_forward(params: ParamTree, cfg: TranscriptionConfig, features,
                     train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Four relu convolutions with two /2 average poolings: T -> floor(T/4)."""
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
    t = x.shape[0]
    if t < 4:
        raise ConfigError(f"utterance too short for downsampling: {t} frames < 4")
    for i in range(4):
        x = ad.relu(ad.conv1d(x, params[f"trans.head.conv{i}.w"], params[f"trans.head.conv{i}.b"]))
        if i in (1, 3):
            x = ad.avg_pool1d(x, cfg.pool_kernel)
    return _maybe_dropout(x, cfg.dropout, train, rng)


def _attention(params: ParamTree, cfg: TranscriptionConfig, layer: int, x: Tensor,
               collect: list | None = None) -> Tensor:
    p = f"trans.layer{layer}.attn"
    q = ad.add(ad.matmul(x, params[f"{p}.wq"]), params[f"{p}.qb"])
    k = ad.add(ad.matmul(x, params[f"{p}.wk"]), params[f"{p}.kb"])
    v = ad.add(ad.matmul(x, params[f"{p}.wv"]), params[f"{p}.vb"])
    dh = cfg.d_model // cfg.n_heads
    heads = []
    for h in range(cfg.n_heads):
        qh = ad.narrow(q, 1, h * dh, dh)
        kh = ad.narrow(k, 1, h * dh, dh)
        vh = ad.narrow(v, 1, h * dh, dh)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        weights = ad.softmax(scores)
        if collect is not None:
            collect.append(weights.data)
        heads.append(ad.matmul(weights, vh))
    cat = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    return ad.add(ad.matmul(cat, params[f"{p}.wo"]), params[f"{p}.ob"])


def transformer_layer_forward(params: ParamTree, cfg: TranscriptionConfig, layer: int, x,
                              train: bool = False, rng: np.random.Generator | None = None,
                              return_attn: bool = False):
    """Self-attention then conv feed-forward, each post-norm residual."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    p = f"trans.layer{layer}"
    attn_maps: list | None = [] if return_attn else None
    attn = _maybe_dropout(_attention(params, cfg, layer, x, attn_maps), cfg.dropout, train, rng)
    x = ad.layer_norm(ad.add(x, attn), params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
    inner = ad.relu(ad.conv1d(x, params[f"{p}.ffn.conv1.w"], params[f"{p}.ffn.conv1.b"]))
    ffn = ad.conv1d(inner, params[f"{p}.ffn.conv2.w"], params[f"{p}.ffn.conv2.b"])
    ffn = _maybe_dropout(ffn, cfg.dropout, train, rng)
    out = ad.layer_norm(ad.add(x, ffn), params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    return (out, attn_maps) if return_attn else out


def transcription_forward(params: ParamTree, cfg: TranscriptionConfig, features,
                          train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    x = cnn_head_forward(params, cfg, features, train, rng)
    for i in range(cfg.n_layers):
        x = transformer_layer_forward(params, cfg, i, x, train, rng)
    return x


LstmState = tuple[tuple[Tensor, Tensor], ...]  # per layer (h, c), each (1, cell)


def initial_state(params: ParamTree, cfg: PredictionConfig) -> LstmState:
    zero = np.zeros((1, cfg.lstm_cell))
    return tuple((Tensor(zero.copy()), Tensor(zero.copy())) for _ in range(cfg.lstm_layers))


def _lstm_cell(params: ParamTree, layer: int, x: Tensor, h: Tensor, c: Tensor,
               cell: int) -> tuple[Tensor, Tensor]:
    p = f"pred.lstm{layer}"
    gates = ad.add(ad.add(ad.matmul(x, params[f"{p}.wx"]), ad.matmul(h, params[f"{p}.wh"])),
                   params[f"{p}.b"])
    i = ad.sigmoid(ad.narrow(gates, 1, 0, cell))
    f = ad.sigmoid(ad.narrow(gates, 1, cell, cell))
    g = ad.tanh(ad.narrow(gates, 1, 2 * cell, cell))
    o = ad.sigmoid(ad.narrow(gates, 1, 3 * cell, cell))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def prediction_forward(params: ParamTree, cfg: PredictionConfig, tokens,
                       state: LstmState | None = None, d_lm: int | None = None,
                       train: bool = False, rng: np.random.Generator | None = None
                       ) -> tuple[Tensor, LstmState]:
    """Run the label encoder.

    With `state=None` the input sequence is the start context followed by
    `tokens`, so the output has len(tokens)+1 rows; with a carried state only
    `tokens` are fed, making incremental decoding equal the whole-sequence
    call row for row.
    """
    tokens = tuple(int(t) for t in tokens)
    if d_lm is not None:
        for t in tokens:
            if not 1 <= t <= d_lm:
                raise ConfigError(f"prediction input id {t} outside [1, {d_lm}] (blank is not allowed)")
    elif any(t < 1 for t in tokens):
        raise ConfigError("prediction input contains the blank id")

    if state is None:
        inputs = (0,) + tokens  # row 0 of the embedding is the start context
        state = initial_state(params, cfg)
    else:
        inputs = tokens

    rows: list[Tensor] = []
    layer_states = list(state)
    for tok in inputs:
        x = ad.embedding(params["pred.embed"], np.array([tok]))
        x = _maybe_dropout(x, cfg.dropout, train, rng)
        for layer in range(cfg.lstm_layers):
            h, c = layer_states[layer]
            h, c = _lstm_cell(params, layer, x, h, c, cfg.lstm_cell)
            layer_states[layer] = (h, c)
            x = h
            if layer + 1 < cfg.lstm_layers:
                x = _maybe_dropout(x, cfg.dropout, train, rng)
        rows.append(x)
    if not rows:
        raise ConfigError("prediction_forward: nothing to feed (carried state with no tokens)")
    out = rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)
    return out, tuple(layer_states)


def joint_forward(params: ParamTree, cfg: JointConfig, f, g) -> tuple[Tensor, Tensor]:
    """Transducer logits and their softmax for rows or full grids.

    f: (D_TR,) or (T', D_TR); g: (D_PR,) or (U+1, D_PR). Row inputs give a
    (D_trans,) output; matrix inputs give the full (T', U+1, D_trans) grid.
    """
    f = f if isinstance(f, Tensor) else Tensor(np.asarray(f, dtype=np.float64))
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
    single = f.data.ndim == 1 and g.data.ndim == 1
    f2 = ad.reshape(f, (1, -1)) if f.data.ndim == 1 else f
    g2 = ad.reshape(g, (1, -1)) if g.data.ndim == 1 else g
    ft = ad.matmul(f2, params["joint.w_tr"])  # (T', D_J)
    gt = ad.matmul(g2, params["joint.w_pr"])  # (U+1, D_J)
    pre = ad.add(ad.reshape(ft, (ft.shape[0], 1, ft.shape[1])),
                 ad.reshape(gt, (1, gt.shape[0], gt.shape[1])))
    logits = ad.matmul(ad.tanh(pre), params["joint.w_o"])  # (T', U+1, D_trans)
    if single:
        logits = ad.reshape(logits, (logits.shape[-1],))
    return logits, ad.softmax(logits)


def joint_log_probs(params: ParamTree, cfg: JointConfig, f, g) -> Tensor:
    logits, _ = joint_forward(params, cfg, f, g)
    return ad.log_softmax(logits)


def ctc_classifier_forward(params: ParamTree, f) -> Tensor:
    return ad.softmax(ad.matmul(f, params["ctc.w"]))


def ctc_log_probs(params: ParamTree, f) -> Tensor:
    return ad.log_softmax(ad.matmul(f, params["ctc.w"]))


def lm_classifier_forward(params: ParamTree, g) -> Tensor:
    return ad.softmax(ad.matmul(g, params["lm.w"]))


def lm_log_probs(params: ParamTree, g) -> Tensor:
    return ad.log_softmax(ad.matmul(g, params["lm.w"]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ParamTree) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor.data, dtype="<f8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> ParamTree:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad or missing magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    tree = ParamTree()
    offset = 8
    while offset < len(raw):
        try:
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
            offset += 8 * count
        except (struct.error, ValueError) as err:
            raise DataError(f"{path}: truncated checkpoint at byte {offset}: {err}") from None
        tree.add(name, arr.copy())
    return tree
