"""The Q-network: spatial attention, dual-scale LSTM, fusion, weighted dueling.

Forward pipeline per observation window (T frames of C x H x W):

1. Spatial gate: A = sigmoid(conv1x1(F)), F_att = A * F (per-pixel rescale).
2. Frame embedding: 1x1 conv stack, flatten, linear, into a feature vector.
3. Short-horizon LSTM over every frame; long-horizon LSTM over the stream
   mean-pooled by `downsample` along time.
4. Fusion: the final short hidden state queries multi-head attention over
   all short hidden states plus the long states aligned to the short time
   base (hold the most recent completed long state; zeros before the
   first one completes).
5. Heads: V(s) scalar, A(s, a) vector, and a softmax weighting w(a|s);
   Q(s, a) = V(s) + w(a|s) * A(s, a). No mean-centering of advantages:
   the learned weighting replaces it.

`forward` re-drives whole windows (training); `step` advances one frame at
a time with persistent recurrent state (rollouts), giving identical token
arithmetic once the state is primed with a full window.
"""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import LstmCellParams, Tensor


@dataclass
class QNetConfig:
    height: int
    width: int
    in_channels: int = 4
    embed_channels: int = 8
    hidden_size: int = 64
    heads: int = 4
    downsample: int = 2
    seq_len: int = 10
    n_actions: int = 5
    attention_scale: float | None = None  # None: 1/d_head inside the fusion
    use_spatial_attention: bool = True  # False: identity gate (ablation)
    use_long_branch: bool = True  # False: short branch only, no fusion (ablation)

    def __post_init__(self):
        if min(self.height, self.width, self.in_channels, self.embed_channels,
               self.hidden_size, self.heads, self.n_actions) < 1:
            raise ValueError("all network dimensions must be positive")
        if self.hidden_size % self.heads != 0:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible "
                             f"by {self.heads} heads")
        if self.downsample < 1:
            raise ValueError("downsample factor must be >= 1")
        if self.seq_len < self.downsample or self.seq_len % self.downsample:
            raise ValueError(f"seq_len {self.seq_len} must be a positive "
                             f"multiple of downsample {self.downsample}")


class QNetParams:
    """All learnable tensors, addressable by name for sync and checkpoints."""

    def __init__(self, cfg: QNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        c, e, hid = cfg.in_channels, cfg.embed_channels, cfg.hidden_size
        flat = e * cfg.height * cfg.width
        relu_gain = np.sqrt(2.0)
        self.attn_kernel = nm.uniform_init((1, c), c, rng)
        self.embed_kernel = nm.uniform_init((e, c), c, rng, gain=relu_gain)
        self.embed_bias = Tensor(np.zeros(e), requires_grad=True)
        self.embed_linear = nm.uniform_init((flat, hid), flat, rng,
                                            gain=relu_gain)
        self.embed_linear_bias = Tensor(np.zeros(hid), requires_grad=True)
        self.short_lstm = LstmCellParams(hid, hid, rng)
        self.long_lstm = LstmCellParams(hid, hid, rng)
        self.fusion_wq = nm.uniform_init((hid, hid), hid, rng)
        self.fusion_wk = nm.uniform_init((hid, hid), hid, rng)
        self.fusion_wv = nm.uniform_init((hid, hid), hid, rng)
        self.fusion_wo = nm.uniform_init((hid, hid), hid, rng)
        # Head output layers start at zero: Q(s, .) == 0 and action weights
        # exactly uniform before training, which keeps the softmax weight
        # head away from its saturated (zero-gradient) regime early on.
        self.value_w1 = nm.uniform_init((hid, hid), hid, rng, gain=relu_gain)
        self.value_b1 = Tensor(np.zeros(hid), requires_grad=True)
        self.value_w2 = Tensor(np.zeros((hid, 1)), requires_grad=True)
        self.value_b2 = Tensor(np.zeros(1), requires_grad=True)
        self.advantage_w1 = nm.uniform_init((hid, hid), hid, rng,
                                            gain=relu_gain)
        self.advantage_b1 = Tensor(np.zeros(hid), requires_grad=True)
        self.advantage_w2 = Tensor(np.zeros((hid, cfg.n_actions)),
                                   requires_grad=True)
        self.advantage_b2 = Tensor(np.zeros(cfg.n_actions), requires_grad=True)
        self.weight_w1 = nm.uniform_init((hid, hid), hid, rng, gain=relu_gain)
        self.weight_b1 = Tensor(np.zeros(hid), requires_grad=True)
        self.weight_w2 = Tensor(np.zeros((hid, cfg.n_actions)),
                                requires_grad=True)
        self.weight_b2 = Tensor(np.zeros(cfg.n_actions), requires_grad=True)

    _GROUPS = ("attn_kernel", "embed_kernel", "embed_bias", "embed_linear",
               "embed_linear_bias", "fusion_wq", "fusion_wk", "fusion_wv",
               "fusion_wo", "value_w1", "value_b1", "value_w2", "value_b2",
               "advantage_w1", "advantage_b1", "advantage_w2", "advantage_b2",
               "weight_w1", "weight_b1", "weight_w2", "weight_b2")

    def named(self) -> dict[str, Tensor]:
        out = {name: getattr(self, name) for name in self._GROUPS}
        out["short_lstm_w"], out["short_lstm_b"] = self.short_lstm.w, self.short_lstm.b
        out["long_lstm_w"], out["long_lstm_b"] = self.long_lstm.w, self.long_lstm.b
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def copy_from(self, other: "QNetParams") -> None:
        mine, theirs = self.named(), other.named()
        for name, t in mine.items():
            if t.data.shape != theirs[name].data.shape:
                raise ValueError(f"shape mismatch for {name}")
            t.data[...] = theirs[name].data


def clone_params(params: QNetParams) -> QNetParams:
    out = QNetParams(params.cfg, np.random.default_rng(0))
    out.copy_from(params)
    return out


@dataclass
class RecurrentState:
    """Rollout-time state: recurrent cells plus fusion token windows."""

    short_h: np.ndarray
    short_c: np.ndarray
    long_h: np.ndarray
    long_c: np.ndarray
    pool_buffer: list = field(default_factory=list)
    phase: int = 0  # frames accumulated toward the next long-branch step
    short_tokens: deque = field(default_factory=deque)
    long_tokens: deque = field(default_factory=deque)


def init_state(cfg: QNetConfig) -> RecurrentState:
    hid = cfg.hidden_size
    return RecurrentState(
        short_h=np.zeros((1, hid)), short_c=np.zeros((1, hid)),
        long_h=np.zeros((1, hid)), long_c=np.zeros((1, hid)),
        short_tokens=deque(maxlen=cfg.seq_len),
        long_tokens=deque(maxlen=cfg.seq_len))


def _embed_frames(params: QNetParams, cfg: QNetConfig, flat_obs: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, hidden) feature vectors."""
    x = flat_obs
    if cfg.use_spatial_attention:
        gate = nm.sigmoid(nm.conv1x1(x, params.attn_kernel))  # (N, 1, H, W)
        x = gate * x
    e = nm.relu(nm.conv1x1(x, params.embed_kernel)
                + nm.reshape(params.embed_bias, (cfg.embed_channels, 1, 1)))
    n = e.data.shape[0]
    flat = nm.reshape(e, (n, cfg.embed_channels * cfg.height * cfg.width))
    return nm.relu(nm.matmul(flat, params.embed_linear) + params.embed_linear_bias)


def _mlp(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return nm.matmul(nm.relu(nm.matmul(x, w1) + b1), w2) + b2


def _heads(params: QNetParams, fused: Tensor):
    value = _mlp(fused, params.value_w1, params.value_b1,
                 params.value_w2, params.value_b2)
    advantage = _mlp(fused, params.advantage_w1, params.advantage_b1,
                     params.advantage_w2, params.advantage_b2)
    weights = nm.softmax(_mlp(fused, params.weight_w1, params.weight_b1,
                              params.weight_w2, params.weight_b2), axis=-1)
    q = value + weights * advantage
    return q, value, advantage, weights


def _fuse(params: QNetParams, cfg: QNetConfig, query: Tensor, tokens: Tensor) -> Tensor:
    """Attend from the current short state over the token window."""
    b = query.data.shape[0]
    q = nm.reshape(nm.matmul(query, params.fusion_wq), (b, 1, cfg.hidden_size))
    k = nm.matmul(tokens, params.fusion_wk)
    v = nm.matmul(tokens, params.fusion_wv)
    fused = nm.multi_head_attention(q, k, v, heads=cfg.heads,
                                    scale=cfg.attention_scale,
                                    w_out=params.fusion_wo)
    return nm.reshape(fused, (b, cfg.hidden_size))


def forward(params: QNetParams, obs_seq, state_h0=None):
    """Drive a full window: obs_seq (B, T, C, H, W) or (T, C, H, W).

    Recurrent cells start from zeros (or the optional (short_h, short_c,
    long_h, long_c) override). Returns (q: (B, A) Tensor, diagnostics dict
    with value/advantage/weights/fused Tensors).
    """
    cfg = params.cfg
    obs = obs_seq if isinstance(obs_seq, Tensor) else Tensor(np.asarray(obs_seq, dtype=np.float64))
    if obs.ndim == 4:
        obs = nm.reshape(obs, (1,) + obs.data.shape)
    b, t = obs.data.shape[0], obs.data.shape[1]
    if t != cfg.seq_len:
        raise ValueError(f"window length {t} != configured seq_len {cfg.seq_len}")
    if obs.data.shape[2:] != (cfg.in_channels, cfg.height, cfg.width):
        raise ValueError(f"frame shape {obs.data.shape[2:]} does not match config")
    hid = cfg.hidden_size

    flat = nm.reshape(obs, (b * t,) + obs.data.shape[2:])
    feat = nm.reshape(_embed_frames(params, cfg, flat), (b, t, hid))

    if state_h0 is None:
        zeros = lambda: Tensor(np.zeros((b, hid)))
        short_h, short_c, long_h, long_c = zeros(), zeros(), zeros(), zeros()
    else:
        short_h, short_c, long_h, long_c = state_h0

    short_states = []
    for i in range(t):
        short_h, short_c = nm.lstm_cell(feat[:, i], short_h, short_c,
                                        params.short_lstm)
        short_states.append(short_h)

    if not cfg.use_long_branch:
        fused = short_states[-1]
        q, value, advantage, weights = _heads(params, fused)
        return q, {"value": value, "advantage": advantage,
                   "weights": weights, "fused": fused}

    pooled = nm.downsample(feat, cfg.downsample)  # (B, T/d, hid)
    long_states = []
    for i in range(t // cfg.downsample):
        long_h, long_c = nm.lstm_cell(pooled[:, i], long_h, long_c,
                                      params.long_lstm)
        long_states.append(long_h)

    aligned = []
    hold = Tensor(np.zeros((b, hid)))
    for i in range(t):
        completed = (i + 1) // cfg.downsample
        if completed >= 1:
            hold = long_states[completed - 1]
        aligned.append(hold)

    tokens = nm.concat([nm.stack(short_states, axis=1),
                        nm.stack(aligned, axis=1)], axis=1)  # (B, 2T, hid)
    fused = _fuse(params, cfg, short_states[-1], tokens)
    q, value, advantage, weights = _heads(params, fused)
    return q, {"value": value, "advantage": advantage,
               "weights": weights, "fused": fused}


def step(params: QNetParams, frame: np.ndarray, state: RecurrentState):
    """Advance the rollout state by one frame; returns (q, fused) as arrays.

    Mirrors `forward` exactly once the state has seen seq_len frames: the
    long branch consumes mean-pooled groups of `downsample` consecutive
    embedded frames, and fusion attends over the last seq_len short tokens
    plus the held long tokens. Gradients are never recorded here.
    """
    cfg = params.cfg
    with nm.no_grad():
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (cfg.in_channels, cfg.height, cfg.width):
            raise ValueError(f"frame shape {frame.shape} does not match config")
        feat = _embed_frames(params, cfg, Tensor(frame[None]))  # (1, hid)

        short_h, short_c = nm.lstm_cell(
            feat, Tensor(state.short_h), Tensor(state.short_c), params.short_lstm)
        state.short_h, state.short_c = short_h.data, short_c.data
        state.short_tokens.append(short_h.data[0])

        if cfg.use_long_branch:
            state.pool_buffer.append(feat.data[0])
            state.phase += 1
            if state.phase == cfg.downsample:
                pooled = Tensor(np.mean(state.pool_buffer, axis=0, keepdims=True))
                long_h, long_c = nm.lstm_cell(
                    pooled, Tensor(state.long_h), Tensor(state.long_c),
                    params.long_lstm)
                state.long_h, state.long_c = long_h.data, long_c.data
                state.pool_buffer = []
                state.phase = 0
            state.long_tokens.append(state.long_h[0])
            tokens = Tensor(np.concatenate(
                [np.stack(state.short_tokens), np.stack(state.long_tokens)])[None])
            fused = _fuse(params, cfg, short_h, tokens)
        else:
            fused = short_h
        q, _, _, _ = _heads(params, fused)
    return q.data[0], fused.data[0]


def prime_state(params: QNetParams, frame: np.ndarray) -> RecurrentState:
    """Fresh episode state, warmed by repeating the first frame seq_len times.

    Makes the first decision consistent with the stored training windows,
    which pad short episodes by repeating their initial frame.
    """
    state = init_state(params.cfg)
    for _ in range(params.cfg.seq_len):
        step(params, frame, state)
    return state


def target_sync(online: QNetParams, target: QNetParams) -> None:
    """Hard copy of every parameter tensor."""
    target.copy_from(online)


def save_checkpoint(path, params: QNetParams) -> None:
    named = {name: t.data for name, t in params.named().items()}
    nm.save_tensors(path, named, meta={"qnet_config": asdict(params.cfg)})


def load_checkpoint(path) -> QNetParams:
    arrays, meta = nm.load_tensors(path)
    cfg = QNetConfig(**meta["qnet_config"])
    params = QNetParams(cfg, np.random.default_rng(0))
    for name, t in params.named().items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing tensor {name}")
        if arrays[name].shape != t.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: "
                             f"{arrays[name].shape} vs {t.data.shape}")
        t.data[...] = arrays[name]
    return params
