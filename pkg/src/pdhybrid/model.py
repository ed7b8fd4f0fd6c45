"""CNN / bidirectional-RNN / additive-attention classifier for 32 x 512 EEG segments.

Four stages:

* a 1-D VGG conv stack that turns [B, 32, 512] into [B, 512, 16],
* a bidirectional GRU (or LSTM) over the 16 resulting time steps,
* additive attention pooling the per-step states into one context vector,
* a small dense head ending in a sigmoid probability of PD.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import GruParams, LstmParams, ShapeError, Tensor

VGG_STAGES = {
    "vgg13": ((64, 64), (128, 128), (256, 256), (512, 512), (512, 512)),
    "vgg16": ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512)),
}
N_CHANNELS = 32
N_SAMPLES = 512


@dataclass
class HybridConfig:
    """Architecture hyperparameters; defaults are the tuned optimum."""
    conv_arch: str = "vgg13"
    rnn_kind: str = "gru"          # gru | lstm | none
    rnn_layers: int = 1
    rnn_units: int = 125
    bidirectional: bool = True
    attention_enabled: bool = True
    attention_nodes: int = 256
    fc_layers: int = 1
    fc_nodes: int = 512
    dropout_p: float = 0.5
    threshold: float = 0.5
    batchnorm: bool = True
    head: str = "mlp"              # mlp: dense layers of fc_nodes; linear: one direct 1-unit map

    def __post_init__(self):
        if self.conv_arch not in VGG_STAGES:
            raise ValueError(f"conv_arch must be one of {sorted(VGG_STAGES)}")
        if self.rnn_kind not in ("gru", "lstm", "none"):
            raise ValueError("rnn_kind must be gru, lstm or none")
        if not 1 <= self.rnn_layers <= 3:
            raise ValueError("rnn_layers must be in 1..3")
        if self.rnn_units < 1 or self.attention_nodes < 1 or self.fc_nodes < 1:
            raise ValueError("layer widths must be positive")
        if not 1 <= self.fc_layers <= 3:
            raise ValueError("fc_layers must be in 1..3")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.head not in ("mlp", "linear"):
            raise ValueError("head must be mlp or linear")
        if self.rnn_kind == "none" and self.attention_enabled:
            raise ValueError("attention needs a recurrent stage (rnn_kind != none)")

    @property
    def state_width(self) -> int:
        """Width of the per-step sequence features seen by attention / the head."""
        if self.rnn_kind == "none":
            return VGG_STAGES[self.conv_arch][-1][-1]
        return self.rnn_units * (2 if self.bidirectional else 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HybridConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _kaiming_uniform(rng, shape, fan_in, gain=np.sqrt(2.0)):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal_blocks(rng, n_gates, h):
    blocks = []
    for _ in range(n_gates):
        q, r = np.linalg.qr(rng.standard_normal((h, h)))
        blocks.append(q * np.sign(np.diag(r)))
    return np.concatenate(blocks, axis=0)


@dataclass
class HybridModel:
    """Parameters, batch-norm buffers and config of one network instance."""
    config: HybridConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: HybridConfig, seed: int = 0, dtype=np.float64) -> "HybridModel":
        rng = np.random.default_rng(seed)
        shapes = param_shapes(config)
        params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            kind = name.rsplit(".", 1)[-1]
            if kind in ("b", "bias", "b1", "beta"):
                arr = np.zeros(shape)
            elif kind == "gamma":
                arr = np.ones(shape)
            elif kind == "w_h":
                gates = 3 if config.rnn_kind == "gru" else 4
                arr = _orthogonal_blocks(rng, gates, shape[1])
            elif kind == "w_x":
                arr = _kaiming_uniform(rng, shape, shape[1], gain=1.0)
            elif kind == "weight" and len(shape) == 3:
                arr = _kaiming_uniform(rng, shape, shape[1] * shape[2])
            elif kind == "w2":
                arr = _kaiming_uniform(rng, shape, shape[0], gain=1.0)
            else:
                arr = _kaiming_uniform(rng, shape, shape[1])
            params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        buffers = {}
        if config.batchnorm:
            for name in shapes:
                if name.endswith(".gamma"):
                    stem = name[: -len(".gamma")]
                    buffers[stem + ".running_mean"] = np.zeros(shapes[name], dtype=dtype)
                    buffers[stem + ".running_var"] = np.ones(shapes[name], dtype=dtype)
        return cls(config, params, buffers)

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def parameter_list(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> "HybridModel":
        return HybridModel(
            HybridConfig.from_dict(self.config.to_dict()),
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None,
                trace: dict | None = None) -> Tensor:
        return forward(x, self, mode=mode, rng=rng, trace=trace)

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.forward(Tensor(np.asarray(x[i:i + batch_size], dtype=self.dtype))).data)
        return np.concatenate(out) if out else np.zeros(0)


def param_shapes(config: HybridConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter shape, derived from the config alone (insertion-ordered)."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = N_CHANNELS
    for s, stage in enumerate(VGG_STAGES[config.conv_arch]):
        for j, cout in enumerate(stage):
            stem = f"conv{s + 1}_{j + 1}"
            shapes[stem + ".weight"] = (cout, cin, 3)
            shapes[stem + ".bias"] = (cout,)
            if config.batchnorm:
                shapes[stem + ".gamma"] = (cout,)
                shapes[stem + ".beta"] = (cout,)
            cin = cout
    if config.rnn_kind != "none":
        gates = 3 if config.rnn_kind == "gru" else 4
        h = config.rnn_units
        din = cin
        dirs = ("fwd", "bwd") if config.bidirectional else ("fwd",)
        for layer in range(config.rnn_layers):
            for d in dirs:
                stem = f"rnn{layer + 1}.{d}"
                shapes[stem + ".w_x"] = (gates * h, din)
                shapes[stem + ".w_h"] = (gates * h, h)
                shapes[stem + ".b"] = (gates * h,)
            din = h * len(dirs)
    width = config.state_width
    if config.attention_enabled:
        shapes["attn.w1"] = (config.attention_nodes, width)
        shapes["attn.b1"] = (config.attention_nodes,)
        shapes["attn.w2"] = (config.attention_nodes,)
    din = width
    if config.head == "mlp":
        for i in range(config.fc_layers):
            shapes[f"fc{i + 1}.weight"] = (config.fc_nodes, din)
            shapes[f"fc{i + 1}.bias"] = (config.fc_nodes,)
            din = config.fc_nodes
    shapes["out.weight"] = (1, din)
    shapes["out.bias"] = (1,)
    return shapes


def parameter_count(config: HybridConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


# ----------------------------------------------------------------------------
# stages


def vgg13_encode(x: Tensor, model: HybridModel, training: bool = False,
                 first_preact: list | None = None) -> Tensor:
    """[B, 32, 512] -> [B, 512, 16]: conv(3, pad 1) [-> BN] -> ReLU blocks, a (2, 2) max-pool per stage."""
    if x.ndim != 3 or x.shape[1:] != (N_CHANNELS, N_SAMPLES):
        raise ShapeError("vgg13_encode", "input", (None, N_CHANNELS, N_SAMPLES), x.shape)
    p, cfg = model.params, model.config
    h = x
    for s, stage in enumerate(VGG_STAGES[cfg.conv_arch]):
        for j in range(len(stage)):
            stem = f"conv{s + 1}_{j + 1}"
            h = ad.conv1d(h, p[stem + ".weight"], p[stem + ".bias"], stride=1, padding=1)
            if first_preact is not None and not first_preact:
                first_preact.append(h)
            if cfg.batchnorm:
                h = ad.batchnorm1d(h, p[stem + ".gamma"], p[stem + ".beta"],
                                   model.buffers[stem + ".running_mean"],
                                   model.buffers[stem + ".running_var"], training)
            h = ad.relu(h)
        h = ad.maxpool1d(h, 2, 2)
    return h


def _run_direction(xproj: Tensor, cell, kind: str, reverse: bool) -> list[Tensor]:
    B, T, _ = xproj.shape
    H = cell.hidden
    zeros = Tensor(np.zeros((B, H), dtype=xproj.data.dtype))
    h, c = zeros, zeros
    outs: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        xt = xproj[:, t]
        if kind == "gru":
            h = ad.gru_cell(None, h, cell, x_proj=xt)
        else:
            h, c = ad.lstm_cell(None, h, c, cell, x_proj=xt)
        outs[t] = h
    return outs


def rnn_forward(seq: Tensor, model: HybridModel) -> tuple[Tensor, Tensor]:
    """Run the (bi)directional recurrent stack.

    Returns the per-step states [B, T, state_width] and the final summary
    [B, state_width] (forward direction's last state, backward direction's
    state after consuming the whole reversed sequence).
    """
    cfg, p = model.config, model.params
    kind = cfg.rnn_kind
    Cls = GruParams if kind == "gru" else LstmParams
    dirs = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
    h = seq
    for layer in range(cfg.rnn_layers):
        per_dir = []
        finals = []
        for d in dirs:
            stem = f"rnn{layer + 1}.{d}"
            cell = Cls(p[stem + ".w_x"], p[stem + ".w_h"], p[stem + ".b"])
            if h.shape[-1] != cell.w_x.shape[1]:
                raise ShapeError("rnn_forward", "features", cell.w_x.shape[1], h.shape[-1])
            xproj = ad.linear(h, cell.w_x, cell.b)
            outs = _run_direction(xproj, cell, kind, reverse=(d == "bwd"))
            per_dir.append(ad.stack(outs, axis=1))
            finals.append(outs[0] if d == "bwd" else outs[-1])
        h = per_dir[0] if len(per_dir) == 1 else ad.concat(per_dir, axis=2)
        final = finals[0] if len(finals) == 1 else ad.concat(finals, axis=1)
    return h, final


def bigru_forward(seq: Tensor, model: HybridModel) -> Tensor:
    """[B, 16, 512] -> [B, 16, 2H] with forward and time-aligned backward states."""
    if seq.ndim != 3:
        raise ShapeError("bigru_forward", "input rank", 3, seq.ndim)
    return rnn_forward(seq, model)[0]


def additive_attention(states: Tensor, model: HybridModel) -> tuple[Tensor, Tensor]:
    """Score each step with ``w2 . tanh(W1 h_t + b1)``; softmax; weighted sum of states."""
    p = model.params
    w1 = p["attn.w1"]
    if states.ndim != 3 or states.shape[-1] != w1.shape[1]:
        raise ShapeError("additive_attention", "state width", w1.shape[1], states.shape)
    hidden = ad.tanh(ad.linear(states, w1, p["attn.b1"]))            # B, T, A
    scores = ad.sum_axis(ad.mul(hidden, p["attn.w2"]), axis=-1)       # B, T
    weights = ad.softmax(scores)
    B, T = weights.shape
    context = ad.sum_axis(ad.mul(ad.reshape(weights, (B, T, 1)), states), axis=1)
    return context, weights


def classify_head(context: Tensor, model: HybridModel, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """dropout -> [dense -> ReLU] x fc_layers -> 1-unit linear -> sigmoid, giving [B]."""
    cfg, p = model.config, model.params
    if context.ndim != 2 or context.shape[1] != cfg.state_width:
        raise ShapeError("classify_head", "context width", cfg.state_width, context.shape)
    h = ad.dropout(context, cfg.dropout_p, training, rng)
    if cfg.head == "mlp":
        for i in range(cfg.fc_layers):
            h = ad.relu(ad.linear(h, p[f"fc{i + 1}.weight"], p[f"fc{i + 1}.bias"]))
    logit = ad.linear(h, p["out.weight"], p["out.bias"])
    return ad.sigmoid(ad.reshape(logit, (context.shape[0],)))


def forward(x, model: HybridModel, mode: str = "eval", rng: np.random.Generator | None = None,
            trace: dict | None = None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be train or eval")
    training = mode == "train"
    if training and model.config.dropout_p > 0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    expected = set(param_shapes(model.config))
    if expected != set(model.params):
        raise ValueError("parameters do not match the model config")
    cfg = model.config
    enc = vgg13_encode(x, model, training)
    if trace is not None:
        trace["encoded"] = enc.shape
    if cfg.rnn_kind == "none":
        head_in = ad.mean_axis(enc, axis=2)
    else:
        seq = ad.transpose(enc, (0, 2, 1))
        states, final = rnn_forward(seq, model)
        if trace is not None:
            trace["sequence"] = seq.shape
            trace["states"] = states.shape
        if cfg.attention_enabled:
            head_in, weights = additive_attention(states, model)
            if trace is not None:
                trace["attention_weights"] = weights
        else:
            head_in = final
    if trace is not None:
        trace["head_input"] = head_in.shape
    probs = classify_head(head_in, model, training, rng)
    if trace is not None:
        trace["probs"] = probs.shape
    return probs


def predict_label(probs, threshold: float = 0.5) -> np.ndarray:
    """1 (PD) iff prob >= threshold; exact ties go to PD."""
    probs = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (probs >= threshold).astype(np.int64)
