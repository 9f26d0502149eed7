"""Decoder-only causal transformer with exact analytic gradients.

Pre-norm residual blocks (layer-norm -> attention -> add, layer-norm -> MLP
-> add, final layer-norm), learned absolute position embeddings, GELU (tanh
approximation) feed-forward, and an output projection tied to the token
embedding. All math is float64 so finite-difference checks stay tight.

Row t of the logits depends only on ids[0..t]: future positions are masked
to -inf before the attention softmax, which zeroes their weights exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

LN_EPS = 1e-5
# gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715

CKPT_HEADER = b"ckpt-v1"

# Desk-scale default: same 12-layer/12-head family shape at reduced width.
DESK_CONFIG = dict(n_layers=4, n_heads=4, d_model=128, d_ff=512, context_len=256)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    context_len: int
    vocab_size: int
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.vocab_size) < 1:
            raise ValueError("config dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.context_len < 2:
            raise ValueError("context_len must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_names(cfg: ModelConfig) -> list[str]:
    """Canonical parameter order used by init, checkpoints, and the optimizer."""
    names = ["wte", "wpe"]
    for i in range(cfg.n_layers):
        names += [
            f"h{i}.ln1.g", f"h{i}.ln1.b",
            f"h{i}.wq", f"h{i}.wk", f"h{i}.wv", f"h{i}.wo",
            f"h{i}.ln2.g", f"h{i}.ln2.b",
            f"h{i}.w1", f"h{i}.b1", f"h{i}.w2", f"h{i}.b2",
        ]
    names += ["lnf.g", "lnf.b"]
    return names


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def clone(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(cfg: ModelConfig, seed: int) -> TransformerModel:
    """Weights ~ N(0, 0.02); layer-norm scales 1, shifts and biases 0."""
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff
    p: dict[str, np.ndarray] = {}
    p["wte"] = rng.normal(0.0, 0.02, (cfg.vocab_size, d))
    p["wpe"] = rng.normal(0.0, 0.02, (cfg.context_len, d))
    for i in range(cfg.n_layers):
        p[f"h{i}.ln1.g"] = np.ones(d)
        p[f"h{i}.ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            p[f"h{i}.{w}"] = rng.normal(0.0, 0.02, (d, d))
        p[f"h{i}.ln2.g"] = np.ones(d)
        p[f"h{i}.ln2.b"] = np.zeros(d)
        p[f"h{i}.w1"] = rng.normal(0.0, 0.02, (d, f))
        p[f"h{i}.b1"] = np.zeros(f)
        p[f"h{i}.w2"] = rng.normal(0.0, 0.02, (f, d))
        p[f"h{i}.b2"] = np.zeros(d)
    p["lnf.g"] = np.ones(d)
    p["lnf.b"] = np.zeros(d)
    return TransformerModel(cfg, p)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)

def _layernorm_back(dy, cache, g):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db

def _gelu(x):
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    return 0.5 * x * (1.0 + t), t

def _gelu_back(dy, x, t):
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, cfg):
    b, t, _ = x.shape
    return x.reshape(b, t, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)

def _merge_heads(x, cfg):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _forward_batch(model: TransformerModel, ids: np.ndarray):
    """ids (B, T) int -> logits (B, T, V) plus the cache needed for backward."""
    cfg, p = model.config, model.params
    b, t = ids.shape
    scale = 1.0 / np.sqrt(cfg.head_dim)
    future = np.triu(np.ones((t, t), dtype=bool), k=1)

    x = p["wte"][ids] + p["wpe"][:t]
    layers = []
    for i in range(cfg.n_layers):
        h = f"h{i}"
        a, ln1 = _layernorm(x, p[f"{h}.ln1.g"], p[f"{h}.ln1.b"])
        q, k, v = a @ p[f"{h}.wq"], a @ p[f"{h}.wk"], a @ p[f"{h}.wv"]
        qh, kh, vh = (_split_heads(z, cfg) for z in (q, k, v))
        scores = np.einsum("bhtd,bhsd->bhts", qh, kh) * scale
        scores[:, :, future] = -np.inf
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(np.einsum("bhts,bhsd->bhtd", attn, vh), cfg)
        x_mid = x + ctx @ p[f"{h}.wo"]

        bb, ln2 = _layernorm(x_mid, p[f"{h}.ln2.g"], p[f"{h}.ln2.b"])
        f1 = bb @ p[f"{h}.w1"] + p[f"{h}.b1"]
        gact, tanh = _gelu(f1)
        x_out = x_mid + gact @ p[f"{h}.w2"] + p[f"{h}.b2"]
        layers.append((a, ln1, qh, kh, vh, attn, ctx, bb, ln2, f1, gact, tanh))
        x = x_out

    xf, lnf = _layernorm(x, p["lnf.g"], p["lnf.b"])
    logits = xf @ p["wte"].T
    return logits, (ids, layers, xf, lnf)


def _backward_batch(model: TransformerModel, dlogits: np.ndarray, cache):
    cfg, p = model.config, model.params
    ids, layers, xf, lnf = cache
    scale = 1.0 / np.sqrt(cfg.head_dim)
    g = {name: np.zeros_like(p[name]) for name in p}

    g["wte"] += np.einsum("btv,btd->vd", dlogits, xf)
    dxf = dlogits @ p["wte"]
    dx, g["lnf.g"], g["lnf.b"] = _layernorm_back(dxf, lnf, p["lnf.g"])

    for i in reversed(range(cfg.n_layers)):
        h = f"h{i}"
        a, ln1, qh, kh, vh, attn, ctx, bb, ln2, f1, gact, tanh = layers[i]

        # MLP block: x_out = x_mid + gelu(ln2(x_mid) @ w1 + b1) @ w2 + b2
        g[f"{h}.b2"] += dx.sum(axis=(0, 1))
        g[f"{h}.w2"] += np.einsum("btf,btd->fd", gact, dx)
        dgact = dx @ p[f"{h}.w2"].T
        df1 = _gelu_back(dgact, f1, tanh)
        g[f"{h}.b1"] += df1.sum(axis=(0, 1))
        g[f"{h}.w1"] += np.einsum("btd,btf->df", bb, df1)
        dbb = df1 @ p[f"{h}.w1"].T
        dmid, g[f"{h}.ln2.g"], g[f"{h}.ln2.b"] = _layernorm_back(dbb, ln2, p[f"{h}.ln2.g"])
        dx = dx + dmid

        # attention block: x_mid = x_in + merge_heads(attn @ vh) @ wo
        g[f"{h}.wo"] += np.einsum("btd,bte->de", ctx, dx)
        dctx = _split_heads(dx @ p[f"{h}.wo"].T, cfg)
        dattn = np.einsum("bhtd,bhsd->bhts", dctx, vh)
        dvh = np.einsum("bhts,bhtd->bhsd", attn, dctx)
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dqh = np.einsum("bhts,bhsd->bhtd", dscores, kh) * scale
        dkh = np.einsum("bhts,bhtd->bhsd", dscores, _split_heads(a @ p[f"{h}.wq"], cfg)) * scale
        dq = _merge_heads(dqh, cfg)
        dk = _merge_heads(dkh, cfg)
        dv = _merge_heads(dvh, cfg)
        g[f"{h}.wq"] += np.einsum("btd,bte->de", a, dq)
        g[f"{h}.wk"] += np.einsum("btd,bte->de", a, dk)
        g[f"{h}.wv"] += np.einsum("btd,bte->de", a, dv)
        da = dq @ p[f"{h}.wq"].T + dk @ p[f"{h}.wk"].T + dv @ p[f"{h}.wv"].T
        din, g[f"{h}.ln1.g"], g[f"{h}.ln1.b"] = _layernorm_back(da, ln1, p[f"{h}.ln1.g"])
        dx = dx + din

    t = ids.shape[1]
    g["wpe"][:t] += dx.sum(axis=0)
    flat_ids = ids.reshape(-1)
    np.add.at(g["wte"], flat_ids, dx.reshape(-1, dx.shape[-1]))
    return g


def _validate_ids(cfg: ModelConfig, ids) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("ids must be a non-empty sequence")
    if arr.size > cfg.context_len:
        raise ValueError("sequence too long")
    if arr.min() < 0 or arr.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    return arr


def forward(model: TransformerModel, ids) -> np.ndarray:
    """Token ids (length T <= context_len) -> logits (T, vocab_size)."""
    arr = _validate_ids(model.config, ids)
    logits, _ = _forward_batch(model, arr[None, :])
    return logits[0]


def _pad_batch(cfg: ModelConfig, examples):
    """Stack examples; per-row loss weights make the batch loss a mean of
    per-example mean masked NLLs."""
    n = len(examples)
    tmax = max(len(ex.input_ids) for ex in examples)
    if tmax > cfg.context_len:
        raise ValueError("sequence too long")
    ids = np.zeros((n, tmax), dtype=np.int64)
    weights = np.zeros((n, tmax))  # weight on logits row p for target ids[p+1]
    for row, ex in enumerate(examples):
        t = len(ex.input_ids)
        if len(ex.loss_mask) != t:
            raise ValueError("loss mask length mismatch")
        ids[row, :t] = ex.input_ids
        supervised = [p for p in range(1, t) if ex.loss_mask[p]]
        if not supervised:
            raise ValueError("no supervised positions")
        for p in supervised:
            weights[row, p - 1] = 1.0 / (n * len(supervised))
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    return ids, weights


def _loss_from_logits(logits, ids, weights):
    b, t, _ = logits.shape
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    lse = m[..., 0] + np.log(e.sum(axis=-1))
    targets = np.zeros((b, t), dtype=np.int64)
    targets[:, :-1] = ids[:, 1:]
    bi, ti = np.indices((b, t))
    nll = lse - logits[bi, ti, targets]
    loss = float((weights * nll).sum())
    probs = e / e.sum(axis=-1, keepdims=True)
    dlogits = probs * weights[..., None]
    dlogits[bi, ti, targets] -= weights
    return loss, dlogits, nll


def loss_and_grads_batch(model: TransformerModel, examples):
    """Mean over examples of the per-example mean masked NLL, with exact
    gradients for every parameter."""
    ids, weights = _pad_batch(model.config, examples)
    logits, cache = _forward_batch(model, ids)
    loss, dlogits, _ = _loss_from_logits(logits, ids, weights)
    grads = _backward_batch(model, dlogits, cache)
    return loss, grads


def loss_and_grads(model: TransformerModel, example):
    """Single-example loss: mean over masked positions t of
    -log softmax(logits[t-1])[ids[t]]."""
    if len(example.input_ids) < 2:
        raise ValueError("example too short")
    return loss_and_grads_batch(model, [example])


def masked_nll(model: TransformerModel, examples, batch_size: int = 32):
    """(total negative log-likelihood, total token count) over masked targets."""
    total, count = 0.0, 0
    for start in range(0, len(examples), batch_size):
        batch = examples[start : start + batch_size]
        ids, weights = _pad_batch(model.config, batch)
        logits, _ = _forward_batch(model, ids)
        _, _, nll = _loss_from_logits(logits, ids, weights)
        supervised = weights > 0
        total += float(nll[supervised].sum())
        count += int(supervised.sum())
    return total, count


# ---------------------------------------------------------------------------
# Incremental decoding with a per-layer key/value cache.

class DecodeState:
    def __init__(self, model: TransformerModel):
        cfg = model.config
        self.pos = 0
        self.k = [np.empty((cfg.context_len, cfg.n_heads, cfg.head_dim)) for _ in range(cfg.n_layers)]
        self.v = [np.empty((cfg.context_len, cfg.n_heads, cfg.head_dim)) for _ in range(cfg.n_layers)]


def decode_prefill(model: TransformerModel, ids) -> tuple[DecodeState, np.ndarray]:
    """Run the prefix once; returns the cache and the last position's logits."""
    arr = _validate_ids(model.config, ids)
    cfg = model.config
    logits, (_, layers, _, _) = _forward_batch(model, arr[None, :])
    state = DecodeState(model)
    state.pos = arr.size
    for i, layer in enumerate(layers):
        kh, vh = layer[3], layer[4]  # (1, H, T, dh)
        state.k[i][: arr.size] = kh[0].transpose(1, 0, 2)
        state.v[i][: arr.size] = vh[0].transpose(1, 0, 2)
    return state, logits[0, -1]


def decode_step(model: TransformerModel, state: DecodeState, token_id: int) -> np.ndarray:
    """Append one token to the cached context and return its logits row."""
    cfg, p = model.config, model.params
    if state.pos >= cfg.context_len:
        raise ValueError("sequence too long")
    if not 0 <= token_id < cfg.vocab_size:
        raise ValueError("token id out of range")
    scale = 1.0 / np.sqrt(cfg.head_dim)
    pos = state.pos
    x = p["wte"][token_id] + p["wpe"][pos]
    for i in range(cfg.n_layers):
        h = f"h{i}"
        a, _ = _layernorm(x, p[f"{h}.ln1.g"], p[f"{h}.ln1.b"])
        q = (a @ p[f"{h}.wq"]).reshape(cfg.n_heads, cfg.head_dim)
        state.k[i][pos] = (a @ p[f"{h}.wk"]).reshape(cfg.n_heads, cfg.head_dim)
        state.v[i][pos] = (a @ p[f"{h}.wv"]).reshape(cfg.n_heads, cfg.head_dim)
        kh = state.k[i][: pos + 1]  # (t, H, dh)
        vh = state.v[i][: pos + 1]
        scores = np.einsum("hd,thd->ht", q, kh) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx = np.einsum("ht,thd->hd", attn, vh).reshape(cfg.d_model)
        x = x + ctx @ p[f"{h}.wo"]
        bb, _ = _layernorm(x, p[f"{h}.ln2.g"], p[f"{h}.ln2.b"])
        gact, _ = _gelu(bb @ p[f"{h}.w1"] + p[f"{h}.b1"])
        x = x + gact @ p[f"{h}.w2"] + p[f"{h}.b2"]
    xf, _ = _layernorm(x, p["lnf.g"], p["lnf.b"])
    state.pos = pos + 1
    return xf @ p["wte"].T


# ---------------------------------------------------------------------------
# Checkpoints: "ckpt-v1" header, config as key=value lines, then named
# tensors as (name, shape, row-major float64 little-endian). Byte-stable.

_CONFIG_KEYS = ("n_layers", "n_heads", "d_model", "d_ff", "context_len", "vocab_size", "dropout")


def save_checkpoint(path: str, config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_HEADER + b"\n")
        for key in _CONFIG_KEYS:
            fh.write(f"{key}={getattr(config, key)!r}\n".encode())
        fh.write(b"#tensors\n")
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            shape = "x".join(str(d) for d in arr.shape) or "scalar"
            fh.write(f"{name} {shape}\n".encode())
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = io.BufferedReader(io.BytesIO(fh.read()))
    if buf.readline().rstrip(b"\n") != CKPT_HEADER:
        raise ValueError("not a checkpoint file: bad header")
    fields: dict = {}
    while True:
        line = buf.readline().rstrip(b"\n")
        if line == b"#tensors":
            break
        if not line:
            raise ValueError("truncated checkpoint: missing tensor section")
        key, value = line.decode().split("=", 1)
        fields[key] = float(value) if key == "dropout" else int(value)
    config = ModelConfig(**fields)
    tensors: dict[str, np.ndarray] = {}
    while True:
        line = buf.readline()
        if not line:
            break
        name, shape_text = line.rstrip(b"\n").decode().split(" ")
        shape = () if shape_text == "scalar" else tuple(int(d) for d in shape_text.split("x"))
        n_bytes = 8 * int(np.prod(shape)) if shape else 8
        raw = buf.read(n_bytes)
        if len(raw) != n_bytes:
            raise ValueError(f"truncated checkpoint tensor: {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return config, tensors


def save_model(path: str, model: TransformerModel, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = dict(model.params)
    if extra:
        tensors.update(extra)
    save_checkpoint(path, model.config, tensors)


def load_model(path: str) -> tuple[TransformerModel, dict[str, np.ndarray]]:
    """Returns the model plus any non-parameter tensors (e.g. optimizer state)."""
    config, tensors = load_checkpoint(path)
    names = set(param_names(config))
    params = {k: v for k, v in tensors.items() if k in names}
    missing = names - set(params)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
    extra = {k: v for k, v in tensors.items() if k not in names}
    return TransformerModel(config, params), extra
