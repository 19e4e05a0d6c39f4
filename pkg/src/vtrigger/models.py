"""Model graphs: BiLSTM baseline, self-attention encoder, training-only
decoder and the sequence-level trigger head.

A :class:`ModelGraph` is a flat ``name -> array`` parameter table plus the
configs that determine every tensor's shape. Forward functions that are
used in training return a cache; the matching ``*_backward`` turns an
upstream gradient into a gradient table keyed like ``params``.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint, nn
from .errors import FormatError
from .frontend import FrontendConfig, positional_encoding

ARCHS = ("bilstm", "sa-encoder", "tf-encoder")
BOS = 0  # decoder vocabulary: 0 = BOS, 1..n_phones = phones, n_phones + 1 = EOS


@dataclass
class EncoderConfig:
    n_layers: int = 6
    d_model: int = 256
    n_heads: int = 4
    d_head: int = 64
    d_ff: int = 1024
    input_dim: int = 280
    n_outputs: int = 54

    def __post_init__(self):
        if min(asdict(self).values()) <= 0:
            raise ValueError(f"encoder dimensions must be positive: {self}")
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(f"n_heads * d_head = {self.n_heads * self.d_head} != d_model {self.d_model}")


@dataclass
class DecoderConfig:
    n_layers: int = 6
    d_model: int = 256
    n_heads: int = 4
    d_head: int = 64
    d_ff: int = 1024
    vocab: int = 55  # 53 phones + BOS + EOS

    @classmethod
    def matching(cls, enc: EncoderConfig, n_layers: int | None = None) -> "DecoderConfig":
        return cls(n_layers=enc.n_layers if n_layers is None else n_layers, d_model=enc.d_model,
                   n_heads=enc.n_heads, d_head=enc.d_head, d_ff=enc.d_ff, vocab=enc.n_outputs + 1)

    @property
    def eos(self) -> int:
        return self.vocab - 1


@dataclass
class BiLstmConfig:
    n_layers: int = 4
    units_per_direction: int = 256
    input_dim: int = 280
    n_outputs: int = 54

    def __post_init__(self):
        if min(asdict(self).values()) <= 0:
            raise ValueError(f"BiLSTM dimensions must be positive: {self}")


@dataclass
class ModelGraph:
    arch: str
    config: EncoderConfig | BiLstmConfig
    params: dict[str, np.ndarray]
    decoder: DecoderConfig | None = None
    mtl: bool = False
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    meta: dict = field(default_factory=dict)

    @property
    def is_encoder(self) -> bool:
        return self.arch != "bilstm"

    @property
    def trunk_dim(self) -> int:
        if self.is_encoder:
            return self.config.d_model
        return 2 * self.config.units_per_direction

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelGraph":
        m = copy.copy(self)
        m.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return m


def _prefixed(prefix: str, d: dict) -> dict:
    return {prefix + k: v for k, v in d.items()}


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# shapes and construction


def _attention_shapes(d_model, inner):
    return {"Wq": (d_model, inner), "bq": (inner,), "Wk": (d_model, inner), "bk": (inner,),
            "Wv": (d_model, inner), "bv": (inner,), "Wo": (inner, d_model), "bo": (d_model,)}


def _ff_ln_shapes(d_model, d_ff, ln_names):
    s = {"ff1.W": (d_model, d_ff), "ff1.b": (d_ff,), "ff2.W": (d_ff, d_model), "ff2.b": (d_model,)}
    for ln in ln_names:
        s[f"{ln}.g"] = (d_model,)
        s[f"{ln}.b"] = (d_model,)
    return s


def param_shapes(arch: str, config, decoder: DecoderConfig | None = None, mtl: bool = False) -> dict:
    """Ordered ``name -> shape`` table for an architecture."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    shapes: dict[str, tuple] = {}
    if arch == "bilstm":
        H = config.units_per_direction
        d_in = config.input_dim
        for i in range(config.n_layers):
            for direction in ("fwd", "bwd"):
                shapes[f"lstm.{i}.{direction}.W"] = (d_in + H, 4 * H)
                shapes[f"lstm.{i}.{direction}.b"] = (4 * H,)
            d_in = 2 * H
        trunk = 2 * H
    else:
        c = config
        inner = c.n_heads * c.d_head
        shapes["enc.in.W"] = (c.input_dim, c.d_model)
        shapes["enc.in.b"] = (c.d_model,)
        for i in range(c.n_layers):
            shapes.update(_prefixed(f"enc.{i}.attn.", _attention_shapes(c.d_model, inner)))
            shapes.update(_prefixed(f"enc.{i}.", _ff_ln_shapes(c.d_model, c.d_ff, ("ln1", "ln2"))))
        trunk = c.d_model
    shapes["out.W"] = (trunk, config.n_outputs)
    shapes["out.b"] = (config.n_outputs,)
    if decoder is not None:
        if arch == "bilstm":
            raise ValueError("the decoder is defined on the self-attention trunk only")
        if decoder.d_model != config.d_model:
            raise ValueError("decoder width must equal encoder width")
        d = decoder
        inner = d.n_heads * d.d_head
        shapes["dec.emb"] = (d.vocab, d.d_model)
        for i in range(d.n_layers):
            shapes.update(_prefixed(f"dec.{i}.self.", _attention_shapes(d.d_model, inner)))
            shapes.update(_prefixed(f"dec.{i}.cross.", _attention_shapes(d.d_model, inner)))
            shapes.update(_prefixed(f"dec.{i}.", _ff_ln_shapes(d.d_model, d.d_ff, ("ln1", "ln2", "ln3"))))
        shapes["dec.out.W"] = (d.d_model, d.vocab)
        shapes["dec.out.b"] = (d.vocab,)
    if mtl:
        shapes["mtl.W"] = (trunk, 1)
        shapes["mtl.b"] = (1,)
    return shapes


def _init_tensor(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith("lstm."):
        H = shape[-1] // 4
        if leaf == "b":
            b = np.zeros(shape)
            b[H:2 * H] = 1.0  # forget-gate bias
            return b
        lim = 1.0 / np.sqrt(H)
        return rng.uniform(-lim, lim, size=shape)
    if leaf == "g":
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    if leaf == "emb":
        return rng.normal(0.0, shape[1] ** -0.5, size=shape)
    lim = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-lim, lim, size=shape)


def build_model(arch: str, config=None, *, decoder: DecoderConfig | None = None, mtl: bool = False,
                seed: int = 0, frontend: FrontendConfig | None = None) -> ModelGraph:
    """Assemble and initialize a model (Glorot-uniform matrices, zero biases).

    ``tf-encoder`` gets a decoder matching the encoder unless one is given.
    """
    if config is None:
        config = BiLstmConfig() if arch == "bilstm" else EncoderConfig()
    if arch == "tf-encoder" and decoder is None:
        decoder = DecoderConfig.matching(config)
    rng = np.random.default_rng(seed)
    shapes = param_shapes(arch, config, decoder, mtl)
    params = {name: _init_tensor(name, shape, rng) for name, shape in shapes.items()}
    return ModelGraph(arch, config, params, decoder, mtl, frontend=frontend or FrontendConfig(),
                      meta={"seed": seed})


def count_params(m: ModelGraph) -> int:
    return int(sum(v.size for v in m.params.values()))


def param_table(m: ModelGraph) -> list[tuple[str, tuple, int]]:
    return [(k, tuple(v.shape), int(v.size)) for k, v in m.params.items()]


def export_inference(m: ModelGraph) -> ModelGraph:
    """Encoder-only copy: decoder and trigger-head tensors are dropped."""
    keep = param_shapes(m.arch, m.config)
    out = copy.copy(m)
    out.params = {k: m.params[k].copy() for k in keep}
    out.decoder = None
    out.mtl = False
    out.meta = dict(m.meta, inference_export=True)
    return out


# ---------------------------------------------------------------------------
# encoder


def _relu(x):
    return np.maximum(x, 0.0)


def _block_ff(h, p, prefix):
    f1, c1 = nn.linear(h, p[prefix + "ff1.W"], p[prefix + "ff1.b"])
    r = _relu(f1)
    f2, c2 = nn.linear(r, p[prefix + "ff2.W"], p[prefix + "ff2.b"])
    return f2, (c1, f1, c2)


def _block_ff_backward(dout, cache, prefix, grads):
    c1, f1, c2 = cache
    dr, grads[prefix + "ff2.W"], grads[prefix + "ff2.b"] = nn.linear_backward(dout, c2)
    dh, grads[prefix + "ff1.W"], grads[prefix + "ff1.b"] = nn.linear_backward(dr * (f1 > 0), c1)
    return dh


def _ln(x, p, name):
    return nn.layer_norm(x, p[name + ".g"], p[name + ".b"])


def _ln_backward(dout, cache, name, grads):
    dx, grads[name + ".g"], grads[name + ".b"] = nn.layer_norm_backward(dout, cache)
    return dx


def _check_input(x, width, what, lengths):
    if x.ndim not in (2, 3) or x.shape[-1] != width:
        raise ValueError(f"{what} expects input width {width}, got shape {x.shape}")
    if x.shape[-2] == 0:
        raise ValueError(f"{what} input has zero frames")
    if lengths is not None:
        lengths = np.asarray(lengths)
        if x.ndim != 3 or lengths.shape != (x.shape[0],):
            raise ValueError("lengths need a (B, T, D) input and one entry per row")
        if lengths.min() < 1 or lengths.max() > x.shape[1]:
            raise ValueError(f"sequence lengths must lie in [1, {x.shape[1]}]")
    return lengths


def encoder_trunk(m: ModelGraph, x: np.ndarray, lengths=None):
    """Input projection and the self-attention stack.

    ``x`` is (T, input_dim) or a padded (B, T, input_dim) batch with per-row
    ``lengths``; returns (trunk output of matching shape, cache).
    """
    c = m.config
    lengths = _check_input(x, c.input_dim, "encoder", lengths)
    mask = None if lengths is None else nn.lengths_to_mask(lengths, x.shape[1])
    p = m.params
    h, cin = nn.linear(x, p["enc.in.W"], p["enc.in.b"])
    caches = []
    for i in range(c.n_layers):
        pre = f"enc.{i}."
        a, ca = nn.multi_head_attention(h, h, _sub(p, pre + "attn."), c.n_heads, key_mask=mask)
        h1, cl1 = _ln(h + a, p, pre + "ln1")
        f, cf = _block_ff(h1, p, pre)
        h, cl2 = _ln(h1 + f, p, pre + "ln2")
        caches.append((ca, cl1, cf, cl2))
    return h, (cin, caches)


def encoder_trunk_backward(m: ModelGraph, dh: np.ndarray, cache, grads: dict) -> np.ndarray:
    cin, caches = cache
    for i in range(m.config.n_layers - 1, -1, -1):
        pre = f"enc.{i}."
        ca, cl1, cf, cl2 = caches[i]
        dr2 = _ln_backward(dh, cl2, pre + "ln2", grads)
        dh1 = dr2 + _block_ff_backward(dr2, cf, pre, grads)
        dr1 = _ln_backward(dh1, cl1, pre + "ln1", grads)
        dq, dkv, ga = nn.multi_head_attention_backward(dr1, ca)
        grads.update(_prefixed(pre + "attn.", ga))
        dh = dr1 + dq + dkv
    dx, grads["enc.in.W"], grads["enc.in.b"] = nn.linear_backward(dh, cin)
    return dx


# ---------------------------------------------------------------------------
# BiLSTM


def bilstm_trunk(m: ModelGraph, x: np.ndarray, lengths=None):
    c = m.config
    lengths = _check_input(x, c.input_dim, "BiLSTM", lengths)
    p = m.params
    h = x
    caches = []
    for i in range(c.n_layers):
        h, cache = nn.bilstm_layer(h, _sub(p, f"lstm.{i}.fwd."), _sub(p, f"lstm.{i}.bwd."), lengths)
        caches.append(cache)
    return h, caches


def bilstm_trunk_backward(m: ModelGraph, dh, caches, grads: dict):
    for i in range(m.config.n_layers - 1, -1, -1):
        dh, gf, gb = nn.bilstm_layer_backward(dh, caches[i])
        grads.update(_prefixed(f"lstm.{i}.fwd.", gf))
        grads.update(_prefixed(f"lstm.{i}.bwd.", gb))
    return dh


# ---------------------------------------------------------------------------
# dispatch, heads


def trunk_forward(m: ModelGraph, x, lengths=None):
    return encoder_trunk(m, x, lengths) if m.is_encoder else bilstm_trunk(m, x, lengths)


def trunk_backward(m: ModelGraph, dh, cache, grads):
    if m.is_encoder:
        return encoder_trunk_backward(m, dh, cache, grads)
    return bilstm_trunk_backward(m, dh, cache, grads)


def phone_head(m: ModelGraph, h):
    z, c = nn.linear(h, m.params["out.W"], m.params["out.b"])
    logp = nn.log_softmax(z)
    return logp, (c, logp)


def phone_head_backward(dlogp, cache, grads):
    c, logp = cache
    dz = nn.log_softmax_backward(dlogp, logp)
    dh, grads["out.W"], grads["out.b"] = nn.linear_backward(dz, c)
    return dh


def encoder_forward(x, m: ModelGraph) -> np.ndarray:
    """Per-frame log-posteriors (T x n_outputs) from the self-attention encoder."""
    if not m.is_encoder:
        raise ValueError(f"encoder_forward called on a {m.arch} model")
    h, _ = encoder_trunk(m, x)
    return phone_head(m, h)[0]


def bilstm_forward(x, m: ModelGraph) -> np.ndarray:
    if m.is_encoder:
        raise ValueError(f"bilstm_forward called on a {m.arch} model")
    h, _ = bilstm_trunk(m, x)
    return phone_head(m, h)[0]


def forward(m: ModelGraph, x, lengths=None) -> np.ndarray:
    """Log-posteriors for one sequence or a padded batch (rows past a length are junk)."""
    h, _ = trunk_forward(m, x, lengths)
    return phone_head(m, h)[0]


def mtl_logit(m: ModelGraph, h, lengths=None):
    """Mean-pool over (real) frames, then the linear classifier.

    ``h`` (T, d) gives a float logit; a padded (B, T, d) batch gives (B,) logits.
    """
    if h.shape[-2] == 0:
        raise ValueError("trigger head needs at least one frame")
    single = h.ndim == 2
    hb = h[None] if single else h
    B, T, _ = hb.shape
    w = np.ones((B, T)) if lengths is None else nn.lengths_to_mask(lengths, T).astype(float)
    w /= w.sum(axis=1, keepdims=True)
    pooled = np.einsum("bt,btd->bd", w, hb)
    z = (pooled @ m.params["mtl.W"] + m.params["mtl.b"])[:, 0]
    return (float(z[0]) if single else z), (pooled, w, single)


def mtl_logit_backward(m: ModelGraph, dz, cache, grads):
    pooled, w, single = cache
    dz = np.atleast_1d(np.asarray(dz, dtype=pooled.dtype))
    grads["mtl.W"] = pooled.T @ dz[:, None]
    grads["mtl.b"] = np.array([dz.sum()])
    dpooled = dz[:, None] * m.params["mtl.W"][:, 0][None, :]
    dh = w[:, :, None] * dpooled[:, None, :]
    return dh[0] if single else dh


def mtl_forward(enc, m: ModelGraph) -> float:
    """Trigger probability from mean-pooled trunk frames."""
    z, _ = mtl_logit(m, np.asarray(enc))
    return float(nn.sigmoid(z))


# ---------------------------------------------------------------------------
# decoder


def decoder_forward(enc, tokens_in, m: ModelGraph, enc_lengths=None):
    """Teacher-forced decoder pass.

    ``tokens_in`` starts with BOS; returns (U x vocab log-probs, cache) where
    row u predicts the token following ``tokens_in[u]``. Batched use: ``enc``
    is (B, T, d) with ``enc_lengths`` and ``tokens_in`` is (B, U) padded at
    the end with any valid token (the causal mask keeps padding invisible).
    """
    d = m.decoder
    if d is None:
        raise ValueError("model has no decoder")
    tokens_in = np.asarray(tokens_in, dtype=np.int64)
    if tokens_in.size == 0:
        raise ValueError("decoder target sequence is empty")
    if np.any(tokens_in[..., 0] != BOS):
        raise ValueError("decoder input must begin with BOS")
    if tokens_in.ndim != enc.ndim - 1:
        raise ValueError("token array and encoder output disagree on batching")
    if np.any(tokens_in < 0) or np.any(tokens_in >= d.vocab):
        raise ValueError(f"decoder tokens must lie in [0, {d.vocab})")
    p = m.params
    U = tokens_in.shape[-1]
    mask = None if enc_lengths is None else nn.lengths_to_mask(enc_lengths, enc.shape[1])
    y = p["dec.emb"][tokens_in] + positional_encoding(U, d.d_model)
    caches = []
    for i in range(d.n_layers):
        pre = f"dec.{i}."
        a, cs = nn.multi_head_attention(y, y, _sub(p, pre + "self."), d.n_heads, causal=True)
        y1, cl1 = _ln(y + a, p, pre + "ln1")
        b, cx = nn.multi_head_attention(y1, enc, _sub(p, pre + "cross."), d.n_heads, key_mask=mask)
        y2, cl2 = _ln(y1 + b, p, pre + "ln2")
        f, cf = _block_ff(y2, p, pre)
        y, cl3 = _ln(y2 + f, p, pre + "ln3")
        caches.append((cs, cl1, cx, cl2, cf, cl3))
    z, cout = nn.linear(y, p["dec.out.W"], p["dec.out.b"])
    logp = nn.log_softmax(z)
    return logp, (tokens_in, caches, cout, logp)


def decoder_backward(m: ModelGraph, dlogp, cache, grads: dict):
    """Returns the gradient w.r.t. the encoder trunk output."""
    tokens_in, caches, cout, logp = cache
    dz = nn.log_softmax_backward(dlogp, logp)
    dy, grads["dec.out.W"], grads["dec.out.b"] = nn.linear_backward(dz, cout)
    denc = 0.0
    for i in range(m.decoder.n_layers - 1, -1, -1):
        pre = f"dec.{i}."
        cs, cl1, cx, cl2, cf, cl3 = caches[i]
        dr3 = _ln_backward(dy, cl3, pre + "ln3", grads)
        dy2 = dr3 + _block_ff_backward(dr3, cf, pre, grads)
        dr2 = _ln_backward(dy2, cl2, pre + "ln2", grads)
        dq, dkv, gx = nn.multi_head_attention_backward(dr2, cx)
        grads.update(_prefixed(pre + "cross.", gx))
        denc = denc + dkv
        dy1 = dr2 + dq
        dr1 = _ln_backward(dy1, cl1, pre + "ln1", grads)
        dq, dkv, gs = nn.multi_head_attention_backward(dr1, cs)
        grads.update(_prefixed(pre + "self.", gs))
        dy = dr1 + dq + dkv
    demb = np.zeros_like(m.params["dec.emb"])
    np.add.at(demb, tokens_in.ravel(), dy.reshape(-1, dy.shape[-1]))
    grads["dec.emb"] = demb
    return denc


# ---------------------------------------------------------------------------
# checkpoint I/O


def _config_from_dict(arch: str, d: dict):
    return BiLstmConfig(**d) if arch == "bilstm" else EncoderConfig(**d)


def _header(m: ModelGraph) -> dict:
    h = {
        "kind": "float",
        "arch": m.arch,
        "config": asdict(m.config),
        "decoder": None if m.decoder is None else asdict(m.decoder),
        "mtl": m.mtl,
        "frontend": asdict(m.frontend),
        "meta": m.meta,
    }
    if m.norm_mean is not None:
        h["norm"] = {"mean": [float(v) for v in m.norm_mean], "std": [float(v) for v in m.norm_std]}
    return h


def checkpoint_bytes(m: ModelGraph, dtype=None) -> bytes:
    params = m.params if dtype is None else {k: v.astype(dtype) for k, v in m.params.items()}
    return checkpoint.encode(_header(m), params)


def save_checkpoint(m: ModelGraph, path, dtype=None) -> int:
    """Write ``m``; ``dtype`` optionally down-casts tensors (e.g. float32 for export)."""
    blob = checkpoint_bytes(m, dtype)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def graph_from_header(header: dict, params: dict) -> ModelGraph:
    arch = header["arch"]
    config = _config_from_dict(arch, header["config"])
    decoder = DecoderConfig(**header["decoder"]) if header.get("decoder") else None
    mtl = bool(header.get("mtl"))
    expected = param_shapes(arch, config, decoder, mtl)
    if list(expected) != list(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise FormatError(f"tensor set does not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise FormatError(f"tensor {name!r} has shape {params[name].shape}, config implies {shape}")
    m = ModelGraph(arch, config, params, decoder, mtl,
                   frontend=FrontendConfig(**header["frontend"]), meta=header.get("meta", {}))
    if "norm" in header:
        m.norm_mean = np.array(header["norm"]["mean"])
        m.norm_std = np.array(header["norm"]["std"])
    return m


def load_checkpoint(path) -> ModelGraph:
    header, params = checkpoint.read(path)
    if header.get("kind") != "float":
        raise FormatError(f"{path}: expected a float checkpoint, found kind {header.get('kind')!r}")
    return graph_from_header(header, params)
