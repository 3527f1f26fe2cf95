"""Toy decoder-only transformer with per-linear fake quantization.

Pre-norm blocks (RMSNorm, causal multi-head attention, GELU MLP) with learned
token and position embeddings and an untied output head. Linear weights are
stored ``(out_features, in_features)`` so FP4 blocks run along the reduction
dimension for both weights and activations.

Teacher and student are the same class; the student simply carries a
:class:`QuantPolicy` that selects which linears are fake-quantized.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from nvqad import blockquant, rng
from nvqad.blockquant import QuantConfig
from nvqad.engine import tensor as T
from nvqad.engine.tensor import Tensor

__all__ = [
    "ModelConfig",
    "QuantPolicy",
    "ToyTransformer",
    "count_quantized_layers",
    "sample",
]

LINEAR_KINDS = ("attn.q", "attn.k", "attn.v", "attn.o", "ffn.up", "ffn.down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 64
    ffn_mult: float = 4.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, name) < (0 if name == "n_layers" else 1):
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.ffn_mult <= 0:
            raise ValueError("ffn_mult must be positive")

    @property
    def d_ff(self) -> int:
        return int(round(self.ffn_mult * self.d_model))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class QuantPolicy:
    """Which linears are fake-quantized.

    Resolution order for a linear such as ``layers.2.attn.q``: an exact entry
    in ``overrides``, then an entry for its block (``layers.2``), then the
    first/last-K and attention rules. Embeddings are never quantized; the
    output head only when ``quantize_lm_head`` is set.
    """

    quantize_weights: bool = True
    quantize_activations: bool = True
    keep_first_k: int = 0
    keep_last_k: int = 0
    skip_attention_linears: bool = False
    overrides: dict = field(default_factory=dict)
    quantize_lm_head: bool = False
    activation_scaling: str = "dynamic"

    def __post_init__(self):
        if self.keep_first_k < 0 or self.keep_last_k < 0:
            raise ValueError("keep_first_k / keep_last_k must be non-negative")
        if self.activation_scaling not in ("dynamic", "static"):
            raise ValueError("activation_scaling must be 'dynamic' or 'static'")

    @classmethod
    def none(cls) -> "QuantPolicy":
        return cls(quantize_weights=False, quantize_activations=False)

    @property
    def active(self) -> bool:
        return self.quantize_weights or self.quantize_activations

    def is_quantized(self, name: str, n_layers: int) -> bool:
        if not self.active:
            return False
        if name in self.overrides:
            return bool(self.overrides[name])
        if name == "lm_head":
            return self.quantize_lm_head
        parts = name.split(".")
        block = ".".join(parts[:2])
        if block in self.overrides:
            return bool(self.overrides[block])
        i = int(parts[1])
        if i < self.keep_first_k or i >= n_layers - self.keep_last_k:
            return False
        if self.skip_attention_linears and parts[2] == "attn":
            return False
        return True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "QuantPolicy":
        return cls(**(d or {}))


def _param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    d, f = cfg.d_model, cfg.d_ff
    shapes = OrderedDict()
    shapes["tok_emb"] = (cfg.vocab_size, d)
    shapes["pos_emb"] = (cfg.max_seq_len, d)
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn_norm"] = (d,)
        for kind in ("attn.q", "attn.k", "attn.v", "attn.o"):
            shapes[f"{p}.{kind}"] = (d, d)
        shapes[f"{p}.ffn_norm"] = (d,)
        shapes[f"{p}.ffn.up"] = (f, d)
        shapes[f"{p}.ffn.down"] = (d, f)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (cfg.vocab_size, d)
    return shapes


class ToyTransformer:
    def __init__(
        self,
        config: ModelConfig,
        params: "OrderedDict[str, np.ndarray] | None" = None,
        policy: QuantPolicy | None = None,
        quant: QuantConfig | None = None,
        seed: int = 0,
    ):
        self.config = config
        self.policy = policy or QuantPolicy.none()
        self.quant = quant or QuantConfig.nvfp4()
        self.act_amax: dict[str, float] = {}
        self._observe: dict[str, float] | None = None
        shapes = _param_shapes(config)
        if params is None:
            params = self._init_params(shapes, seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in shapes.items():
            if name not in params:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.array(params[name], dtype=np.float32)
            if arr.shape != shape:
                raise ValueError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

    @staticmethod
    def _init_params(shapes, seed: int) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        n_layers = sum(1 for n in shapes if n.endswith(".attn_norm"))
        resid_std = 0.02 / math.sqrt(2 * max(1, n_layers))
        for idx, (name, shape) in enumerate(shapes.items()):
            if name.endswith("norm"):
                out[name] = np.ones(shape, dtype=np.float32)
                continue
            std = resid_std if name.endswith(("attn.o", "ffn.down")) else 0.02
            counter = np.arange(int(np.prod(shape)), dtype=np.uint64)
            out[name] = (std * rng.normal(seed, idx, counter)).reshape(shape).astype(np.float32)
        return out

    # -- bookkeeping ----------------------------------------------------------

    def linear_names(self) -> list[str]:
        names = [f"layers.{i}.{k}" for i in range(self.config.n_layers) for k in LINEAR_KINDS]
        return names + ["lm_head"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, v.data.copy()) for k, v in self.params.items())
        for name, amax in sorted(self.act_amax.items()):
            out[f"calib.{name}"] = np.array(amax, dtype=np.float32)
        return out

    @classmethod
    def from_state_dict(cls, config: ModelConfig, state, policy=None, quant=None) -> "ToyTransformer":
        model = cls(config, params=state, policy=policy, quant=quant)
        extra = set(state) - set(model.params)
        for key in sorted(extra):
            if not key.startswith("calib."):
                raise ValueError(f"unexpected tensor {key!r} in checkpoint")
            model.act_amax[key[len("calib."):]] = float(np.asarray(state[key]))
        return model

    def copy(self, policy: QuantPolicy | None = None, quant: QuantConfig | None = None) -> "ToyTransformer":
        model = ToyTransformer(
            self.config,
            params=OrderedDict((k, v.data) for k, v in self.params.items()),
            policy=policy if policy is not None else self.policy,
            quant=quant or self.quant,
        )
        model.act_amax = dict(self.act_amax)
        return model

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    # -- forward --------------------------------------------------------------

    def _linear(self, name: str, x: Tensor, cache: dict) -> Tensor:
        w = self.params[name]
        if self._observe is not None and self.policy.is_quantized(name, self.config.n_layers):
            amax = float(np.max(np.abs(x.data))) if x.data.size else 0.0
            self._observe[name] = max(self._observe.get(name, 0.0), amax)
        if self.policy.is_quantized(name, self.config.n_layers):
            if self.policy.quantize_weights:
                w = T.ste_fake_quant(w, self.quant)
            if self.policy.quantize_activations:
                ts = None
                if self.policy.activation_scaling == "static":
                    if name not in self.act_amax:
                        raise ValueError(f"static activation scaling needs calibration for {name!r}")
                    ts = blockquant.tensor_scale_from_amax(self.act_amax[name], self.quant)
                # the cache holds x itself, so its id cannot be recycled mid-forward
                key = (id(x), ts)
                if key not in cache:
                    cache[key] = (x, T.ste_fake_quant(x, self.quant, ts))
                x = cache[key][1]
        return T.matmul(x, T.transpose(w))

    def forward(self, tokens) -> Tensor:
        """Logits of shape ``(batch, seq, vocab)`` for integer ``tokens`` of shape ``(batch, seq)``."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        cfg = self.config
        b, t = tokens.shape
        if t > cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        P = self.params
        h_dim = cfg.d_model // cfg.n_heads
        cache: dict = {}
        x = T.add(T.embedding_lookup(P["tok_emb"], tokens), T.embedding_lookup(P["pos_emb"], np.arange(t)))
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            h = T.rmsnorm(x, P[f"{p}.attn_norm"])

            def heads(z):
                return T.transpose(T.reshape(z, (b, t, cfg.n_heads, h_dim)), (0, 2, 1, 3))

            q = heads(self._linear(f"{p}.attn.q", h, cache))
            k = heads(self._linear(f"{p}.attn.k", h, cache))
            v = heads(self._linear(f"{p}.attn.v", h, cache))
            s = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(h_dim))
            a = T.matmul(T.softmax(T.causal_mask_add(s)), v)
            a = T.reshape(T.transpose(a, (0, 2, 1, 3)), (b, t, cfg.d_model))
            x = T.add(x, self._linear(f"{p}.attn.o", a, cache))
            h = T.rmsnorm(x, P[f"{p}.ffn_norm"])
            u = T.gelu(self._linear(f"{p}.ffn.up", h, cache))
            x = T.add(x, self._linear(f"{p}.ffn.down", u, cache))
        x = T.rmsnorm(x, P["final_norm"])
        return self._linear("lm_head", x, cache)

    __call__ = forward

    def calibrate(self, batches) -> dict[str, float]:
        """Max-calibrate activation amax for every quantized linear input.

        Runs dynamic-scaled forwards over ``batches`` (iterable of token
        arrays), folds the running max into ``act_amax`` and returns it.
        """
        self._observe = dict(self.act_amax)
        scaling = self.policy.activation_scaling
        self.policy.activation_scaling = "dynamic"
        try:
            for tokens in batches:
                self.forward(tokens)
            self.act_amax = dict(self._observe)
        finally:
            self._observe = None
            self.policy.activation_scaling = scaling
        return dict(self.act_amax)

    # -- incremental decoding (unquantized models only) -----------------------

    def _decode_step(self, ids: np.ndarray, pos: int, kv: list) -> np.ndarray:
        cfg = self.config
        P = {k: v.data for k, v in self.params.items()}
        b = ids.shape[0]
        hd = cfg.d_model // cfg.n_heads
        x = P["tok_emb"][ids] + P["pos_emb"][pos]

        def norm(z, g):
            return z / np.sqrt((z * z).mean(-1, keepdims=True) + np.float32(1e-6)) * g

        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            h = norm(x, P[f"{p}.attn_norm"])
            q = (h @ P[f"{p}.attn.q"].T).reshape(b, cfg.n_heads, 1, hd)
            k = (h @ P[f"{p}.attn.k"].T).reshape(b, cfg.n_heads, 1, hd)
            v = (h @ P[f"{p}.attn.v"].T).reshape(b, cfg.n_heads, 1, hd)
            if len(kv) <= i:
                kv.append([k, v])
            else:
                kv[i][0] = np.concatenate([kv[i][0], k], axis=2)
                kv[i][1] = np.concatenate([kv[i][1], v], axis=2)
            K, V = kv[i]
            s = (q @ np.swapaxes(K, -1, -2)) * np.float32(1.0 / math.sqrt(hd))
            s = s - s.max(-1, keepdims=True)
            e = np.exp(s)
            a = (e / e.sum(-1, keepdims=True)) @ V
            x = x + a.reshape(b, cfg.d_model) @ P[f"{p}.attn.o"].T
            h = norm(x, P[f"{p}.ffn_norm"])
            u = T.gelu(Tensor(h @ P[f"{p}.ffn.up"].T)).data
            x = x + u @ P[f"{p}.ffn.down"].T
        x = norm(x, P["final_norm"])
        return x @ P["lm_head"].T


def count_quantized_layers(model: ToyTransformer) -> list[dict]:
    """One audit row per linear: name, weight shape and quantize/skip status."""
    rows = []
    pol = model.policy
    for name in model.linear_names():
        q = pol.is_quantized(name, model.config.n_layers)
        rows.append(
            {
                "name": name,
                "shape": list(model.params[name].shape),
                "quantized": q,
                "weights": q and pol.quantize_weights,
                "activations": q and pol.quantize_activations,
            }
        )
    return rows


def _nucleus_pick(logits: np.ndarray, temperature: float, top_p: float, u: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    order = np.argsort(-p, axis=-1, kind="stable")
    ps = np.take_along_axis(p, order, axis=-1)
    before = np.cumsum(ps, axis=-1) - ps
    ps = np.where(before < top_p, ps, 0.0)
    cdf = np.cumsum(ps, axis=-1)
    target = u[:, None] * cdf[:, -1:]
    idx = np.minimum((cdf <= target).sum(axis=-1), p.shape[-1] - 1)
    return order[np.arange(len(idx)), idx]


def sample(
    model: ToyTransformer,
    prefix,
    steps: int,
    temperature: float = 1.0,
    top_p: float = 1.0,
    seed: int = 0,
    greedy: bool = False,
    stream_offset: int = 0,
) -> np.ndarray:
    """Autoregressive nucleus sampling.

    ``prefix`` is ``(batch, t0)``; returns ``(batch, t0 + steps)``. Row ``i``
    draws its randomness from stream ``stream_offset + i``, so a row's output
    does not depend on which other rows are sampled with it.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive (use greedy=True for argmax decoding)")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    seqs = np.array(prefix, dtype=np.int64, ndmin=2)
    b, t0 = seqs.shape
    if t0 < 1:
        raise ValueError("prefix must contain at least one token")
    if t0 + steps > model.config.max_seq_len + 1:
        raise ValueError("prefix + steps exceeds the model context")
    out = np.zeros((b, t0 + steps), dtype=np.int64)
    out[:, :t0] = seqs
    streams = np.arange(b, dtype=np.uint64) + np.uint64(stream_offset)
    incremental = not model.policy.active
    kv: list = []
    last = None
    if incremental:
        for pos in range(t0):
            last = model._decode_step(out[:, pos], pos, kv)
    for step in range(steps):
        pos = t0 + step
        if not incremental:
            last = model.forward(out[:, :pos]).data[:, -1]
        if greedy:
            nxt = np.argmax(last, axis=-1)
        else:
            u = rng.uniform(seed, streams, np.full(b, pos, dtype=np.uint64))
            nxt = _nucleus_pick(last, temperature, top_p, u)
        out[:, pos] = nxt
        if incremental and step < steps - 1:
            last = model._decode_step(nxt, pos, kv)
    return out
