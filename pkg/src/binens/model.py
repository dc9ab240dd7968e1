"""Tiny post-LN transformer encoder classifier with per-group quantization.

Parameter groups and what they cover:

* ``embedding``  word-embedding table (the "E" of W-E-A)
* ``attention``  query/key/value/output projection weights
* ``ffn``        both feed-forward weights
* ``activation`` inputs of every matmul inside encoder layers (the "A")
* ``head``       classifier weight; kept full precision

Biases, layer-norm parameters and position embeddings are always full
precision.  A *split* model stores every quantized weight as two binary
latents (``name.a`` / ``name.b``) whose quantized values are summed; this is
the ternary-weight-split form of a ternary model.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .quant import (BINARY, FULL_PRECISION, TERNARY, UNIFORM4, QuantSpec, quantize_activation, quantize_weight,
                    split_latents)
from .tensor import Tensor

QUANT_GROUPS = ("embedding", "attention", "ffn", "activation", "head")
WEIGHT_GROUPS = ("embedding", "attention", "ffn")
INIT_STD = 0.02
MASK_NEG = -1e9
FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"BINENSCK"


class ConfigError(ValueError):
    """Invalid encoder/training configuration; carries every violation found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def quant_preset(name: str) -> dict[str, QuantSpec]:
    """Quant maps by W-E-A bit label: ``fp``, ``2-2-4`` (ternary) and ``1-1-4`` (binary)."""
    fp = QuantSpec(FULL_PRECISION)
    if name in ("fp", "full_precision", "32-32-32"):
        return {g: fp for g in QUANT_GROUPS}
    if name in ("ternary", "2-2-4"):
        w = QuantSpec(TERNARY)
    elif name in ("binary", "1-1-4"):
        w = QuantSpec(BINARY)
    else:
        raise ValueError(f"unknown quant preset {name!r}")
    return {"embedding": w, "attention": w, "ffn": w, "activation": QuantSpec(UNIFORM4), "head": fp}


@dataclass
class EncoderConfig:
    vocab_size: int = 257
    max_seq_len: int = 32
    hidden_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 64
    num_classes: int = 2
    quant: dict = field(default_factory=lambda: quant_preset("fp"))
    split: bool = False
    seed: int = 0

    def __post_init__(self):
        quant = {g: QuantSpec(FULL_PRECISION) for g in QUANT_GROUPS}
        for g, spec in (self.quant or {}).items():
            quant[g] = spec if isinstance(spec, QuantSpec) else QuantSpec.from_dict(spec)
        self.quant = quant

    def validate(self) -> "EncoderConfig":
        errs = []
        for name in ("vocab_size", "max_seq_len", "hidden_dim", "num_heads", "ffn_dim"):
            if int(getattr(self, name)) < 1:
                errs.append(f"{name} must be >= 1")
        if self.num_layers < 1:
            errs.append("num_layers must be >= 1")
        if self.num_classes < 2:
            errs.append("num_classes must be >= 2")
        if self.num_heads >= 1 and self.hidden_dim % self.num_heads:
            errs.append(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        for g in self.quant:
            if g not in QUANT_GROUPS:
                errs.append(f"unknown quant group {g!r}")
        act = self.quant["activation"].kind
        if act not in (FULL_PRECISION, UNIFORM4):
            errs.append(f"activation quantizer must be full_precision or uniform4, got {act}")
        if self.quant["head"].kind != FULL_PRECISION:
            errs.append("head must stay full precision")
        if self.split:
            for g in WEIGHT_GROUPS:
                if self.quant[g].kind not in (BINARY, FULL_PRECISION):
                    errs.append(f"split models need binary weights, group {g} is {self.quant[g].kind}")
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "max_seq_len": self.max_seq_len,
            "hidden_dim": self.hidden_dim, "num_layers": self.num_layers,
            "num_heads": self.num_heads, "ffn_dim": self.ffn_dim,
            "num_classes": self.num_classes,
            "quant": {g: s.to_dict() for g, s in self.quant.items()},
            "split": self.split, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if isinstance(known.get("quant"), str):
            known["quant"] = quant_preset(known["quant"])
        return cls(**known)

    def replace(self, **changes) -> "EncoderConfig":
        d = self.to_dict()
        d.update(changes)
        return EncoderConfig.from_dict(d)


def _param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, group) for every logical parameter, in canonical order."""
    d, f = cfg.hidden_dim, cfg.ffn_dim
    out = [
        ("embed.word", (cfg.vocab_size, d), "embedding"),
        ("embed.pos", (cfg.max_seq_len, d), None),
        ("embed.ln.gamma", (d,), None), ("embed.ln.beta", (d,), None),
    ]
    for l in range(cfg.num_layers):
        p = f"layers.{l}."
        for proj in ("q", "k", "v", "o"):
            out.append((p + f"attn.{proj}.weight", (d, d), "attention"))
            out.append((p + f"attn.{proj}.bias", (d,), None))
        out += [
            (p + "attn.ln.gamma", (d,), None), (p + "attn.ln.beta", (d,), None),
            (p + "ffn.in.weight", (d, f), "ffn"), (p + "ffn.in.bias", (f,), None),
            (p + "ffn.out.weight", (f, d), "ffn"), (p + "ffn.out.bias", (d,), None),
            (p + "ffn.ln.gamma", (d,), None), (p + "ffn.ln.beta", (d,), None),
        ]
    out += [("head.weight", (d, cfg.num_classes), "head"), ("head.bias", (cfg.num_classes,), None)]
    return out


def analytic_param_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count (split weights counted twice)."""
    d, f, L, V, S, K = (cfg.hidden_dim, cfg.ffn_dim, cfg.num_layers, cfg.vocab_size,
                        cfg.max_seq_len, cfg.num_classes)
    mult = 2 if cfg.split else 1
    qmult = lambda g: mult if cfg.quant[g].kind != FULL_PRECISION else 1
    embed = qmult("embedding") * V * d + S * d + 2 * d
    layer = qmult("attention") * 4 * d * d + 4 * d + 2 * d + qmult("ffn") * 2 * d * f + f + d + 2 * d
    return embed + L * layer + d * K + K


def transformer_layer_param_count(cfg: EncoderConfig) -> int:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    return cfg.num_layers * (4 * d * d + 4 * d + 2 * d + 2 * d * f + f + d + 2 * d)


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


@dataclass
class ForwardTrace:
    logits: Tensor
    hidden_states: list
    attentions: list


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict
    format_version: int = FORMAT_VERSION

    def copy(self) -> "Checkpoint":
        return Checkpoint(EncoderConfig.from_dict(self.config.to_dict()),
                          {k: v.copy() for k, v in self.params.items()}, self.format_version)


class EncoderModel:
    """Parameters plus a functional forward pass producing a :class:`ForwardTrace`."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- construction -----------------------------------------------------
    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, requires_grad: bool = True) -> "EncoderModel":
        cfg = ckpt.config.validate()
        expected = set(_storage_names(cfg))
        missing = expected - set(ckpt.params)
        extra = set(ckpt.params) - expected
        if missing or extra:
            raise ConfigError([f"checkpoint params mismatch: missing {sorted(missing)}, extra {sorted(extra)}"])
        params = {k: Tensor(np.asarray(ckpt.params[k], dtype=T.default_dtype()), requires_grad=requires_grad)
                  for k in _storage_names(cfg)}
        return cls(cfg, params)

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(EncoderConfig.from_dict(self.config.to_dict()),
                          {k: p.data.astype(np.float32).copy() for k, p in self.params.items()})

    def copy(self, requires_grad: bool = True) -> "EncoderModel":
        return EncoderModel.from_checkpoint(self.to_checkpoint(), requires_grad=requires_grad)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    # -- weights ----------------------------------------------------------
    def weight(self, name: str, group: str | None) -> Tensor:
        """The (quantized) weight actually used in the forward pass."""
        if group is None:
            return self.params[name]
        spec = self.config.quant[group]
        if self.config.split and spec.kind != FULL_PRECISION:
            a = quantize_weight(self.params[name + ".a"], spec)
            b = quantize_weight(self.params[name + ".b"], spec)
            # x @ (A + B) == x @ A + x @ B; summing first keeps the split exact
            return a + b
        return quantize_weight(self.params[name], spec)

    def effective_weights(self) -> dict[str, np.ndarray]:
        with T.no_grad():
            return {name: self.weight(name, group).data for name, _, group in _param_shapes(self.config)}

    # -- forward ----------------------------------------------------------
    def forward(self, token_ids, attention_mask=None) -> ForwardTrace:
        return self._forward(token_ids, attention_mask, None)

    __call__ = forward

    def noise_injected_forward(self, token_ids, attention_mask, noise_variance: float,
                               rng: np.random.Generator) -> ForwardTrace:
        if noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")
        return self._forward(token_ids, attention_mask, (float(noise_variance), rng))

    def _forward(self, token_ids, attention_mask, noise) -> ForwardTrace:
        cfg = self.config
        ids = np.asarray(token_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if not np.issubdtype(ids.dtype, np.integer):
            raise TypeError("token ids must be integers")
        mask = np.ones(ids.shape, dtype=bool) if attention_mask is None else np.asarray(attention_mask).astype(bool)
        if mask.ndim == 1:
            mask = mask[None, :]
        if mask.shape != ids.shape:
            raise T.ShapeError("forward", ids.shape, mask.shape, detail="mask must match token ids")
        B, S = ids.shape
        if S > cfg.max_seq_len:
            raise T.ShapeError("forward", ids.shape, detail=f"sequence longer than max_seq_len={cfg.max_seq_len}")
        bad = np.argwhere((ids < 0) | (ids >= cfg.vocab_size))
        if bad.size:
            r, c = bad[0]
            raise ValueError(f"token id {ids[r, c]} out of range [0, {cfg.vocab_size}) at position ({r}, {c})")

        dt = T.default_dtype()
        quant_act = cfg.quant["activation"].kind == UNIFORM4
        H, dh = cfg.num_heads, cfg.hidden_dim // cfg.num_heads
        maskf = mask.astype(dt)
        tok_mask = maskf[:, :, None]                               # [B,S,1]
        key_bias = Tensor(((1.0 - maskf) * MASK_NEG)[:, None, None, :])   # [B,1,1,S]
        pair_mask = (maskf[:, None, :, None] * maskf[:, None, None, :])   # [B,1,S,S]
        head_tok_mask = maskf[:, None, :, None]                    # [B,1,S,1]

        def aq(x: Tensor, m) -> Tensor:
            if not quant_act:
                return x
            # one scale per example, computed over real (unpadded) positions
            return quantize_activation(x, mask=m, axes=tuple(range(1, x.ndim)))

        def heads(x: Tensor) -> Tensor:
            return x.reshape(B, S, H, dh).transpose(0, 2, 1, 3)

        w = self.weight
        h = T.embedding(w("embed.word", "embedding"), ids) + T.embedding(self.params["embed.pos"], np.arange(S))
        h = T.layer_norm(h, self.params["embed.ln.gamma"], self.params["embed.ln.beta"])
        if noise is not None and noise[0] > 0:
            var, rng = noise
            eps = rng.standard_normal(h.shape) * np.sqrt(var)
            h = h + Tensor(eps.astype(dt))
        hidden, attns = [h], []
        scale = 1.0 / np.sqrt(dh)
        for l in range(cfg.num_layers):
            p = f"layers.{l}."
            x = aq(h, tok_mask)
            q = x @ w(p + "attn.q.weight", "attention") + self.params[p + "attn.q.bias"]
            k = x @ w(p + "attn.k.weight", "attention") + self.params[p + "attn.k.bias"]
            v = x @ w(p + "attn.v.weight", "attention") + self.params[p + "attn.v.bias"]
            qh, kh, vh = heads(q), heads(k), heads(v)
            scores = aq(qh, head_tok_mask) @ aq(kh, head_tok_mask).transpose(0, 1, 3, 2)
            a = T.softmax(scores * scale + key_bias, axis=-1)
            attns.append(a)
            ctx = aq(a, pair_mask) @ aq(vh, head_tok_mask)
            ctx = ctx.transpose(0, 2, 1, 3).reshape(B, S, cfg.hidden_dim)
            o = aq(ctx, tok_mask) @ w(p + "attn.o.weight", "attention") + self.params[p + "attn.o.bias"]
            h = T.layer_norm(h + o, self.params[p + "attn.ln.gamma"], self.params[p + "attn.ln.beta"])
            f = T.gelu(aq(h, tok_mask) @ w(p + "ffn.in.weight", "ffn") + self.params[p + "ffn.in.bias"])
            f = aq(f, tok_mask) @ w(p + "ffn.out.weight", "ffn") + self.params[p + "ffn.out.bias"]
            h = T.layer_norm(h + f, self.params[p + "ffn.ln.gamma"], self.params[p + "ffn.ln.beta"])
            hidden.append(h)
        counts = np.maximum(maskf.sum(axis=1, keepdims=True), 1.0)          # [B,1]
        pooled = (h * Tensor(tok_mask)).sum(axis=1) * Tensor(1.0 / counts)
        logits = pooled @ self.params["head.weight"] + self.params["head.bias"]
        return ForwardTrace(logits, hidden, attns)

    # -- inference helpers -----------------------------------------------
    def logits(self, token_ids, attention_mask=None, batch_size: int = 256) -> np.ndarray:
        ids = np.asarray(token_ids)
        mask = np.ones(ids.shape, bool) if attention_mask is None else np.asarray(attention_mask)
        out = []
        with T.no_grad():
            for i in range(0, len(ids), batch_size):
                out.append(self.forward(ids[i:i + batch_size], mask[i:i + batch_size]).logits.data)
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes), np.float32)

    def predict_logits(self, data, noise_variance: float = 0.0, rng=None, batch_size: int = 256) -> np.ndarray:
        """Logits per example, optionally with embedding-output noise drawn from ``rng``."""
        ids, mask = data.ids, data.mask
        if noise_variance == 0:
            return self.logits(ids, mask, batch_size)
        out = []
        with T.no_grad():
            for i in range(0, len(ids), batch_size):
                tr = self.noise_injected_forward(ids[i:i + batch_size], mask[i:i + batch_size], noise_variance, rng)
                out.append(tr.logits.data)
        return np.concatenate(out)

    def predict(self, data, noise_variance: float = 0.0, rng=None, batch_size: int = 256) -> np.ndarray:
        """Argmax class per example; ``data`` has ``ids`` and ``mask`` attributes."""
        return self.predict_logits(data, noise_variance, rng, batch_size).argmax(axis=1)


def _storage_names(cfg: EncoderConfig) -> list[str]:
    names = []
    for name, _, group in _param_shapes(cfg):
        if cfg.split and group in WEIGHT_GROUPS and cfg.quant[group].kind != FULL_PRECISION:
            names += [name + ".a", name + ".b"]
        else:
            names.append(name)
    return names


def build_encoder(config: EncoderConfig) -> EncoderModel:
    """Seeded initialization: truncated normal (std 0.02) weights, zero biases, unit LN."""
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    dt = T.default_dtype()
    params = {}
    for name, shape, group in _param_shapes(cfg):
        if name.endswith(".gamma"):
            val = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".beta"):
            val = np.zeros(shape)
        else:
            val = _truncated_normal(rng, shape, INIT_STD)
        if cfg.split and group in WEIGHT_GROUPS and cfg.quant[group].kind != FULL_PRECISION:
            a, b = split_latents(val.astype(dt))
            params[name + ".a"] = Tensor(a, requires_grad=True)
            params[name + ".b"] = Tensor(b, requires_grad=True)
        else:
            params[name] = Tensor(val.astype(dt), requires_grad=True)
    return EncoderModel(cfg, params)


def split_model(ternary: EncoderModel) -> EncoderModel:
    """Ternary weight split: every ternary weight becomes two summed binary weights.

    The split model computes the same function as ``ternary`` before any
    further training.
    """
    cfg = ternary.config
    bad = [g for g in WEIGHT_GROUPS if cfg.quant[g].kind not in (TERNARY, FULL_PRECISION)]
    if bad:
        raise ValueError(f"split_model needs ternary weight groups, got {[(g, cfg.quant[g].kind) for g in bad]}")
    quant = dict(cfg.quant)
    for g in WEIGHT_GROUPS:
        if quant[g].kind == TERNARY:
            quant[g] = QuantSpec(BINARY, ste_clip=quant[g].ste_clip)
    new_cfg = cfg.replace(quant={g: s.to_dict() for g, s in quant.items()}, split=True)
    params = {}
    for name, _, group in _param_shapes(cfg):
        src = ternary.params[name].data
        if group in WEIGHT_GROUPS and cfg.quant[group].kind == TERNARY:
            a, b = split_latents(src)
            params[name + ".a"] = Tensor(a, requires_grad=True)
            params[name + ".b"] = Tensor(b, requires_grad=True)
        else:
            params[name] = Tensor(src.copy(), requires_grad=True)
    return EncoderModel(new_cfg.validate(), params)


def requantize(model: EncoderModel, quant: dict) -> EncoderModel:
    """Copy of ``model`` with a different quant map (latent values unchanged)."""
    if model.config.split:
        raise ValueError("requantize does not apply to split models")
    cfg = model.config.replace(quant={g: (s.to_dict() if isinstance(s, QuantSpec) else s) for g, s in quant.items()})
    return EncoderModel.from_checkpoint(Checkpoint(cfg, model.to_checkpoint().params))


# ---------------------------------------------------------------------------
# checkpoint file format
#
#   8 bytes  magic "BINENSCK"
#   4 bytes  little-endian uint32 header length n
#   n bytes  UTF-8 JSON header: format_version, config, tensor table
#   ...      raw little-endian float32 arrays in table order
# ---------------------------------------------------------------------------


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format_version": ckpt.format_version, "config": ckpt.config.to_dict(),
                         "tensors": table}, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = checkpoint_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_checkpoint(raw)


def parse_checkpoint(raw: bytes) -> Checkpoint:
    buf = io.BytesIO(raw)
    if buf.read(8) != CHECKPOINT_MAGIC:
        raise ValueError("not a binens checkpoint (bad magic)")
    (n,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(n).decode("utf-8"))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version}")
    base = 12 + n
    params = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(raw[start:start + entry["nbytes"]], dtype="<f4").reshape(entry["shape"])
        params[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(EncoderConfig.from_dict(header["config"]), params, version)
