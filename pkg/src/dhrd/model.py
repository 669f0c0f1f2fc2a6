"""Decoder-only transformer with a pooled classification head and an LM head.

The trunk is a standard pre-norm causal transformer (learned absolute
positions, GELU feed-forward). Two heads share its hidden states:

* ``classify`` pools the hidden state at each row's last real input token
  and maps it through a 2-layer MLP to class logits. This is the only head
  used at prediction time.
* ``lm_logits`` projects every position to vocabulary logits through the
  (tied) token embedding, and is supervised only during training.

Parameter count from config (documented invariant)::

    V*d + max_len*d                                  embeddings
  + n_layers * (4*(d*d + d) + 2*(2*d) + d*f + f + f*d + d)   blocks
  + 2*d                                              final norm
  + d*m + m + m*K + K                                classification MLP

with d = d_model, f = d_ff, m = mlp_hidden. The LM head adds nothing (tied).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import VOCAB_SIZE

MAGIC = b"DHRD"
CHECKPOINT_VERSION = 1

_NEG_INF = -1e9


class ModelError(Exception):
    pass


class SequenceTooLong(ModelError):
    pass


class TokenOutOfRange(ModelError):
    pass


class IndexOutOfRange(ModelError):
    pass


class PrefixTooLong(ModelError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = VOCAB_SIZE
    n_classes: int = 2
    max_len: int = 256
    mlp_hidden: Optional[int] = None  # defaults to d_model
    init_std: float = 0.3  # narrow models trained from scratch stall with much smaller inits
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if self.init_std <= 0:
            raise ModelError("init_std must be positive")
        if self.n_classes < 2:
            raise ModelError("need at least 2 classes")
        if self.vocab_size < VOCAB_SIZE:
            raise ModelError(f"vocab_size must cover the byte vocab + reserved ids ({VOCAB_SIZE})")
        if self.mlp_hidden is None:
            self.mlp_hidden = self.d_model


@dataclass
class DecodeSettings:
    """Sampling controls for the LM head (temperature + nucleus truncation)."""

    temperature: float = 0.1
    top_p: float = 0.7
    max_new_tokens: int = 500
    stop_token: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ModelError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ModelError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ModelError("max_new_tokens must be >= 1")


class DualHeadModel:
    """Shared decoder trunk with classification and LM heads."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self._init_params()

    # -- parameters ---------------------------------------------------------

    def _param(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _init_params(self):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        d, f, m = cfg.d_model, cfg.d_ff, cfg.mlp_hidden

        def normal(*shape):
            return rng.normal(0.0, cfg.init_std, size=shape)

        self._param("emb", normal(cfg.vocab_size, d))
        self._param("pos", normal(cfg.max_len, d))
        for i in range(cfg.n_layers):
            p = f"l{i}."
            self._param(p + "ln1.g", np.ones(d))
            self._param(p + "ln1.b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                self._param(p + w, normal(d, d))
                self._param(p + w.replace("w", "b"), np.zeros(d))
            self._param(p + "ln2.g", np.ones(d))
            self._param(p + "ln2.b", np.zeros(d))
            self._param(p + "wf1", normal(d, f))
            self._param(p + "bf1", np.zeros(f))
            self._param(p + "wf2", normal(f, d))
            self._param(p + "bf2", np.zeros(d))
        self._param("lnf.g", np.ones(d))
        self._param("lnf.b", np.zeros(d))
        self._param("cls.w1", normal(d, m))
        self._param("cls.b1", np.zeros(m))
        self._param("cls.w2", normal(m, cfg.n_classes))
        self._param("cls.b2", np.zeros(cfg.n_classes))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def param_checksum(self) -> float:
        return float(sum(np.abs(p.data.astype(np.float64)).sum() for p in self.params.values()))

    # -- forward ------------------------------------------------------------

    def _attn_mask(self, pad_mask: np.ndarray) -> np.ndarray:
        """Additive [B,1,T,T] mask: causal plus padded keys."""
        B, T = pad_mask.shape
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        key_pad = (pad_mask == 0)[:, None, None, :]  # [B,1,1,T]
        blocked = causal[None, None, :, :] | key_pad
        # a position always sees itself, so no softmax row is fully masked
        idx = np.arange(T)
        blocked[:, :, idx, idx] = False
        return np.where(blocked, _NEG_INF, 0.0).astype(self.dtype)

    def forward_hidden(self, tokens: np.ndarray, pad_mask: Optional[np.ndarray] = None) -> Tensor:
        """Run the trunk; returns hidden states [B, T, d_model]."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, T = tokens.shape
        if T > cfg.max_len:
            raise SequenceTooLong(f"sequence length {T} exceeds max_len {cfg.max_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise TokenOutOfRange(f"token ids must lie in [0, {cfg.vocab_size})")
        if pad_mask is None:
            pad_mask = np.ones((B, T), dtype=np.int64)
        pad_mask = np.asarray(pad_mask)

        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        scale = 1.0 / math.sqrt(dh)
        mask = self._attn_mask(pad_mask)

        h = ad.add(ad.gather_rows(self.params["emb"], tokens), ad.gather_rows(self.params["pos"], np.arange(T)))
        for i in range(cfg.n_layers):
            p = f"l{i}."
            x = ad.layer_norm(h, self.params[p + "ln1.g"], self.params[p + "ln1.b"])
            xf = ad.reshape(x, (B * T, cfg.d_model))

            def proj(w, b):
                return ad.add(ad.matmul(xf, self.params[p + w]), self.params[p + b])

            # [B*T,d] -> [B,H,T,dh]
            q = ad.transpose(ad.reshape(proj("wq", "bq"), (B, T, H, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(proj("wk", "bk"), (B, T, H, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(proj("wv", "bv"), (B, T, H, dh)), (0, 2, 1, 3))

            scores = ad.add_array(ad.scale(ad.bmm(q, ad.transpose(k, (0, 1, 3, 2))), scale), mask)
            attn = ad.softmax_rows(scores)
            ctx = ad.transpose(ad.bmm(attn, v), (0, 2, 1, 3))  # [B,T,H,dh]
            ctx = ad.reshape(ctx, (B * T, cfg.d_model))
            out = ad.add(ad.matmul(ctx, self.params[p + "wo"]), self.params[p + "bo"])
            h = ad.add(h, ad.reshape(out, (B, T, cfg.d_model)))

            x = ad.layer_norm(h, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
            xf = ad.reshape(x, (B * T, cfg.d_model))
            ff = ad.gelu(ad.add(ad.matmul(xf, self.params[p + "wf1"]), self.params[p + "bf1"]))
            ff = ad.add(ad.matmul(ff, self.params[p + "wf2"]), self.params[p + "bf2"])
            h = ad.add(h, ad.reshape(ff, (B, T, cfg.d_model)))

        return ad.layer_norm(h, self.params["lnf.g"], self.params["lnf.b"])

    def classify(self, hidden: Tensor, pool_indices) -> Tensor:
        """Class logits [B, K] from pooled hidden states."""
        idx = np.asarray(pool_indices)
        T = hidden.data.shape[1]
        if np.any(idx < 0) or np.any(idx >= T):
            raise IndexOutOfRange(f"pool index out of range for T={T}")
        pooled = ad.select_positions(hidden, idx)
        h1 = ad.gelu(ad.add(ad.matmul(pooled, self.params["cls.w1"]), self.params["cls.b1"]))
        return ad.add(ad.matmul(h1, self.params["cls.w2"]), self.params["cls.b2"])

    def lm_logits(self, hidden: Tensor) -> Tensor:
        """Vocabulary logits [B, T, V] through the tied embedding."""
        B, T, d = hidden.data.shape
        flat = ad.reshape(hidden, (B * T, d))
        logits = ad.matmul(flat, ad.transpose(self.params["emb"], (1, 0)))
        return ad.reshape(logits, (B, T, self.cfg.vocab_size))

    # -- sampling -----------------------------------------------------------

    def generate(self, prefix: Sequence[int], settings: DecodeSettings, rng: Optional[np.random.Generator] = None) -> List[int]:
        """Autoregressive sampling from the LM head (benchmark / CoT baseline only)."""
        if len(prefix) >= self.cfg.max_len:
            raise PrefixTooLong(f"prefix length {len(prefix)} >= max_len {self.cfg.max_len}")
        if rng is None:
            rng = np.random.default_rng(0)
        out = list(prefix)
        with ad.no_grad():
            for _ in range(settings.max_new_tokens):
                tokens = np.asarray(out, dtype=np.int64)[None, :]
                hidden = self.forward_hidden(tokens)
                logits = self.lm_logits(hidden).data[0, -1].astype(np.float64)
                nxt = sample_token(logits, settings.temperature, settings.top_p, rng)
                out.append(nxt)
                if settings.stop_token is not None and nxt == settings.stop_token:
                    break
                if len(out) >= self.cfg.max_len:
                    break
        return out


def sample_token(logits: np.ndarray, temperature: float, top_p: float, rng: np.random.Generator) -> int:
    """Temperature scaling, then nucleus truncation + renormalization."""
    if temperature < 1e-6:
        return int(np.argmax(logits))
    z = (logits - logits.max()) / temperature
    probs = np.exp(z - np.log(np.exp(z).sum()))
    order = np.argsort(probs)[::-1]
    csum = np.cumsum(probs[order])
    # smallest prefix whose mass reaches top_p (always keep the top token)
    cutoff = int(np.searchsorted(csum, top_p)) + 1
    keep = order[:cutoff]
    p = probs[keep]
    p = p / p.sum()
    return int(rng.choice(keep, p=p))


# ---------------------------------------------------------------------------
# checkpoint format: "DHRD" | u32 version | u32 cfg_len | cfg JSON |
#   repeated (u32 name_len | name | u32 rank | u32 dims[] | f32 LE payload)


def save_checkpoint(model: DualHeadModel, path):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = json.dumps(asdict(model.cfg), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> DualHeadModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    cfg = ModelConfig(**json.loads(blob[off : off + cfg_len].decode("utf-8")))
    off += cfg_len

    model = DualHeadModel(cfg, dtype=np.float32)
    seen = set()
    while off < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"truncated or corrupt tensor header: {e}") from e
        n = int(np.prod(dims)) if rank else 1
        end = off + 4 * n
        if end > len(blob):
            raise CheckpointError(f"truncated payload for tensor {name!r}")
        arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims).copy()
        off = end
        if name not in model.params:
            raise CheckpointError(f"unknown tensor {name!r}")
        if model.params[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        model.params[name].data = arr
        seen.add(name)
    if off != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    missing = set(model.params) - seen
    if missing:
        raise CheckpointError(f"missing tensors: {sorted(missing)}")
    return model
