"""Mini transformer encoder with MLM (generator) and RTD (discriminator) heads,
plus the RTDW binary weight container.

RTDW layout: magic b"RTDW", u32 LE format version, u64 LE manifest byte
length, UTF-8 JSON manifest (array of {name, dtype, shape, offset}), then a
contiguous little-endian float32 payload. Model configuration travels as the
reserved tensor "model_config" (nine scalars, see CONFIG_FIELDS).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"RTDW"
FORMAT_VERSION = 1
CONFIG_TENSOR = "model_config"
CONFIG_FIELDS = ("num_layers", "hidden", "heads", "intermediate", "vocab_size",
                 "max_positions", "embedding_size", "head_role", "pad_id")
ROLE_DISCRIMINATOR = "discriminator"
ROLE_GENERATOR = "generator"
ATTENTION_MASK_BIAS = -1e9
LN_EPS = 1e-12


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden: int
    heads: int
    intermediate: int
    vocab_size: int
    max_positions: int
    embedding_size: int
    head_role: str = ROLE_DISCRIMINATOR
    pad_id: int = 0

    def __post_init__(self):
        sizes = (self.num_layers, self.hidden, self.heads, self.intermediate,
                 self.vocab_size, self.max_positions, self.embedding_size)
        if any(s < 1 for s in sizes):
            raise ValueError(f"all config sizes must be >= 1, got {self}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.head_role not in (ROLE_DISCRIMINATOR, ROLE_GENERATOR):
            raise ValueError(f"unknown head_role {self.head_role!r}")

    def to_array(self) -> np.ndarray:
        role = 0 if self.head_role == ROLE_DISCRIMINATOR else 1
        vals = [self.num_layers, self.hidden, self.heads, self.intermediate,
                self.vocab_size, self.max_positions, self.embedding_size,
                role, self.pad_id]
        return np.asarray(vals, dtype=np.float32)

    @staticmethod
    def from_array(arr: np.ndarray) -> "ModelConfig":
        if arr.shape != (len(CONFIG_FIELDS),):
            raise ContainerError(f"bad {CONFIG_TENSOR} shape {arr.shape}")
        v = [int(round(float(x))) for x in arr]
        role = ROLE_DISCRIMINATOR if v[7] == 0 else ROLE_GENERATOR
        return ModelConfig(v[0], v[1], v[2], v[3], v[4], v[5], v[6], role, v[8])


def required_tensor_shapes(cfg: ModelConfig) -> dict:
    """Tensor naming convention and expected shapes for a given config."""
    h, e = cfg.hidden, cfg.embedding_size
    shapes = {
        "embeddings.word": (cfg.vocab_size, e),
        "embeddings.position": (cfg.max_positions, e),
        "embeddings.token_type": (2, e),
        "embeddings.ln.gain": (e,),
        "embeddings.ln.bias": (e,),
    }
    if e != h:
        shapes["embeddings_project.w"] = (e, h)
        shapes["embeddings_project.b"] = (h,)
    for i in range(cfg.num_layers):
        p = f"layer.{i}."
        for name in ("q", "k", "v", "out"):
            shapes[p + f"attn.{name}.w"] = (h, h)
            shapes[p + f"attn.{name}.b"] = (h,)
        shapes[p + "ln1.gain"] = (h,)
        shapes[p + "ln1.bias"] = (h,)
        shapes[p + "ffn.w1"] = (h, cfg.intermediate)
        shapes[p + "ffn.b1"] = (cfg.intermediate,)
        shapes[p + "ffn.w2"] = (cfg.intermediate, h)
        shapes[p + "ffn.b2"] = (h,)
        shapes[p + "ln2.gain"] = (h,)
        shapes[p + "ln2.bias"] = (h,)
    shapes["head.dense.w"] = (h, h if cfg.head_role == ROLE_DISCRIMINATOR else e)
    shapes["head.dense.b"] = (h,) if cfg.head_role == ROLE_DISCRIMINATOR else (e,)
    if cfg.head_role == ROLE_DISCRIMINATOR:
        shapes["head.out.w"] = (h, 1)
        shapes["head.out.b"] = (1,)
    else:
        shapes["head.ln.gain"] = (e,)
        shapes["head.ln.bias"] = (e,)
        shapes["head.out_bias"] = (cfg.vocab_size,)
    return shapes


class WeightContainer:
    """Immutable named-tensor store for one model role."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float32)
                        for k, v in tensors.items()}
        self._params_cache: dict | None = None
        self.validate()

    def validate(self) -> None:
        required = required_tensor_shapes(self.config)
        for name, shape in required.items():
            if name not in self.tensors:
                raise ContainerError(f"missing tensor {name!r}")
            got = self.tensors[name].shape
            if got != shape:
                raise ContainerError(f"tensor {name!r} has shape {got}, expected {shape}")
        extra = set(self.tensors) - set(required)
        if extra:
            raise ContainerError(f"unexpected tensors: {sorted(extra)}")

    def params(self, requires_grad: bool = False, dtype=np.float32) -> dict:
        """Tensors wrapped for the forward pass; cached for inference reuse."""
        if not requires_grad and dtype == np.float32 and self._params_cache is not None:
            return self._params_cache
        params = {k: Tensor(v.astype(dtype), requires_grad=requires_grad)
                  for k, v in self.tensors.items()}
        if not requires_grad and dtype == np.float32:
            self._params_cache = params
        return params

    @staticmethod
    def from_params(config: ModelConfig, params: dict) -> "WeightContainer":
        return WeightContainer(config, {k: p.data for k, p in params.items()})


def save_weights(container: WeightContainer, path) -> None:
    """Write the RTDW container; byte-deterministic for identical content."""
    tensors = dict(container.tensors)
    tensors[CONFIG_TENSOR] = container.config.to_array()
    if not tensors:
        raise ContainerError("refusing to save an empty container")
    manifest = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append({"name": name, "dtype": "f32",
                         "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_weights(path) -> WeightContainer:
    """Read and validate an RTDW container."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ContainerError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    mstart, pstart = 16, 16 + mlen
    if pstart > len(raw):
        raise ContainerError("truncated manifest")
    try:
        manifest = json.loads(raw[mstart:pstart].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable manifest: {exc}") from exc
    payload = raw[pstart:]
    tensors: dict = {}
    claimed: list = []
    for entry in manifest:
        name, dtype = entry["name"], entry["dtype"]
        shape, offset = tuple(entry["shape"]), int(entry["offset"])
        if dtype != "f32":
            raise ContainerError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if name in tensors:
            raise ContainerError(f"duplicate tensor {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if offset < 0 or offset + nbytes > len(payload):
            raise ContainerError(f"tensor {name!r}: payload out of bounds")
        claimed.append((offset, offset + nbytes, name))
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    claimed.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(claimed, claimed[1:]):
        if s1 < e0:
            raise ContainerError(f"tensors {n0!r} and {n1!r} overlap in the payload")
    if CONFIG_TENSOR not in tensors:
        raise ContainerError(f"missing tensor {CONFIG_TENSOR!r}")
    config = ModelConfig.from_array(tensors.pop(CONFIG_TENSOR))
    return WeightContainer(config, tensors)


# -- forward passes -----------------------------------------------------------

@dataclass(frozen=True)
class DiscriminatorOutput:
    p_replaced: np.ndarray  # per-position probability the token was replaced


def _check_inputs(ids: np.ndarray, cfg: ModelConfig) -> None:
    n = ids.shape[-1]
    if n > cfg.max_positions:
        raise ValueError(f"sequence length {n} exceeds max_positions {cfg.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range for vocab_size {cfg.vocab_size}")


def encoder_hidden(ids: np.ndarray, segment_ids: np.ndarray, params: dict,
                   cfg: ModelConfig) -> Tensor:
    """Run the embedding + transformer stack; ids shaped (batch, n)."""
    ids = np.asarray(ids, dtype=np.int64)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    _check_inputs(ids, cfg)
    batch, n = ids.shape
    dtype = params["embeddings.word"].dtype

    x = (params["embeddings.word"][ids]
         + params["embeddings.position"][:n]
         + params["embeddings.token_type"][segment_ids])
    x = T.layer_norm(x, params["embeddings.ln.gain"], params["embeddings.ln.bias"], LN_EPS)
    if cfg.embedding_size != cfg.hidden:
        x = x.matmul(params["embeddings_project.w"]) + params["embeddings_project.b"]

    # additive bias: 0 for real tokens, large negative at pad key positions
    pad = (ids == cfg.pad_id)
    mask_bias = np.where(pad[:, None, None, :], ATTENTION_MASK_BIAS, 0.0).astype(dtype)

    heads, dh = cfg.heads, cfg.hidden // cfg.heads
    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.num_layers):
        p = f"layer.{i}."

        def split(t):
            return t.reshape(batch, n, heads, dh).transpose(0, 2, 1, 3)

        q = split(x.matmul(params[p + "attn.q.w"]) + params[p + "attn.q.b"])
        k = split(x.matmul(params[p + "attn.k.w"]) + params[p + "attn.k.b"])
        v = split(x.matmul(params[p + "attn.v.w"]) + params[p + "attn.v.b"])
        scores = q.matmul(k.transpose(0, 1, 3, 2)) * scale + mask_bias
        ctx = T.row_softmax(scores).matmul(v)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(batch, n, cfg.hidden)
        attn_out = ctx.matmul(params[p + "attn.out.w"]) + params[p + "attn.out.b"]
        x = T.layer_norm(x + attn_out, params[p + "ln1.gain"], params[p + "ln1.bias"], LN_EPS)
        ffn = T.gelu(x.matmul(params[p + "ffn.w1"]) + params[p + "ffn.b1"])
        ffn = ffn.matmul(params[p + "ffn.w2"]) + params[p + "ffn.b2"]
        x = T.layer_norm(x + ffn, params[p + "ln2.gain"], params[p + "ln2.bias"], LN_EPS)
    return x


def discriminator_probs(ids, segment_ids, params: dict, cfg: ModelConfig) -> Tensor:
    """Per-position P(replaced), differentiable; ids shaped (batch, n)."""
    if cfg.head_role != ROLE_DISCRIMINATOR:
        raise ValueError("weights carry a generator head, not a discriminator head")
    h = encoder_hidden(ids, segment_ids, params, cfg)
    d = T.gelu(h.matmul(params["head.dense.w"]) + params["head.dense.b"])
    logits = d.matmul(params["head.out.w"]) + params["head.out.b"]
    batch, n = np.asarray(ids).shape
    return T.sigmoid(logits.reshape(batch, n))


def generator_logits(ids, segment_ids, params: dict, cfg: ModelConfig) -> Tensor:
    """Vocabulary logits at every position via tied token embeddings."""
    if cfg.head_role != ROLE_GENERATOR:
        raise ValueError("weights carry a discriminator head, not a generator head")
    h = encoder_hidden(ids, segment_ids, params, cfg)
    z = T.gelu(h.matmul(params["head.dense.w"]) + params["head.dense.b"])
    z = T.layer_norm(z, params["head.ln.gain"], params["head.ln.bias"], LN_EPS)
    emb_t = params["embeddings.word"].transpose(1, 0)
    return z.matmul(emb_t) + params["head.out_bias"]


def discriminator_forward(ids, segment_ids, weights: WeightContainer) -> DiscriminatorOutput:
    """Single-sequence inference entry point."""
    probs = discriminator_probs(np.asarray(ids)[None, :], np.asarray(segment_ids)[None, :],
                                weights.params(), weights.config)
    return DiscriminatorOutput(p_replaced=probs.data[0].copy())


def generator_forward(ids, segment_ids, weights: WeightContainer,
                      masked_positions) -> np.ndarray:
    """Distribution over the vocabulary at each requested position."""
    ids = np.asarray(ids)
    positions = list(masked_positions)
    for p in positions:
        if not (0 <= p < ids.shape[-1]):
            raise ValueError(f"masked position {p} outside sequence of length {ids.shape[-1]}")
    logits = generator_logits(ids[None, :], np.asarray(segment_ids)[None, :],
                              weights.params(), weights.config)
    rows = logits.data[0][positions]
    rows = rows - rows.max(axis=-1, keepdims=True)
    e = np.exp(rows)
    return e / e.sum(axis=-1, keepdims=True)


def init_params(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> dict:
    """Random toy initialization matching the manifest convention."""
    out = {}
    for name, shape in required_tensor_shapes(cfg).items():
        if name.endswith(".gain"):
            out[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith((".b", ".bias", ".b1", ".b2", "out_bias")):
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            out[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return out


def zero_params(cfg: ModelConfig) -> dict:
    """All-zero weights (gains included); handy for contract tests."""
    return {name: np.zeros(shape, dtype=np.float32)
            for name, shape in required_tensor_shapes(cfg).items()}


def generator_config(disc: ModelConfig) -> ModelConfig:
    """Companion generator sizing: half the discriminator width."""
    hidden = max(disc.heads, disc.hidden // 2)
    hidden -= hidden % disc.heads
    return replace(disc, hidden=hidden, intermediate=max(1, disc.intermediate // 2),
                   head_role=ROLE_GENERATOR)
