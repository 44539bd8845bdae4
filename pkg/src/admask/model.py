"""Networks: patch embedder, position MLP, transformer encoder with CLS token,
disentangled projector head, and the mask generator.

All networks are functional: parameters live in a ParamStore (flat name ->
Tensor dict) and forward functions take the store plus a config. The mask
generator shares the transformer block structure but runs without a CLS token
and ends in an MLP head producing one logit per mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# patch-local coordinates are roughly 1/8 of the cloud scale; the embedder
# multiplies them by this before its first layer (see embed_patches)
GROUP_COORD_SCALE = 8.0


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    depth: int
    heads: int
    embed_dim: int
    stochastic_depth_rate: float = 0.1
    ffn_kind: str = "swiglu"

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.ffn_kind != "swiglu":
            raise ConfigError(f"unsupported ffn_kind {self.ffn_kind!r}")


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    maskgen: EncoderConfig
    n_masks: int = 3
    n_prototypes: int = 1024
    proj_hidden: int = 2048
    proj_bottleneck: int = 256
    embed_hidden: int = 128
    pos_hidden: int = 128

    def __post_init__(self):
        if self.maskgen.embed_dim != self.encoder.embed_dim:
            raise ConfigError("mask generator must share the encoder embedding dim")


def swiglu_hidden(dim):
    """SwiGLU hidden width: 8d/3 rounded to a multiple of 8 (parameter parity
    with a plain 4d FFN)."""
    return max(8, int(round(8 * dim / 3 / 8)) * 8)


class ParamStore:
    """Flat name -> Tensor container."""

    def __init__(self, tensors=None):
        self.tensors = dict(tensors or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, t):
        self.tensors[name] = t

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def subset(self, predicate):
        """Sub-store sharing the same Tensor objects. `predicate` is a name
        prefix or a callable."""
        if isinstance(predicate, str):
            prefix = predicate
            predicate = lambda n: n.startswith(prefix)
        return ParamStore({n: t for n, t in self.tensors.items() if predicate(n)})

    def copy(self, requires_grad=False):
        return ParamStore({n: Tensor(t.data.copy(), requires_grad=requires_grad)
                           for n, t in self.tensors.items()})

    def n_params(self, prefix=""):
        return int(sum(t.size for n, t in self.tensors.items() if n.startswith(prefix)))

    def load_arrays(self, arrays, strict=True):
        """Overwrite matching tensors in place; shape mismatches are collected
        and reported together."""
        bad = [n for n, a in arrays.items()
               if n in self.tensors and tuple(a.shape) != self.tensors[n].shape]
        missing = [n for n in arrays if n not in self.tensors]
        if bad or (strict and missing):
            raise ValueError(
                "checkpoint/parameter mismatch; shape conflicts: "
                f"{sorted(bad)}, unknown names: {sorted(missing)}")
        for n, a in arrays.items():
            if n in self.tensors:
                t = self.tensors[n]
                t.data = np.ascontiguousarray(a, dtype=t.dtype)


# ---------------------------------------------------------------------------
# initialization


def _linear(store, rng, name, fan_in, fan_out, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    store[name + ".w"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                                requires_grad=True, dtype=dtype)
    store[name + ".b"] = Tensor(rng.uniform(-bound, bound, size=(fan_out,)),
                                requires_grad=True, dtype=dtype)


def _norm(store, name, dim, dtype):
    store[name + ".g"] = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
    store[name + ".b"] = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)


def _blocks(store, rng, prefix, cfg: EncoderConfig, dtype):
    d = cfg.embed_dim
    h = swiglu_hidden(d)
    for i in range(cfg.depth):
        b = f"{prefix}.blk{i}."
        _norm(store, b + "ln1", d, dtype)
        _linear(store, rng, b + "qkv", d, 3 * d, dtype)
        _linear(store, rng, b + "out", d, d, dtype)
        _norm(store, b + "ln2", d, dtype)
        _linear(store, rng, b + "gate", d, h, dtype)
        _linear(store, rng, b + "up", d, h, dtype)
        _linear(store, rng, b + "down", h, d, dtype)
    _norm(store, f"{prefix}.final", d, dtype)


def init_params(cfg: ModelConfig, rng, dtype=np.float32) -> ParamStore:
    """Create all student-side parameters (encoder stack + mask generator)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    d = cfg.encoder.embed_dim
    store = ParamStore()
    _linear(store, rng, "embedder.l1", 3, cfg.embed_hidden, dtype)
    _linear(store, rng, "embedder.l2", cfg.embed_hidden, d, dtype)
    _linear(store, rng, "pos.l1", 3, cfg.pos_hidden, dtype)
    _linear(store, rng, "pos.l2", cfg.pos_hidden, d, dtype)
    # start the position embedding small (ViT-style): early patch tokens are
    # then content-dominated, so the patch prototypes cluster on geometry
    # rather than on patch location
    store["pos.l2.w"].data *= 0.1
    store["pos.l2.b"].data *= 0.1
    store["cls_token"] = Tensor(rng.normal(0.0, 0.02, size=(1, 1, d)),
                                requires_grad=True, dtype=dtype)
    store["mask_token"] = Tensor(rng.normal(0.0, 0.02, size=(d,)),
                                 requires_grad=True, dtype=dtype)
    _blocks(store, rng, "enc", cfg.encoder, dtype)
    _linear(store, rng, "proj.t1", d, cfg.proj_hidden, dtype)
    _linear(store, rng, "proj.t2", cfg.proj_hidden, cfg.proj_hidden, dtype)
    _linear(store, rng, "proj.t3", cfg.proj_hidden, cfg.proj_bottleneck, dtype)
    # prototype heads: weight only, columns are normalized at use time so
    # logits are cosine similarities with O(1) spread (no bias)
    for head in ("proj.cls", "proj.patch"):
        bound = 1.0 / np.sqrt(cfg.proj_bottleneck)
        store[head + ".w"] = Tensor(
            rng.uniform(-bound, bound,
                        size=(cfg.proj_bottleneck, cfg.n_prototypes)),
            requires_grad=True, dtype=dtype)
    _blocks(store, rng, "mg", cfg.maskgen, dtype)
    _linear(store, rng, "mg.head.l1", d, d, dtype)
    _linear(store, rng, "mg.head.l2", d, cfg.n_masks, dtype)
    return store


def is_teacher_side(name):
    """Names mirrored into the teacher: everything except the mask generator
    and the mask token (the teacher only ever sees unmasked views)."""
    return not name.startswith("mg.") and name != "mask_token"


def make_teacher(student: ParamStore) -> ParamStore:
    return student.subset(is_teacher_side).copy(requires_grad=False)


def encoder_param_count(store: ParamStore):
    """Backbone parameters (embedder + position MLP + transformer stack)."""
    return sum(store.n_params(p) for p in ("embedder.", "pos.", "enc.", "cls_token"))


def maskgen_param_count(store: ParamStore):
    return store.n_params("mg.")


# ---------------------------------------------------------------------------
# forward passes


def _dense(params, name, x):
    return ad.add(ad.matmul(x, params[name + ".w"]), params[name + ".b"])


def embed_patches(params: ParamStore, groups, centers, split=False):
    """PointNet-style patch embedder plus position MLP.

    groups: (B, p, k, 3) center-relative coordinates; centers: (B, p, 3).
    Returns tokens (B, p, d) = per-patch max-pooled point features + position
    embedding of the center. With split=True, returns (content, position)
    separately so masking can replace patch content while keeping the
    position embedding visible.
    """
    g = groups if isinstance(groups, Tensor) else Tensor(groups)
    c = centers if isinstance(centers, Tensor) else Tensor(centers)
    # center-relative coordinates are a small fraction of the unit-sphere
    # scale; bring them to O(1) so the first layer's response is driven by
    # the points rather than by its bias
    g = ad.mul(g, GROUP_COORD_SCALE)
    # ReLU in the per-point blocks (PointNet convention); GELU in the pos MLP
    h = ad.relu(_dense(params, "embedder.l1", g))
    h = ad.relu(_dense(params, "embedder.l2", h))
    x = ad.reduce_max(h, axis=2)                       # (B, p, d)
    pos = _dense(params, "pos.l2", ad.gelu(_dense(params, "pos.l1", c)))
    if split:
        return x, pos
    return ad.add(x, pos)


def prepend_cls(params: ParamStore, tokens):
    B = tokens.shape[0]
    ones = Tensor(np.ones((B, 1, 1), dtype=tokens.dtype))
    cls_rows = ad.mul(params["cls_token"], ones)       # (B, 1, d)
    return ad.concat([cls_rows, tokens], axis=1)


def _attention(params, pfx, x, heads, collect_attn=None):
    B, T, d = x.shape
    dh = d // heads
    qkv = _dense(params, pfx + "qkv", x)               # (B, T, 3d)
    qkv = ad.reshape(qkv, (B, T, 3, heads, dh))
    qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))           # (3, B, H, T, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)                 # (B, H, T, T)
    if collect_attn is not None:
        collect_attn.append(attn.data)
    out = ad.matmul(attn, v)                           # (B, H, T, dh)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, T, d))
    return _dense(params, pfx + "out", out)


def _swiglu_ffn(params, pfx, x):
    gate = ad.swish(_dense(params, pfx + "gate", x))
    up = _dense(params, pfx + "up", x)
    return _dense(params, pfx + "down", ad.mul(gate, up))


def _drop_path(residual, rate, train_mode, rng):
    if not train_mode or rate <= 0:
        return residual
    B = residual.shape[0]
    keep = (rng.random(B) >= rate).astype(residual.dtype) / (1.0 - rate)
    return ad.mul(residual, Tensor(keep.reshape(B, 1, 1)))


def run_blocks(params: ParamStore, prefix, x, cfg: EncoderConfig,
               train_mode=False, rng=None, collect_attn=None):
    """Pre-norm transformer stack with stochastic depth, final layer norm."""
    if train_mode and cfg.stochastic_depth_rate > 0 and rng is None:
        raise ConfigError("train-mode stochastic depth needs an rng")
    for i in range(cfg.depth):
        b = f"{prefix}.blk{i}."
        a = _attention(params, b, ad.layer_norm(x, params[b + "ln1.g"], params[b + "ln1.b"]),
                       cfg.heads, collect_attn)
        x = ad.add(x, _drop_path(a, cfg.stochastic_depth_rate, train_mode, rng))
        f = _swiglu_ffn(params, b, ad.layer_norm(x, params[b + "ln2.g"], params[b + "ln2.b"]))
        x = ad.add(x, _drop_path(f, cfg.stochastic_depth_rate, train_mode, rng))
    return ad.layer_norm(x, params[f"{prefix}.final.g"], params[f"{prefix}.final.b"])


def encode(params: ParamStore, tokens_with_cls, cfg: EncoderConfig,
           train_mode=False, rng=None, collect_attn=None):
    return run_blocks(params, "enc", tokens_with_cls, cfg,
                      train_mode=train_mode, rng=rng, collect_attn=collect_attn)


def aggregate_features(encoded):
    """concat(CLS row, maxpool(patch rows) + avgpool(patch rows)) -> (B, 2d)."""
    cls_rows = encoded[:, 0]
    patches = encoded[:, 1:]
    pooled = ad.add(ad.reduce_max(patches, axis=1), ad.reduce_mean(patches, axis=1))
    return ad.concat([cls_rows, pooled], axis=-1)


def project(params: ParamStore, x, which, return_bottleneck=False):
    """Shared MLP trunk with L2-normalized bottleneck, then the head-specific
    linear layer; returns K logits per input row."""
    if which not in ("cls", "patch"):
        raise ValueError(f"unknown projector head {which!r}")
    h = ad.gelu(_dense(params, "proj.t1", x))
    h = ad.gelu(_dense(params, "proj.t2", h))
    z = _dense(params, "proj.t3", h)
    norm = ad.sqrt(ad.add(ad.reduce_sum(ad.mul(z, z), axis=-1, keepdims=True), 1e-12))
    z = ad.div(z, norm)
    # prototype layer: unit-norm columns, so logits = cosine(z, prototype)
    w = params["proj." + which + ".w"]
    wn = ad.sqrt(ad.add(ad.reduce_sum(ad.mul(w, w), axis=0, keepdims=True), 1e-12))
    logits = ad.matmul(z, ad.div(w, wn))
    return (logits, z) if return_bottleneck else logits


def generate_masks(params: ParamStore, tokens, cfg: EncoderConfig, n_masks,
                   train_mode=False, rng=None):
    """Mask generator forward: (B, p, d) tokens (no CLS) -> (B, N, p) soft
    masks, softmax over the mask axis so each patch's assignments sum to 1."""
    if n_masks < 2:
        raise ValueError(f"need at least 2 masks, got {n_masks}")
    x = run_blocks(params, "mg", tokens, cfg, train_mode=train_mode, rng=rng)
    h = ad.gelu(_dense(params, "mg.head.l1", x))
    logits = _dense(params, "mg.head.l2", h)           # (B, p, N)
    m = ad.softmax(logits, axis=-1)
    return ad.swapaxes(m, -1, -2)                      # (B, N, p)
