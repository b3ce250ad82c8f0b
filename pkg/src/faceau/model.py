"""Masked-autoencoder model: patch pipeline, masking, encoder/decoder/head.

One image at a time: patch matrices are [N, p*p*C], the encoder sees the
visible subset, the decoder fills masked slots with one shared learned token
and predicts pixels for every patch. The classifier path runs the encoder on
all tokens, mean-pools, and applies a norm + linear head.

Weights live in a flat name->Tensor dict so the optimizer and the checkpoint
format can treat them uniformly. Positional tables are fixed sin-cos and are
recomputed from the config rather than serialized.
"""

from __future__ import annotations

import binascii
import dataclasses
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .ndgrad import ShapeError, Tensor

TASKS = ("pretrain", "detect", "intensity")

# encoder parameter namespaces, shared between pre-training and fine-tuning
ENCODER_PREFIXES = ("patch_embed.", "enc.")


class ConfigError(ValueError):
    """Model configuration violates a structural constraint."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated, or incompatible."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 4
    enc_depth: int = 4
    enc_width: int = 128
    enc_heads: int = 4
    dec_depth: int = 2
    dec_width: int = 64
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    num_aus: int = 4
    mask_ratio: float = 0.75
    norm_pix_target: bool = True
    task: str = "pretrain"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.enc_width % self.enc_heads != 0:
            raise ConfigError(f"enc_width {self.enc_width} not divisible by enc_heads {self.enc_heads}")
        if self.dec_width % self.dec_heads != 0:
            raise ConfigError(f"dec_width {self.dec_width} not divisible by dec_heads {self.dec_heads}")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside [0, 1)")
        if self.num_aus < 1:
            raise ConfigError("num_aus must be >= 1")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid_size ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


_PRESETS = {
    # GPU-scale geometry; too heavy to train on a desk CPU
    "full": dict(
        image_size=224, channels=3, patch_size=16,
        enc_depth=12, enc_width=768, enc_heads=12,
        dec_depth=8, dec_width=512, dec_heads=16,
        mlp_ratio=4.0, num_aus=12, mask_ratio=0.75,
    ),
    # CPU-sized twin for tests and the synthetic corpus
    "desk": dict(
        image_size=32, channels=1, patch_size=4,
        enc_depth=4, enc_width=128, enc_heads=4,
        dec_depth=2, dec_width=64, dec_heads=4,
        mlp_ratio=4.0, num_aus=4, mask_ratio=0.75,
    ),
}


def preset(name, **overrides):
    """Named ModelConfig preset ('full' or 'desk'), with field overrides."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(_PRESETS)}")
    fields = dict(_PRESETS[name])
    fields.update(overrides)
    return ModelConfig(**fields)


# ---------------------------------------------------------------------------
# patch pipeline


def patchify(image, patch_size):
    """[C,H,W] image -> [N, p*p*C] patch rows, raster grid order.

    Within a patch, pixels are row-major with channels fastest.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"patchify expects [C,H,W], got shape {image.shape}")
    c, h, w = image.shape
    if h != w:
        raise ShapeError(f"patchify expects a square image, got {h}x{w}")
    if h % patch_size != 0:
        raise ShapeError(f"image side {h} not divisible by patch size {patch_size}")
    g = h // patch_size
    x = image.reshape(c, g, patch_size, g, patch_size)
    x = x.transpose(1, 3, 2, 4, 0)  # gy, gx, py, px, c
    return np.ascontiguousarray(x.reshape(g * g, patch_size * patch_size * c))


def unpatchify(patches, patch_size, channels):
    """Inverse of patchify: [N, p*p*C] -> [C,H,W]."""
    patches = np.asarray(patches)
    n, d = patches.shape
    g = math.isqrt(n)
    if g * g != n:
        raise ShapeError(f"patch count {n} is not a perfect square")
    if d != patch_size * patch_size * channels:
        raise ShapeError(f"patch row width {d} does not match p={patch_size}, C={channels}")
    x = patches.reshape(g, g, patch_size, patch_size, channels)
    x = x.transpose(4, 0, 2, 1, 3)  # c, gy, py, gx, px
    return np.ascontiguousarray(x.reshape(channels, g * patch_size, g * patch_size))


def pos_embed_sincos(n_tokens, dim):
    """Fixed 2-D sine-cosine table [n_tokens, dim], float64.

    Half the width encodes the row coordinate, half the column, each with
    the standard base-10000 frequency ladder.
    """
    g = math.isqrt(n_tokens)
    if g * g != n_tokens:
        raise ShapeError(f"token count {n_tokens} is not a perfect square")
    if dim % 4 != 0:
        raise ShapeError(f"embedding width {dim} must be divisible by 4")

    def axis_table(positions, d):
        half = d // 2
        omega = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
        args = np.outer(positions.astype(np.float64), omega)
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)

    ys, xs = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    emb_y = axis_table(ys.reshape(-1), dim // 2)
    emb_x = axis_table(xs.reshape(-1), dim // 2)
    return np.concatenate([emb_y, emb_x], axis=1)


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskPlan:
    permutation: np.ndarray  # int64 bijection on [0, N)
    num_visible: int

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        n = perm.size
        if not (0 <= self.num_visible <= n):
            raise ValueError(f"num_visible {self.num_visible} outside [0, {n}]")
        if np.sort(perm).tolist() != list(range(n)):
            raise ValueError("permutation is not a bijection on [0, N)")
        object.__setattr__(self, "permutation", perm)

    @property
    def num_tokens(self):
        return int(self.permutation.size)

    @property
    def visible_idx(self):
        return self.permutation[: self.num_visible]

    @property
    def masked_idx(self):
        return self.permutation[self.num_visible:]

    @property
    def restore_order(self):
        # inverse permutation: restore_order[original index] = shuffled row
        return np.argsort(self.permutation)


def sample_mask(n_tokens, mask_ratio, rng):
    """Uniform random mask plan via an explicit Fisher-Yates shuffle."""
    if n_tokens < 1:
        raise ValueError("need at least one token")
    if not (0.0 <= mask_ratio < 1.0):
        raise ValueError(f"mask_ratio {mask_ratio} outside [0, 1)")
    perm = np.arange(n_tokens, dtype=np.int64)
    for i in range(n_tokens - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    # tiny slack so ratios like 0.9 with an exact-integer product don't
    # floor one token low from float rounding
    num_visible = int(math.floor(n_tokens * (1.0 - mask_ratio) + 1e-9))
    return MaskPlan(permutation=perm, num_visible=num_visible)


def full_plan(n_tokens):
    """Identity plan with nothing masked (fine-tuning path)."""
    return MaskPlan(permutation=np.arange(n_tokens, dtype=np.int64), num_visible=n_tokens)


# ---------------------------------------------------------------------------
# weights


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict  # name -> Tensor, insertion-ordered
    enc_pos: np.ndarray
    dec_pos: np.ndarray | None

    def param_items(self):
        return list(self.params.items())

    def clone(self):
        copies = {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in self.params.items()
        }
        return ModelWeights(self.config, copies, self.enc_pos.copy(),
                            None if self.dec_pos is None else self.dec_pos.copy())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _trunc_normal(rng, size, std):
    out = rng.standard_normal(size) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


def _add_linear(params, rng, name, fan_in, fan_out):
    params[f"{name}.w"] = Tensor(_xavier(rng, fan_in, fan_out), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _add_norm(params, name, width):
    params[f"{name}.g"] = Tensor(np.ones(width), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(width), requires_grad=True)


def _add_blocks(params, rng, prefix, depth, width, mlp_ratio):
    hidden = int(width * mlp_ratio)
    for i in range(depth):
        b = f"{prefix}.blocks.{i}"
        _add_norm(params, f"{b}.ln1", width)
        for proj in ("q", "k", "v", "out"):
            _add_linear(params, rng, f"{b}.attn.{proj}", width, width)
        _add_norm(params, f"{b}.ln2", width)
        _add_linear(params, rng, f"{b}.mlp.fc1", width, hidden)
        _add_linear(params, rng, f"{b}.mlp.fc2", hidden, width)


def init_weights(config, rng):
    """Fresh weights: Xavier-uniform linears, zero biases, unit norms.

    Parameter creation order is fixed, so a given rng state yields
    bit-identical weights.
    """
    params = {}
    _add_linear(params, rng, "patch_embed", config.patch_dim, config.enc_width)
    _add_blocks(params, rng, "enc", config.enc_depth, config.enc_width, config.mlp_ratio)
    _add_norm(params, "enc.norm", config.enc_width)

    dec_pos = None
    if config.task == "pretrain":
        _add_linear(params, rng, "dec.embed", config.enc_width, config.dec_width)
        params["dec.mask_token"] = Tensor(
            _trunc_normal(rng, config.dec_width, 0.02), requires_grad=True)
        _add_blocks(params, rng, "dec", config.dec_depth, config.dec_width, config.mlp_ratio)
        _add_norm(params, "dec.norm", config.dec_width)
        _add_linear(params, rng, "dec.head", config.dec_width, config.patch_dim)
        dec_pos = pos_embed_sincos(config.num_patches, config.dec_width).astype(
            ng.default_dtype())
    else:
        _add_norm(params, "head.norm", config.enc_width)
        _add_linear(params, rng, "head.fc", config.enc_width, config.num_aus)

    enc_pos = pos_embed_sincos(config.num_patches, config.enc_width).astype(
        ng.default_dtype())
    return ModelWeights(config=config, params=params, enc_pos=enc_pos, dec_pos=dec_pos)


# ---------------------------------------------------------------------------
# forward passes


def _linear(x, params, name):
    return ng.add(ng.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _norm(x, params, name):
    return ng.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _attention(x, params, prefix, heads):
    t, d = x.shape
    dh = d // heads
    q = _linear(x, params, f"{prefix}.q")
    k = _linear(x, params, f"{prefix}.k")
    v = _linear(x, params, f"{prefix}.v")
    qh = ng.transpose(ng.reshape(q, (t, heads, dh)), (1, 0, 2))
    kh = ng.transpose(ng.reshape(k, (t, heads, dh)), (1, 0, 2))
    vh = ng.transpose(ng.reshape(v, (t, heads, dh)), (1, 0, 2))
    att = ng.softmax(ng.scale(ng.bmm(qh, ng.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh)))
    ctx = ng.reshape(ng.transpose(ng.bmm(att, vh), (1, 0, 2)), (t, d))
    return _linear(ctx, params, f"{prefix}.out")


def _mlp(x, params, prefix):
    return _linear(ng.gelu(_linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def _blocks(x, params, prefix, depth, heads, branch_hook=None):
    # pre-norm blocks; branch_hook wraps each residual branch (drop path)
    for i in range(depth):
        b = f"{prefix}.blocks.{i}"
        a = _attention(_norm(x, params, f"{b}.ln1"), params, f"{b}.attn", heads)
        if branch_hook is not None:
            a = branch_hook(a)
        x = ng.add(x, a)
        m = _mlp(_norm(x, params, f"{b}.ln2"), params, f"{b}.mlp")
        if branch_hook is not None:
            m = branch_hook(m)
        x = ng.add(x, m)
    return x


def _as_patch_tensor(patches, config):
    if not isinstance(patches, Tensor):
        patches = Tensor(np.asarray(patches, dtype=ng.default_dtype()))
    if patches.shape != (config.num_patches, config.patch_dim):
        raise ShapeError(
            f"expected patches [{config.num_patches}, {config.patch_dim}], got {patches.shape}")
    return patches


def encoder_forward(weights, patches, plan, branch_hook=None):
    """Visible-token encoder: project, add positions, keep visible rows, blocks."""
    cfg = weights.config
    patches = _as_patch_tensor(patches, cfg)
    if plan.num_tokens != cfg.num_patches:
        raise ShapeError(f"plan covers {plan.num_tokens} tokens, model has {cfg.num_patches}")
    x = _linear(patches, weights.params, "patch_embed")
    x = ng.add(x, Tensor(weights.enc_pos))
    x = ng.index_select(x, plan.visible_idx)
    x = _blocks(x, weights.params, "enc", cfg.enc_depth, cfg.enc_heads, branch_hook)
    return _norm(x, weights.params, "enc.norm")


def decoder_forward(weights, latent, plan):
    """Reconstruct all N patch rows from visible latents plus mask tokens."""
    cfg = weights.config
    if cfg.task != "pretrain":
        raise ValueError(f"decoder requires task 'pretrain', model is {cfg.task!r}")
    if latent.shape != (plan.num_visible, cfg.enc_width):
        raise ShapeError(
            f"latent shape {latent.shape} != ({plan.num_visible}, {cfg.enc_width})")
    params = weights.params
    x = _linear(latent, params, "dec.embed")
    n_masked = plan.num_tokens - plan.num_visible
    if n_masked > 0:
        tokens = ng.broadcast_rows(params["dec.mask_token"], n_masked)
        x = ng.concat_rows([x, tokens])
    x = ng.index_select(x, plan.restore_order)
    x = ng.add(x, Tensor(weights.dec_pos))
    x = _blocks(x, params, "dec", cfg.dec_depth, cfg.dec_heads)
    x = _norm(x, params, "dec.norm")
    return _linear(x, params, "dec.head")


def classifier_forward(weights, patches, branch_hook=None):
    """All-token encoder, mean pool, norm, linear head -> [num_aus] logits."""
    cfg = weights.config
    if cfg.task not in ("detect", "intensity"):
        raise ValueError(f"classifier requires a fine-tune task, model is {cfg.task!r}")
    latent = encoder_forward(weights, patches, full_plan(cfg.num_patches), branch_hook)
    pooled = ng.mean(latent, axis=0)
    pooled = _norm(pooled, weights.params, "head.norm")
    out = ng.matmul(ng.reshape(pooled, (1, cfg.enc_width)), weights.params["head.fc.w"])
    out = ng.add(ng.reshape(out, (cfg.num_aus,)), weights.params["head.fc.b"])
    return out


# ---------------------------------------------------------------------------
# checkpoint wire format
#
#   magic "MAEF" | u32 version | u32 config_len | config JSON
#   | u32 n_params | per param: u16 name_len, name, u8 ndim, u32 dims.., u64 offset
#   | u64 data_len | float32 LE data | u32 crc32 of everything before it

_MAGIC = b"MAEF"
_VERSION = 1


def save_weights(weights, path):
    cfg_json = json.dumps(dataclasses.asdict(weights.config), sort_keys=True).encode()
    header = bytearray()
    header += _MAGIC
    header += struct.pack("<I", _VERSION)
    header += struct.pack("<I", len(cfg_json))
    header += cfg_json
    header += struct.pack("<I", len(weights.params))
    blob = bytearray()
    for name, t in weights.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        nb = name.encode()
        header += struct.pack("<H", len(nb)) + nb
        header += struct.pack("<B", t.data.ndim)
        for d in t.data.shape:
            header += struct.pack("<I", d)
        header += struct.pack("<Q", len(blob))
        blob += raw
    header += struct.pack("<Q", len(blob))
    body = bytes(header) + bytes(blob)
    crc = binascii.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", crc))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]


def _parse_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise CheckpointError("file too small to be a checkpoint")
    body, trailer = raw[:-4], raw[-4:]
    crc = struct.unpack("<I", trailer)[0]
    if binascii.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    r = _Reader(body)
    if r.take(4) != _MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = r.u("<I")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {_VERSION}")
    cfg_len = r.u("<I")
    try:
        cfg_fields = json.loads(r.take(cfg_len).decode())
        config = ModelConfig(**cfg_fields)
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"bad embedded config: {e}") from e
    n_params = r.u("<I")
    table = []
    for _ in range(n_params):
        name = r.take(r.u("<H")).decode()
        ndim = r.u("<B")
        shape = tuple(r.u("<I") for _ in range(ndim))
        offset = r.u("<Q")
        table.append((name, shape, offset))
    data_len = r.u("<Q")
    blob = r.take(data_len)
    arrays = {}
    for name, shape, offset in table:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"parameter {name!r} extends past data block")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                     offset=offset).reshape(shape).copy()
    return config, arrays


def load_weights(path):
    """Full checkpoint -> ModelWeights; fails whole, never partially."""
    config, arrays = _parse_checkpoint(path)
    # fresh skeleton gives canonical ordering and expected shapes
    skeleton = init_weights(config, np.random.default_rng(0))
    missing = [n for n in skeleton.params if n not in arrays]
    extra = [n for n in arrays if n not in skeleton.params]
    wrong = [
        f"{n}: file {arrays[n].shape} vs model {skeleton.params[n].shape}"
        for n in skeleton.params
        if n in arrays and arrays[n].shape != skeleton.params[n].data.shape
    ]
    if missing or extra or wrong:
        raise CheckpointError(
            "parameter mismatch; missing=" + repr(missing)
            + " unexpected=" + repr(extra) + " shapes=" + repr(wrong))
    for name, t in skeleton.params.items():
        t.data = arrays[name].astype(ng.default_dtype())
    return skeleton


def load_encoder_only(path, config, rng):
    """Checkpoint encoder + fresh everything else, for the fine-tune handoff."""
    ckpt_config, arrays = _parse_checkpoint(path)
    weights = init_weights(config, rng)
    problems = []
    for name, t in weights.params.items():
        if not name.startswith(ENCODER_PREFIXES):
            continue
        if name not in arrays:
            problems.append(f"{name}: absent from checkpoint")
        elif arrays[name].shape != t.data.shape:
            problems.append(f"{name}: file {arrays[name].shape} vs model {t.data.shape}")
    if problems:
        raise CheckpointError("encoder load failed; " + "; ".join(problems))
    for name, t in weights.params.items():
        if name.startswith(ENCODER_PREFIXES):
            t.data = arrays[name].astype(ng.default_dtype())
    return weights


def encoder_bytes(weights):
    """Concatenated raw bytes of encoder parameters, for freeze checks."""
    parts = [
        np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        for name, t in weights.params.items()
        if name.startswith(ENCODER_PREFIXES)
    ]
    return b"".join(parts)
