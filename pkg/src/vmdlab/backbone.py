"""Encoder/decoder transformer backbones with block-structured attention.

Both networks consume the concatenation [x_t ; x_0] of the noisy sequence and
a clean sequence (2L rows) and enforce the block dependency structure purely
through additive attention masks, so B=1 and B>1 share one code path:

  decoder: a noisy row in block b attends to noisy rows of block b and clean
           rows of blocks < b; clean rows attend to clean rows of blocks <= own.
  encoder: a noisy row in block b attends to noisy rows of block b and clean
           rows of blocks <= b; clean rows as in the decoder.

Masked attention weights underflow to exactly 0.0 in float32, so outputs are
bitwise invariant to the content of unattended blocks.

The per-block latent enters the decoder twice (each behind a config flag,
both on by default): projected, scaled by a learnable scalar and added to the
positional embedding of its block's rows, and as the conditioning input of
adaptive layer-norm shift/scale in every decoder layer.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax,
    transpose,
)

ATTN_NEG = np.float32(-1e9)  # additive mask value; finite, underflows to 0 in softmax


@dataclass
class BackboneConfig:
    vocab_size: int              # excludes MASK; MASK id == vocab_size
    seq_len: int                 # L
    block_len: int               # r, must divide L
    hidden_dim: int = 64
    decoder_layers: int = 8
    encoder_layers: int = 2
    num_heads: int = 4
    latent_dim: int = 32
    kl_weight: float = 1.0
    latent_enabled: bool = True
    latent_into_pos: bool = True
    latent_adaln: bool = True
    adaln_shared: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.seq_len % self.block_len != 0:
            raise ValueError(
                f"seq_len {self.seq_len} is not a multiple of block_len {self.block_len}"
            )
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        for name in ("vocab_size", "seq_len", "block_len", "hidden_dim",
                     "decoder_layers", "encoder_layers", "num_heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be nonnegative")

    @property
    def num_blocks(self) -> int:
        return self.seq_len // self.block_len

    @property
    def mask_id(self) -> int:
        return self.vocab_size


def build_attention_masks(cfg: BackboneConfig):
    """Boolean allow-matrices over the concatenated [x_t ; x_0] rows.

    Returns (encoder_mask, decoder_mask), each of shape (2L, 2L); entry [i, j]
    is True iff row i may attend to column j.
    """
    L, r = cfg.seq_len, cfg.block_len
    blk = np.arange(L) // r
    row_blk = np.concatenate([blk, blk])          # block index per row
    is_clean = np.arange(2 * L) >= L              # False: x_t half, True: x_0 half

    rb = row_blk[:, None]
    cb = row_blk[None, :]
    r_clean = is_clean[:, None]
    c_clean = is_clean[None, :]

    clean_rows = r_clean & c_clean & (cb <= rb)                    # x_0 -> x_0, blocks <= own
    dec_noisy = ~r_clean & ((~c_clean & (cb == rb)) | (c_clean & (cb < rb)))
    enc_noisy = ~r_clean & ((~c_clean & (cb == rb)) | (c_clean & (cb <= rb)))
    return enc_noisy | clean_rows, dec_noisy | clean_rows


def _additive(allow: np.ndarray) -> np.ndarray:
    return np.where(allow, np.float32(0.0), ATTN_NEG)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with tails beyond 2 std resampled."""
    out = rng.standard_normal(shape) * std
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum())) * std
    return out.astype(np.float32)


def _zeros(shape):
    return np.zeros(shape, dtype=np.float32)


def _init_stack(p: dict, prefix: str, cfg: BackboneConfig, n_layers: int,
                rng: np.random.Generator, with_adaln: bool):
    H = cfg.hidden_dim
    M = cfg.mlp_ratio * H
    for l in range(n_layers):
        pre = f"{prefix}layers.{l}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + f"attn.{name}"] = Tensor(trunc_normal(rng, (H, H)))
            p[pre + f"attn.{name[1]}b"] = Tensor(_zeros(H))
        p[pre + "ln1.g"] = Tensor(np.ones(H, dtype=np.float32))
        p[pre + "ln1.b"] = Tensor(_zeros(H))
        p[pre + "ln2.g"] = Tensor(np.ones(H, dtype=np.float32))
        p[pre + "ln2.b"] = Tensor(_zeros(H))
        p[pre + "mlp.w1"] = Tensor(trunc_normal(rng, (H, M)))
        p[pre + "mlp.b1"] = Tensor(_zeros(M))
        p[pre + "mlp.w2"] = Tensor(trunc_normal(rng, (M, H)))
        p[pre + "mlp.b2"] = Tensor(_zeros(H))
        if with_adaln and not cfg.adaln_shared:
            p[pre + "adaln.w"] = Tensor(trunc_normal(rng, (H, 4 * H)))
            p[pre + "adaln.b"] = Tensor(_zeros(4 * H))
    p[prefix + "ln_f.g"] = Tensor(np.ones(H, dtype=np.float32))
    p[prefix + "ln_f.b"] = Tensor(_zeros(H))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # flatten so the matmul is a single large GEMM
    shp = x.value.shape
    out = add(matmul(reshape(x, (-1, shp[-1])), w), b)
    return reshape(out, shp[:-1] + (w.value.shape[-1],))


def _attention(h: Tensor, p: dict, pre: str, mask_add: np.ndarray, num_heads: int) -> Tensor:
    batch, T, H = h.value.shape
    dh = H // num_heads
    scale = 1.0 / np.sqrt(dh)

    def split_heads(t):
        return transpose(reshape(t, (batch, T, num_heads, dh)), (0, 2, 1, 3))

    q = split_heads(_linear(h, p[pre + "attn.wq"], p[pre + "attn.qb"]))
    k = split_heads(_linear(h, p[pre + "attn.wk"], p[pre + "attn.kb"]))
    v = split_heads(_linear(h, p[pre + "attn.wv"], p[pre + "attn.vb"]))
    scores = add(mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale), mask_add)
    ctx = matmul(softmax(scores, axis=-1), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (batch, T, H))
    return _linear(ctx, p[pre + "attn.wo"], p[pre + "attn.ob"])


def _modulate(x: Tensor, cond_mod: Tensor | None, shift_idx: int, scale_idx: int) -> Tensor:
    # cond_mod packs [shift1, scale1, shift2, scale2] along the feature axis
    if cond_mod is None:
        return x
    H = x.value.shape[-1]
    shift = cond_mod[:, :, shift_idx * H:(shift_idx + 1) * H]
    scale = cond_mod[:, :, scale_idx * H:(scale_idx + 1) * H]
    return add(mul(x, add(scale, 1.0)), shift)


def _run_stack(h: Tensor, p: dict, prefix: str, cfg: BackboneConfig, n_layers: int,
               mask_add: np.ndarray, cond_rows: Tensor | None) -> Tensor:
    use_adaln = cond_rows is not None and cfg.latent_adaln
    shared_mod = None
    if use_adaln and cfg.adaln_shared:
        shared_mod = _linear(cond_rows, p[prefix + "adaln.w"], p[prefix + "adaln.b"])
    for l in range(n_layers):
        pre = f"{prefix}layers.{l}."
        if use_adaln:
            mod = shared_mod if cfg.adaln_shared else _linear(
                cond_rows, p[pre + "adaln.w"], p[pre + "adaln.b"])
        else:
            mod = None
        a = layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        a = _modulate(a, mod, 0, 1)
        h = add(h, _attention(a, p, pre, mask_add, cfg.num_heads))
        m = layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        m = _modulate(m, mod, 2, 3)
        m = _linear(gelu(_linear(m, p[pre + "mlp.w1"], p[pre + "mlp.b1"])),
                    p[pre + "mlp.w2"], p[pre + "mlp.b2"])
        h = add(h, m)
    return layer_norm(h, p[prefix + "ln_f.g"], p[prefix + "ln_f.b"])


class VMDModel:
    """Decoder (always) plus encoder (when the latent pathway is enabled).

    With `latent_enabled=False` this is the latent-free baseline: same decoder
    backbone, no encoder, no latent projection, plain layer norm — parameter
    for parameter the VMD decoder minus its latent pathway.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        L, H, V = cfg.seq_len, cfg.hidden_dim, cfg.vocab_size
        enc_allow, dec_allow = build_attention_masks(cfg)
        self._enc_mask = _additive(enc_allow)
        self._dec_mask = _additive(dec_allow)
        blk = np.arange(L) // cfg.block_len
        row_blk = np.concatenate([blk, blk])
        # constant (2L, B) expansion: row i picks up its block's latent
        self._expand = np.zeros((2 * L, cfg.num_blocks), dtype=np.float32)
        self._expand[np.arange(2 * L), row_blk] = 1.0
        self._pos_ids = np.concatenate([np.arange(L), np.arange(L)])
        self._stream_ids = np.repeat([0, 1], L)

        p: dict[str, Tensor] = {}
        p["decoder.tok_embed"] = Tensor(trunc_normal(rng, (V + 1, H)))
        p["decoder.pos_embed"] = Tensor(trunc_normal(rng, (L, H)))
        p["decoder.stream_embed"] = Tensor(trunc_normal(rng, (2, H)))
        if cfg.latent_enabled:
            p["decoder.latent_proj.w"] = Tensor(trunc_normal(rng, (cfg.latent_dim, H)))
            p["decoder.latent_proj.b"] = Tensor(_zeros(H))
            p["decoder.latent_scale"] = Tensor(np.float32(0.1))
            if cfg.latent_adaln and cfg.adaln_shared:
                p["decoder.adaln.w"] = Tensor(trunc_normal(rng, (H, 4 * H)))
                p["decoder.adaln.b"] = Tensor(_zeros(4 * H))
        _init_stack(p, "decoder.", cfg, cfg.decoder_layers, rng,
                    with_adaln=cfg.latent_enabled and cfg.latent_adaln)
        p["decoder.head.w"] = Tensor(trunc_normal(rng, (H, V)))
        p["decoder.head.b"] = Tensor(_zeros(V))

        if cfg.latent_enabled:
            p["encoder.tok_embed"] = Tensor(trunc_normal(rng, (V + 1, H)))
            p["encoder.pos_embed"] = Tensor(trunc_normal(rng, (L, H)))
            p["encoder.stream_embed"] = Tensor(trunc_normal(rng, (2, H)))
            _init_stack(p, "encoder.", cfg, cfg.encoder_layers, rng, with_adaln=False)
            p["encoder.gate.w"] = Tensor(trunc_normal(rng, (H, 1)))
            p["encoder.gate.b"] = Tensor(_zeros(1))
            p["encoder.mu.w"] = Tensor(trunc_normal(rng, (H, cfg.latent_dim)))
            p["encoder.mu.b"] = Tensor(_zeros(cfg.latent_dim))
            p["encoder.log_sigma.w"] = Tensor(trunc_normal(rng, (H, cfg.latent_dim)))
            p["encoder.log_sigma.b"] = Tensor(_zeros(cfg.latent_dim))
        self.params = p

    # -- helpers ------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_params(self, include_latent_pathway: bool = True) -> int:
        total = 0
        for name, t in self.params.items():
            if name.startswith("encoder."):
                continue
            if not include_latent_pathway and self._is_latent_param(name):
                continue
            total += t.value.size
        return total

    def _is_latent_param(self, name: str) -> bool:
        return name.startswith(("decoder.latent_proj", "decoder.latent_scale")) or ".adaln." in name or name.startswith("decoder.adaln")

    def _embed(self, half_prefix: str, ids: np.ndarray) -> Tensor:
        p = self.params
        tok = embedding(p[half_prefix + "tok_embed"], ids)
        pos = embedding(p[half_prefix + "pos_embed"], self._pos_ids)
        stream = embedding(p[half_prefix + "stream_embed"], self._stream_ids)
        return add(add(tok, pos), stream)

    def _check_tokens(self, x: np.ndarray, name: str, allow_mask: bool) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.cfg.seq_len:
            raise ValueError(f"{name}: expected length {self.cfg.seq_len}, got {x.shape[-1]}")
        hi = self.cfg.mask_id if allow_mask else self.cfg.mask_id - 1
        if x.min() < 0 or x.max() > hi:
            raise ValueError(f"{name}: token id out of range (MASK allowed: {allow_mask})")
        return x

    # -- forward passes -----------------------------------------------------

    def decode(self, x_t, x_0_prefix=None, z=None) -> Tensor:
        """Logits (batch, L, vocab_size) for the noisy half.

        `x_0_prefix` supplies clean-block conditioning (any value works for
        blocks the attention mask hides, MASK included); `z` is the per-block
        latent (batch, num_blocks, latent_dim), required iff the latent
        pathway is on.
        """
        cfg = self.cfg
        x_t = self._check_tokens(x_t, "x_t", allow_mask=True)
        if x_0_prefix is None:
            x_0_prefix = np.full_like(x_t, cfg.mask_id)
        x_0_prefix = self._check_tokens(x_0_prefix, "x_0_prefix", allow_mask=True)
        if x_0_prefix.shape[0] != x_t.shape[0]:
            raise ValueError("decode: x_t and x_0_prefix batch sizes differ")

        cond_rows = None
        if cfg.latent_enabled:
            if z is None:
                raise ValueError("decode: latent pathway is enabled but z is None")
            if not isinstance(z, Tensor):
                z = Tensor(np.asarray(z, dtype=np.float32))
            if z.value.ndim == 2:
                z = reshape(z, (z.value.shape[0], 1, z.value.shape[1]))
            if z.value.shape[1] != cfg.num_blocks or z.value.shape[2] != cfg.latent_dim:
                raise ValueError(
                    f"decode: z has {z.value.shape[1]} blocks x {z.value.shape[2]} dims, "
                    f"model expects {cfg.num_blocks} x {cfg.latent_dim}"
                )
            proj = _linear(z, self.params["decoder.latent_proj.w"],
                           self.params["decoder.latent_proj.b"])
            cond_rows = matmul(self._expand, proj)     # (batch, 2L, H)
        elif z is not None:
            raise ValueError("decode: model has no latent pathway but z was given")

        ids = np.concatenate([x_t, x_0_prefix], axis=1)
        h = self._embed("decoder.", ids)
        if cond_rows is not None and cfg.latent_into_pos:
            h = add(h, mul(cond_rows, self.params["decoder.latent_scale"]))
        h = _run_stack(h, self.params, "decoder.", cfg, cfg.decoder_layers,
                       self._dec_mask, cond_rows if cfg.latent_adaln else None)
        h = h[:, :cfg.seq_len, :]
        return _linear(h, self.params["decoder.head.w"], self.params["decoder.head.b"])

    def encode(self, x_t, x_0, pool_exclude=None):
        """Per-block posterior parameters (mu, log_sigma), each (batch, B, latent_dim).

        `pool_exclude`: optional boolean (L,) marking positions the pooling
        head must ignore (e.g. prompt tokens); blocks whose every row would be
        excluded fall back to unrestricted pooling over their own rows.
        """
        cfg = self.cfg
        if not cfg.latent_enabled:
            raise ValueError("encode: model has no encoder (latent pathway disabled)")
        x_t = self._check_tokens(x_t, "x_t", allow_mask=True)
        x_0 = self._check_tokens(x_0, "x_0", allow_mask=False)
        if x_0.shape[0] != x_t.shape[0]:
            raise ValueError("encode: x_t and x_0 batch sizes differ")

        ids = np.concatenate([x_t, x_0], axis=1)
        h = self._embed("encoder.", ids)
        h = _run_stack(h, self.params, "encoder.", cfg, cfg.encoder_layers,
                       self._enc_mask, None)

        pool_add = self._pool_mask(pool_exclude)
        gate = _linear(h, self.params["encoder.gate.w"], self.params["encoder.gate.b"])
        gate = transpose(gate, (0, 2, 1))                     # (batch, 1, 2L)
        weights = softmax(add(gate, pool_add), axis=-1)       # (batch, B, 2L)
        pooled = matmul(weights, h)                           # (batch, B, H)
        mu = _linear(pooled, self.params["encoder.mu.w"], self.params["encoder.mu.b"])
        log_sigma = _linear(pooled, self.params["encoder.log_sigma.w"],
                            self.params["encoder.log_sigma.b"])
        return mu, log_sigma

    def _pool_mask(self, pool_exclude) -> np.ndarray:
        """(B, 2L) additive mask: block b pools over its own rows in both halves."""
        cfg = self.cfg
        L, B, r = cfg.seq_len, cfg.num_blocks, cfg.block_len
        blk = np.arange(L) // r
        row_blk = np.concatenate([blk, blk])
        own = row_blk[None, :] == np.arange(B)[:, None]
        if pool_exclude is not None:
            excl = np.asarray(pool_exclude, dtype=bool)
            if excl.shape != (L,):
                raise ValueError(f"pool_exclude must have shape ({L},), got {excl.shape}")
            keep = own & ~np.concatenate([excl, excl])[None, :]
            # a fully-excluded block falls back to its unrestricted rows
            empty = ~keep.any(axis=1)
            keep[empty] = own[empty]
            own = keep
        return _additive(own)


# ---------------------------------------------------------------------------
# checkpoint format: JSON manifest + little-endian raw float32 blob
# ---------------------------------------------------------------------------

CKPT_FORMAT_VERSION = 1


def save_checkpoint(model: VMDModel, path_base: str, extra: dict | None = None):
    """Write `<path_base>.json` and `<path_base>.bin`; bit-exact round trip."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(model.params):
        v = model.params[name].value
        if v.dtype != np.float32:
            raise ValueError(f"save_checkpoint: parameter {name} is {v.dtype}, expected float32")
        raw = np.ascontiguousarray(v).astype("<f4", copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(v.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CKPT_FORMAT_VERSION,
        "backbone": asdict(model.cfg),
        "total_bytes": offset,
        "params": entries,
    }
    if extra:
        manifest["extra"] = extra
    with open(path_base + ".json", "w") as f:
        json.dump(manifest, f, indent=1)
    with open(path_base + ".bin", "wb") as f:
        f.write(b"".join(blobs))


def load_checkpoint(path_base: str):
    """Read a checkpoint; returns (params: dict[str, np.ndarray], manifest)."""
    with open(path_base + ".json") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CKPT_FORMAT_VERSION:
        raise ValueError(f"load_checkpoint: unsupported format_version {manifest.get('format_version')}")
    blob_path = path_base + ".bin"
    size = os.path.getsize(blob_path)
    if size != manifest["total_bytes"]:
        raise ValueError(
            f"load_checkpoint: blob has {size} bytes, manifest declares {manifest['total_bytes']}"
        )
    with open(blob_path, "rb") as f:
        blob = f.read()
    params = {}
    for e in manifest["params"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ValueError(f"load_checkpoint: blob truncated at parameter {e['name']}")
        arr = np.frombuffer(blob[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        if arr.size * 4 != e["nbytes"]:
            raise ValueError(f"load_checkpoint: byte count mismatch for parameter {e['name']}")
        params[e["name"]] = arr.astype(np.float32, copy=True)
    return params, manifest


def model_from_checkpoint(path_base: str, rng: np.random.Generator | None = None) -> VMDModel:
    """Rebuild a model from a checkpoint's own stored config."""
    params, manifest = load_checkpoint(path_base)
    cfg = BackboneConfig(**manifest["backbone"])
    model = VMDModel(cfg, rng or np.random.default_rng(0))
    _assign(model, params)
    return model


def load_into_model(model: VMDModel, path_base: str):
    """Load a checkpoint into an existing model; config must be compatible."""
    params, manifest = load_checkpoint(path_base)
    saved = manifest["backbone"]
    ours = asdict(model.cfg)
    for key in ("seq_len", "block_len", "vocab_size", "hidden_dim", "latent_enabled"):
        if saved[key] != ours[key]:
            raise ValueError(
                f"load_into_model: checkpoint was built with {key}={saved[key]} "
                f"(block structure {saved['seq_len']}/{saved['block_len']}), "
                f"model expects {key}={ours[key]}"
            )
    _assign(model, params)


def _assign(model: VMDModel, params: dict):
    missing = set(model.params) - set(params)
    extra = set(params) - set(model.params)
    if missing or extra:
        name = sorted(missing | extra)[0]
        raise ValueError(f"checkpoint/model parameter set mismatch at parameter {name}")
    for name, arr in params.items():
        tgt = model.params[name]
        if tuple(arr.shape) != tgt.value.shape:
            raise ValueError(
                f"checkpoint shape {arr.shape} != model shape {tgt.value.shape} "
                f"for parameter {name}"
            )
        tgt.value = arr.astype(np.float32, copy=True)
        tgt.grad = None
