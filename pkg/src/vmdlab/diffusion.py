"""Forward masking process and the three training objectives.

The forward process replaces each token independently with MASK with
probability t. A single draw of (t, x_t) gives an unbiased estimate of the
time integral behind each objective:

  latent-free:  (1/t) * sum_masked CE
  latent:       (1/t) * [sum_masked CE + beta * KL(q(z | x_0, x_t) || N(0, I))]
  block latent: sum_b (1/t^b) * [CE_b + beta * KL_b],  t^b independent per block

All losses are averaged over the batch and per token for optimizer stability;
multiply reported values by seq_len to read per-sequence nats.

`vmd_loss` is the single-block objective written out on its own; it draws
from its RNGs in exactly the same order and shapes as `block_vmd_loss` with
one block, so the two must agree bitwise on the same streams (and a test
holds them to that).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Adam,
    Tensor,
    add,
    backward,
    cross_entropy_from_logits,
    gaussian_kl,
    mean,
    mul,
    reparameterize,
    reshape,
    sum_,
)
from .backbone import VMDModel, save_checkpoint
from .datasets import DatasetSpec, sample_batch, sudoku_prompt_mask


@dataclass
class TrainConfig:
    batch_size: int
    num_steps: int
    lr: float = 1e-3
    t_min: float = 1e-3
    kl_weight: float | None = None     # None: use the backbone's
    kl_in_t_weight: bool = True
    kl_warmup_steps: int = 0           # linear ramp 0 -> kl_weight over this many steps
    log_every: int = 50
    checkpoint_every: int | None = None

    def __post_init__(self):
        if not (0.0 < self.t_min <= 0.1):
            raise ValueError(f"t_min must lie in (0, 0.1], got {self.t_min}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.kl_warmup_steps < 0:
            raise ValueError("kl_warmup_steps must be >= 0")


@dataclass
class DiffusionState:
    x_t: np.ndarray        # (batch, L), MASK at masked positions
    t: np.ndarray          # (batch,) or (batch, num_blocks)
    masked: np.ndarray     # bool (batch, L)


def mask_sequence(x_0, t, rng: np.random.Generator, mask_id: int,
                  block_len: int | None = None) -> DiffusionState:
    """Independently mask each position with its block's probability t.

    `t` may be a scalar, a per-example vector (batch,), or a per-example
    per-block matrix (batch, B) with `block_len` giving the block width.
    """
    x_0 = np.asarray(x_0)
    if x_0.ndim == 1:
        x_0 = x_0[None, :]
    batch, L = x_0.shape
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        t_pos = np.full((batch, L), float(t_arr))
    elif t_arr.ndim == 1:
        t_pos = np.broadcast_to(t_arr[:, None], (batch, L))
    else:
        if block_len is None or t_arr.shape[1] * block_len != L:
            raise ValueError(
                f"mask_sequence: per-block t of shape {t_arr.shape} needs block_len "
                f"with blocks * block_len == {L}"
            )
        t_pos = np.repeat(t_arr, block_len, axis=1)
    if t_pos.min() < 0.0 or t_pos.max() > 1.0:
        raise ValueError("mask_sequence: t must lie in [0, 1]")
    masked = rng.random((batch, L)) < t_pos
    x_t = np.where(masked, mask_id, x_0)
    return DiffusionState(x_t=x_t, t=t_arr, masked=masked)


def _as_batch(x_0) -> np.ndarray:
    x_0 = np.asarray(x_0)
    return x_0[None, :] if x_0.ndim == 1 else x_0


def _mask_with_block_redraw(x_0, t_blocks, rng, mask_id, block_len):
    """Mask with per-block t; any block left fully clean is redrawn once.

    The redraw consumes one extra (batch, L) uniform block iff at least one
    block needs it, keeping the stream layout identical across the loss
    implementations.
    """
    batch, L = x_0.shape
    B = t_blocks.shape[1]
    t_pos = np.repeat(t_blocks, block_len, axis=1)
    u = rng.random((batch, L))
    masked = u < t_pos
    any_masked = masked.reshape(batch, B, block_len).any(axis=2)
    if not any_masked.all():
        redraw = np.repeat(~any_masked, block_len, axis=1)
        masked2 = rng.random((batch, L)) < t_pos
        masked = np.where(redraw, masked2, masked)
    x_t = np.where(masked, mask_id, x_0)
    return x_t, masked


def _per_block_ce(logits: Tensor, x_0: np.ndarray, masked: np.ndarray,
                  num_blocks: int, block_len: int) -> Tensor:
    """Cross-entropy summed over the masked positions of each block: (batch, B)."""
    batch = x_0.shape[0]
    ce = cross_entropy_from_logits(logits, x_0)              # (batch, L)
    ce = mul(ce, masked.astype(logits.value.dtype))
    return sum_(reshape(ce, (batch, num_blocks, block_len)), axis=2)


def _assemble(ce_blocks: Tensor, kl_blocks: Tensor | None, t_blocks: np.ndarray,
              beta: float, kl_in_t_weight: bool, seq_len: int) -> Tensor:
    inv_t = (1.0 / t_blocks).astype(ce_blocks.value.dtype)
    if kl_blocks is None:
        per_ex = sum_(mul(ce_blocks, inv_t), axis=1)
    elif kl_in_t_weight:
        per_ex = sum_(mul(add(ce_blocks, mul(kl_blocks, beta)), inv_t), axis=1)
    else:
        per_ex = sum_(add(mul(ce_blocks, inv_t), mul(kl_blocks, beta)), axis=1)
    return mul(mean(per_ex), 1.0 / seq_len)


def _aux(ce_blocks, kl_blocks, t_blocks, beta, kl_in_t_weight, seq_len):
    inv_t = 1.0 / t_blocks
    ce = float((ce_blocks.value * inv_t).sum(1).mean() / seq_len)
    if kl_blocks is None:
        kl = 0.0
    elif kl_in_t_weight:
        kl = float((kl_blocks.value * inv_t).sum(1).mean() / seq_len)
    else:
        kl = float(kl_blocks.value.sum(1).mean() / seq_len)
    return {"ce": ce, "kl": kl, "beta": beta}


def mdm_loss(model: VMDModel, x_0: np.ndarray, rng: np.random.Generator,
             t_min: float = 1e-3):
    """Latent-free masked-diffusion loss; per-block t when the model is blocked."""
    if model.cfg.latent_enabled:
        raise ValueError("mdm_loss expects a latent-free model")
    cfg = model.cfg
    x_0 = _as_batch(x_0)
    batch = x_0.shape[0]
    t = rng.uniform(t_min, 1.0, size=(batch, cfg.num_blocks))
    x_t, masked = _mask_with_block_redraw(x_0, t, rng, cfg.mask_id, cfg.block_len)
    logits = model.decode(x_t, x_0, None)
    ce_blocks = _per_block_ce(logits, x_0, masked, cfg.num_blocks, cfg.block_len)
    loss = _assemble(ce_blocks, None, t, 0.0, True, cfg.seq_len)
    return loss, _aux(ce_blocks, None, t, 0.0, True, cfg.seq_len)


def vmd_loss(model: VMDModel, x_0: np.ndarray, rng: np.random.Generator,
             rng_eps: np.random.Generator, t_min: float = 1e-3,
             beta: float | None = None, kl_in_t_weight: bool = True,
             pool_exclude=None):
    """Single-latent objective (one block): (1/t) [CE + beta KL] per example."""
    cfg = model.cfg
    if not cfg.latent_enabled:
        raise ValueError("vmd_loss expects a model with the latent pathway enabled")
    if cfg.num_blocks != 1:
        raise ValueError(f"vmd_loss is the single-block objective; model has {cfg.num_blocks} blocks")
    if beta is None:
        beta = cfg.kl_weight
    x_0 = _as_batch(x_0)
    batch = x_0.shape[0]

    t = rng.uniform(t_min, 1.0, size=(batch, 1))
    x_t, masked = _mask_with_block_redraw(x_0, t, rng, cfg.mask_id, cfg.block_len)
    mu, log_sigma = model.encode(x_t, x_0, pool_exclude)
    z = reparameterize(mu, log_sigma, rng_eps)
    logits = model.decode(x_t, x_0, z)
    ce_blocks = _per_block_ce(logits, x_0, masked, 1, cfg.seq_len)
    kl_blocks = gaussian_kl(mu, log_sigma, axis=-1)
    loss = _assemble(ce_blocks, kl_blocks, t, beta, kl_in_t_weight, cfg.seq_len)
    return loss, _aux(ce_blocks, kl_blocks, t, beta, kl_in_t_weight, cfg.seq_len)


def block_vmd_loss(model: VMDModel, x_0: np.ndarray, rng: np.random.Generator,
                   rng_eps: np.random.Generator, t_min: float = 1e-3,
                   beta: float | None = None, kl_in_t_weight: bool = True,
                   pool_exclude=None):
    """Blockwise latent objective: sum_b (1/t^b) [CE_b + beta KL_b] per example."""
    cfg = model.cfg
    if not cfg.latent_enabled:
        raise ValueError("block_vmd_loss expects a model with the latent pathway enabled")
    if beta is None:
        beta = cfg.kl_weight
    x_0 = _as_batch(x_0)
    batch = x_0.shape[0]
    B = cfg.num_blocks

    t = rng.uniform(t_min, 1.0, size=(batch, B))
    x_t, masked = _mask_with_block_redraw(x_0, t, rng, cfg.mask_id, cfg.block_len)
    mu, log_sigma = model.encode(x_t, x_0, pool_exclude)
    z = reparameterize(mu, log_sigma, rng_eps)
    logits = model.decode(x_t, x_0, z)
    ce_blocks = _per_block_ce(logits, x_0, masked, B, cfg.block_len)
    kl_blocks = gaussian_kl(mu, log_sigma, axis=-1)
    loss = _assemble(ce_blocks, kl_blocks, t, beta, kl_in_t_weight, cfg.seq_len)
    return loss, _aux(ce_blocks, kl_blocks, t, beta, kl_in_t_weight, cfg.seq_len)


def loss_for_model(model: VMDModel):
    """The objective a model trains with: latent (block-aware) or latent-free."""
    if not model.cfg.latent_enabled:
        return "mdm"
    return "vmd" if model.cfg.num_blocks == 1 else "block_vmd"


def train(model: VMDModel, spec: DatasetSpec, cfg: TrainConfig, streams: dict,
          out_dir: str | None = None, ckpt_tag: str | None = None,
          progress: bool = False):
    """Run the training loop; returns the list of logged metric records.

    `streams` must provide "data", "mask" and (for latent models) "epsilon"
    generators. Logs {step, ce, kl, loss, wall_ms} every `log_every` steps to
    memory and, when `out_dir` is given, to train_log.jsonl there.
    """
    kind = loss_for_model(model)
    beta = cfg.kl_weight if cfg.kl_weight is not None else model.cfg.kl_weight
    pool_exclude = sudoku_prompt_mask() if spec.name == "minisudoku" else None
    opt = Adam(model.parameters(), lr=cfg.lr)
    records = []
    log_path = os.path.join(out_dir, "train_log.jsonl") if out_dir else None
    log_f = open(log_path, "a") if log_path else None
    t_start = time.perf_counter()
    try:
        for step in range(1, cfg.num_steps + 1):
            x_0 = sample_batch(spec, streams["data"], cfg.batch_size)
            # without a ramp the KL penalty shuts the encoder off before the
            # reconstruction pathway forms (posterior collapse)
            if cfg.kl_warmup_steps > 0:
                beta_t = beta * min(1.0, step / cfg.kl_warmup_steps)
            else:
                beta_t = beta
            try:
                if kind == "mdm":
                    loss, aux = mdm_loss(model, x_0, streams["mask"], cfg.t_min)
                elif kind == "vmd":
                    loss, aux = vmd_loss(model, x_0, streams["mask"], streams["epsilon"],
                                         cfg.t_min, beta_t, cfg.kl_in_t_weight, pool_exclude)
                else:
                    loss, aux = block_vmd_loss(model, x_0, streams["mask"], streams["epsilon"],
                                               cfg.t_min, beta_t, cfg.kl_in_t_weight, pool_exclude)
                backward(loss)
            except FloatingPointError as e:
                raise FloatingPointError(f"training aborted at step {step}: {e}") from e
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise FloatingPointError(
                    f"training aborted at step {step}: non-finite loss "
                    f"(ce={aux['ce']}, kl={aux['kl']})"
                )
            opt.step()
            if step % cfg.log_every == 0 or step == cfg.num_steps:
                rec = {
                    "step": step,
                    "ce": round(aux["ce"], 6),
                    "kl": round(aux["kl"], 6),
                    "loss": round(loss_val, 6),
                    "wall_ms": round(1000.0 * (time.perf_counter() - t_start), 1),
                }
                records.append(rec)
                if log_f:
                    log_f.write(json.dumps(rec) + "\n")
                if progress:
                    print(f"  step {step:>6}  loss {loss_val:.4f}  "
                          f"ce {aux['ce']:.4f}  kl {aux['kl']:.4f}", flush=True)
            if (cfg.checkpoint_every and out_dir and ckpt_tag
                    and step % cfg.checkpoint_every == 0):
                save_checkpoint(model, os.path.join(out_dir, f"ckpt_{ckpt_tag}_step{step}"))
    finally:
        if log_f:
            log_f.close()
    if out_dir and ckpt_tag:
        save_checkpoint(model, os.path.join(out_dir, f"ckpt_{ckpt_tag}"))
    return records


# ---------------------------------------------------------------------------
# Monte-Carlo NELBO (bound evaluation, not a training path)
# ---------------------------------------------------------------------------

def pattern_t_weights(seq_len: int, n_t: int = 64, t_min: float = 1e-3,
                      in_t_weight: bool = True) -> np.ndarray:
    """Integrated weight of a k-masked pattern over the t grid, k = 0..L.

    Entry k approximates ∫_{t_min}^1 t^k (1-t)^(L-k) / t dt (the masking
    probability of any fixed pattern with k masked positions, times the 1/t
    loss weight) with the trapezoid rule on an n_t-point geometric grid —
    geometric because the integrand varies like 1/t near t_min. With
    `in_t_weight=False` the 1/t factor is dropped.
    """
    t = np.geomspace(t_min, 1.0, n_t)
    k = np.arange(seq_len + 1)[:, None]
    f = t[None, :] ** k * (1.0 - t[None, :]) ** (seq_len - k)
    if in_t_weight:
        f = f / t[None, :]
    return ((f[:, 1:] + f[:, :-1]) * 0.5 * np.diff(t)[None, :]).sum(axis=1)


def enumerate_mask_patterns(seq_len: int) -> np.ndarray:
    """All 2^L boolean masking patterns, shape (2^L, L)."""
    if seq_len > 12:
        raise ValueError("mask-pattern enumeration is limited to seq_len <= 12")
    m = np.arange(2 ** seq_len)[:, None]
    return (m >> np.arange(seq_len)[None, :]) & 1 == 1


def mc_nelbo(model: VMDModel, x_0: np.ndarray, rng: np.random.Generator,
             n_z: int = 64, n_t: int = 64, t_min: float = 1e-3,
             beta: float = 1.0, kl_in_t_weight: bool = True):
    """Per-sequence NELBO (nats) of each row of x_0, for single-block models.

    The expectation over x_t is exact: all 2^L mask patterns are enumerated
    and the t integral of each pattern's probability-times-1/t weight is done
    on an n_t-point grid over [t_min, 1]. The only Monte-Carlo part is the
    latent (n_z posterior draws); latent-free models are exact and get zero
    standard error. Returns (per_seq_nelbo, per_seq_se), each shape (n,).
    """
    cfg = model.cfg
    if cfg.num_blocks != 1:
        raise ValueError("mc_nelbo covers single-block models only")
    x_0 = np.asarray(x_0)
    if x_0.ndim == 1:
        x_0 = x_0[None, :]
    n, L = x_0.shape
    patterns = enumerate_mask_patterns(L)                 # (P, L)
    P = len(patterns)

    # every (sequence, pattern) pair as one batch row
    x0_rep = np.repeat(x_0, P, axis=0)                    # (n*P, L)
    pat_rep = np.tile(patterns, (n, 1))                   # (n*P, L)
    x_t = np.where(pat_rep, cfg.mask_id, x0_rep)

    if cfg.latent_enabled:
        mu, log_sigma = model.encode(x_t, x0_rep)
        mu_v = mu.value
        ls_v = np.clip(log_sigma.value, -10.0, 10.0)
        kl = 0.5 * (mu_v ** 2 + np.exp(2.0 * ls_v) - 2.0 * ls_v - 1.0).sum(-1)[:, 0]
        ce_draws = np.empty((n_z, n * P))
        for j in range(n_z):
            eps = rng.standard_normal(mu_v.shape).astype(np.float32)
            z = mu_v + np.exp(ls_v) * eps
            ce_draws[j] = _pattern_ce(model, x_t, x0_rep, pat_rep, z)
    else:
        kl = np.zeros(n * P)
        ce_draws = _pattern_ce(model, x_t, x0_rep, pat_rep, None)[None, :]

    k_masked = patterns.sum(axis=1)                       # (P,)
    w_ce = pattern_t_weights(L, n_t, t_min, in_t_weight=True)[k_masked]
    w_kl = w_ce if kl_in_t_weight else pattern_t_weights(
        L, n_t, t_min, in_t_weight=False)[k_masked]

    ce_np = ce_draws.reshape(-1, n, P)
    kl_np = kl.reshape(n, P)
    per_z = (w_ce * ce_np).sum(axis=2) + beta * (w_kl * kl_np).sum(axis=1)
    nelbo = per_z.mean(axis=0)
    if per_z.shape[0] > 1:
        se = per_z.std(axis=0, ddof=1) / np.sqrt(per_z.shape[0])
    else:
        se = np.zeros(n)
    return nelbo, se


def _pattern_ce(model, x_t, x0_rep, pat_rep, z):
    """Total cross-entropy of the masked positions of each row (numpy)."""
    logits = model.decode(x_t, x0_rep, z).value
    logp = logits - _logsumexp(logits)
    tok = np.take_along_axis(logp, x0_rep[..., None], axis=-1)[..., 0]
    return -(tok * pat_rep).sum(axis=1)


def _logsumexp(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
