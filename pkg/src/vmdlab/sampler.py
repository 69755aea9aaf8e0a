"""Reverse-process generation: iterative unmasking with confidence ranking.

Starting from MASK everywhere (or a partial prompt), each step decodes the
current sequence, picks values for masked positions, and finalizes the most
confident ones; the rest stay MASK for the next step. The latent is drawn
from the prior once per block and reused for every step inside that block,
so with `top_prob`/`top_margin` ranking all stochasticity comes from z.

Values are the per-position argmax by default. A factorized latent-free
model decoded by argmax is deterministic, so the baseline is sampled with
`value_sampling="categorical"` instead.

`sample_vmd` is the single-block entry point; it checks the model has one
block and then runs the same loop as `sample_block_vmd`, which generates
block after block, conditioning each on the finalized prefix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .backbone import VMDModel

STRATEGIES = ("random", "top_prob", "top_margin")
VALUE_SAMPLING = ("argmax", "categorical")


@dataclass
class SampleConfig:
    nfe: int = 1                       # decodes per block
    strategy: str = "top_prob"
    seed: int = 0
    prompt: np.ndarray | None = None   # (L,) or (num_samples, L); MASK = free
    num_samples: int = 1
    value_sampling: str = "argmax"

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.value_sampling not in VALUE_SAMPLING:
            raise ValueError(
                f"value_sampling must be one of {VALUE_SAMPLING}, got {self.value_sampling!r}"
            )


# ---------------------------------------------------------------------------
# confidence scores and the unmasking schedule
# ---------------------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def confidence_prob(logits_row) -> float:
    """Probability of the top value: max_v softmax(logits)_v."""
    return float(_softmax(np.asarray(logits_row, dtype=np.float64)).max())


def confidence_margin(logits_row) -> float:
    """Gap between the two largest softmax probabilities."""
    row = np.asarray(logits_row, dtype=np.float64)
    if row.shape[-1] < 2:
        raise ValueError("confidence_margin needs at least two vocabulary entries")
    probs = np.sort(_softmax(row))
    return float(probs[-1] - probs[-2])


def unmask_schedule(num_masked: int, steps_remaining: int) -> int:
    """Tokens to finalize this step so the remaining steps finish exactly."""
    if steps_remaining < 1:
        raise ValueError("steps_remaining must be >= 1")
    if num_masked < 0:
        raise ValueError("num_masked must be >= 0")
    return math.ceil(num_masked / steps_remaining)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _prepare_prompt(cfg: SampleConfig, seq_len: int, mask_id: int) -> np.ndarray:
    n = cfg.num_samples
    if cfg.prompt is None:
        return np.full((n, seq_len), mask_id, dtype=np.int64)
    prompt = np.asarray(cfg.prompt)
    if prompt.ndim == 1:
        prompt = np.broadcast_to(prompt, (n, prompt.shape[0]))
    if prompt.shape != (n, seq_len):
        raise ValueError(
            f"prompt shape {prompt.shape} does not match {(n, seq_len)}"
        )
    if prompt.min() < 0 or prompt.max() > mask_id:
        raise ValueError("prompt: token id out of range")
    return prompt.astype(np.int64).copy()


def _pick_values(logits: np.ndarray, cfg: SampleConfig, rng) -> np.ndarray:
    """(n, L) token values for every position from (n, L, V) logits."""
    if cfg.value_sampling == "argmax":
        return logits.argmax(axis=-1)
    probs = _softmax(logits.astype(np.float64))
    u = rng.random(logits.shape[:2])
    return (probs.cumsum(axis=-1) > u[..., None]).argmax(axis=-1)


def _scores(logits: np.ndarray, cfg: SampleConfig, rng, shape) -> np.ndarray:
    """Higher score = finalized earlier; random strategy draws fresh scores."""
    if cfg.strategy == "random":
        return rng.random(shape)
    probs = _softmax(logits.astype(np.float64))
    if cfg.strategy == "top_prob":
        return probs.max(axis=-1)
    top2 = np.sort(probs, axis=-1)[..., -2:]
    return top2[..., 1] - top2[..., 0]


def _commit(x, columns, logits, masked, steps_remaining, cfg, rng):
    """Finalize the per-example quota of masked positions within `columns`."""
    n = x.shape[0]
    values = _pick_values(logits, cfg, rng)
    scores = _scores(logits, cfg, rng, masked.shape)
    quota = np.ceil(masked.sum(axis=1) / steps_remaining).astype(int)
    # stable sort on negated scores: ties resolve to the lowest index
    order = np.argsort(np.where(masked, -scores, np.inf), axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(masked.shape[1]), masked.shape), axis=1)
    chosen = masked & (ranks < quota[:, None])
    rows, cols = np.nonzero(chosen)
    x[rows, columns[cols]] = values[rows, cols]


def sample_vmd(model: VMDModel, cfg: SampleConfig, rng=None) -> np.ndarray:
    """Generate (num_samples, seq_len) sequences from a single-block model.

    Draws z ~ N(0, I) once, then runs `nfe` decode/finalize steps; prompt
    positions are never masked, never re-ranked, never overwritten.
    """
    if model.cfg.num_blocks != 1:
        raise ValueError(
            f"sample_vmd is the single-block path; model has {model.cfg.num_blocks} blocks"
        )
    return sample_block_vmd(model, cfg, rng)


def sample_block_vmd(model: VMDModel, cfg: SampleConfig, rng=None) -> np.ndarray:
    """Generate block by block: fresh z per block, finalized prefix as context."""
    mcfg = model.cfg
    if cfg.nfe > mcfg.block_len:
        raise ValueError(
            f"nfe {cfg.nfe} exceeds block length {mcfg.block_len}: "
            "cannot finalize fewer than one token per step"
        )
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n, L, B = cfg.num_samples, mcfg.seq_len, mcfg.num_blocks
    x = _prepare_prompt(cfg, L, mcfg.mask_id)
    z = None
    if mcfg.latent_enabled:
        z = np.zeros((n, B, mcfg.latent_dim), dtype=np.float32)
    for b in range(B):
        if z is not None:
            z[:, b, :] = rng.standard_normal((n, mcfg.latent_dim)).astype(np.float32)
        columns = np.arange(b * mcfg.block_len, (b + 1) * mcfg.block_len)
        for steps_remaining in range(cfg.nfe, 0, -1):
            masked = x[:, columns] == mcfg.mask_id
            if not masked.any():
                break
            logits = model.decode(x, x, z).value[:, columns, :]
            _commit(x, columns, logits, masked, steps_remaining, cfg, rng)
    assert not (x == mcfg.mask_id).any(), "unmask schedule left MASK tokens"
    return x


def dump_samples(path: str, samples: np.ndarray, cfg: SampleConfig) -> None:
    """Write one JSON record per sample: {sample_id, tokens, seed, nfe, strategy}."""
    with open(path, "w") as f:
        for i, row in enumerate(np.asarray(samples)):
            f.write(json.dumps({
                "sample_id": i,
                "tokens": [int(v) for v in row],
                "seed": cfg.seed,
                "nfe": cfg.nfe,
                "strategy": cfg.strategy,
            }) + "\n")
