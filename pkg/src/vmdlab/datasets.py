"""Toy sequence datasets with exactly known ground-truth distributions.

Six families: three two-token distributions over vocab 10 (a deterministic
successor rule, a non-uniform successor rule, and a tunable-dependence
variant), two four-token distributions built from successor runs, and a 4x4
mini-Sudoku task (puzzle ++ SEP ++ solution ++ EOS, 34 tokens).

Where the distribution is enumerable, sampling goes through the exact table
by inverse CDF, so the generator and the evaluation oracle cannot drift
apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# mini-Sudoku vocabulary: blank + digits 1..4 + structural tokens
BLANK_ID = 0
SEP_ID = 5
EOS_ID = 6
SUDOKU_VOCAB = 7          # MASK id == 7
SUDOKU_LEN = 34           # 16 puzzle + SEP + 16 solution + EOS
DEFAULT_GIVENS = (6, 12)  # inclusive range, drawn per puzzle


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    vocab_size: int
    seq_len: int
    block_len: int
    p: float | None = None
    givens_lo: int | None = None
    givens_hi: int | None = None

    @property
    def num_blocks(self) -> int:
        return self.seq_len // self.block_len

    @property
    def dataset_id(self) -> str:
        if self.name == "varp2":
            return f"varp2(p={self.p:g},V={self.vocab_size})"
        if self.name == "minisudoku":
            return f"minisudoku(givens={self.givens_lo}..{self.givens_hi})"
        return self.name


def dataset_spec(name: str, p: float | None = None, vocab: int = 10,
                 block_len: int | None = None, givens=None) -> DatasetSpec:
    """Build a DatasetSpec; `block_len` defaults to the full sequence (B=1)."""
    if name in ("det2", "nonuni2"):
        L, V = 2, 10
    elif name == "varp2":
        if p is None or not (0.0 <= p <= 1.0):
            raise ValueError(f"varp2 needs p in [0, 1], got {p}")
        if vocab < 2:
            raise ValueError("varp2 needs vocab >= 2")
        L, V = 2, vocab
    elif name in ("d1", "d2"):
        L, V = 4, 10
    elif name == "minisudoku":
        L, V = SUDOKU_LEN, SUDOKU_VOCAB
    else:
        raise ValueError(f"unknown dataset {name!r}")
    lo, hi = None, None
    if name == "minisudoku":
        if givens is None:
            lo, hi = DEFAULT_GIVENS
        elif isinstance(givens, int):
            lo = hi = givens
        else:
            lo, hi = givens
        if not (0 <= lo <= hi <= 16):
            raise ValueError(f"givens range {lo}..{hi} out of [0, 16]")
    return DatasetSpec(name=name, vocab_size=V, seq_len=L,
                       block_len=block_len or L, p=p, givens_lo=lo, givens_hi=hi)


class ExactDist:
    """Full probability table over an enumerable support, or (for datasets
    that are only checkable, not enumerable) just the validity predicate."""

    def __init__(self, support, probs, validity):
        self.validity = validity
        if support is None:
            self.support = None
            self.probs = None
            return
        self.support = [tuple(int(v) for v in s) for s in support]
        self.probs = np.asarray(probs, dtype=np.float64)
        if len(self.support) != len(set(self.support)):
            raise ValueError("support entries must be unique")
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {self.probs.sum()}, not 1")
        if (self.probs <= 0).any():
            raise ValueError("support probabilities must be positive")
        for s in self.support:
            if not validity(s):
                raise ValueError(f"support entry {s} fails its own validity predicate")
        self._cum = np.cumsum(self.probs)
        self._index = {s: i for i, s in enumerate(self.support)}

    @property
    def enumerable(self) -> bool:
        return self.support is not None

    def _require_table(self, what: str):
        if self.support is None:
            raise ValueError(f"{what}: distribution is validity-only, no probability table")

    def prob(self, seq) -> float:
        self._require_table("prob")
        i = self._index.get(tuple(int(v) for v in seq))
        return 0.0 if i is None else float(self.probs[i])

    def entropy(self) -> float:
        self._require_table("entropy")
        return float(-(self.probs * np.log(self.probs)).sum())

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Inverse-CDF sampling from the exact table."""
        self._require_table("sample")
        n = 1 if size is None else size
        idx = np.searchsorted(self._cum, rng.random(n), side="right")
        idx = np.minimum(idx, len(self.support) - 1)  # guard the u ~ 1 edge
        out = np.array([self.support[i] for i in idx], dtype=np.int64)
        return out[0] if size is None else out


# ---------------------------------------------------------------------------
# exact tables
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def exact_distribution(spec: DatasetSpec) -> ExactDist:
    if spec.name == "det2":
        support = [(k, (k + 1) % 10) for k in range(10)]
        return ExactDist(support, [0.1] * 10, _membership(support))
    if spec.name == "nonuni2":
        support = [(k, (k + 1) % 10) for k in range(10)]
        probs = [(k + 1) / 55.0 for k in range(10)]
        return ExactDist(support, probs, _membership(support))
    if spec.name == "varp2":
        p, V = spec.p, spec.vocab_size
        support, probs = [], []
        for k in range(V):
            for j in range(V):
                q = p / V if j == (k + 1) % V else (1.0 - p) / (V * (V - 1))
                if q > 0.0:
                    support.append((k, j))
                    probs.append(q)
        return ExactDist(support, probs, _membership(support))
    if spec.name == "d1":
        support = [tuple((k + i) % 10 for i in range(4)) for k in range(10)]
        return ExactDist(support, [0.1] * 10, _membership(support))
    if spec.name == "d2":
        support = [(k, (k + 1) % 10, l, (l + 1) % 10) for k in range(10) for l in range(10)]
        return ExactDist(support, [0.01] * 100, _membership(support))
    if spec.name == "minisudoku":
        return ExactDist(None, None, lambda seq: is_valid_sudoku_sequence(seq))
    raise ValueError(f"unknown dataset {spec.name!r}")


def _membership(support):
    table = set(tuple(int(v) for v in s) for s in support)
    return lambda seq: tuple(int(v) for v in seq) in table


# ---------------------------------------------------------------------------
# generators (spec'd single-draw signatures plus batched sampling)
# ---------------------------------------------------------------------------

def gen_det2(rng, size=None):
    return exact_distribution(dataset_spec("det2")).sample(rng, size)


def gen_nonuni2(rng, size=None):
    return exact_distribution(dataset_spec("nonuni2")).sample(rng, size)


def gen_varp2(p, V, rng, size=None):
    return exact_distribution(dataset_spec("varp2", p=p, vocab=V)).sample(rng, size)


def gen_d1(rng, size=None):
    return exact_distribution(dataset_spec("d1")).sample(rng, size)


def gen_d2(rng, size=None):
    return exact_distribution(dataset_spec("d2")).sample(rng, size)


def sample_batch(spec: DatasetSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """(n, seq_len) training batch for any dataset spec."""
    if spec.name == "minisudoku":
        return _sudoku_batch(rng, n, spec.givens_lo, spec.givens_hi)
    return exact_distribution(spec).sample(rng, n)


# ---------------------------------------------------------------------------
# 4x4 mini-Sudoku
# ---------------------------------------------------------------------------

def _box_of(r: int, c: int) -> int:
    return (r // 2) * 2 + (c // 2)


@lru_cache(maxsize=1)
def all_sudoku_grids() -> tuple[tuple[int, ...], ...]:
    """Every complete 4x4 grid (digits 1..4, rows/cols/2x2 boxes all distinct),
    enumerated once by backtracking in cell order."""
    grids = []
    grid = [0] * 16
    rows = [set() for _ in range(4)]
    cols = [set() for _ in range(4)]
    boxes = [set() for _ in range(4)]

    def fill(pos: int):
        if pos == 16:
            grids.append(tuple(grid))
            return
        r, c = divmod(pos, 4)
        b = _box_of(r, c)
        for v in (1, 2, 3, 4):
            if v in rows[r] or v in cols[c] or v in boxes[b]:
                continue
            grid[pos] = v
            rows[r].add(v)
            cols[c].add(v)
            boxes[b].add(v)
            fill(pos + 1)
            rows[r].remove(v)
            cols[c].remove(v)
            boxes[b].remove(v)

    fill(0)
    return tuple(grids)


def is_valid_grid(solution) -> bool:
    """Rows, columns and 2x2 boxes each hold exactly {1, 2, 3, 4}."""
    g = np.asarray(solution).reshape(4, 4)
    want = {1, 2, 3, 4}
    for i in range(4):
        if set(g[i, :].tolist()) != want or set(g[:, i].tolist()) != want:
            return False
    for r in (0, 2):
        for c in (0, 2):
            if set(g[r:r + 2, c:c + 2].reshape(-1).tolist()) != want:
                return False
    return True


def is_valid_sudoku_sequence(seq) -> bool:
    """Structure + solution validity + consistency with the puzzle givens."""
    s = np.asarray(seq)
    if s.shape != (SUDOKU_LEN,):
        return False
    puzzle, solution = s[:16], s[17:33]
    if s[16] != SEP_ID or s[33] != EOS_ID:
        return False
    if puzzle.min() < 0 or puzzle.max() > 4:
        return False
    if solution.min() < 1 or solution.max() > 4:
        return False
    if not is_valid_grid(solution):
        return False
    given = puzzle != BLANK_ID
    return bool(np.all(puzzle[given] == solution[given]))


def sudoku_prompt_mask() -> np.ndarray:
    """Positions supplied at inference time: the puzzle half, SEP and EOS."""
    mask = np.zeros(SUDOKU_LEN, dtype=bool)
    mask[:17] = True
    mask[33] = True
    return mask


def _sudoku_batch(rng, n, lo, hi):
    grids = np.asarray(all_sudoku_grids(), dtype=np.int64)
    pick = rng.integers(0, len(grids), size=n)
    solutions = grids[pick]
    givens = rng.integers(lo, hi + 1, size=n)
    # blank the (16 - givens) lowest-ranked cells of a random per-row ordering
    ranks = rng.random((n, 16)).argsort(axis=1).argsort(axis=1)
    blank = ranks < (16 - givens)[:, None]
    puzzles = np.where(blank, BLANK_ID, solutions)
    out = np.empty((n, SUDOKU_LEN), dtype=np.int64)
    out[:, :16] = puzzles
    out[:, 16] = SEP_ID
    out[:, 17:33] = solutions
    out[:, 33] = EOS_ID
    return out


def gen_minisudoku(rng, givens: int | None = None):
    """One (puzzle, solution, training sequence) triple."""
    if givens is None:
        lo, hi = DEFAULT_GIVENS
    else:
        lo = hi = givens
    if not (0 <= lo <= hi <= 16):
        raise ValueError(f"givens must lie in [0, 16], got {givens}")
    seq = _sudoku_batch(rng, 1, lo, hi)[0]
    return seq[:16].copy(), seq[17:33].copy(), seq
