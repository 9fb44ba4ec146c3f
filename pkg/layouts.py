#!/usr/bin/env python3

"""
Slot layouts
Packs logical vectors and matrices into N-slot plaintexts: interleaved,
contiguous, replicated and batched layouts, binary masks, generalized
diagonals for every VMM scheme, and the weight file format.
"""

import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Callable, Dict, Hashable, Iterable, Optional, Tuple, Union

import numpy as np

from errors import ShapeMismatch
from slot_engine import is_power_of_two

logger = logging.getLogger(__name__)

LAYOUT_KINDS = ("interleaved", "contiguous", "replicated", "batched")


def log2i(n: int) -> int:
    return int(n).bit_length() - 1


def next_power_of_two(n: int) -> int:
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


@dataclass(frozen=True)
class InterleavedLayout:
    """How a logical vector of length d sits in N = d*t slots.

    interleaved: element i at slot i*t + offset
    contiguous:  element i at slot i, remaining slots zero
    replicated:  element i at slots beta*d + i for every block beta < t
    batched:     token s of up to t tokens, element i at slot i*t + s

    Logical element i' = j*H + h is element j of head h (head-reordered).
    """

    d: int
    t: int
    offset: int = 0
    H: int = 1
    deferred_mask: bool = False
    kind: str = "interleaved"
    n_lanes: Optional[int] = None

    def __post_init__(self):
        if self.kind not in LAYOUT_KINDS:
            raise ShapeMismatch(f"unknown layout kind '{self.kind}'")
        if not (is_power_of_two(self.d) and is_power_of_two(self.t)):
            raise ShapeMismatch(f"layout needs power-of-two d and t, got d={self.d}, t={self.t}")
        if self.H < 1 or self.d % self.H:
            raise ShapeMismatch(f"head count {self.H} does not divide d={self.d}")
        if not 0 <= self.offset < self.t:
            raise ShapeMismatch(f"offset {self.offset} outside [0, {self.t})")
        if self.n_lanes is not None and not 0 <= self.n_lanes <= self.t:
            raise ShapeMismatch(f"lane count {self.n_lanes} outside [0, {self.t}]")

    @classmethod
    def for_slots(cls, N: int, d: int, **kwargs) -> "InterleavedLayout":
        if d > N or N % d:
            raise ShapeMismatch(f"vector length {d} does not tile {N} slots")
        return cls(d=d, t=N // d, **kwargs)

    @property
    def N(self) -> int:
        return self.d * self.t

    @property
    def d_head(self) -> int:
        return self.d // self.H

    @property
    def lanes(self) -> int:
        return self.t if self.n_lanes is None else self.n_lanes

    def at_offset(self, offset: int) -> "InterleavedLayout":
        return replace(self, offset=offset)

    def deferred(self) -> "InterleavedLayout":
        return replace(self, deferred_mask=True)

    def masked(self) -> "InterleavedLayout":
        return replace(self, deferred_mask=False)

    def slot_positions(self) -> np.ndarray:
        """Slot index of each logical element (first copy for replicated)"""
        i = np.arange(self.d)
        if self.kind == "interleaved":
            return i * self.t + self.offset
        if self.kind == "batched":
            return i * self.t
        return i


@dataclass(frozen=True)
class AttentionMapLayout:
    """Score-map packing: token tau of head h sits in map ciphertext
    tau // capacity at slot ((tau // t) mod (N/(t*H)))*t*H + h*t + tau mod t.
    With H = 1 the map is contiguous."""

    N: int
    t: int
    H: int
    n_tokens: int = 0

    @property
    def capacity(self) -> int:
        return self.N // self.H

    @property
    def blocks(self) -> int:
        return self.N // (self.t * self.H)

    @property
    def n_maps(self) -> int:
        return max(1, -(-self.n_tokens // self.capacity))

    def locate(self, h: int, tau: int) -> Tuple[int, int]:
        """(map index, slot) of head h, token tau"""
        block = tau // self.t
        slot = (block % self.blocks) * self.t * self.H + h * self.t + tau % self.t
        return tau // self.capacity, slot

    def token_masks(self, n_tokens: Optional[int] = None) -> list:
        """One mask per map ciphertext selecting the slots of tokens < n_tokens"""
        n = self.n_tokens if n_tokens is None else n_tokens
        masks = [np.zeros(self.N) for _ in range(max(1, -(-n // self.capacity)))]
        for tau in range(n):
            for h in range(self.H):
                g, slot = self.locate(h, tau)
                masks[g][slot] = 1.0
        return masks

    def window_start_mask(self) -> np.ndarray:
        mask = np.zeros(self.N)
        mask[:: self.t] = 1.0
        return mask

    def with_tokens(self, n_tokens: int) -> "AttentionMapLayout":
        return replace(self, n_tokens=n_tokens)


def encode_interleaved(x, layout: InterleavedLayout) -> np.ndarray:
    """Encode a length-d vector into N slots following layout.kind"""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != layout.d:
        raise ShapeMismatch(f"vector length {x.shape[0]} does not match layout d={layout.d}")
    if layout.kind == "batched":
        return encode_batched(x[None, :], layout)
    slots = np.zeros(layout.N)
    if layout.kind == "replicated":
        return np.tile(x, layout.t)
    slots[layout.slot_positions()] = x
    return slots


def decode_interleaved(s, layout: InterleavedLayout) -> np.ndarray:
    """Read back the d valid slots; garbage elsewhere is ignored"""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.shape[0] != layout.N:
        raise ShapeMismatch(f"slot vector length {s.shape[0]} does not match layout N={layout.N}")
    return s[layout.slot_positions()].copy()


def encode_batched(X, layout: InterleavedLayout) -> np.ndarray:
    """Pack up to t token vectors (rows of X) into lanes 0..rows-1"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != layout.d or X.shape[0] > layout.t:
        raise ShapeMismatch(f"batch of shape {X.shape} does not fit d={layout.d}, t={layout.t}")
    grid = np.zeros((layout.d, layout.t))
    grid[:, : X.shape[0]] = X.T
    return grid.reshape(-1)


def decode_batched(s, layout: InterleavedLayout) -> np.ndarray:
    """Returns the (lanes, d) matrix held by a batched slot vector"""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.shape[0] != layout.N:
        raise ShapeMismatch(f"slot vector length {s.shape[0]} does not match layout N={layout.N}")
    return s.reshape(layout.d, layout.t).T[: layout.lanes].copy()


def place_vector(values, layout: InterleavedLayout) -> np.ndarray:
    """Write a length-d vector into every valid slot: each lane of a batched
    layout, each copy of a replicated one"""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape[0] != layout.d:
        raise ShapeMismatch(f"vector length {values.shape[0]} does not match layout d={layout.d}")
    if layout.kind == "batched":
        return encode_batched(np.tile(values, (layout.lanes, 1)), layout)
    return encode_interleaved(values, layout)


def make_mask(layout: InterleavedLayout, kind: str = "valid-slots", offset: Optional[int] = None,
              n_tokens: Optional[int] = None) -> np.ndarray:
    """Binary slot mask.

    valid-slots:       slots holding logical elements of the layout
    replicate-extract: the first t*H slots (one score window per head),
                       restricted to lanes < n_tokens when given
    cache-slot:        interleaved positions at the given offset
    """
    N = layout.N
    mask = np.zeros(N)
    if kind == "valid-slots":
        if layout.kind == "replicated":
            mask[:] = 1.0
        elif layout.kind == "batched":
            grid = np.zeros((layout.d, layout.t))
            grid[:, : layout.lanes] = 1.0
            mask = grid.reshape(-1)
        else:
            mask[layout.slot_positions()] = 1.0
    elif kind == "replicate-extract":
        lanes = layout.t if n_tokens is None else max(0, min(layout.t, n_tokens))
        window = np.zeros(layout.t)
        window[:lanes] = 1.0
        mask[: layout.t * layout.H] = np.tile(window, layout.H)
    elif kind == "cache-slot":
        offset = layout.offset if offset is None else offset
        if not 0 <= offset < layout.t:
            raise ShapeMismatch(f"cache offset {offset} outside [0, {layout.t})")
        mask[offset::layout.t] = 1.0
    else:
        raise ValueError(f"unknown mask kind '{kind}'")
    return mask


def column_mask(layout: InterleavedLayout, column: int) -> np.ndarray:
    """Valid slots of logical elements column*H + h for every head h"""
    if not 0 <= column < layout.d_head:
        raise ShapeMismatch(f"column {column} outside [0, {layout.d_head})")
    mask = np.zeros(layout.N)
    positions = layout.slot_positions()[column * layout.H:(column + 1) * layout.H]
    if layout.kind == "batched":
        for lane in range(layout.lanes):
            mask[positions + lane] = 1.0
    else:
        mask[positions] = 1.0
    return mask


def block_masks(N: int, d: int, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """(m_lo, m_hi) for an inner rotation by k over blocks of d slots.

    m_lo keeps in-block index q >= k, m_hi keeps q < k.
    """
    q = np.arange(N) % d
    return (q >= k).astype(np.float64), (q < k).astype(np.float64)


def inner_roll(p: np.ndarray, d: int, k: int) -> np.ndarray:
    """Cleartext inner rotation: result[beta*d + q] = p[beta*d + (q + k) mod d]"""
    blocks = np.asarray(p).reshape(-1, d)
    return np.roll(blocks, -k, axis=1).reshape(-1)


def bsgs_split(k: int) -> Tuple[int, int]:
    """Baby/giant split of k rotation groups: r_i = 2^floor(log2(k)/2), r_o = k / r_i"""
    if k < 1 or not is_power_of_two(k):
        raise ShapeMismatch(f"group count must be a power of two, got {k}")
    r_i = 1 << (log2i(k) // 2)
    return r_i, k // r_i


@dataclass(frozen=True)
class GeneralizedVMMPlan:
    """Interleaved VMM over a rows x cols matrix.

    orientation is 'square', 'up' (d x alpha*d) or 'down' (alpha*d x d);
    d is the smaller dimension. t1/t2 are the input/output interleave
    factors and t_prime = N / (alpha*d). The M = rows*cols/N plaintexts are
    split into r_i baby steps and r_o = M / r_i giant steps.
    """

    N: int
    d: int
    alpha: int
    orientation: str
    t1: int
    t2: int
    t_prime: int
    r_i: int
    r_o: int
    bsgs: bool = True

    @property
    def D_in(self) -> int:
        return self.alpha * self.d if self.orientation == "down" else self.d

    @property
    def D_out(self) -> int:
        return self.alpha * self.d if self.orientation == "up" else self.d

    @property
    def M(self) -> int:
        return self.D_in * self.D_out // self.N

    @property
    def R(self) -> int:
        """Slot stride between consecutive plaintext groups"""
        return self.N // self.d

    @property
    def e(self) -> int:
        return self.R // self.t1

    def with_bsgs(self, bsgs: bool) -> "GeneralizedVMMPlan":
        if bsgs == self.bsgs:
            return self
        r_i, r_o = bsgs_split(self.M) if bsgs else (self.M, 1)
        return replace(self, r_i=r_i, r_o=r_o, bsgs=bsgs)

    def input_layout(self, H: int = 1) -> InterleavedLayout:
        return InterleavedLayout(d=self.D_in, t=self.t1, H=H if self.D_in % H == 0 else 1)

    def output_layout(self, offset: int = 0, H: int = 1) -> InterleavedLayout:
        return InterleavedLayout(d=self.D_out, t=self.t2, offset=offset,
                                 H=H if self.D_out % H == 0 else 1, deferred_mask=True)


@dataclass(frozen=True)
class SquarePlan:
    """Square d x d VMM for the direct (contiguous input) or replicated scheme"""

    kind: str
    N: int
    d: int
    bsgs: bool = False

    @property
    def t(self) -> int:
        return self.N // self.d


def plan_vmm(N: int, rows: int, cols: int, bsgs: bool = True) -> GeneralizedVMMPlan:
    """Build the interleaved plan for a rows x cols weight matrix"""
    for n in (rows, cols):
        if not is_power_of_two(n) or n > N:
            raise ShapeMismatch(f"matrix dimension {n} must be a power of two <= N={N} (pad first)")
    d, big = min(rows, cols), max(rows, cols)
    alpha = big // d
    if rows * cols < N:
        raise ShapeMismatch(f"{rows}x{cols} matrix has fewer than N={N} entries")
    orientation = "square" if alpha == 1 else ("up" if cols > rows else "down")
    t1, t2 = N // rows, N // cols
    M = rows * cols // N
    r_i, r_o = bsgs_split(M) if bsgs else (M, 1)
    return GeneralizedVMMPlan(N=N, d=d, alpha=alpha, orientation=orientation, t1=t1, t2=t2,
                              t_prime=N // big, r_i=r_i, r_o=r_o, bsgs=bsgs)


class DiagonalPlaintextSet:
    """Generalized diagonals of a weight matrix, keyed by group index.

    Diagonals are materialized at construction unless lazy=True, in which
    case each one is rebuilt on access (large parameter sets).
    """

    def __init__(self, keys: Iterable[Hashable], factory: Callable[[Hashable], np.ndarray],
                 source_shape: Tuple[int, int], plan: Union[GeneralizedVMMPlan, SquarePlan],
                 lazy: bool = False):
        self.keys = list(keys)
        self.source_shape = source_shape
        self.plan = plan
        self.lazy = lazy
        self._factory = factory
        self._cache: Dict[Hashable, np.ndarray] = {}
        if not lazy:
            for key in self.keys:
                self._cache[key] = factory(key)

    def __getitem__(self, key) -> np.ndarray:
        if key in self._cache:
            return self._cache[key]
        return self._factory(key)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def diagonals(self) -> Dict[Hashable, np.ndarray]:
        return {key: self[key] for key in self.keys}


def _interleaved_factory(W: np.ndarray, plan: GeneralizedVMMPlan) -> Callable[[int], np.ndarray]:
    p = np.arange(plan.N)
    J = p // plan.t2
    base = p // plan.t1
    s = (p % plan.t1) % min(plan.t1, plan.t2)

    def factory(m: int) -> np.ndarray:
        k = (base + plan.e * m + s * plan.M * plan.e) % plan.D_in
        return W[k, J]

    return factory


def _direct_factory(W: np.ndarray, plan: SquarePlan) -> Callable[[int], np.ndarray]:
    d = plan.d
    j = np.arange(d)

    def factory(r: int) -> np.ndarray:
        out = np.zeros(plan.N)
        out[:d] = W[(j + r) % d, j]
        return out

    return factory


def _replicated_factory(W: np.ndarray, plan: SquarePlan) -> Callable[[int], np.ndarray]:
    d, t = plan.d, plan.t
    q = np.arange(plan.N) % d
    beta = np.arange(plan.N) // d

    def factory(m: int) -> np.ndarray:
        return W[(q + beta + t * m) % d, q]

    return factory


def extract_diagonals(W, plan: Union[GeneralizedVMMPlan, SquarePlan], lazy: bool = False) -> DiagonalPlaintextSet:
    """Generalized diagonal plaintexts of W for the given plan"""
    W = np.asarray(W, dtype=np.float64)
    if isinstance(plan, GeneralizedVMMPlan):
        if W.shape != (plan.D_in, plan.D_out):
            raise ShapeMismatch(f"weight shape {W.shape} does not match plan {plan.D_in}x{plan.D_out}")
        return DiagonalPlaintextSet(range(plan.M), _interleaved_factory(W, plan), W.shape, plan, lazy)

    if W.shape != (plan.d, plan.d):
        raise ShapeMismatch(f"weight shape {W.shape} is not {plan.d}x{plan.d}")
    if plan.kind == "direct":
        return DiagonalPlaintextSet(range(plan.d), _direct_factory(W, plan), W.shape, plan, lazy)
    if plan.kind == "replicated":
        if plan.d < plan.t:
            raise ShapeMismatch(f"replicated packing needs d >= N/d, got d={plan.d}")
        return DiagonalPlaintextSet(range(plan.d // plan.t), _replicated_factory(W, plan), W.shape, plan, lazy)
    raise ValueError(f"unknown square plan kind '{plan.kind}'")


def batched_diagonals(W, N: int) -> DiagonalPlaintextSet:
    """Diagonals for the batched prefill VMM: diag_r[t*j + s] = W[(j + r) mod d][j]"""
    W = np.asarray(W, dtype=np.float64)
    d = W.shape[0]
    if W.shape != (d, d):
        raise ShapeMismatch(f"batched diagonals need a square matrix, got {W.shape}")
    t = N // d
    j = np.arange(d)

    def factory(r: int) -> np.ndarray:
        return np.repeat(W[(j + r) % d, j], t)

    return DiagonalPlaintextSet(range(d), factory, W.shape, SquarePlan("batched", N, d, True))


def head_permutation(d: int, H: int) -> np.ndarray:
    """perm[j*H + h] = h*d_head + j; reordered = x[perm]"""
    if d % H:
        raise ShapeMismatch(f"head count {H} does not divide {d}")
    d_head = d // H
    i = np.arange(d)
    return (i % H) * d_head + i // H


def inverse_head_permutation(d: int, H: int) -> np.ndarray:
    return np.argsort(head_permutation(d, H))


def pad_to_power_of_two(W) -> np.ndarray:
    """Zero-pad both matrix dimensions up to the next power of two"""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    rows, cols = (next_power_of_two(n) for n in W.shape)
    if (rows, cols) == W.shape:
        return W
    out = np.zeros((rows, cols))
    out[: W.shape[0], : W.shape[1]] = W
    logger.debug("padded %s matrix to %dx%d", W.shape, rows, cols)
    return out


def save_weights(directory: str, name: str, W) -> str:
    """Write little-endian float64 row-major data plus a JSON sidecar"""
    W = np.atleast_2d(np.asarray(W, dtype="<f8"))
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{name}.bin")
    W.tofile(path)
    with open(os.path.join(directory, f"{name}.json"), "w") as f:
        json.dump({"name": name, "rows": int(W.shape[0]), "cols": int(W.shape[1])}, f)
    return path


def load_weights(directory: str, name: str) -> np.ndarray:
    with open(os.path.join(directory, f"{name}.json"), "r") as f:
        header = json.load(f)
    data = np.fromfile(os.path.join(directory, f"{name}.bin"), dtype="<f8")
    rows, cols = header["rows"], header["cols"]
    if data.size != rows * cols:
        raise ShapeMismatch(f"weight file {name} holds {data.size} values, header says {rows}x{cols}")
    return data.reshape(rows, cols).astype(np.float64)
