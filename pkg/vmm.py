#!/usr/bin/env python3

"""
Vector-matrix multiplication over packed ciphertexts
Direct, replicated and interleaved-replicated packings, their baby-step
giant-step variants, the batched diagonal method used during prefill and
fused valid-slot extraction (mask or rotary embedding).
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import LayoutMismatch, ShapeMismatch
from layouts import (
    DiagonalPlaintextSet,
    GeneralizedVMMPlan,
    InterleavedLayout,
    SquarePlan,
    block_masks,
    bsgs_split,
    column_mask,
    inner_roll,
    log2i,
    make_mask,
)
from slot_engine import BackendBase, CiphertextHandle, with_layout

logger = logging.getLogger(__name__)

SCHEME_KINDS = ("direct", "replicated", "interleaved")
SCHEME_DEPTH = {"direct": 2, "replicated": 3, "interleaved": 1}


@dataclass(frozen=True)
class VMMScheme:
    kind: str = "interleaved"
    bsgs: bool = False

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown VMM scheme '{self.kind}'")


@dataclass(frozen=True)
class RoPEParams:
    """Rotary embedding parameters.

    position is one token index, or one index per lane for batched layouts.
    shift defaults to -t*H: the pair partner of logical element j*H + h
    sits t*H slots further, and the sine terms move right by that distance.
    """

    d_head: int
    position: Union[int, Tuple[int, ...]] = 0
    base: float = 10000.0
    shift: Optional[int] = None

    def __post_init__(self):
        if self.d_head % 2:
            raise ShapeMismatch(f"rotary embedding needs an even head dimension, got {self.d_head}")


@dataclass(frozen=True)
class Successor:
    """Element-wise consumer that absorbs the deferred valid-slot mask.

    kind: rope, silu-mask, norm-mask or vcache-mask. scale is the successor's
    own input scaling, folded into the mask plaintext.
    """

    kind: str
    rope: Optional[RoPEParams] = None
    scale: float = 1.0
    column: Optional[int] = None


def _giant_step_sum(engine: BackendBase, babies: Sequence[CiphertextHandle],
                    giants: Iterable[Tuple[int, Sequence[Optional[np.ndarray]]]]) -> Optional[CiphertextHandle]:
    """sum over giants g of Rot(sum_a babies[a] * plains[a], g); None plaintexts are skipped"""
    acc = None
    for shift, plains in giants:
        inner = None
        for u, p in zip(babies, plains):
            if p is None:
                continue
            term = engine.mul(u, p)
            inner = term if inner is None else engine.add(inner, term)
        if inner is None:
            continue
        inner = engine.rotate(inner, shift)
        acc = inner if acc is None else engine.add(acc, inner)
    return acc


def inner_rotate(engine: BackendBase, c: CiphertextHandle, layout: InterleavedLayout,
                 steps: int) -> CiphertextHandle:
    """Cyclic shift by `steps` inside every d-slot block.

    Contiguous and replicated layouts pay two masked products and two
    rotations (one level). Interleaved layouts and d == N need a single
    rotation because the block is the whole ciphertext.
    """
    d, N = layout.d, layout.N
    k = steps % d
    if k == 0:
        return c
    if layout.kind in ("interleaved", "batched"):
        return engine.rotate(c, k * layout.t)
    if d == N:
        return engine.rotate(c, k)
    m_lo, m_hi = block_masks(N, d, k)
    lo = engine.rotate(engine.mul(c, m_lo), k)
    hi = engine.rotate(engine.mul(c, m_hi), k - d)
    return engine.add(lo, hi)


def _check_layout(c: CiphertextHandle, kind: str, d: int):
    layout = c.layout
    if layout is None:
        return
    if not isinstance(layout, InterleavedLayout) or layout.kind != kind or layout.d != d:
        raise LayoutMismatch(f"expected {kind} layout with d={d}, got {layout}")
    if kind == "interleaved" and (layout.offset != 0 or layout.deferred_mask):
        raise LayoutMismatch("interleaved VMM input must sit at offset 0 with clean slots")


def vmm(engine: BackendBase, c: CiphertextHandle, W: DiagonalPlaintextSet, scheme: VMMScheme,
        out_offset: int = 0) -> CiphertextHandle:
    """Encrypted x*W under the requested packing scheme"""
    if scheme.kind == "interleaved":
        if not isinstance(W.plan, GeneralizedVMMPlan):
            raise LayoutMismatch("interleaved scheme needs an interleaved diagonal set")
        return vmm_generalized(engine, c, W, W.plan.with_bsgs(scheme.bsgs), out_offset)

    if not isinstance(W.plan, SquarePlan) or W.plan.kind != scheme.kind:
        raise LayoutMismatch(f"{scheme.kind} scheme needs a {scheme.kind} diagonal set")
    if scheme.kind == "direct":
        return _vmm_direct(engine, c, W, scheme.bsgs)
    return _vmm_replicated(engine, c, W, scheme.bsgs)


def vmm_generalized(engine: BackendBase, c: CiphertextHandle, W: DiagonalPlaintextSet,
                    plan: Optional[GeneralizedVMMPlan] = None, out_offset: int = 0) -> CiphertextHandle:
    """Interleaved replicated VMM for square, d x alpha*d and alpha*d x d weights.

    Output element J lands at slot J*t2 + out_offset with garbage in the
    other slots (deferred mask). The up-projection output layout is the
    down-projection input layout once extracted.
    """
    plan = plan or W.plan
    _check_layout(c, "interleaved", plan.D_in)
    if not 0 <= out_offset < plan.t2:
        raise LayoutMismatch(f"output offset {out_offset} outside [0, {plan.t2})")
    t_in, t_out = plan.t1, plan.t2

    # step 1: replicate each input element into the slots its output block sums over
    stride = max(plan.D_in, plan.D_out) - 1
    cp = c
    for i in range(log2i(min(t_in, t_out))):
        cp = engine.add(cp, engine.rotate(cp, (1 << i) * stride))
    for i in range(log2i(t_out), log2i(t_in)):
        cp = engine.add(cp, engine.rotate(cp, -(1 << i)))

    # step 2: rotate-multiply-accumulate, baby steps hoisted
    R = plan.R
    babies = [cp] + [engine.rotate(cp, R * a, hoisted=True) for a in range(1, plan.r_i)]
    giant_stride = R * plan.r_i
    giants = (
        (giant_stride * b, [np.roll(W[a + plan.r_i * b], giant_stride * b) for a in range(plan.r_i)])
        for b in range(plan.r_o)
    )
    acc = _giant_step_sum(engine, babies, giants)

    # step 3: sum each t2-slot output block into slot J*t2 + out_offset
    for l in range(log2i(t_out)):
        step = 1 << l
        acc = engine.add(acc, engine.rotate(acc, -step if (out_offset >> l) & 1 else step))

    H = c.layout.H if isinstance(c.layout, InterleavedLayout) else 1
    return with_layout(acc, plan.output_layout(out_offset, H if plan.orientation == "square" else 1))


def _vmm_direct(engine: BackendBase, c: CiphertextHandle, W: DiagonalPlaintextSet, bsgs: bool) -> CiphertextHandle:
    plan = W.plan
    d, N = plan.d, plan.N
    _check_layout(c, "contiguous", d)
    layout = InterleavedLayout(d=d, t=N // d, kind="contiguous")

    if not bsgs:
        acc = None
        for r in range(d):
            term = engine.mul(inner_rotate(engine, c, layout, r), W[r])
            acc = term if acc is None else engine.add(acc, term)
        return with_layout(acc, layout)

    B, G = bsgs_split(d)
    babies = [inner_rotate(engine, c, layout, a) for a in range(B)]
    acc = _giant_step_sum(engine, babies, _fused_inner_giants(W, d, N, B, G, 1))
    return with_layout(acc, layout)


def _fused_inner_giants(W: DiagonalPlaintextSet, d: int, N: int, B: int, G: int, unit: int):
    """Giant steps whose block-local rotation is folded into the plaintexts.

    InRot(z, g) = Rot(z*m_lo(g), g) + Rot(z*m_hi(g), g - d), and the masks
    multiply the (pre-rotated) diagonals instead of z.
    """
    for b in range(G):
        g = unit * B * b
        shifted = [inner_roll(W[a + B * b], d, -g) for a in range(B)]
        if g == 0 or d == N:
            yield g, shifted
            continue
        m_lo, m_hi = block_masks(N, d, g)
        yield g, [s * m_lo for s in shifted]
        yield g - d, [s * m_hi for s in shifted]


def _replicate_shift_terms(N: int, d: int, t: int):
    """Masked shifts moving block beta by beta: (shift, mask) pairs"""
    beta_of = np.arange(N) // d
    terms = [(0, (beta_of == 0).astype(np.float64))]
    for beta in range(1, t):
        block = (beta_of == beta).astype(np.float64)
        m_lo, m_hi = block_masks(N, d, beta)
        terms.append((beta, m_lo * block))
        terms.append((beta - d, m_hi * block))
    return terms


def _vmm_replicated(engine: BackendBase, c: CiphertextHandle, W: DiagonalPlaintextSet, bsgs: bool) -> CiphertextHandle:
    plan = W.plan
    d, N, t = plan.d, plan.N, plan.t
    _check_layout(c, "replicated", d)
    layout = InterleavedLayout(d=d, t=t, kind="replicated")
    M = d // t

    # preprocess: block beta of c1 holds x cyclically shifted by beta
    terms = _replicate_shift_terms(N, d, t)
    if bsgs:
        B = bsgs_split(2 * t)[0]
        babies = [c] + [engine.rotate(c, a, hoisted=True) for a in range(1, B)]
        grouped = {}
        for shift, mask in terms:
            sm = shift % N
            a, g = sm % B, sm - sm % B
            grouped.setdefault(g, [None] * B)[a] = np.roll(np.roll(mask, -shift), g)
        c1 = _giant_step_sum(engine, babies, sorted(grouped.items()))
    else:
        c1 = None
        for shift, mask in terms:
            term = engine.rotate(engine.mul(c, mask), shift)
            c1 = term if c1 is None else engine.add(c1, term)

    # groups: block-local rotations by multiples of t
    if bsgs:
        Bg, Gg = bsgs_split(M)
        babies = [inner_rotate(engine, c1, layout, t * a) for a in range(Bg)]
        acc = _giant_step_sum(engine, babies, _fused_inner_giants(W, d, N, Bg, Gg, t))
    else:
        acc = None
        for m in range(M):
            term = engine.mul(inner_rotate(engine, c1, layout, t * m), W[m])
            acc = term if acc is None else engine.add(acc, term)

    # reduce across blocks; every block ends with the full product
    for l in range(log2i(t)):
        acc = engine.add(acc, engine.rotate(acc, d << l))
    return with_layout(acc, layout)


def vmm_batched(engine: BackendBase, c: CiphertextHandle, diagonal_sets: Sequence[DiagonalPlaintextSet],
                bsgs: bool = True) -> List[CiphertextHandle]:
    """Diagonal method over t token lanes (prefill), one output per d x d weight block.

    Baby-step rotations of the input are shared by every block.
    """
    d = diagonal_sets[0].source_shape[0]
    N = c.N
    t = N // d
    _check_layout(c, "batched", d)
    B, G = bsgs_split(d) if bsgs else (d, 1)
    babies = [c] + [engine.rotate(c, t * a, hoisted=True) for a in range(1, B)]
    outputs = []
    for W in diagonal_sets:
        giants = ((t * B * b, [np.roll(W[a + B * b], t * B * b) for a in range(B)]) for b in range(G))
        outputs.append(with_layout(_giant_step_sum(engine, babies, giants), c.layout.deferred()))
    return outputs


def rope_shift(p: RoPEParams, layout: InterleavedLayout) -> int:
    return -layout.t * layout.H if p.shift is None else p.shift


def rope_plaintexts(p: RoPEParams, layout: InterleavedLayout) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """cos on valid slots, sin on even pair elements, -sin on odd pair elements.

    Combined as y = x*p0 + Rot(x*p1, s) + Rot(x*p2, -s).
    """
    if layout.d_head != p.d_head:
        raise ShapeMismatch(f"layout head dimension {layout.d_head} != rotary d_head {p.d_head}")
    i = np.arange(layout.d)
    j = i // layout.H
    freq = p.base ** (-2.0 * (j // 2) / p.d_head)
    even = (j % 2) == 0

    p0, p1, p2 = np.zeros(layout.N), np.zeros(layout.N), np.zeros(layout.N)
    if layout.kind == "batched":
        given = np.asarray(p.position, dtype=np.float64).reshape(-1)
        positions = np.resize(given, layout.lanes) if given.size == 1 else given
        if positions.size < layout.lanes:
            raise ShapeMismatch(f"{positions.size} positions for {layout.lanes} lanes")
        lanes = [(s, positions[s]) for s in range(layout.lanes)]
        base_slots = i * layout.t
    else:
        lanes = [(0, float(np.asarray(p.position).reshape(-1)[0]))]
        base_slots = layout.slot_positions()
    for lane, pos in lanes:
        slots = base_slots + lane
        theta = pos * freq
        p0[slots] = np.cos(theta)
        p1[slots] = np.where(even, np.sin(theta), 0.0)
        p2[slots] = np.where(even, 0.0, -np.sin(theta))
    return p0, p1, p2


def fused_extract(engine: BackendBase, c: CiphertextHandle, successor: Successor) -> CiphertextHandle:
    """Run the successor's element-wise product with the valid-slot mask folded in"""
    layout = c.layout
    if not isinstance(layout, InterleavedLayout):
        raise LayoutMismatch("fused extraction needs a layout-tagged ciphertext")
    if not layout.deferred_mask:
        raise LayoutMismatch("fused extraction expects a ciphertext with its valid-slot mask deferred")

    if successor.kind == "rope":
        p0, p1, p2 = rope_plaintexts(successor.rope, layout)
        s = rope_shift(successor.rope, layout)
        y = engine.mul(c, p0 * successor.scale)
        y = engine.add(y, engine.rotate(engine.mul(c, p1 * successor.scale), s))
        y = engine.add(y, engine.rotate(engine.mul(c, p2 * successor.scale), -s))
    elif successor.kind in ("silu-mask", "norm-mask"):
        y = engine.mul(c, make_mask(layout, "valid-slots") * successor.scale)
    elif successor.kind == "vcache-mask":
        y = engine.mul(c, column_mask(layout, successor.column) * successor.scale)
    else:
        raise ValueError(f"unknown successor '{successor.kind}'")
    return with_layout(y, layout.masked())


def expected_rotations(plan: GeneralizedVMMPlan) -> int:
    """Rotation count of vmm_generalized for a plan"""
    return log2i(plan.t1) + log2i(plan.t2) + plan.r_i + plan.r_o - 2


def baseline_counts(N: int, d: int, amortization: int = 256) -> dict:
    """Closed-form counts of schemes reported for comparison but never executed"""
    return {
        "bolt_padding": {"ct_pt_mults": d, "rotations": 2 * math.ceil(math.sqrt(N)), "depth": 1},
        "nexus": {"ct_pt_mults": d * d // amortization, "rotations": 2 * d * d // amortization, "depth": 1},
    }
