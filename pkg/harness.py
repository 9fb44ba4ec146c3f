#!/usr/bin/env python3

"""
Encrypted decoder harness
Runs the toy decoder over a slot engine: batched prefill with just-in-time
bootstrapping, decode steps driven by a placement plan, the per-block stage
schema handed to the placement solver, run reports and the count benches.
"""

import csv
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from errors import LevelUnderflow, PlanMismatch, ShapeMismatch
from kv_attention import (
    AttentionConfig,
    AttentionWeights,
    KVCache,
    distribute_v,
    k_append,
    prefill as prefill_attention,
    qk_dot,
    softmax_times_v,
    v_append,
)
from layouts import (
    DiagonalPlaintextSet,
    InterleavedLayout,
    SquarePlan,
    batched_diagonals,
    decode_batched,
    decode_interleaved,
    encode_batched,
    encode_interleaved,
    extract_diagonals,
    head_permutation,
    inverse_head_permutation,
    next_power_of_two,
    pad_to_power_of_two,
    plan_vmm,
)
from model import (
    ModelConfig,
    ModelWeights,
    ReferenceResult,
    default_prompt,
    final_logits,
    flatten_samples,
    init_weights,
    plaintext_reference,
)
from nonlinear import (
    ApproxSpec,
    State,
    SubLayerStep,
    SubLayerTrace,
    TracePhase,
    activation_steps,
    exact_norm,
    exact_silu,
    exact_softmax,
    group_steps,
    main_level,
    map_state,
    norm_steps,
    profile_ranges,
    run_steps,
    softmax_steps,
)
from placement import CostModel, LayerSpec, PlacementPlan, expand_sublayers, solve_periodic
from slot_engine import (
    BackendBase,
    CiphertextHandle,
    CostLedger,
    EngineParams,
    OpCounters,
    PhaseLevels,
    create_engine,
    with_layout,
)
from vmm import RoPEParams, Successor, VMMScheme, baseline_counts, fused_extract, vmm, vmm_batched, vmm_generalized

logger = logging.getLogger(__name__)

PREFILL_PHASE = "Amortized Prefilling"
PHASE_ORDER = ("QKV", "RoPE & Cache", "QK^T", "Softmax", "Score·V", "Output projection",
               "Add & Norm", "Up & Gate projection", "SiLU", "Down projection", PREFILL_PHASE)
CSV_COLUMNS = ("phase", "rotations", "hoisted", "ctpt_mult", "ctct_mult", "adds", "bootstraps",
               "levels_in", "levels_out")
# stages whose depth is the plaintext-weight chain of a block
VMM_CHAIN = ("qkv", "rope_cache", "out", "upgate", "down")
DENSE_CHECK_LIMIT = 1 << 22


@dataclass(frozen=True)
class Stage:
    """One schedulable piece of a decoder block.

    Linear stages carry a fixed depth; nonlinear stages (function set) take
    theirs from their steps. width counts the ciphertexts leaving the stage.
    """

    name: str
    phase: str
    depth: int = 0
    width: int = 1
    function: Optional[str] = None
    fork: Optional[str] = None
    join: Optional[str] = None


def block_stages(cfg: ModelConfig, n_maps: int = 1) -> List[Stage]:
    return [
        Stage("norm1", "Add & Norm", function="norm", fork="R1"),
        Stage("qkv", "QKV", depth=1, width=3),
        Stage("rope_cache", "RoPE & Cache", depth=1, width=2 + cfg.d_head),
        Stage("qk", "QK^T", depth=2, width=n_maps, fork="V"),
        Stage("softmax", "Softmax", width=n_maps, function="softmax"),
        Stage("sv", "Score·V", depth=2, join="V"),
        Stage("out", "Output projection", depth=1),
        Stage("add1", "Add & Norm", join="R1"),
        Stage("norm2", "Add & Norm", function="norm", fork="R2"),
        Stage("upgate", "Up & Gate projection", depth=1, width=2),
        Stage("silu", "SiLU", function="silu", fork="U"),
        Stage("gate_product", "SiLU", depth=1, join="U"),
        Stage("down", "Down projection", depth=1),
        Stage("add2", "Add & Norm", join="R2"),
    ]


def stage_key(block: int, stage: str) -> str:
    return f"block{block}/{stage}"


# ----------------------------------------------------------------------------
# Level policies

class LevelPolicy:
    """Chooses the bootstrap or level drop applied when a stage starts"""

    expanded = True

    def __init__(self, engine: BackendBase):
        self.engine = engine

    def enter(self, block: int, stage: str, sublayer: Optional[str], cts: List[CiphertextHandle],
              need: int) -> List[CiphertextHandle]:
        raise NotImplementedError

    def branch(self, c: CiphertextHandle, need: int) -> CiphertextHandle:
        """Level of a residual branch rejoining the main path"""
        return c

    def step_hook(self) -> Optional[Callable[[SubLayerStep, State], State]]:
        return None

    def start_step(self):
        pass

    def finish_step(self):
        pass


class JitPolicy(LevelPolicy):
    """Bootstrap to the top level whenever the next piece would underflow"""

    def _lift(self, c: CiphertextHandle) -> CiphertextHandle:
        return self.engine.bootstrap(c, self.engine.L)

    def enter(self, block, stage, sublayer, cts, need):
        if min(c.level for c in cts) < min(need, self.engine.L):
            return [self._lift(c) for c in cts]
        return list(cts)

    def branch(self, c, need):
        return self._lift(c) if c.level < need else c

    def step_hook(self):
        def hook(step: SubLayerStep, state: State) -> State:
            if main_level(state) < step.depth:
                return map_state(state, self._lift)
            return state
        return hook


class PlanPolicy(LevelPolicy):
    """Replays a placement plan; each decode step walks it from the start"""

    def __init__(self, engine: BackendBase, plan: PlacementPlan):
        super().__init__(engine)
        self.plan = plan
        self.expanded = any(e.sublayer is not None for e in plan.entries)
        self._pos = 0

    def start_step(self):
        self._pos = 0

    def finish_step(self):
        if self._pos != len(self.plan.entries):
            raise PlanMismatch(f"plan has {len(self.plan.entries)} entries, the decode step used {self._pos}")

    def enter(self, block, stage, sublayer, cts, need):
        key = stage_key(block, stage)
        if self._pos >= len(self.plan.entries):
            raise PlanMismatch(f"plan ends before {key}")
        entry = self.plan.entries[self._pos]
        self._pos += 1
        if entry.layer != key or entry.sublayer != sublayer:
            raise PlanMismatch(f"plan entry {entry.layer}:{entry.sublayer} where {key}:{sublayer} runs")
        out = []
        for c in cts:
            if entry.bootstrap_to is not None:
                c = self.engine.bootstrap(c, entry.bootstrap_to)
            elif c.level > entry.input_level:
                c = self.engine.level_drop(c, entry.input_level)
            elif c.level < entry.input_level:
                raise LevelUnderflow(f"{key} planned at level {entry.input_level}, ciphertext is at {c.level}")
            out.append(c)
        return out


def _lift(engine: BackendBase, c: CiphertextHandle, need: int) -> CiphertextHandle:
    return engine.bootstrap(c, engine.L) if c.level < need else c


# ----------------------------------------------------------------------------
# Packed weights

@dataclass(frozen=True)
class EncryptedBlock:
    """Head-reordered weights of one block in every packing the decoder uses"""

    norm1: np.ndarray
    norm2: np.ndarray
    attention: AttentionWeights
    q: DiagonalPlaintextSet
    k: DiagonalPlaintextSet
    v: DiagonalPlaintextSet
    o: DiagonalPlaintextSet
    up: DiagonalPlaintextSet
    gate: DiagonalPlaintextSet
    down: DiagonalPlaintextSet
    batched_o: DiagonalPlaintextSet
    batched_up: Tuple[DiagonalPlaintextSet, ...]
    batched_gate: Tuple[DiagonalPlaintextSet, ...]
    batched_down: Tuple[DiagonalPlaintextSet, ...]


def pack_block(cfg: ModelConfig, blk) -> EncryptedBlock:
    """Reorder to the head-interleaved element order and extract diagonals.

    Hidden index j*H + h holds natural element h*d_head + j; the FFN width
    keeps its natural order. Queries absorb the 1/sqrt(d_head) score scale.
    """
    d, N = cfg.d, cfg.N
    perm = head_permutation(d, cfg.H)
    square = np.ix_(perm, perm)
    W_q = blk.W_q[square] / math.sqrt(cfg.d_head)
    W_k, W_v, W_o = blk.W_k[square], blk.W_v[square], blk.W_o[square]
    W_up, W_gate, W_down = blk.W_up[perm, :], blk.W_gate[perm, :], blk.W_down[:, perm]

    sq_plan = plan_vmm(N, d, d)
    up_plan = plan_vmm(N, d, d * cfg.ffn_alpha)
    down_plan = plan_vmm(N, d * cfg.ffn_alpha, d)
    cols = [slice(j * d, (j + 1) * d) for j in range(cfg.ffn_alpha)]
    return EncryptedBlock(
        norm1=blk.norm1[perm],
        norm2=blk.norm2[perm],
        attention=AttentionWeights(W_q=W_q, W_k=W_k, W_v=W_v),
        q=extract_diagonals(W_q, sq_plan),
        k=extract_diagonals(W_k, sq_plan),
        v=extract_diagonals(W_v, sq_plan),
        o=extract_diagonals(W_o, sq_plan),
        up=extract_diagonals(W_up, up_plan),
        gate=extract_diagonals(W_gate, up_plan),
        down=extract_diagonals(W_down, down_plan),
        batched_o=batched_diagonals(W_o, N),
        batched_up=tuple(batched_diagonals(W_up[:, s], N) for s in cols),
        batched_gate=tuple(batched_diagonals(W_gate[:, s], N) for s in cols),
        batched_down=tuple(batched_diagonals(W_down[s, :], N) for s in cols),
    )


# ----------------------------------------------------------------------------
# Decoder

class LevelRecord(BaseModel):
    step: int
    block: int
    stage: str
    phase: str
    level_in: int
    level_out: int


@dataclass
class DecoderState:
    """Caches after `position` tokens and the token the next step consumes.

    step counts decode steps taken; hidden is the last decrypted hidden
    state in natural element order.
    """

    caches: List[KVCache]
    position: int
    token: int
    hidden: Optional[np.ndarray] = None
    step: int = 0


class EncryptedDecoder:
    """The toy decoder over one engine"""

    def __init__(self, engine: BackendBase, cfg: ModelConfig, weights: ModelWeights,
                 specs: Optional[Dict[str, ApproxSpec]] = None, debug: Optional[bool] = None):
        weights.check(cfg)
        if cfg.mode == "approx" and not specs:
            raise ValueError("approx mode needs profiled approximation specs")
        if engine.N != cfg.N or engine.L != cfg.L:
            raise ShapeMismatch(f"engine (N={engine.N}, L={engine.L}) does not match the model config")
        self.engine = engine
        self.cfg = cfg
        self.weights = weights
        self.specs = dict(specs or {})
        self.debug = debug
        # one spare slot so a profiling step fits behind the last decode step
        self.attention = AttentionConfig(N=cfg.N, d=cfg.d, H=cfg.H, n0=cfg.n0, n_max=cfg.n_max + 1)
        self.perm = head_permutation(cfg.d, cfg.H)
        self.inv_perm = inverse_head_permutation(cfg.d, cfg.H)
        self.blocks = [pack_block(cfg, blk) for blk in weights.blocks]
        self.n_maps = self.attention.map_layout(cfg.n_max).n_maps
        self.stages = block_stages(cfg, self.n_maps)
        self.level_trace: List[LevelRecord] = []
        self.stage_counts: Dict[Tuple[int, str], OpCounters] = {}
        self._step = 0

    def stage(self, name: str) -> Stage:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    # --- nonlinear steps -----------------------------------------------------

    def stage_steps(self, stage: Stage, block: int = 0, n_prime: int = 1,
                    n_maps: int = 1) -> List[SubLayerStep]:
        cfg, exact = self.cfg, self.cfg.mode == "exact"
        if stage.function == "norm":
            gamma = getattr(self.blocks[block], stage.name)
            if exact:
                return [SubLayerStep("norm", 0, 1,
                                     lambda eng, st: (exact_norm(eng, st[0], gamma, None, False, cfg.norm_eps),))]
            return norm_steps(self.specs["norm"], gamma, None, center=False, eps=cfg.norm_eps, debug=self.debug)
        if stage.function == "softmax":
            if exact:
                return [SubLayerStep("softmax", 0, n_maps, lambda eng, st: (exact_softmax(eng, st[0], n_prime),))]
            return softmax_steps(self.specs["softmax"], n_prime, n_maps, "approx", self.debug)
        if stage.function == "silu":
            if exact:
                return [SubLayerStep("silu", 0, 1, lambda eng, st: (exact_silu(eng, st[0]),))]
            return activation_steps(self.specs["silu"], "approx", self.debug)
        raise ValueError(f"stage {stage.name} has no nonlinear steps")

    def stage_trace(self, stage: Stage) -> SubLayerTrace:
        steps = self.stage_steps(stage, n_maps=self.n_maps)
        return SubLayerTrace(function=stage.function,
                             phases=[TracePhase(name=s.name, depth=s.depth, count=s.count) for s in steps])

    # --- bookkeeping ---------------------------------------------------------

    @contextmanager
    def _stage(self, block: int, stage: Stage) -> Iterator[None]:
        ledger = self.engine.ledger
        before = ledger.snapshot()
        with ledger.phase(stage.phase):
            yield
        counts = self.stage_counts.setdefault((block, stage.name), OpCounters())
        counts.add(ledger.snapshot().minus(before))

    def _record(self, block: int, stage: Stage, level_in: int, level_out: int):
        self.level_trace.append(LevelRecord(step=self._step, block=block, stage=stage.name, phase=stage.phase,
                                            level_in=level_in, level_out=level_out))
        self.engine.ledger.note_levels(stage.phase, level_in, level_out)

    def _enter(self, policy: LevelPolicy, block: int, stage: Stage,
               cts: List[CiphertextHandle]) -> List[CiphertextHandle]:
        return policy.enter(block, stage.name, None, cts, stage.depth)

    def _enter_state(self, policy: LevelPolicy, block: int, stage: Stage, sublayer: Optional[str],
                     state: State, need: int, extra: Sequence[CiphertextHandle]):
        # group boundaries hold a single item: one ciphertext or the list of score maps
        (item,) = state
        cts = item if isinstance(item, list) else [item]
        out = policy.enter(block, stage.name, sublayer, list(cts) + list(extra), need)
        head = out[: len(cts)]
        return ((head if isinstance(item, list) else head[0]),), out[len(cts):]

    def _nonlinear(self, policy: LevelPolicy, block: int, stage: Stage, steps: List[SubLayerStep],
                   state: State, extra: Sequence[CiphertextHandle] = (),
                   planned: Optional[List[SubLayerStep]] = None):
        """Run a nonlinear stage group by group.

        Returns (output state, state right after the stage's entry action,
        extra ciphertexts after that action). Groups follow `planned` when
        given, so the runtime map count cannot move a bootstrap site.
        """
        layout = group_steps(planned if planned is not None else steps)
        groups, k = [], 0
        for name, members in layout:
            groups.append((name, steps[k:k + len(members)]))
            k += len(members)
        split = policy.expanded and len(groups) > 1
        hook = policy.step_hook()
        entered, rest, level_in = state, list(extra), main_level(state)
        for gi, (name, members) in enumerate(groups):
            if gi == 0 or split:
                need = sum(s.depth for s in (members if split else steps))
                state, moved = self._enter_state(policy, block, stage, name if split else None, state, need,
                                                 rest if gi == 0 else [])
                if gi == 0:
                    entered, rest, level_in = state, moved, main_level(state)
            state = run_steps(self.engine, members, state, before_step=hook)
        self._record(block, stage, level_in, main_level(state))
        return state, entered, rest

    # --- decode --------------------------------------------------------------

    def _decode_block(self, b: int, x: CiphertextHandle, cache: KVCache, tau: int,
                      policy: LevelPolicy) -> Tuple[CiphertextHandle, KVCache]:
        eng, acfg, blk = self.engine, self.attention, self.blocks[b]
        st = {s.name: s for s in self.stages}
        hidden = acfg.hidden_layout()
        offset = tau % acfg.t

        with self._stage(b, st["norm1"]):
            (a,), (x,), _ = self._nonlinear(policy, b, st["norm1"], self.stage_steps(st["norm1"], b), (x,))

        with self._stage(b, st["qkv"]):
            (a,) = self._enter(policy, b, st["qkv"], [a])
            q = vmm_generalized(eng, a, blk.q)
            k = vmm_generalized(eng, a, blk.k, out_offset=offset)
            v = vmm_generalized(eng, a, blk.v, out_offset=offset)
            self._record(b, st["qkv"], a.level, q.level)

        with self._stage(b, st["rope_cache"]):
            q, k, v = self._enter(policy, b, st["rope_cache"], [q, k, v])
            level_in = q.level
            rope = Successor("rope", RoPEParams(acfg.d_head, tau, self.cfg.rope_base))
            q = fused_extract(eng, q, rope)
            k = fused_extract(eng, k, rope)
            pieces = distribute_v(eng, v, acfg, tau)
            self._record(b, st["rope_cache"], level_in, q.level)

        with self._stage(b, st["qk"]):
            live = self._enter(policy, b, st["qk"], [q, k] + pieces)
            q, k, pieces = live[0], live[1], live[2:]
            cache = k_append(eng, cache, k, acfg)
            cache = v_append(eng, cache, pieces, acfg)
            scores = qk_dot(eng, q, cache, acfg)
            self._record(b, st["qk"], q.level, scores[0].level)

        with self._stage(b, st["softmax"]):
            steps = self.stage_steps(st["softmax"], b, tau + 1, len(scores))
            planned = self.stage_steps(st["softmax"], b, tau + 1, self.n_maps)
            (scores,), _, _ = self._nonlinear(policy, b, st["softmax"], steps, (scores,), planned=planned)

        with self._stage(b, st["sv"]):
            scores = self._enter(policy, b, st["sv"], scores)
            v_level = min(c.level for group in cache.v_groups for c in group)
            o = softmax_times_v(eng, scores, cache, acfg)
            self._record(b, st["sv"], min(scores[0].level, v_level), o.level)

        with self._stage(b, st["out"]):
            (o,) = self._enter(policy, b, st["out"], [o])
            level_in = o.level
            o = vmm_generalized(eng, o, blk.o)
            self._record(b, st["out"], level_in, o.level)

        with self._stage(b, st["add1"]):
            (o,) = self._enter(policy, b, st["add1"], [o])
            h = with_layout(eng.add(x, o), hidden.deferred())
            self._record(b, st["add1"], min(x.level, o.level), h.level)

        with self._stage(b, st["norm2"]):
            (a,), (h,), _ = self._nonlinear(policy, b, st["norm2"], self.stage_steps(st["norm2"], b), (h,))

        with self._stage(b, st["upgate"]):
            (a,) = self._enter(policy, b, st["upgate"], [a])
            up = vmm_generalized(eng, a, blk.up)
            gate = vmm_generalized(eng, a, blk.gate)
            self._record(b, st["upgate"], a.level, up.level)

        with self._stage(b, st["silu"]):
            (g,), _, (up,) = self._nonlinear(policy, b, st["silu"], self.stage_steps(st["silu"], b),
                                             (gate,), extra=[up])

        with self._stage(b, st["gate_product"]):
            (g,) = self._enter(policy, b, st["gate_product"], [g])
            up = policy.branch(up, 1)
            f = with_layout(eng.mul(g, up), up.layout.masked())
            self._record(b, st["gate_product"], min(g.level, up.level), f.level)

        with self._stage(b, st["down"]):
            (f,) = self._enter(policy, b, st["down"], [f])
            level_in = f.level
            y = vmm_generalized(eng, f, blk.down)
            self._record(b, st["down"], level_in, y.level)

        with self._stage(b, st["add2"]):
            (y,) = self._enter(policy, b, st["add2"], [y])
            x = with_layout(eng.add(h, y), hidden.deferred())
            self._record(b, st["add2"], min(h.level, y.level), x.level)
        return x, cache

    def decode_step(self, state: DecoderState, policy: LevelPolicy) -> DecoderState:
        """Consume state.token at position state.position and predict the next token"""
        cfg, eng = self.cfg, self.engine
        tau = state.position
        hidden = self.attention.hidden_layout()
        self._step = state.step + 1
        x_vec = self.weights.embed[state.token][self.perm]
        x = eng.encrypt(encode_interleaved(x_vec, hidden), layout=hidden)

        policy.start_step()
        caches = list(state.caches)
        for b in range(cfg.n_layers):
            x, caches[b] = self._decode_block(b, x, caches[b], tau, policy)
        policy.finish_step()

        out = decode_interleaved(eng.decrypt(x), hidden)[self.inv_perm]
        token = int(np.argmax(final_logits(cfg, self.weights, out)))
        logger.debug("decode step %d at position %d -> token %d", self._step, tau, token)
        return DecoderState(caches=caches, position=tau + 1, token=token, hidden=out, step=state.step + 1)

    # --- prefill -------------------------------------------------------------

    def _prefill_softmax(self, hook):
        if self.cfg.mode == "exact":
            return None
        spec = self.specs["softmax"]

        def softmax(engine, maps, n_prime):
            (out,) = run_steps(engine, softmax_steps(spec, n_prime, len(maps), "approx", self.debug),
                               (list(maps),), before_step=hook)
            return out

        return softmax

    def _prefill_ffn(self, b: int, x: CiphertextHandle, o: CiphertextHandle, hook) -> CiphertextHandle:
        eng, blk = self.engine, self.blocks[b]
        o = vmm_batched(eng, _lift(eng, o, 1), [blk.batched_o])[0]
        h = eng.add(x, o)
        (a,) = run_steps(eng, self.stage_steps(self.stage("norm2"), b), (h,), before_step=hook)
        a = _lift(eng, a, 1)
        ups = vmm_batched(eng, a, blk.batched_up)
        gates = vmm_batched(eng, a, blk.batched_gate)
        y = None
        for up, gate, down in zip(ups, gates, blk.batched_down):
            (g,) = run_steps(eng, self.stage_steps(self.stage("silu"), b), (gate,), before_step=hook)
            f = with_layout(eng.mul(_lift(eng, g, 1), _lift(eng, up, 1)), up.layout)
            part = vmm_batched(eng, _lift(eng, f, 1), [down])[0]
            y = part if y is None else eng.add(y, part)
        return eng.add(h, y)

    def prefill(self, prompt: Sequence[int]) -> DecoderState:
        """Run the prompt t tokens per ciphertext and build every block's cache.

        Levels are restored just in time; all counts land in the amortized
        prefilling phase.
        """
        cfg, eng, acfg = self.cfg, self.engine, self.attention
        if not 1 <= len(prompt) <= cfg.n_max:
            raise ShapeMismatch(f"prompt of {len(prompt)} tokens for a cache of {cfg.n_max}")
        t = acfg.t
        X = self.weights.embed[np.asarray(prompt, dtype=int)][:, self.perm]
        hook = JitPolicy(eng).step_hook()

        with eng.ledger.phase(PREFILL_PHASE):
            batches = []
            for s in range(0, len(prompt), t):
                rows = X[s:s + t]
                layout = acfg.batch_layout(rows.shape[0])
                batches.append(eng.encrypt(encode_batched(rows, layout), layout=layout))
            caches = []
            for b, blk in enumerate(self.blocks):
                norm = self.stage_steps(self.stage("norm1"), b)
                normed = [run_steps(eng, norm, (x,), before_step=hook)[0] for x in batches]
                attn, cache = prefill_attention(eng, normed, blk.attention, acfg, cfg.rope_base,
                                                self._prefill_softmax(hook))
                caches.append(cache)
                batches = [self._prefill_ffn(b, x, o, hook) for x, o in zip(batches, attn)]
            last = batches[-1]
            out = decode_batched(eng.decrypt(last), last.layout)[-1][self.inv_perm]

        token = int(np.argmax(final_logits(cfg, self.weights, out)))
        logger.info("prefilled %d tokens over %d blocks", len(prompt), cfg.n_layers)
        return DecoderState(caches=caches, position=len(prompt), token=token, hidden=out, step=0)

    # --- planning ------------------------------------------------------------

    def profile_stage_counts(self, state: DecoderState) -> Dict[str, OpCounters]:
        """Per-stage counts of one just-in-time decode step of block 0.

        The engine ledger, the level trace and the caller's state are left
        untouched.
        """
        saved = (self.engine.ledger, self.level_trace, self.stage_counts, self._step)
        self.engine.ledger, self.level_trace, self.stage_counts = CostLedger(), [], {}
        try:
            self.decode_step(state, JitPolicy(self.engine))
            return {name: counts for (b, name), counts in self.stage_counts.items() if b == 0}
        finally:
            self.engine.ledger, self.level_trace, self.stage_counts, self._step = saved

    def block_layers(self, counts: Dict[str, OpCounters], cost: CostModel) -> List[LayerSpec]:
        layers = []
        for stage in self.stages:
            trace = self.stage_trace(stage) if stage.function else None
            layers.append(LayerSpec(
                name=stage.name,
                depth=trace.total_depth if trace is not None else stage.depth,
                base_cost=cost.base_from_counts(counts.get(stage.name, OpCounters())),
                width=stage.width,
                sublayers=trace if trace is not None and len(trace.groups()) > 1 else None,
                fork=stage.fork,
                join=stage.join,
                layer=stage.name,
            ))
        return layers

    def plan(self, state: DecoderState, cost: CostModel, expand: bool = True) -> PlacementPlan:
        layers = self.block_layers(self.profile_stage_counts(state), cost)
        return plan_blocks(layers, self.cfg.n_layers, cost, self.cfg.L, expand)


def plan_blocks(layers: Sequence[LayerSpec], n_blocks: int, cost: CostModel, L: int,
                expand: bool = True) -> PlacementPlan:
    """Solve identical blocks and name every entry after its block"""
    block = expand_sublayers(layers) if expand else list(layers)
    plan = solve_periodic(block, n_blocks, cost, L)
    d1 = len(block)
    entries = [e.model_copy(update={"layer": stage_key(i // d1, e.layer)}) for i, e in enumerate(plan.entries)]
    logger.info("placement: %d bootstraps over %d blocks, predicted cost %.3f", plan.bootstraps, n_blocks, plan.cost)
    return plan.model_copy(update={"entries": entries})


def run_decode_step(decoder: EncryptedDecoder, state: DecoderState, plan: PlacementPlan) -> DecoderState:
    return decoder.decode_step(state, PlanPolicy(decoder.engine, plan))


# ----------------------------------------------------------------------------
# Reports

class PhaseRow(BaseModel):
    phase: str
    rotations: int = 0
    hoisted: int = 0
    ctpt_mult: int = 0
    ctct_mult: int = 0
    adds: int = 0
    bootstraps: int = 0
    levels_in: Optional[int] = None
    levels_out: Optional[int] = None

    @classmethod
    def from_counters(cls, phase: str, c: OpCounters, levels: Optional[PhaseLevels] = None) -> "PhaseRow":
        levels = levels or PhaseLevels()
        return cls(phase=phase, rotations=c.rotations, hoisted=c.hoisted_rotations, ctpt_mult=c.ct_pt_mults,
                   ctct_mult=c.ct_ct_mults, adds=c.additions, bootstraps=c.bootstraps,
                   levels_in=levels.levels_in, levels_out=levels.levels_out)


class Report(BaseModel):
    """Result of a run: per-phase counts, level trace, errors against the
    cleartext reference and the tokens produced"""

    kind: str = "decode"
    config: Dict[str, Any] = Field(default_factory=dict)
    phases: List[PhaseRow] = Field(default_factory=list)
    level_trace: List[LevelRecord] = Field(default_factory=list)
    max_hidden_error: float = 0.0
    max_logit_error: float = 0.0
    predicted_plan_cost: float = 0.0
    plan_bootstraps: int = 0
    tokens: List[int] = Field(default_factory=list)
    reference_tokens: List[int] = Field(default_factory=list)
    prefill_per_token: Dict[str, float] = Field(default_factory=dict)
    extras: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("max_hidden_error", "max_logit_error", "predicted_plan_cost")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError(f"report value {v} is not finite")
        return v

    def phase(self, name: str) -> Optional[PhaseRow]:
        for row in self.phases:
            if row.phase == name:
                return row
        return None


def phase_rows(ledger: CostLedger) -> List[PhaseRow]:
    """Ledger phases in pipeline order, then any others by name"""
    breakdown = ledger.phase_snapshot()
    names = [p for p in PHASE_ORDER if p in breakdown] + sorted(p for p in breakdown if p not in PHASE_ORDER)
    return [PhaseRow.from_counters(p, breakdown[p], ledger.phase_levels.get(p)) for p in names]


def emit_report(report: Report, path: str, fmt: str = "json"):
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as f:
            f.write(report.model_dump_json(indent=2))
            f.write("\n")
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in report.phases:
                values = [getattr(row, column) for column in CSV_COLUMNS]
                writer.writerow(["" if v is None else v for v in values])
    else:
        raise ValueError(f"unknown report format '{fmt}'")
    logger.debug("wrote %s report to %s", fmt, path)


# ----------------------------------------------------------------------------
# Runs

@dataclass
class Session:
    """A prefilled decoder with its cleartext reference"""

    cfg: ModelConfig
    weights: ModelWeights
    prompt: List[int]
    reference: ReferenceResult
    decoder: EncryptedDecoder
    state: DecoderState


def profile_specs(cfg: ModelConfig, samples: Dict[str, List[np.ndarray]]) -> Dict[str, ApproxSpec]:
    return profile_ranges(flatten_samples(samples), n_max=cfg.n_max, max_depth=cfg.L)


def open_session(cfg: ModelConfig, weights: Optional[ModelWeights] = None, prompt: Optional[Sequence[int]] = None,
                 gen_len: Optional[int] = None, debug: Optional[bool] = None,
                 backend_id: Optional[str] = None) -> Session:
    """Run the reference, profile the approximation ranges and prefill the prompt.

    The cache capacity follows the prompt length and gen_len.
    """
    weights = weights if weights is not None else init_weights(cfg)
    prompt = [int(p) for p in prompt] if prompt is not None else default_prompt(cfg)
    gen_len = cfg.gen if gen_len is None else gen_len
    cfg = cfg.model_copy(update={"n0": len(prompt), "gen": gen_len})

    samples: Dict[str, List[np.ndarray]] = {}
    reference = plaintext_reference(cfg, weights, prompt, gen_len, samples)
    specs = profile_specs(cfg, samples) if cfg.mode == "approx" else None

    engine = create_engine(EngineParams(N=cfg.N, L=cfg.L), backend_id)
    decoder = EncryptedDecoder(engine, cfg, weights, specs, debug)
    state = decoder.prefill(prompt)
    return Session(cfg=cfg, weights=weights, prompt=prompt, reference=reference, decoder=decoder, state=state)


def plan_model(cfg: ModelConfig, weights: Optional[ModelWeights] = None, cost: Optional[CostModel] = None,
               expand: bool = True, debug: Optional[bool] = None) -> PlacementPlan:
    session = open_session(cfg, weights, debug=debug)
    return session.decoder.plan(session.state, cost or CostModel(), expand)


def run_generation(cfg: ModelConfig, weights: Optional[ModelWeights] = None, prompt: Optional[Sequence[int]] = None,
                   gen_len: Optional[int] = None, plan: Optional[PlacementPlan] = None,
                   cost: Optional[CostModel] = None, expand: bool = True, debug: Optional[bool] = None,
                   backend_id: Optional[str] = None) -> Report:
    """Prefill the prompt, then run gen_len planned decode steps.

    Without a plan one is solved from a profiled just-in-time step.
    """
    session = open_session(cfg, weights, prompt, gen_len, debug, backend_id)
    cfg, weights, decoder, state = session.cfg, session.weights, session.decoder, session.state
    engine = decoder.engine
    prefill = engine.ledger.phase_snapshot().get(PREFILL_PHASE, OpCounters())

    if plan is None:
        plan = decoder.plan(state, cost or CostModel(), expand)
    policy = PlanPolicy(engine, plan)

    hidden, tokens = [state.hidden], [state.token]
    for _ in range(cfg.gen):
        state = decoder.decode_step(state, policy)
        hidden.append(state.hidden)
        tokens.append(state.token)
    hidden = np.array(hidden)
    logits = np.array([final_logits(cfg, weights, h) for h in hidden])
    ref = session.reference

    report = Report(
        kind="decode",
        config=cfg.model_dump(),
        phases=phase_rows(engine.ledger),
        level_trace=decoder.level_trace,
        max_hidden_error=float(np.max(np.abs(hidden - ref.hidden))),
        max_logit_error=float(np.max(np.abs(logits - ref.logits))),
        predicted_plan_cost=plan.cost,
        plan_bootstraps=plan.bootstraps,
        tokens=tokens,
        reference_tokens=ref.tokens,
        prefill_per_token={k: v / cfg.n0 for k, v in prefill.as_dict().items()},
        extras={"bootstraps_executed": engine.ledger.snapshot().bootstraps},
    )
    logger.info("generated %d tokens, max hidden error %.3g", len(tokens), report.max_hidden_error)
    return report


# ----------------------------------------------------------------------------
# Count benches

def _unit_diagonals(plan, keys, shape) -> DiagonalPlaintextSet:
    return DiagonalPlaintextSet(keys, lambda key: np.ones(plan.N), shape, plan, lazy=True)


def bench_vmm(N: int, d: int, alpha: int = 1, scheme: str = "interleaved", bsgs: bool = True,
              seed: int = 0) -> Report:
    """Operation counts of one VMM; the product is checked when the matrix is small enough to build"""
    rng = np.random.default_rng(seed)
    d_pad = next_power_of_two(d)
    if scheme != "interleaved" and alpha != 1:
        raise ShapeMismatch(f"the {scheme} scheme handles square matrices only")
    engine = create_engine(EngineParams(N=N, L=4))
    rows, cols = d_pad, d_pad * alpha
    dense = rows * cols <= DENSE_CHECK_LIMIT
    W = pad_to_power_of_two(rng.standard_normal((d, d * alpha))) if dense else None
    x = np.zeros(rows)
    x[:d] = rng.standard_normal(d)

    if scheme == "interleaved":
        plan = plan_vmm(N, rows, cols, bsgs)
        layout = plan.input_layout()
        diagonals = extract_diagonals(W, plan) if dense else _unit_diagonals(plan, range(plan.M), (rows, cols))
    else:
        plan = SquarePlan(scheme, N, d_pad, bsgs)
        kind = "contiguous" if scheme == "direct" else "replicated"
        layout = InterleavedLayout(d=d_pad, t=N // d_pad, kind=kind)
        keys = range(d_pad) if scheme == "direct" else range(d_pad // plan.t)
        diagonals = extract_diagonals(W, plan) if dense else _unit_diagonals(plan, keys, (rows, cols))

    c = engine.encrypt(encode_interleaved(x, layout), layout=layout)
    with engine.ledger.phase("VMM"):
        y = vmm(engine, c, diagonals, VMMScheme(scheme, bsgs))
    engine.ledger.note_levels("VMM", c.level, y.level)

    counts = engine.ledger.snapshot()
    extras = {"N": N, "d": d, "d_padded": d_pad, "alpha": alpha, "scheme": scheme, "bsgs": bsgs,
              "all_rotations": counts.all_rotations, "depth": c.level - y.level,
              "baselines": baseline_counts(N, d_pad)}
    if dense:
        out = decode_interleaved(engine.decrypt(y), y.layout)
        extras["max_error"] = float(np.max(np.abs(out - x @ W)))
    return Report(kind="vmm-bench", phases=phase_rows(engine.ledger), extras=extras)


def bench_attention(N: int, d: int, H: int, n0: int, n_prime: int, seed: int = 0, L: int = 8) -> Report:
    """Counts of prefilling n0 tokens, appending up to n' and one attention query"""
    if n_prime < max(n0, 1):
        raise ShapeMismatch(f"n'={n_prime} must be at least max(n0, 1)")
    rng = np.random.default_rng(seed)
    acfg = AttentionConfig(N=N, d=d, H=H, n0=n0, n_max=n_prime)
    engine = create_engine(EngineParams(N=N, L=L))
    t = acfg.t
    hidden = acfg.hidden_layout()

    def gauss(*shape):
        return rng.standard_normal(shape) / math.sqrt(d)

    cache = KVCache()
    if n0:
        weights = AttentionWeights(W_q=gauss(d, d), W_k=gauss(d, d), W_v=gauss(d, d))
        X = rng.standard_normal((n0, d))
        batches = []
        for s in range(0, n0, t):
            layout = acfg.batch_layout(min(t, n0 - s))
            batches.append(engine.encrypt(encode_batched(X[s:s + t], layout), layout=layout))
        with engine.ledger.phase(PREFILL_PHASE):
            _, cache = prefill_attention(engine, batches, weights, acfg)

    for tau in range(n0, n_prime):
        layout = hidden.at_offset(tau % t)
        k = engine.encrypt(encode_interleaved(gauss(d), layout), layout=layout)
        v = engine.encrypt(encode_interleaved(gauss(d), layout), layout=layout)
        with engine.ledger.phase("RoPE & Cache"):
            cache = k_append(engine, cache, k, acfg)
            cache = v_append(engine, cache, distribute_v(engine, v, acfg, tau), acfg)

    q = engine.encrypt(encode_interleaved(rng.standard_normal(d), hidden), layout=hidden)
    with engine.ledger.phase("QK^T"):
        scores = qk_dot(engine, q, cache, acfg)
    with engine.ledger.phase("Softmax"):
        scores = exact_softmax(engine, scores, n_prime)
    with engine.ledger.phase("Score·V"):
        out = softmax_times_v(engine, scores, cache, acfg)
    engine.ledger.note_levels("Score·V", min(s.level for s in scores), out.level)

    extras = {"N": N, "d": d, "H": H, "n0": n0, "n_prime": n_prime, "K_ciphertexts": cache.n_k,
              "score_maps": len(scores)}
    return Report(kind="attn-bench", phases=phase_rows(engine.ledger), extras=extras)
