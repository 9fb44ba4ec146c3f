#!/usr/bin/env python3

"""
Bootstrap placement
Builds the level graph of a layer sequence, prunes dominated edges and finds
the cheapest bootstrap/level-drop plan by shortest path. Identical blocks
are solved once and composed.

A vertex (i, x, skips) is the input of layer i at level x; skips holds the
levels of open residual branches. An edge computes layer i and then keeps,
drops or bootstraps the result to the next layer's input level.
"""

import json
import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from errors import InfeasibleLayer, NoFeasiblePath
from nonlinear import SubLayerTrace
from slot_engine import OpCounters

logger = logging.getLogger(__name__)

SOURCE = "source"
SINK = "sink"
MAX_BRUTE_FORCE_PATHS = 10 ** 6

# Bootstrap latency (ms) and per-operation latency (us) by level
DEFAULT_BOOT_MS = {1: 51.30, 4: 66.88, 7: 85.39, 10: 104.92, 13: 125.58}
DEFAULT_OP_US = {
    1: {"additions": 9.51, "ct_pt_mults": 66.07, "ct_ct_mults": 223.23, "rotations": 164.35},
    4: {"additions": 11.86, "ct_pt_mults": 87.76, "ct_ct_mults": 319.28, "rotations": 234.91},
    7: {"additions": 13.10, "ct_pt_mults": 158.22, "ct_ct_mults": 459.76, "rotations": 301.46},
    10: {"additions": 27.87, "ct_pt_mults": 140.82, "ct_ct_mults": 584.87, "rotations": 481.62},
    13: {"additions": 35.27, "ct_pt_mults": 178.73, "ct_ct_mults": 816.87, "rotations": 608.48},
}


class LayerSpec(BaseModel):
    """One schedulable layer.

    width is the number of ciphertexts crossing the layer's output boundary
    (a bootstrap there costs width bootstraps). fork opens a residual branch
    carrying this layer's input level; join closes one, and the layer then
    computes at min(input level, branch level).
    """

    name: str
    depth: int
    base_cost: float = 1.0
    width: int = 1
    sublayers: Optional[SubLayerTrace] = None
    phase_costs: Optional[List[float]] = None
    fork: Optional[str] = None
    join: Optional[str] = None
    layer: Optional[str] = None
    sublayer: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "LayerSpec":
        if self.depth < 0 or self.width < 1 or self.base_cost < 0:
            raise ValueError(f"layer {self.name}: invalid depth/width/cost")
        if self.sublayers is not None and self.sublayers.total_depth != self.depth:
            raise ValueError(f"layer {self.name}: sub-layer depths sum to {self.sublayers.total_depth}, not {self.depth}")
        if self.phase_costs is not None and self.sublayers is not None \
                and len(self.phase_costs) != len(self.sublayers.phases):
            raise ValueError(f"layer {self.name}: one phase cost per sub-layer phase expected")
        return self


class CostModel(BaseModel):
    """t_layer(i, x) = base_i * (x + 1); t_boot(y) interpolated from a calibration table"""

    boot_ms: Dict[int, float] = DEFAULT_BOOT_MS
    op_us: Dict[int, Dict[str, float]] = DEFAULT_OP_US
    hoisted_rotation_weight: float = 0.5

    @field_validator("boot_ms")
    @classmethod
    def _monotone(cls, v: Dict[int, float]) -> Dict[int, float]:
        levels = sorted(v)
        if not levels:
            raise ValueError("bootstrap table is empty")
        costs = [v[k] for k in levels]
        if any(b < a for a, b in zip(costs, costs[1:])) or costs[0] < 0:
            raise ValueError("bootstrap latency must be nonnegative and nondecreasing in the target level")
        return v

    def t_boot(self, y: int) -> float:
        levels = sorted(self.boot_ms)
        return float(np.interp(y, levels, [self.boot_ms[k] for k in levels]))

    def t_layer(self, layer: LayerSpec, x: int) -> float:
        return layer.base_cost * (x + 1)

    def op_weights(self, level: int) -> Dict[str, float]:
        """Per-op latency in ms at a level, interpolated across the table"""
        levels = sorted(self.op_us)
        kinds = self.op_us[levels[0]].keys()
        return {k: float(np.interp(level, levels, [self.op_us[lv][k] for lv in levels])) / 1000.0 for k in kinds}

    def price(self, counters: OpCounters, level: int = 1) -> float:
        return counters.weighted(self.op_weights(level), self.hoisted_rotation_weight)

    def base_from_counts(self, counters: OpCounters) -> float:
        """base_i such that t_layer(i, 1) equals the counts priced at level 1"""
        return self.price(counters, 1) / 2.0

    @classmethod
    def from_table(cls, path: str) -> "CostModel":
        with open(path, "r") as f:
            data = json.load(f)
        return cls.model_validate(data)

    def to_table(self, path: str):
        with open(path, "w") as f:
            f.write(self.model_dump_json(indent=2))


class PlanEntry(BaseModel):
    layer: str
    sublayer: Optional[str] = None
    input_level: int
    bootstrap_to: Optional[int] = None
    drop_to: Optional[int] = None


class PlacementPlan(BaseModel):
    """Per-(sub-)layer actions applied before the layer is computed"""

    entries: List[PlanEntry]
    cost: float
    bootstraps: int = 0
    terminal_level: int = 0

    def to_json(self, path: str):
        with open(path, "w") as f:
            json.dump([e.model_dump() for e in self.entries], f, indent=2)

    @classmethod
    def from_json(cls, path: str) -> "PlacementPlan":
        with open(path, "r") as f:
            data = json.load(f)
        if isinstance(data, dict):
            return cls.model_validate(data)
        entries = [PlanEntry.model_validate(e) for e in data]
        return cls(entries=entries, cost=0.0, bootstraps=sum(e.bootstrap_to is not None for e in entries))


class LevelGraph:
    """Explicit level graph over the vertices reachable from the source"""

    def __init__(self, layers: Sequence[LayerSpec], cost: CostModel, L: int, graph: nx.DiGraph,
                 pruned: bool = False):
        self.layers = list(layers)
        self.cost = cost
        self.L = L
        self.graph = graph
        self.pruned = pruned

    @property
    def edge_count(self) -> int:
        return self.graph.number_of_edges()


# ----------------------------------------------------------------------------
# Transitions

def _plain(layers: Sequence[LayerSpec]) -> bool:
    return all(layer.fork is None and layer.join is None for layer in layers)


def _uniform(layers: Sequence[LayerSpec]) -> bool:
    return len({layer.width for layer in layers}) <= 1


def _source_edges(L: int) -> Iterator[Tuple[int, str]]:
    for x in range(L + 1):
        yield x, ("keep" if x == L else "drop")


def _transitions(layers: Sequence[LayerSpec], i: int, x: int, skips: tuple, cost: CostModel, L: int,
                 prune_drops: bool, prune_boots: bool, to_sink: bool):
    """Out-edges of vertex (i, x, skips): (next vertex, weight, kind, post level)"""
    layer = layers[i]
    c = x
    if layer.join is not None:
        c = min(x, skips[-1])
        skips = skips[:-1]
    if layer.fork is not None:
        skips = skips + (c,)
    if c < layer.depth:
        return
    p = c - layer.depth
    compute = cost.t_layer(layer, c)
    if to_sink:
        yield SINK, compute, "keep", p
        return
    next_depth = layers[i + 1].depth
    for y in range(L + 1):
        if y > p:
            if prune_boots and p >= next_depth:
                continue
            yield (i + 1, y, skips), compute + layer.width * cost.t_boot(y), "boot", p
        else:
            if prune_drops and y != p:
                continue
            yield (i + 1, y, skips), compute, ("keep" if y == p else "drop"), p


def _check_depths(layers: Sequence[LayerSpec], L: int):
    for layer in layers:
        if layer.depth > L:
            raise InfeasibleLayer(f"layer {layer.name} needs depth {layer.depth} > L={L}")


def build_graph(layers: Sequence[LayerSpec], cost: CostModel, L: int) -> LevelGraph:
    """Full level graph: every keep, drop and bootstrap transition"""
    _check_depths(layers, L)
    return _build(layers, cost, L, prune=False)


def _build(layers: Sequence[LayerSpec], cost: CostModel, L: int, prune: bool) -> LevelGraph:
    layers = list(layers)
    prune_drops = prune and _plain(layers)
    prune_boots = prune_drops and _uniform(layers)
    g = nx.DiGraph()
    g.add_node(SOURCE)
    g.add_node(SINK)
    frontier = set()
    for x, kind in _source_edges(L):
        g.add_edge(SOURCE, (0, x, ()), weight=0.0, kind=kind, post=L)
        frontier.add((0, x, ()))
    for i in range(len(layers)):
        nxt = set()
        last = i == len(layers) - 1
        for (_, x, skips) in sorted(frontier):
            for v, w, kind, p in _transitions(layers, i, x, skips, cost, L, prune_drops, prune_boots, last):
                g.add_edge((i, x, skips), v, weight=w, kind=kind, post=p)
                if v != SINK:
                    nxt.add(v)
        frontier = nxt
    return LevelGraph(layers, cost, L, g, pruned=prune)


def prune_graph(g: LevelGraph) -> LevelGraph:
    """Remove dominated edges.

    Away from the source a drop never beats an earlier drop or a lower
    bootstrap target, and with uniform boundary widths a bootstrap never
    beats the same bootstrap taken once the level no longer covers the next
    layer. Graphs with residual branches keep every edge.
    """
    if g.pruned:
        return g
    pruned = _build(g.layers, g.cost, g.L, prune=True)
    logger.debug("pruned level graph from %d to %d edges", g.edge_count, pruned.edge_count)
    return pruned


# ----------------------------------------------------------------------------
# Solving

def _key(label, terminal: int = 0):
    cost, boots, positions = label
    return (round(cost, 9), boots, -terminal, positions)


def _extend(label, weight: float, kind: str, position: int):
    cost, boots, positions = label
    if kind == "boot":
        return cost + weight, boots + 1, positions + (position,)
    return cost + weight, boots, positions


def _entry(layer: LayerSpec, x: int, kind: str) -> PlanEntry:
    return PlanEntry(layer=layer.layer or layer.name, sublayer=layer.sublayer, input_level=x,
                     bootstrap_to=x if kind == "boot" else None, drop_to=x if kind == "drop" else None)


def _path_plan(g: nx.DiGraph, path: Sequence, layers: Sequence[LayerSpec]) -> List[PlanEntry]:
    entries = []
    for u, v in zip(path, path[1:]):
        if v == SINK:
            break
        entries.append(_entry(layers[v[0]], v[1], g.edges[u, v]["kind"]))
    return entries


def solve(g: LevelGraph) -> PlacementPlan:
    """Cheapest source-to-sink path by relaxation in topological order.

    Ties prefer fewer bootstraps, then a higher terminal level, then
    earlier bootstrap positions.
    """
    graph = g.graph
    labels = {SOURCE: (0.0, 0, ())}
    parent = {}
    best_sink, best_key = None, None
    for u in nx.topological_sort(graph):
        if u not in labels or u == SINK:
            continue
        for _, v, data in graph.out_edges(u, data=True):
            position = u[0] if u != SOURCE else -1
            cand = _extend(labels[u], data["weight"], data["kind"], position)
            if v == SINK:
                key = _key(cand, data["post"])
                if best_key is None or key < best_key:
                    best_sink, best_key = (u, cand, data["post"]), key
                continue
            if v not in labels or _key(cand) < _key(labels[v]):
                labels[v] = cand
                parent[v] = u
    if best_sink is None:
        raise NoFeasiblePath("no bootstrap plan reaches the last layer")

    u, label, terminal = best_sink
    path = [SINK, u]
    while path[-1] != SOURCE:
        path.append(parent[path[-1]])
    path.reverse()
    entries = _path_plan(graph, path, g.layers)
    logger.debug("plan cost %.3f with %d bootstraps", label[0], label[1])
    return PlacementPlan(entries=entries, cost=label[0], bootstraps=label[1], terminal_level=terminal)


def count_paths(g: LevelGraph) -> int:
    counts = {SOURCE: 1}
    for u in nx.topological_sort(g.graph):
        for _, v in g.graph.out_edges(u):
            counts[v] = counts.get(v, 0) + counts.get(u, 0)
    return counts.get(SINK, 0)


def brute_force(g: LevelGraph, max_paths: int = MAX_BRUTE_FORCE_PATHS) -> float:
    """Optimal cost by enumerating every source-to-sink path"""
    n = count_paths(g)
    if n > max_paths:
        raise ValueError(f"{n} paths exceed the enumeration cap of {max_paths}")
    if n == 0:
        raise NoFeasiblePath("no bootstrap plan reaches the last layer")
    graph = g.graph
    best = None
    for path in nx.all_simple_paths(graph, SOURCE, SINK):
        cost = sum(graph.edges[u, v]["weight"] for u, v in zip(path, path[1:]))
        best = cost if best is None else min(best, cost)
    return best


def plan_cost(layers: Sequence[LayerSpec], entries: Sequence[PlanEntry], cost: CostModel, L: int) -> float:
    """Replay a plan's entries over the layers; math.inf when some layer cannot run.

    A bootstrap entry pays the previous layer's width at its target level.
    Any other entry may only keep or lower the level reaching it.
    """
    layers = list(layers)
    if len(entries) != len(layers):
        raise ValueError(f"{len(entries)} plan entries for {len(layers)} layers")
    total = 0.0
    level, skips = L, ()
    for i, (layer, entry) in enumerate(zip(layers, entries)):
        x = entry.input_level
        if entry.bootstrap_to is not None:
            if i > 0:
                total += layers[i - 1].width * cost.t_boot(x)
        elif x > level:
            return math.inf
        c = x
        if layer.join is not None:
            c = min(x, skips[-1])
            skips = skips[:-1]
        if layer.fork is not None:
            skips = skips + (c,)
        if c < layer.depth:
            return math.inf
        total += cost.t_layer(layer, c)
        level = c - layer.depth
    return total


class _BlockDP:
    """Forward relaxation over one block from a fixed entry vertex"""

    def __init__(self, block: Sequence[LayerSpec], cost: CostModel, L: int, prune: bool):
        self.block = list(block)
        self.cost = cost
        self.L = L
        self.prune_drops = prune and _plain(self.block)
        self.prune_boots = self.prune_drops and _uniform(self.block)
        self.relaxations = 0

    def run(self, x0: int, to_sink: bool):
        """Best label and entry list per exit level (or per terminal level at the sink)"""
        layers = self.block
        n = len(layers)
        # the last layer of an inner block feeds the first layer of the next one
        wrapped = layers + [layers[0]]
        labels = {(0, x0, ()): ((0.0, 0, ()), [])}
        exits: Dict[int, tuple] = {}
        for i in range(n):
            last = i == n - 1
            nxt = {}
            for (_, x, skips), (label, entries) in sorted(labels.items()):
                for v, w, kind, p in _transitions(wrapped, i, x, skips, self.cost, self.L,
                                                  self.prune_drops, self.prune_boots, last and to_sink):
                    self.relaxations += 1
                    cand = _extend(label, w, kind, i)
                    if v == SINK:
                        if p not in exits or _key(cand, p) < _key(exits[p][0], p):
                            exits[p] = (cand, entries)
                    elif last:
                        y = v[1]
                        if y not in exits or _key(cand) < _key(exits[y][0]):
                            exits[y] = (cand, entries, kind)
                    elif v not in nxt or _key(cand) < _key(nxt[v][0]):
                        nxt[v] = (cand, entries + [_entry(layers[v[0]], v[1], kind)])
            labels = nxt
        return exits


def solve_periodic(block: Sequence[LayerSpec], d2: int, cost: CostModel, L: int,
                   prune: bool = True) -> PlacementPlan:
    """Solve d2 repetitions of one block by composing its entry-to-exit cost matrix.

    Stage one runs one block relaxation per entry level (plus one more set
    ending at the sink for the last block); stage two composes the blocks
    by min-plus products over the L + 1 boundary levels.
    """
    block = list(block)
    if d2 < 1 or not block:
        raise ValueError("need at least one layer and one block")
    _check_depths(block, L)
    d1 = len(block)
    dp = _BlockDP(block, cost, L, prune)
    inner = {x: dp.run(x, to_sink=False) for x in range(L + 1)} if d2 > 1 else {}
    final = {x: dp.run(x, to_sink=True) for x in range(L + 1)}
    stage_one = dp.relaxations

    # state per boundary level: (label, entries)
    states = {}
    for x, kind in _source_edges(L):
        states[x] = ((0.0, 0, ()), [_entry(block[0], x, kind)])
    relaxations = 0
    for b in range(d2 - 1):
        nxt = {}
        for x, (label, entries) in sorted(states.items()):
            for y, (blabel, bentries, kind) in inner[x].items():
                relaxations += 1
                cand = (label[0] + blabel[0], label[1] + blabel[1],
                        label[2] + tuple(p + b * d1 for p in blabel[2]))
                if y not in nxt or _key(cand) < _key(nxt[y][0]):
                    nxt[y] = (cand, entries + bentries + [_entry(block[0], y, kind)])
        states = nxt

    best, best_key, terminal = None, None, 0
    for x, (label, entries) in sorted(states.items()):
        for p, (blabel, bentries) in final[x].items():
            relaxations += 1
            cand = (label[0] + blabel[0], label[1] + blabel[1],
                    label[2] + tuple(q + (d2 - 1) * d1 for q in blabel[2]))
            key = _key(cand, p)
            if best_key is None or key < best_key:
                best, best_key, terminal = (cand, entries + bentries), key, p
    if best is None:
        raise NoFeasiblePath("no bootstrap plan reaches the last block")
    solve_periodic.last_relaxations = (stage_one, relaxations)
    logger.debug("periodic solve: %d block relaxations, %d composition steps", stage_one, relaxations)
    (label, entries) = best
    return PlacementPlan(entries=entries, cost=label[0], bootstraps=label[1], terminal_level=terminal)


solve_periodic.last_relaxations = (0, 0)


def expand_sublayers(layers: Sequence[LayerSpec]) -> List[LayerSpec]:
    """Replace traced layers by their grouped sub-layers.

    Group boundaries are the single-ciphertext points of the trace; each
    group's cost is the sum of its phases' costs (depth-proportional when
    the layer gives none).
    """
    out = []
    for layer in layers:
        trace = layer.sublayers
        if trace is None or len(trace.groups()) <= 1:
            out.append(layer)
            continue
        phases = trace.phases
        if layer.phase_costs is not None:
            costs = list(layer.phase_costs)
        else:
            weights = [max(p.depth, 1) for p in phases]
            costs = [layer.base_cost * w / sum(weights) for w in weights]
        groups = trace.groups()
        k = 0
        for gi, group in enumerate(groups):
            n_phases = group.members
            out.append(LayerSpec(
                name=f"{layer.name}/{group.name}",
                depth=group.depth,
                base_cost=sum(costs[k:k + n_phases]),
                width=group.count if gi < len(groups) - 1 else layer.width,
                fork=layer.fork if gi == 0 else None,
                join=layer.join if gi == 0 else None,
                layer=layer.layer or layer.name,
                sublayer=group.name,
            ))
            k += n_phases
    return out


# ----------------------------------------------------------------------------
# Random instances

def random_cost_model(rng: np.random.Generator, L: int) -> CostModel:
    boots = np.cumsum(rng.uniform(1.0, 20.0, size=L)) + rng.uniform(10.0, 60.0)
    return CostModel(boot_ms={lv + 1: float(boots[lv]) for lv in range(L)})


def random_block(rng: np.random.Generator, d1: int, L: int, max_depth: int = 3) -> List[LayerSpec]:
    return [LayerSpec(name=f"layer{i}", depth=int(rng.integers(0, min(max_depth, L) + 1)),
                      base_cost=float(rng.uniform(0.1, 5.0))) for i in range(d1)]
