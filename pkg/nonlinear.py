#!/usr/bin/env python3

"""
Nonlinear layers
Polynomial and Goldschmidt approximations of softmax, normalization, SiLU and
GELU over packed ciphertexts, their exact-mode counterparts, sub-layer traces
for bootstrap placement and input-range profiling.

Every function is a sequence of SubLayerSteps. A step declares its
multiplicative depth and the number of ciphertexts alive when it ends; a
boundary with a single live ciphertext is a place where a bootstrap may go.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.chebyshev import Chebyshev
from pydantic import BaseModel, field_validator, model_validator

from backend_system import get_app_setting
from errors import DomainViolation, ShapeMismatch
from layouts import (
    AttentionMapLayout,
    InterleavedLayout,
    decode_batched,
    encode_batched,
    log2i,
    make_mask,
    place_vector,
)
from slot_engine import BackendBase, CiphertextHandle, with_layout

logger = logging.getLogger(__name__)

FUNCTIONS = ("softmax", "norm", "silu", "gelu", "inverse", "rsqrt", "exp")
DEFAULT_DEGREE = {"exp": 11, "softmax": 7, "silu": 127, "gelu": 127}
DEFAULT_ITERATIONS = {"inverse": 7, "rsqrt": 8}
DOMAIN_TOLERANCE = 1e-9

State = Tuple[Union[CiphertextHandle, List[CiphertextHandle]], ...]


def _silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + np.exp(-x))


_erf = np.vectorize(math.erf, otypes=[np.float64])


def _gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


EXACT_FUNCTIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "silu": _silu,
    "gelu": _gelu,
    "exp": np.exp,
    "inverse": lambda x: 1.0 / x,
    "rsqrt": lambda x: 1.0 / np.sqrt(x),
}


def poly_depth(degree: int) -> int:
    return 0 if degree <= 0 else math.ceil(math.log2(degree + 1))


def inverse_depth(iterations: int, scale: float = 1.0) -> int:
    if scale == 1.0:
        return 0 if iterations == 0 else iterations + 1
    return 1 if iterations == 0 else iterations + 2


def rsqrt_depth(iterations: int) -> int:
    return 1 if iterations <= 1 else 2 * iterations


def exp_squarings(domain: Tuple[float, float]) -> int:
    """Smallest r with the domain scaled by 2^-r inside [-1, 1]"""
    bound = max(abs(domain[0]), abs(domain[1]))
    return 0 if bound <= 1.0 else math.ceil(math.log2(bound))


class ApproxSpec(BaseModel):
    """Schedule of one approximated function.

    domain is the profiled input range (for norm: the mean-square range).
    iterations counts Goldschmidt updates, degree the Chebyshev degree.
    squarings is r for exp and softmax; scale_in the Goldschmidt prescale.
    """

    function: Literal["softmax", "norm", "silu", "gelu", "inverse", "rsqrt", "exp"]
    domain: Tuple[float, float]
    depth_budget: int = 0
    iterations: int = 0
    degree: int = 0
    scale_in: float = 1.0
    scale_out: float = 1.0
    squarings: int = 0
    n_max: int = 64

    @field_validator("domain")
    @classmethod
    def _check_domain(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = v
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
            raise ValueError(f"domain must be a finite nonempty interval, got {v}")
        return v

    @model_validator(mode="after")
    def _check_schedule(self) -> "ApproxSpec":
        if self.iterations < 0 or self.degree < 0 or self.squarings < 0:
            raise ValueError("iterations, degree and squarings must be nonnegative")
        if self.function in ("inverse", "rsqrt", "norm") and self.domain[0] < 0:
            raise ValueError(f"{self.function} needs a nonnegative domain, got {self.domain}")
        if self.function == "rsqrt" and self.iterations < 1:
            raise ValueError("rsqrt needs at least one iteration")
        if self.function in ("exp", "softmax", "silu", "gelu") and self.degree < 1:
            raise ValueError(f"{self.function} needs a polynomial degree")
        required = required_depth(self)
        if self.depth_budget and self.depth_budget < required:
            raise ValueError(f"depth budget {self.depth_budget} below schedule depth {required}")
        return self


class TracePhase(BaseModel):
    name: str
    depth: int
    count: int
    # phases merged into a group entry
    members: int = 1


class SubLayerTrace(BaseModel):
    """Ordered (name, depth, ciphertext count) phases of one function"""

    function: str
    phases: List[TracePhase]

    @property
    def total_depth(self) -> int:
        return sum(p.depth for p in self.phases)

    def interruptible(self) -> List[int]:
        """Indices of phases after which a bootstrap may be placed"""
        return [i for i, p in enumerate(self.phases) if p.count == 1]

    def groups(self) -> List[TracePhase]:
        """Phases merged until a single-ciphertext boundary"""
        out, pending = [], []
        for p in self.phases:
            pending.append(p)
            if p.count == 1:
                out.append(TracePhase(name="+".join(q.name for q in pending),
                                      depth=sum(q.depth for q in pending), count=1, members=len(pending)))
                pending = []
        if pending:
            out.append(TracePhase(name="+".join(q.name for q in pending),
                                  depth=sum(q.depth for q in pending), count=pending[-1].count,
                                  members=len(pending)))
        return out


@dataclass
class SubLayerStep:
    name: str
    depth: int
    count: int
    run: Callable[[BackendBase, State], State]


def group_steps(steps: Sequence[SubLayerStep]) -> List[Tuple[str, List[SubLayerStep]]]:
    """Split steps at single-ciphertext boundaries, named like SubLayerTrace.groups"""
    out, pending = [], []
    for step in steps:
        pending.append(step)
        if step.count == 1:
            out.append(("+".join(s.name for s in pending), pending))
            pending = []
    if pending:
        out.append(("+".join(s.name for s in pending), pending))
    return out


def map_state(state: State, fn: Callable[[CiphertextHandle], CiphertextHandle]) -> State:
    """Apply fn to every ciphertext of a step state"""
    return tuple([fn(c) for c in item] if isinstance(item, list) else fn(item) for item in state)


# ----------------------------------------------------------------------------
# Slot helpers

def _debug_checks(debug: Optional[bool]) -> bool:
    if debug is not None:
        return debug
    return bool(get_app_setting("debug_domain_checks", False))


def _as_list(item) -> List[CiphertextHandle]:
    return item if isinstance(item, list) else [item]


def _masks_for(cts: Sequence[CiphertextHandle], n_tokens: Optional[int] = None) -> List[np.ndarray]:
    """Valid-slot mask of each ciphertext, read from its layout tag"""
    layout = cts[0].layout
    N = cts[0].N
    if isinstance(layout, AttentionMapLayout):
        masks = layout.token_masks(n_tokens)
        return (masks + [np.zeros(N)] * len(cts))[: len(cts)]
    if isinstance(layout, InterleavedLayout):
        return [make_mask(layout, "valid-slots")] * len(cts)
    return [np.ones(N)] * len(cts)


def _check_range(engine: BackendBase, cts: List[CiphertextHandle], masks: List[np.ndarray],
                 domain: Tuple[float, float], name: str, debug: Optional[bool]) -> List[CiphertextHandle]:
    """Simulator-side range check on valid slots; clamps in release mode"""
    lo, hi = domain
    tol = DOMAIN_TOLERANCE * max(1.0, abs(lo), abs(hi))
    worst = []
    for c, m in zip(cts, masks):
        values = engine.decrypt(c)[m != 0]
        if values.size and (values.min() < lo - tol or values.max() > hi + tol):
            worst.append((values.min(), values.max()))
    if not worst:
        return cts
    vmin = min(w[0] for w in worst)
    vmax = max(w[1] for w in worst)
    if _debug_checks(debug):
        raise DomainViolation(f"{name} input range [{vmin:.4g}, {vmax:.4g}] outside domain [{lo:.4g}, {hi:.4g}]")
    logger.warning("%s input range [%.4g, %.4g] outside [%.4g, %.4g]; clamping", name, vmin, vmax, lo, hi)

    def clamp(vectors):
        return [np.where(m != 0, np.clip(v, lo, hi), v) for v, m in zip(vectors, masks)]

    return engine.evaluate_exact_group(cts, clamp, f"{name}-clamp")


def _tree_sum(engine: BackendBase, c: CiphertextHandle, stride: int, count: int) -> CiphertextHandle:
    for l in range(log2i(count)):
        c = engine.add(c, engine.rotate(c, stride << l))
    return c


def _affine_to_unit(engine: BackendBase, c: CiphertextHandle, mask: np.ndarray,
                    domain: Tuple[float, float], prescale: float = 1.0) -> CiphertextHandle:
    """mask * (2 * prescale * x - (lo + hi)) / (hi - lo); one level"""
    lo, hi = domain
    width = hi - lo
    u = engine.mul(c, mask * (2.0 * prescale / width))
    return engine.add(u, mask * (-(lo + hi) / width))


def _settle(engine: BackendBase, state: State, target: int) -> State:
    """Drop the leading item to exactly the declared exit level"""
    head = [engine.level_drop(c, target) if c.level > target else c for c in _as_list(state[0])]
    return (head if isinstance(state[0], list) else head[0],) + tuple(state[1:])


def main_level(state: State) -> int:
    return min(c.level for c in _as_list(state[0]))


def run_steps(engine: BackendBase, steps: Sequence[SubLayerStep], state: State,
              before_step: Optional[Callable[[SubLayerStep, State], State]] = None) -> State:
    """Execute steps in order; each consumes exactly its declared depth.

    before_step may bootstrap or drop the state at a step boundary.
    """
    for step in steps:
        if before_step is not None:
            state = before_step(step, state)
        entry = main_level(state)
        state = step.run(engine, state)
        state = _settle(engine, state, entry - step.depth)
    return state


# ----------------------------------------------------------------------------
# Chebyshev polynomials

def fit_chebyshev(fn: Callable[[np.ndarray], np.ndarray], domain: Tuple[float, float],
                  degree: int) -> np.ndarray:
    """Least-squares Chebyshev coefficients of fn on domain, in the unit variable"""
    lo, hi = domain
    m = max(4 * (degree + 1), 256)
    u = np.cos(np.pi * (np.arange(m) + 0.5) / m)
    x = lo + (u + 1.0) * (hi - lo) / 2.0
    series = Chebyshev.fit(x, fn(x), degree, domain=[lo, hi])
    coef = np.zeros(degree + 1)
    coef[: series.coef.size] = series.coef
    return coef


def _chebyshev_split(engine: BackendBase, coeffs: np.ndarray, powers: List[CiphertextHandle],
                     mask: np.ndarray):
    """sum_i coeffs[i] T_i(u) * mask as p = r + T_{2^k} q; returns a ciphertext or a plaintext"""
    n = coeffs.size - 1
    if n <= 1:
        const = coeffs[0] * mask
        if n == 0 or coeffs[1] == 0.0:
            return const
        return engine.add(engine.mul(powers[0], coeffs[1] * mask), const)
    k = log2i(n)
    half = 1 << k
    q = coeffs[half:].copy()
    q[1:] *= 2.0
    r = coeffs[:half].copy()
    for j in range(1, n - half + 1):
        r[half - j] -= coeffs[half + j]
    prod = engine.mul(powers[k], _chebyshev_split(engine, q, powers, mask))
    return engine.add(prod, _chebyshev_split(engine, r, powers, mask))


def eval_chebyshev(engine: BackendBase, u: CiphertextHandle, coeffs: np.ndarray,
                   mask: Optional[np.ndarray] = None) -> CiphertextHandle:
    """Evaluate a Chebyshev series at depth ceil(log2(deg + 1)), mask folded in"""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    mask = np.ones(u.N) if mask is None else mask
    degree = coeffs.size - 1
    powers = [u]
    for _ in range(log2i(degree) if degree >= 1 else 0):
        sq = engine.mul(powers[-1], powers[-1])
        powers.append(engine.add(engine.add(sq, sq), -1.0))
    out = _chebyshev_split(engine, coeffs, powers, mask)
    if not isinstance(out, CiphertextHandle):
        out = engine.add(engine.mul(u, np.zeros(u.N)), out)
    return out


# ----------------------------------------------------------------------------
# Goldschmidt

def _inverse_ct(engine: BackendBase, v: CiphertextHandle, iterations: int, scale: float) -> CiphertextHandle:
    if scale == 1.0:
        a = engine.add(engine.negate(v), 1.0)
        y = engine.add(engine.negate(v), 2.0)
    else:
        a = engine.add(engine.mul(v, -scale), 1.0)
        y = engine.add(engine.mul(v, -scale * scale), 2.0 * scale)
    for _ in range(iterations):
        a = engine.mul(a, a)
        y = engine.mul(y, engine.add(a, 1.0))
    return y


def _rsqrt_ct(engine: BackendBase, v: CiphertextHandle, iterations: int, scale: float) -> CiphertextHandle:
    h = engine.mul(v, 0.5 * scale)
    y = engine.add(engine.mul(v, -0.5 * scale ** 1.5), 1.5 * math.sqrt(scale))
    for _ in range(iterations - 1):
        r = engine.add(engine.negate(h), 1.5)
        h = engine.mul(h, engine.mul(r, r))
        y = engine.mul(y, engine.add(engine.negate(h), 1.5))
    return y


def goldschmidt_plain(v: np.ndarray, kind: str, iterations: int, scale: float = 1.0) -> np.ndarray:
    """Cleartext run of the same iteration, used to pick schedules"""
    v = np.asarray(v, dtype=np.float64)
    if kind == "inverse":
        a = 1.0 - scale * v
        y = scale * (1.0 + a)
        for _ in range(iterations):
            a = a * a
            y = y * (1.0 + a)
        return y
    if kind == "rsqrt":
        h = 0.5 * scale * v
        y = 1.5 * math.sqrt(scale) - 0.5 * scale ** 1.5 * v
        for _ in range(iterations - 1):
            r = 1.5 - h
            h = h * r * r
            y = y * (1.5 - h)
        return y
    raise ValueError(f"unknown Goldschmidt kind '{kind}'")


def choose_iterations(kind: str, domain: Tuple[float, float], target: float = 2.0 ** -20,
                      max_iterations: int = 16, scale: float = 1.0) -> int:
    """Fewest iterations whose max relative error over the domain meets target"""
    lo, hi = domain
    grid = np.geomspace(max(lo, 1e-12), hi, 2048)
    exact = 1.0 / grid if kind == "inverse" else 1.0 / np.sqrt(grid)
    first = 0 if kind == "inverse" else 1
    for n in range(first, max_iterations + 1):
        err = np.max(np.abs(goldschmidt_plain(grid, kind, n, scale) - exact) / exact)
        if err <= target:
            return n
    logger.warning("%s on %s needs more than %d iterations for %.3g", kind, domain, max_iterations, target)
    return max_iterations


def goldschmidt(engine: BackendBase, c: CiphertextHandle, kind: str, spec: ApproxSpec,
                debug: Optional[bool] = None) -> CiphertextHandle:
    """Slot-wise 1/x or 1/sqrt(x) for inputs in spec.domain with scale_in * x <= 1"""
    if kind not in ("inverse", "rsqrt"):
        raise ValueError(f"unknown Goldschmidt kind '{kind}'")
    (c,) = _check_range(engine, [c], _masks_for([c]), spec.domain, kind, debug)
    depth = inverse_depth(spec.iterations, spec.scale_in) if kind == "inverse" else rsqrt_depth(spec.iterations)
    step = SubLayerStep(kind, depth, 1, lambda eng, st: (_goldschmidt_ct(eng, st[0], kind, spec),))
    (out,) = run_steps(engine, [step], (c,))
    return out


def _goldschmidt_ct(engine: BackendBase, v: CiphertextHandle, kind: str, spec: ApproxSpec) -> CiphertextHandle:
    if kind == "inverse":
        return _inverse_ct(engine, v, spec.iterations, spec.scale_in)
    return _rsqrt_ct(engine, v, spec.iterations, spec.scale_in)


# ----------------------------------------------------------------------------
# Step builders

def _exact_step(name: str, fn: Callable[[BackendBase, State], State]) -> List[SubLayerStep]:
    return [SubLayerStep(name, 0, 1, fn)]


def exp_steps(spec: ApproxSpec, debug: Optional[bool] = None) -> List[SubLayerStep]:
    r = spec.squarings
    scaled = (spec.domain[0] / 2 ** r, spec.domain[1] / 2 ** r)
    coeffs = fit_chebyshev(np.exp, scaled, spec.degree) * spec.scale_out ** (1.0 / 2 ** r)

    def scale(engine, state):
        (c,) = state
        masks = _masks_for([c])
        (c,) = _check_range(engine, [c], masks, spec.domain, "exp", debug)
        return (with_layout(_affine_to_unit(engine, c, masks[0], scaled, 1.0 / 2 ** r), c.layout),)

    def poly(engine, state):
        (u,) = state
        return (eval_chebyshev(engine, u, coeffs, _masks_for([u])[0]),)

    def square(engine, state):
        (c,) = state
        return (engine.mul(c, c),)

    steps = [SubLayerStep("exp-scale", 1, 1, scale), SubLayerStep("exp-poly", poly_depth(spec.degree), 1, poly)]
    steps += [SubLayerStep(f"exp-square-{k}", 1, 1, square) for k in range(1, r + 1)]
    return steps


def _head_sum_broadcast(engine: BackendBase, zs: List[CiphertextHandle], layout: AttentionMapLayout) -> CiphertextHandle:
    """Per-head total over every map ciphertext, broadcast to all slots of the head"""
    t = layout.t
    s = engine.add_many(zs)
    s = _tree_sum(engine, s, 1, t)
    s = _tree_sum(engine, s, t * layout.H, layout.blocks)
    s = engine.mul(s, layout.window_start_mask())
    for l in range(log2i(t)):
        s = engine.add(s, engine.rotate(s, -(1 << l)))
    return s


def softmax_steps(spec: ApproxSpec, n_prime: int, n_maps: int = 1, mode: str = "approx",
                  debug: Optional[bool] = None) -> List[SubLayerStep]:
    """Softmax over the first n' tokens of every head.

    approx: e = p(x / 2^r) / (n' e^{b}) with p ~ exp, then r + 1 rounds of
    normalize, the last r of which start by squaring.
    """
    if mode == "exact":
        return _exact_step("softmax", lambda eng, st: (exact_softmax(eng, st[0], n_prime),))

    r = spec.squarings
    scaled = (spec.domain[0] / 2 ** r, spec.domain[1] / 2 ** r)
    coeffs = fit_chebyshev(lambda y: np.exp(y - scaled[1]), scaled, spec.degree) / max(n_prime, 1)
    inv_depth = inverse_depth(spec.iterations, 1.0)

    def scale(engine, state):
        zs = state[0]
        masks = _masks_for(zs, n_prime)
        zs = _check_range(engine, zs, masks, spec.domain, "softmax", debug)
        return ([with_layout(_affine_to_unit(engine, z, m, scaled, 1.0 / 2 ** r), z.layout)
                 for z, m in zip(zs, masks)],)

    def poly(engine, state):
        zs = state[0]
        masks = _masks_for(zs, n_prime)
        return ([with_layout(eval_chebyshev(engine, z, coeffs, m), z.layout) for z, m in zip(zs, masks)],)

    def square(engine, state):
        return ([engine.mul(z, z) for z in state[0]],)

    def total(engine, state):
        zs = state[0]
        return (_head_sum_broadcast(engine, zs, zs[0].layout), zs)

    def inverse(engine, state):
        s, zs = state
        return (_inverse_ct(engine, s, spec.iterations, 1.0), zs)

    def product(engine, state):
        inv, zs = state
        return ([engine.mul(z, inv) for z in zs],)

    steps = [SubLayerStep("softmax-scale", 1, n_maps, scale),
             SubLayerStep("softmax-exp", poly_depth(spec.degree), n_maps, poly)]
    for k in range(r + 1):
        if k:
            steps.append(SubLayerStep(f"softmax-square-{k}", 1, n_maps, square))
        steps += [SubLayerStep(f"softmax-sum-{k}", 1, n_maps + 1, total),
                  SubLayerStep(f"softmax-inverse-{k}", inv_depth, n_maps + 1, inverse),
                  SubLayerStep(f"softmax-normalize-{k}", 1, n_maps, product)]
    return steps


def norm_steps(spec: ApproxSpec, gamma: Optional[np.ndarray] = None, beta: Optional[np.ndarray] = None,
               center: bool = True, eps: float = 0.0, mode: str = "approx",
               debug: Optional[bool] = None) -> List[SubLayerStep]:
    """LayerNorm (center=True) or RMSNorm over an interleaved hidden vector.

    The input is scaled by a = 1/sqrt(d * hi) so the mean square lands in
    (lo/hi, 1]; the output multiplies by gamma * sqrt(d) to undo it.
    """
    if mode == "exact":
        return _exact_step("norm", lambda eng, st: (exact_norm(eng, st[0], gamma, beta, center, eps),))

    lo, hi = spec.domain
    depth = rsqrt_depth(spec.iterations)

    def coefficients(layout: InterleavedLayout):
        d = layout.d
        g = np.ones(d) if gamma is None else np.asarray(gamma, dtype=np.float64)
        if g.shape != (d,):
            raise ShapeMismatch(f"norm weight of shape {g.shape} for d={d}")
        return 1.0 / math.sqrt(d * hi), g

    def scale(engine, state):
        (x,) = state
        layout = x.layout
        mask = make_mask(layout, "valid-slots")
        a, _ = coefficients(layout)
        u = engine.mul(x, mask * a)
        if center:
            mean = _tree_sum(engine, engine.mul(x, mask * (a / layout.d)), layout.t, layout.d)
            u = engine.sub(u, mean)
        return (with_layout(u, layout.masked()),)

    def variance(engine, state):
        (u,) = state
        layout = u.layout
        a, _ = coefficients(layout)
        v = _tree_sum(engine, engine.mul(u, u), layout.t, layout.d)
        if eps:
            v = engine.add(v, eps * a * a * layout.d)
        return (with_layout(v, layout), u)

    def rsqrt(engine, state):
        v, u = state
        mask = make_mask(v.layout, "valid-slots")
        low = max(lo / hi, 1e-12)
        (v,) = _check_range(engine, [v], [mask], (low, 1.0 + eps / hi), "norm", debug)
        return (_rsqrt_ct(engine, v, spec.iterations, spec.scale_in), u)

    def normalize(engine, state):
        y, u = state
        layout = u.layout
        mask = make_mask(layout, "valid-slots")
        _, g = coefficients(layout)
        out = engine.mul(engine.mul(u, place_vector(g * math.sqrt(layout.d), layout) * mask), y)
        if beta is not None:
            out = engine.add(out, place_vector(beta, layout))
        return (with_layout(out, layout),)

    return [SubLayerStep("norm-scale", 1, 1, scale),
            SubLayerStep("norm-variance", 1, 2, variance),
            SubLayerStep("norm-rsqrt", depth, 2, rsqrt),
            SubLayerStep("norm-normalize", 1, 1, normalize)]


def activation_steps(spec: ApproxSpec, mode: str = "approx", debug: Optional[bool] = None) -> List[SubLayerStep]:
    """SiLU or GELU: fused mask-and-scale into the unit interval, then one polynomial"""
    name = spec.function
    exact = EXACT_FUNCTIONS[name]
    if mode == "exact":
        return _exact_step(name, lambda eng, st: (exact_activation(eng, st[0], name),))

    coeffs = fit_chebyshev(exact, spec.domain, spec.degree)

    def scale(engine, state):
        (c,) = state
        masks = _masks_for([c])
        (c,) = _check_range(engine, [c], masks, spec.domain, name, debug)
        layout = c.layout.masked() if isinstance(c.layout, InterleavedLayout) else c.layout
        return (with_layout(_affine_to_unit(engine, c, masks[0], spec.domain), layout),)

    def poly(engine, state):
        (u,) = state
        return (with_layout(eval_chebyshev(engine, u, coeffs, _masks_for([u])[0]), u.layout),)

    return [SubLayerStep(f"{name}-scale", 1, 1, scale),
            SubLayerStep(f"{name}-poly", poly_depth(spec.degree), 1, poly)]


def required_depth(spec: ApproxSpec) -> int:
    """Deepest stretch between two bootstrap-capable boundaries"""
    return max(g.depth for g in sublayer_trace(spec.function, spec).groups())


def steps_for(spec: ApproxSpec, mode: str = "approx", n_prime: int = 1, n_maps: int = 1,
              debug: Optional[bool] = None, **norm_kwargs) -> List[SubLayerStep]:
    f = spec.function
    if f == "softmax":
        return softmax_steps(spec, n_prime, n_maps, mode, debug)
    if f == "norm":
        return norm_steps(spec, mode=mode, debug=debug, **norm_kwargs)
    if f in ("silu", "gelu"):
        return activation_steps(spec, mode, debug)
    if f == "exp":
        if mode == "exact":
            return _exact_step("exp", lambda eng, st: (eng.evaluate_exact(st[0], np.exp, "exp"),))
        return exp_steps(spec, debug)
    if mode == "exact":
        return _exact_step(f, lambda eng, st: (eng.evaluate_exact(st[0], EXACT_FUNCTIONS[f], f),))
    depth = inverse_depth(spec.iterations, spec.scale_in) if f == "inverse" else rsqrt_depth(spec.iterations)
    return [SubLayerStep(f, depth, 1, lambda eng, st: (_goldschmidt_ct(eng, st[0], f, spec),))]


def sublayer_trace(function: str, spec: ApproxSpec, mode: str = "approx", n_maps: int = 1) -> SubLayerTrace:
    """Deterministic phase trace consumed by bootstrap placement"""
    if function != spec.function:
        raise ValueError(f"trace for '{function}' requested with a '{spec.function}' spec")
    steps = steps_for(spec, mode, n_maps=n_maps)
    return SubLayerTrace(function=function,
                         phases=[TracePhase(name=s.name, depth=s.depth, count=s.count) for s in steps])


# ----------------------------------------------------------------------------
# Public approximations

def approx_exp(engine: BackendBase, c: CiphertextHandle, spec: ApproxSpec,
               debug: Optional[bool] = None) -> CiphertextHandle:
    (out,) = run_steps(engine, exp_steps(spec, debug), (c,))
    return out


def approx_softmax(engine: BackendBase, scores, n_prime: int, spec: ApproxSpec,
                   debug: Optional[bool] = None):
    """Softmax of attention maps; accepts one map or a list and returns the same shape"""
    single = isinstance(scores, CiphertextHandle)
    zs = [scores] if single else list(scores)
    (out,) = run_steps(engine, softmax_steps(spec, n_prime, len(zs), "approx", debug), (list(zs),))
    return out[0] if single else out


def approx_norm(engine: BackendBase, c: CiphertextHandle, layout: InterleavedLayout, spec: ApproxSpec,
                gamma: Optional[np.ndarray] = None, beta: Optional[np.ndarray] = None,
                center: bool = True, eps: float = 0.0, debug: Optional[bool] = None) -> CiphertextHandle:
    c = with_layout(c, layout)
    (out,) = run_steps(engine, norm_steps(spec, gamma, beta, center, eps, "approx", debug), (c,))
    return out


def approx_silu(engine: BackendBase, c: CiphertextHandle, spec: ApproxSpec,
                debug: Optional[bool] = None) -> CiphertextHandle:
    (out,) = run_steps(engine, activation_steps(spec, "approx", debug), (c,))
    return out


def approx_gelu(engine: BackendBase, c: CiphertextHandle, spec: ApproxSpec,
                debug: Optional[bool] = None) -> CiphertextHandle:
    if spec.function != "gelu":
        raise ValueError(f"approx_gelu needs a gelu spec, got {spec.function}")
    (out,) = run_steps(engine, activation_steps(spec, "approx", debug), (c,))
    return out


# ----------------------------------------------------------------------------
# Exact mode

def exact_softmax(engine: BackendBase, maps: List[CiphertextHandle], n_prime: int) -> List[CiphertextHandle]:
    """True per-head softmax over the first n' tokens; every other slot becomes zero"""
    layout = maps[0].layout
    if not isinstance(layout, AttentionMapLayout):
        raise ShapeMismatch("exact softmax needs attention-map ciphertexts")
    where = [[layout.locate(h, tau) for tau in range(n_prime)] for h in range(layout.H)]

    def fn(vectors):
        out = [np.zeros_like(v) for v in vectors]
        for positions in where:
            vals = np.array([vectors[g][slot] for g, slot in positions])
            e = np.exp(vals - vals.max())
            e /= e.sum()
            for (g, slot), value in zip(positions, e):
                out[g][slot] = value
        return out

    return engine.evaluate_exact_group(maps, fn, "softmax")


def exact_norm(engine: BackendBase, c: CiphertextHandle, gamma: Optional[np.ndarray] = None,
               beta: Optional[np.ndarray] = None, center: bool = True, eps: float = 0.0) -> CiphertextHandle:
    layout = c.layout
    if not isinstance(layout, InterleavedLayout):
        raise ShapeMismatch("exact norm needs an interleaved layout")

    def normalize(X):
        if center:
            X = X - X.mean(axis=-1, keepdims=True)
        Y = X / np.sqrt(np.mean(X * X, axis=-1, keepdims=True) + eps)
        if gamma is not None:
            Y = Y * gamma
        if beta is not None:
            Y = Y + beta
        return Y

    def fn(v):
        if layout.kind == "batched":
            return encode_batched(normalize(decode_batched(v, layout)), layout)
        out = np.zeros_like(v)
        out[layout.slot_positions()] = normalize(v[layout.slot_positions()])
        return out

    return with_layout(engine.evaluate_exact(c, fn, "norm"), layout.masked())


def exact_activation(engine: BackendBase, c: CiphertextHandle, name: str = "silu") -> CiphertextHandle:
    mask = _masks_for([c])[0]
    fn = EXACT_FUNCTIONS[name]
    out = engine.evaluate_exact(c, lambda v: mask * fn(v), name)
    layout = c.layout.masked() if isinstance(c.layout, InterleavedLayout) else c.layout
    return with_layout(out, layout)


def exact_silu(engine: BackendBase, c: CiphertextHandle) -> CiphertextHandle:
    return exact_activation(engine, c, "silu")


# ----------------------------------------------------------------------------
# Schedules and profiling

def default_spec(function: str, domain: Tuple[float, float], n_max: int = 64,
                 max_depth: Optional[int] = None, **overrides) -> ApproxSpec:
    """Schedule with the library defaults for a profiled domain"""
    fields = {"function": function, "domain": domain, "n_max": n_max}
    if function in DEFAULT_DEGREE:
        fields["degree"] = DEFAULT_DEGREE[function]
    if function in ("exp", "softmax"):
        fields["squarings"] = exp_squarings(domain)
    if function in DEFAULT_ITERATIONS:
        fields["iterations"] = DEFAULT_ITERATIONS[function]
    if function == "softmax":
        cap = 16 if max_depth is None else max(0, max_depth - 3)
        fields["iterations"] = choose_iterations("inverse", (1.0 / n_max, 1.0), 2.0 ** -24, cap)
    if function == "norm":
        lo, hi = domain
        cap = 8 if max_depth is None else max(1, (max_depth - 2) // 2)
        fields["iterations"] = choose_iterations("rsqrt", (max(lo, 1e-12) / hi, 1.0), 2.0 ** -20, cap)
    fields.update(overrides)
    return ApproxSpec(**fields)


def profile_ranges(samples: Mapping[str, np.ndarray], n_max: int = 64, margin: float = 1.25,
                   max_depth: Optional[int] = None) -> Dict[str, ApproxSpec]:
    """Approximation specs from values observed in a cleartext run.

    Signed inputs are padded by (margin - 1) * max|x| on both sides; the
    mean-square range of norm is widened multiplicatively.
    """
    specs = {}
    for name, values in samples.items():
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            continue
        lo, hi = float(values.min()), float(values.max())
        if name == "norm":
            domain = (max(lo, 1e-12) / margin, max(hi, 1e-12) * margin)
        else:
            pad = (margin - 1.0) * max(abs(lo), abs(hi), 1e-3)
            domain = (lo - pad, hi + pad)
        specs[name] = default_spec(name, domain, n_max=n_max, max_depth=max_depth)
        logger.debug("profiled %s domain [%.4g, %.4g]", name, *domain)
    return specs


def rmse_bits(approx: np.ndarray, exact: np.ndarray) -> float:
    """-log2 of the root mean square error"""
    err = np.sqrt(np.mean((np.asarray(approx) - np.asarray(exact)) ** 2))
    return float("inf") if err == 0 else float(-math.log2(err))
