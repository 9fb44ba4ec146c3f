#!/usr/bin/env python3

"""
Slot engine
Backend contract for packed homomorphic evaluation, the ciphertext handle type
and the cost ledger shared by every operation.
"""

import logging
import threading
from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from errors import BackendError

logger = logging.getLogger(__name__)

DEFAULT_PHASE = "unattributed"


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


class EngineParams(BaseModel):
    """Slot count and maximum level of a simulated parameter set"""

    model_config = ConfigDict(frozen=True)

    N: int
    L: int

    @field_validator("N")
    @classmethod
    def _check_slots(cls, v: int) -> int:
        if v < 2 or not is_power_of_two(v):
            raise ValueError(f"N must be a power of two >= 2, got {v}")
        return v

    @field_validator("L")
    @classmethod
    def _check_level(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"L must be >= 1, got {v}")
        return v


@dataclass(frozen=True, eq=False)
class CiphertextHandle:
    """A simulated ciphertext: N real slots, remaining level and a layout tag"""

    slots: np.ndarray
    level: int
    layout: Optional[Any] = None

    def __post_init__(self):
        self.slots.setflags(write=False)

    @property
    def N(self) -> int:
        return self.slots.shape[0]


def with_layout(c: CiphertextHandle, layout: Any) -> CiphertextHandle:
    """Re-tag a handle with a new layout; slots and level are untouched"""
    return replace(c, layout=layout)


Operand = Union[CiphertextHandle, np.ndarray, float, int]


@dataclass
class OpCounters:
    rotations: int = 0
    hoisted_rotations: int = 0
    ct_pt_mults: int = 0
    ct_ct_mults: int = 0
    additions: int = 0
    bootstraps: int = 0

    def add(self, other: "OpCounters"):
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    def minus(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(**{f.name: getattr(self, f.name) - getattr(other, f.name) for f in fields(self)})

    def copy(self) -> "OpCounters":
        return OpCounters(**self.as_dict())

    def as_dict(self) -> Dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def all_rotations(self) -> int:
        return self.rotations + self.hoisted_rotations

    def weighted(self, weights: Mapping[str, float], hoisted_rotation_weight: float = 0.5) -> float:
        """Price the counters with per-kind weights.

        A hoisted rotation costs hoisted_rotation_weight of a plain rotation
        unless the weights carry an explicit 'hoisted_rotations' entry.
        """
        total = 0.0
        for name, count in self.as_dict().items():
            if name == "hoisted_rotations" and name not in weights:
                total += count * weights.get("rotations", 0.0) * hoisted_rotation_weight
            else:
                total += count * weights.get(name, 0.0)
        return total


@dataclass
class PhaseLevels:
    levels_in: Optional[int] = None
    levels_out: Optional[int] = None


class CostLedger:
    """Thread-safe operation counters with per-phase attribution.

    Every count lands in exactly one phase, so the phase counters always sum
    to the global totals.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._local = threading.local()
        self.totals = OpCounters()
        self.phase_breakdown: Dict[str, OpCounters] = {}
        self.phase_levels: Dict[str, PhaseLevels] = {}

    def _stack(self) -> list:
        if not hasattr(self._local, "stack"):
            self._local.stack = []
        return self._local.stack

    @property
    def current_phase(self) -> str:
        stack = self._stack()
        return stack[-1] if stack else DEFAULT_PHASE

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        """Attribute all counts inside the block to the named phase"""
        stack = self._stack()
        stack.append(name)
        try:
            yield
        finally:
            stack.pop()

    def record(self, kind: str, n: int = 1):
        if n < 0:
            raise ValueError("ledger counters are monotone")
        with self._lock:
            setattr(self.totals, kind, getattr(self.totals, kind) + n)
            bucket = self.phase_breakdown.setdefault(self.current_phase, OpCounters())
            setattr(bucket, kind, getattr(bucket, kind) + n)

    def note_levels(self, phase: str, level_in: int, level_out: int):
        """Remember the first entry level and the last exit level seen for a phase"""
        with self._lock:
            entry = self.phase_levels.setdefault(phase, PhaseLevels())
            if entry.levels_in is None:
                entry.levels_in = level_in
            entry.levels_out = level_out

    def snapshot(self) -> OpCounters:
        with self._lock:
            return self.totals.copy()

    def phase_snapshot(self) -> Dict[str, OpCounters]:
        with self._lock:
            return {name: c.copy() for name, c in self.phase_breakdown.items()}

    def merge(self, other: "CostLedger"):
        """Fold a worker's ledger into this one"""
        totals = other.snapshot()
        phases = other.phase_snapshot()
        with self._lock:
            self.totals.add(totals)
            for name, counters in phases.items():
                self.phase_breakdown.setdefault(name, OpCounters()).add(counters)
            for name, lv in other.phase_levels.items():
                mine = self.phase_levels.setdefault(name, PhaseLevels())
                if mine.levels_in is None:
                    mine.levels_in = lv.levels_in
                mine.levels_out = lv.levels_out

    def weighted_cost(self, weights: Mapping[str, float], hoisted_rotation_weight: float = 0.5) -> float:
        return self.snapshot().weighted(weights, hoisted_rotation_weight)


class BackendBase(ABC):
    """Base class that every slot backend must inherit from"""

    def __init__(self):
        self.name = "Unknown Backend"
        self.version = "1.0.0"
        self.description = "A packed homomorphic evaluation backend"
        self.params: Optional[EngineParams] = None
        self.ledger: CostLedger = CostLedger()

    def bind(self, params: EngineParams, ledger: Optional[CostLedger] = None):
        self.params = params
        if ledger is not None:
            self.ledger = ledger

    @property
    def N(self) -> int:
        return self.params.N

    @property
    def L(self) -> int:
        return self.params.L

    @abstractmethod
    def initialize(self) -> bool:
        """Initialize the backend. Return True if successful."""

    @abstractmethod
    def cleanup(self):
        """Release backend resources."""

    @abstractmethod
    def encrypt(self, values, level: Optional[int] = None, layout: Any = None) -> CiphertextHandle:
        pass

    @abstractmethod
    def decrypt(self, c: CiphertextHandle) -> np.ndarray:
        pass

    @abstractmethod
    def add(self, c1: CiphertextHandle, c2: Operand) -> CiphertextHandle:
        pass

    @abstractmethod
    def sub(self, c1: CiphertextHandle, c2: Operand) -> CiphertextHandle:
        pass

    @abstractmethod
    def negate(self, c: CiphertextHandle) -> CiphertextHandle:
        pass

    @abstractmethod
    def mul(self, c: CiphertextHandle, other: Operand) -> CiphertextHandle:
        pass

    @abstractmethod
    def rotate(self, c: CiphertextHandle, r: int, hoisted: bool = False) -> CiphertextHandle:
        pass

    @abstractmethod
    def bootstrap(self, c: CiphertextHandle, target: int) -> CiphertextHandle:
        pass

    @abstractmethod
    def level_drop(self, c: CiphertextHandle, target: int) -> CiphertextHandle:
        pass

    @abstractmethod
    def evaluate_exact_group(self, cts: Sequence[CiphertextHandle],
                             fn: Callable[[List[np.ndarray]], List[np.ndarray]],
                             name: str = "exact") -> List[CiphertextHandle]:
        """Apply fn jointly to the slot vectors of several ciphertexts at zero
        depth and zero cost (exact-nonlinear mode)"""

    def evaluate_exact(self, c: CiphertextHandle, fn: Callable[[np.ndarray], np.ndarray],
                       name: str = "exact") -> CiphertextHandle:
        return self.evaluate_exact_group([c], lambda vs: [fn(vs[0])], name)[0]

    def add_many(self, cts) -> CiphertextHandle:
        """Left fold of add over a non-empty sequence"""
        cts = list(cts)
        if not cts:
            raise ValueError("add_many needs at least one operand")
        acc = cts[0]
        for c in cts[1:]:
            acc = self.add(acc, c)
        return acc


def create_engine(params: EngineParams, backend_id: Optional[str] = None,
                  ledger: Optional[CostLedger] = None) -> BackendBase:
    """Instantiate, bind and initialize a backend.

    backend_id defaults to the enabled backend in the settings file.
    """
    from backend_system import backend_manager

    backend_id = backend_id or backend_manager.enabled_backend
    backend = backend_manager.instantiate(backend_id)
    backend.bind(params, ledger or CostLedger())
    if not backend.initialize():
        raise BackendError(f"Failed to initialize backend {backend_id}")
    logger.debug("engine %s ready: N=%d L=%d", backend_id, params.N, params.L)
    return backend
