import os
import sys
import logging
from typing import Any, Callable, List, Optional, Sequence

import numpy as np

# Add repository root to path to import slot_engine
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from errors import InvalidTarget, LevelUnderflow, ShapeMismatch
from slot_engine import BackendBase, CiphertextHandle, Operand

logger = logging.getLogger(__name__)


class Backend(BackendBase):
    """Noise-free slot simulator.

    Slot values are exact double-precision results of the slot-wise
    operation. Only multiplication consumes a level and only bootstrap
    raises one.
    """

    def __init__(self):
        super().__init__()
        self.name = "Slot Simulator"

    def initialize(self) -> bool:
        if self.params is None:
            logger.warning("simulator initialized without parameters")
            return False
        logger.debug("simulator backend initialized (N=%d, L=%d)", self.N, self.L)
        return True

    def cleanup(self):
        pass

    def _vector(self, values) -> np.ndarray:
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if arr.shape[0] != self.N:
            raise ShapeMismatch(f"slot vector has length {arr.shape[0]}, expected {self.N}")
        return arr

    def _operand(self, other: Operand):
        """Returns (values, level or None) for a ciphertext, plaintext or scalar"""
        if isinstance(other, CiphertextHandle):
            return other.slots, other.level
        if np.isscalar(other):
            return float(other), None
        return self._vector(other), None

    def encrypt(self, values, level: Optional[int] = None, layout: Any = None) -> CiphertextHandle:
        level = self.L if level is None else level
        if not 0 <= level <= self.L:
            raise InvalidTarget(f"encryption level {level} outside [0, {self.L}]")
        return CiphertextHandle(self._vector(values), level, layout)

    def decrypt(self, c: CiphertextHandle) -> np.ndarray:
        return np.array(c.slots, dtype=np.float64)

    def add(self, c1: CiphertextHandle, c2: Operand) -> CiphertextHandle:
        values, level = self._operand(c2)
        self.ledger.record("additions")
        out_level = c1.level if level is None else min(c1.level, level)
        return CiphertextHandle(c1.slots + values, out_level, c1.layout)

    def sub(self, c1: CiphertextHandle, c2: Operand) -> CiphertextHandle:
        values, level = self._operand(c2)
        self.ledger.record("additions")
        out_level = c1.level if level is None else min(c1.level, level)
        return CiphertextHandle(c1.slots - values, out_level, c1.layout)

    def negate(self, c: CiphertextHandle) -> CiphertextHandle:
        return CiphertextHandle(-c.slots, c.level, c.layout)

    def mul(self, c: CiphertextHandle, other: Operand) -> CiphertextHandle:
        values, level = self._operand(other)
        if c.level == 0 or level == 0:
            raise LevelUnderflow(
                f"multiplication at level 0 (operand levels {c.level}, {level}); a bootstrap is missing"
            )
        if level is None:
            self.ledger.record("ct_pt_mults")
            out_level = c.level - 1
        else:
            self.ledger.record("ct_ct_mults")
            out_level = min(c.level, level) - 1
        return CiphertextHandle(c.slots * values, out_level, c.layout)

    def rotate(self, c: CiphertextHandle, r: int, hoisted: bool = False) -> CiphertextHandle:
        r = int(r) % self.N
        if r == 0:
            return c
        self.ledger.record("hoisted_rotations" if hoisted else "rotations")
        # Rot(c, r)[i] = c[i + r]
        return CiphertextHandle(np.roll(c.slots, -r), c.level, c.layout)

    def bootstrap(self, c: CiphertextHandle, target: int) -> CiphertextHandle:
        if not 0 <= target <= self.L:
            raise InvalidTarget(f"bootstrap target {target} outside [0, {self.L}]")
        self.ledger.record("bootstraps")
        logger.debug("bootstrap %d -> %d in phase %s", c.level, target, self.ledger.current_phase)
        return CiphertextHandle(c.slots.copy(), target, c.layout)

    def level_drop(self, c: CiphertextHandle, target: int) -> CiphertextHandle:
        if target > c.level or target < 0:
            raise InvalidTarget(f"cannot drop level {c.level} to {target}")
        if target == c.level:
            return c
        return CiphertextHandle(c.slots, target, c.layout)

    def evaluate_exact_group(self, cts: Sequence[CiphertextHandle],
                             fn: Callable[[List[np.ndarray]], List[np.ndarray]],
                             name: str = "exact") -> List[CiphertextHandle]:
        outs = fn([np.array(c.slots) for c in cts])
        if len(outs) != len(cts):
            raise ShapeMismatch(f"{name}: {len(outs)} outputs for {len(cts)} inputs")
        return [CiphertextHandle(self._vector(v), c.level, c.layout) for v, c in zip(outs, cts)]
