"""
Input validation utilities
"""
import math
import re
from typing import Iterable, List, Sequence

import numpy as np


class ArrayValidator:
    """Sample array validation"""

    @staticmethod
    def validate_finite(values: np.ndarray, what: str = "samples") -> np.ndarray:
        """Return values as a float array, rejecting NaN and infinities"""
        arr = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(arr)):
            bad = int(np.count_nonzero(~np.isfinite(arr)))
            raise ValueError(f"{what} must be finite ({bad} non-finite values)")
        return arr

    @staticmethod
    def validate_length(values: Sequence, expected: int, what: str = "samples") -> None:
        """Check one value per grid step (or point)"""
        if len(values) != expected:
            raise ValueError(f"expected {expected} {what}, got {len(values)}")

    @staticmethod
    def validate_step_function(steps: Sequence[Sequence[float]], what: str = "steps") -> List[tuple]:
        """Validate [start, value] pairs with strictly increasing starts beginning at 0"""
        if not steps:
            raise ValueError(f"{what} must contain at least one [start, value] pair")
        pairs = [(float(s), float(v)) for s, v in steps]
        if pairs[0][0] != 0.0:
            raise ValueError(f"{what} must start at time 0")
        starts = [s for s, _ in pairs]
        if any(b <= a for a, b in zip(starts[:-1], starts[1:])):
            raise ValueError(f"{what} start times must be strictly increasing")
        if not all(math.isfinite(v) for _, v in pairs):
            raise ValueError(f"{what} values must be finite")
        return pairs


class InputValidator:
    """Scalar input validation"""

    NAME_REGEX = re.compile(r'^[a-z0-9][a-z0-9_\-\.]*$')

    @staticmethod
    def validate_kappa(kappa: float, strict_below_two: bool = True) -> float:
        """Diffusivity for the kappa < 2 estimates"""
        if not math.isfinite(kappa) or kappa <= 0:
            raise ValueError(f"kappa must be positive, got {kappa}")
        if strict_below_two and kappa >= 2:
            raise ValueError(f"kappa must be < 2, got {kappa}")
        return float(kappa)

    @staticmethod
    def validate_point(z: complex, allow_real: bool = False) -> complex:
        """Points in the upper half-plane (or nonzero reals when allowed)"""
        z = complex(z)
        if not (math.isfinite(z.real) and math.isfinite(z.imag)):
            raise ValueError(f"point must be finite, got {z}")
        if z == 0:
            raise ValueError("z = 0 is not in the domain of the Loewner flow")
        if z.imag < 0 or (z.imag == 0 and not allow_real):
            raise ValueError(f"point must lie in the upper half-plane, got {z}")
        return z

    @staticmethod
    def validate_heights(ys: Iterable[float]) -> np.ndarray:
        """Strictly positive heights y"""
        arr = np.atleast_1d(np.asarray(list(ys), dtype=float))
        if arr.size == 0:
            raise ValueError("at least one height y is required")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ValueError("heights y must be finite and > 0")
        return arr

    @staticmethod
    def validate_name(name: str) -> bool:
        """Corpus entry names are lowercase file-system safe tokens"""
        return bool(name and InputValidator.NAME_REGEX.match(name))
