from typing import Literal, TypeAlias

import numpy as np
from numpy.typing import NDArray

RealArray: TypeAlias = NDArray[np.float64]
"""Real samples or components"""

ComplexArray: TypeAlias = NDArray[np.complex128]
"""Complex samples (beams, quasimodes, complexified solutions)"""

FieldArray: TypeAlias = RealArray | ComplexArray
"""Anything a lattice field can hold"""

BoolArray: TypeAlias = NDArray[np.bool_]
"""Masks on lattices and boundaries"""

Direction: TypeAlias = Literal["forward", "backward"]
"""Time direction of a solve or remainder"""

Variance: TypeAlias = Literal["vector", "covector"]
"""Index position of a tangent object"""

CausalCharacter: TypeAlias = Literal["timelike", "null", "spacelike"]
"""Causal classification of a tangent vector"""

DerivativeMode: TypeAlias = Literal["analytic", "finite-difference"]
"""How metric derivatives are produced"""

ResidualSource: TypeAlias = Literal["lattice", "analytic"]
"""How the quasimode residual fed to the remainder solver is computed"""

Verdict: TypeAlias = Literal["pass", "fail", "skipped"]
"""Tri-state acceptance outcome"""
