TAU_NULL = 1e-9
"""Relative tolerance on g(v, v) / |v|^2 for null classification"""

TAU_TRANS = 1e-6
"""Minimum relative |g(v, nu)| for a transversal boundary hit"""

TAU_CONJ = 1e-8
"""Relative |det Y| threshold for conjugate points"""

TAU_II = 1e-8
"""Tolerance on the second fundamental form for null-convexity"""

H_FD_FACTOR = 1e-4
"""Finite-difference step as a fraction of the domain diameter"""

GEODESIC_STEP_FACTOR = 1e-3
"""Geodesic step as a fraction of T"""

EVENT_TOLERANCE = 1e-10
"""Bisection tolerance for boundary and cap events"""

FAN_SIZE = 64
"""Spatial directions swept when selecting covectors"""

CFL_MAX = 0.9

CUTOFF_PLATEAU = 0.25
"""Relative tube radius up to which the beam cutoff is identically 1"""

COLLAR_CELLS = 8
"""Width of the boundary-data extension collar"""

NODES_PER_EFOLD = 8.0
"""Minimum lattice nodes per transverse e-fold of a Gaussian"""

PICARD_TOLERANCE = 1e-10
PICARD_MAX_ITERATIONS = 60

DEFAULT_JET_ORDER = 5
DEFAULT_RHO_LIST = (32.0, 64.0, 128.0, 256.0, 512.0)
DEFAULT_EPS_STEP = 1e-2
DEFAULT_K_MAX = 5

MIN_CHART_RADIUS = 1e-3

PHASE_EXTRA_DEGREES = 3
"""Phase jets carry this many degrees beyond the jet order"""

AMPLITUDE_EXTRA_DEGREES = 1
"""Amplitude jets carry this many degrees beyond the jet order"""

METRIC_EXTRA_DEGREES = 5
"""Chart metric jets carry this many degrees beyond the jet order"""

DEFECT_WINDOW = (5e-2, 3e-1)
"""Transverse radii used for defect-order regressions"""

SIGNIFICANT_DIGITS = 17

SCHEMA_VERSION = 1

EXIT_PASS = 0
EXIT_VERDICT_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3
