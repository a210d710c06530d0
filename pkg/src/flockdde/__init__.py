"""Delayed normalized-communication alignment hydrodynamics toolkit.

Simulates the Lagrangian form of the pressureless alignment system with
delayed, normalized communication; certifies exponential flocking via the
kernel-tail sufficient condition; monitors the Lyapunov functional and
velocity bounds; and classifies/detects finite-time blow-up in one dimension.
"""

from .config import ConfigError, RunConfig, SweepConfig
from .diagnostics import (
    DiagnosticsFrame,
    FlockingCertificate,
    FlockingMonitor,
    NotReadyError,
    certify_flocking,
    diameters,
    fit_decay_rate,
    gronwall_rate,
    lyapunov,
    prehistory_frames,
)
from .dynamics import (
    BlowupEvent,
    BlowupSignal,
    ForceEvaluation,
    SimulationResult,
    SingularNormalizerError,
    alignment_rhs,
    integrate,
    simulate,
    step,
)
from .kernel import CuckerSmaleKernel, TabulatedKernel, UnsupportedKernelError
from .state import (
    BoxDomain,
    ConstantVelocity,
    HistoryBuffer,
    HistoryView,
    InitialDatum,
    InvalidDatumError,
    LagrangianEnsemble,
    LinearVelocity,
    NodeSet,
    OutOfWindowError,
    SineVelocity,
    SliceTableVelocity,
    discretize,
    write_snapshot_csv,
)
from .threshold1d import (
    ThresholdVerdict,
    WEvolution,
    classify,
    detect_blowup,
    evolve_w,
    reconstruct_density,
)

__version__ = "0.1.0"
