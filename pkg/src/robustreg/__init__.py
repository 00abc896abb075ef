"""Robust output regulation with integral action, forwarding feedback and a
high-gain observer in original coordinates."""

from ._jit import HAS_NUMBA
from .model import (ControlAffineModel, ProcessModel, DiscrepancyReport, eval_model,
                    numerical_jacobian, discrepancy, check_nonresonance, double_integrator)
from .forwarding import (SmoothSaturation, IntegralAction, ForwardingDesign, smooth_sat,
                         integrator_rhs, psi, compute_H0, extended_lyapunov, make_proper)
from .observer import (ObserverChart, BarrierOutput, transform_B, observer_rhs, tau_floor,
                       observer_lyapunov, verify_chart, build_h2_quadratic, check_barrier,
                       riccati_design, contraction_rate)
from .regulator import (LevelSetEstimate, ClosedLoopState, OutputFeedbackRegulator,
                        estimate_level_sets, psi_sat, closed_loop_rhs)
from .simulate import IntegratorConfig, Trace, integrate, register_event
from .analysis import (lyapunov_decrease, fit_contraction, find_equilibrium,
                       robustness_sweep, invariance_check)

from .scenario import load_config, run_scenario

__version__ = "0.1.0"
