"""loopguard: networked control-loop simulation with physics-based intrusion
detection and localization."""

from .statespace import LtiModel, SimState, discretize_zoh, gaussian_noise, lti_step
from .estimation import (Chi2Detector, KalmanFilter, chi2_cdf, chi2_quantile,
                         residual_power, steady_state_gain)
from .control import (LqrWeights, PidConfig, PidState, controller_lti_model,
                      lqr_gain, pid_lti_model, pid_step)
from .plants import (LoadDisturbance, VehicleParams, apply_load,
                     dc_current_model, dc_motor_model, lane_keeping_matrices,
                     lane_keeping_model)
from .netsim import (ActuatorPolicy, Bus, BusSchedule, Frame, PlantChannel,
                     ReceivedFrame, Simulation)
from .attacks import (AttackSpec, Scenario, all_scenarios, lane_keeping_attacks,
                      scenario_catalog)
from .ids import (CHARACTERIZATION_MAP, DetectorConfig, Diagnosis, FlagVector,
                  IntrusionDetector, adaptive_B, classify)
from .runner import Calibration, calibrate, run_scenario

__version__ = "0.1.0"
