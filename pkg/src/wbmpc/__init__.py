"""Whole-body nonlinear MPC for a planar five-link biped.

Library layout:

- ``model``       robot description, parameter file loading
- ``dynamics``    floating-base dynamics, contact impulses, kinematics
- ``gaits``       contact schedules (stand / trot / walk), phase, switching
- ``references``  heuristic and gait-library reference generation
- ``ocp``         multiple-shooting SQP solver with relaxed barriers
- ``gaitsynth``   periodic gait synthesis and validation
- ``mpc``         controller: problem assembly, replanning, plan interpolation
- ``plant``       hybrid rigid-body simulator and episode runner
- ``bench``       solve-rate and push-recovery benchmarks
- ``service``     duplex telemetry/command channel for the cockpit UI
"""

from .model import (ContactMode, Input, JointLimits, Link, RobotModel, State,
                    default_model, default_model_path, load_model,
                    lumped_mass_variant, nominal_stance)
from .dynamics import (DynamicsTerms, compute_terms,
                       constrained_forward_dynamics, foot_kinematics,
                       impulse_map, mechanical_energy, recover_torques,
                       reparam_flow)

__version__ = "0.1.0"
