"""Surface finite element solver for parabolic SPDEs with
Whittle-Matern additive noise on compact hypersurfaces."""

from .assembly import OperatorSet, assemble_form, assemble_mass, assemble_operator_set
from .coefficients import CoefficientField, builtin_field, project_to_mesh
from .errors import NumericalError, ValidationError
from .fractional import (FractionalApplier, FractionalSpec, apply_fractional,
                         choose_k, dense_fractional_oracle, fractional_spec,
                         sinc_nodes)
from .geometry import (Circle, DeformedSphere, Sphere, Surface, deform,
                       surface_by_name)
from .harness import (ConvergenceReport, StudyConfig, fit_rate, relative_error,
                      run_study, theoretical_rate)
from .mesh import (CouplingOperator, SurfaceMesh, coarse_to_fine_matrix,
                   discrete_normal, generate_mesh, identity_coupling,
                   mesh_metrics)
from .noise import (NoiseIncrement, NoiseStream, coarsen_space, coarsen_time,
                    mass_sqrt_factor, sample_increment)
from .stepper import (StateVector, StepOperator, apply_fractional_final,
                      build_stepper, run, step)

__version__ = "0.1.0"
