"""Joint vector-field estimation and state filtering from noisy trajectories."""

from .dynamics import (
    FitzHughNagumo,
    MassSpringRing,
    NoiseSpec,
    TimeGrid,
    TrajectorySet,
    add_noise,
    fhn_rhs,
    generate_dataset,
    grid_initial_conditions,
    integrate,
    integrate_batch,
    mass_spring_rhs,
    reshape_trajectory,
    uniform_initial_conditions,
)
from .errors import (
    ConfigError,
    DataShapeError,
    DivergenceError,
    InvalidStateError,
    NonUniformGridError,
    RankDeficientDesignWarning,
    SolverDivergenceError,
    UnrepresentableTermError,
    UnsupportedModelError,
    VfieldError,
)
from .estimation import (
    AdamTrainer,
    FitConfig,
    FitReport,
    GradientDescentSolver,
    IterationRecord,
    LbfgsSolver,
    PredictionErrorStopping,
    StlsqTrainer,
    alternate,
    bcd,
    filter_step,
    recombine_states,
    split_states,
    train_step,
)
from .metrics import (
    EvalGrid,
    SupportReport,
    phase_portrait_samples,
    predict_with_reset,
    state_error,
    support_accuracy,
    true_sindy_coefficients,
    vector_field_error,
)
from .models import PolynomialDictionary, SindyModel, monomial_exponents, stlsq
from .networks import DenseNetModel, Mlp, MultiIndexSet, NeuralShapeModel, ShapeNetwork
from .objective import (
    objective_grad_states,
    objective_grad_theta,
    predicted_states,
    prediction_error,
    residual_objective,
)

__version__ = "0.1.0"
