"""Design toolkit and simulator for digital coupling-wave cancelers in
single-frequency full-duplex relay stations."""

from .lti import (
    FrequencyResponseSample,
    StateSpace,
    frequency_response,
    hinf_norm,
    interconnect,
    is_stable,
    response_sample,
    zoh_discretize,
)
from .relay import (
    CouplingChannel,
    GeneralizedPlantSpec,
    RelayParams,
    build_generalized_plant,
    build_perturbed_plant,
    error_system_response,
    rotation_matrix,
    scalar_block,
    uncertainty_weight,
)
from .lifting import LiftedPlant, fsfh_lift, lifted_closed_loop, sampled_data_norm
from .synthesis import (
    Controller,
    QParam,
    RobustPlant,
    SynthesisError,
    build_robust_plant,
    robust_stability_sweep,
    synthesize_nominal,
    synthesize_robust,
    verify_design,
    youla_closed_loop_maps,
)
from .sim import (
    InputSpec,
    SimConfig,
    SimulationTrace,
    generate_input,
    metrics,
    passband_oracle,
    simulate_closed_loop,
)

__version__ = "0.1.0"
