"""Consensus of Markov-switching multi-agent systems under input saturation."""
from .errors import (ConfigError, DimensionError, GeneratorError, MissingGainError, ModelError,
                     StructureError)
from .markov import GeneratorPolytope, ModeTrajectory, sample_trajectory, validate_generator
from .sysmodel import AgentDynamics, ModeTopology, NetworkModel, load_model, load_model_file
from .disagreement import DisagreementSystem, build_disagreement_system

__version__ = "0.1.0"

__all__ = [
    "AgentDynamics", "ConfigError", "DimensionError", "DisagreementSystem", "GeneratorError",
    "GeneratorPolytope", "MissingGainError", "ModeTopology", "ModeTrajectory", "ModelError",
    "NetworkModel", "StructureError", "build_disagreement_system", "load_model", "load_model_file",
    "sample_trajectory", "validate_generator",
]
