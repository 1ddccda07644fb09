"""Differentiable MLS-MPM with a per-neighborhood zoo of constitutive models."""

from .constitutive import ElasticModel, MaterialField, MaterialSpec, PhysicalParams, PlasticModel
from .errors import MPMError
from .mpm import GridSpec, ParticleState, Simulation, StepParams, mpm_step, rollout, simulate
from .scene import SceneConfig, load_scene, parse_scene

__version__ = "0.1.0"

__all__ = [
    "ElasticModel", "PlasticModel", "PhysicalParams", "MaterialSpec", "MaterialField",
    "MPMError", "GridSpec", "StepParams", "ParticleState", "Simulation", "mpm_step", "rollout", "simulate",
    "SceneConfig", "load_scene", "parse_scene",
]
