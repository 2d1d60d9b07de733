"""Particle-based combustion of solids coupled to a smoke fluid solver."""

from .config import ConfigError, SceneConfig, load_scene, scene_from_dict
from .particles import BurnState, Model, MpmParticles, SmokeParticles
from .simulation import SimState, Simulation, SimulationError

__all__ = [
    "BurnState", "ConfigError", "Model", "MpmParticles", "SceneConfig", "SimState",
    "Simulation", "SimulationError", "SmokeParticles", "load_scene", "scene_from_dict",
]
__version__ = "0.1.0"
