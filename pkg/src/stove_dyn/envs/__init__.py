"""Billiards, gravity and action-conditioned billiards environments."""

from .dataset import Dataset, dataset_bytes, generate_dataset, load_dataset, render_dataset, save_dataset, sequence_rng
from .physics import (
    ACTION_DIRECTIONS, KINDS, N_ACTIONS, OBJECT_COLORS, REST_ACTION, EnvConfig, SimState,
    default_config, energy_series, kinetic_energy, random_rollout, sample_initial_state,
    sample_positions, step, step_billiards, step_controlled, step_gravity, velocity_energy,
)
from .render import render_frame, render_sequence

__all__ = [
    "ACTION_DIRECTIONS", "KINDS", "N_ACTIONS", "OBJECT_COLORS", "REST_ACTION",
    "Dataset", "EnvConfig", "SimState",
    "default_config", "energy_series", "generate_dataset", "kinetic_energy", "load_dataset",
    "random_rollout", "render_dataset", "render_frame", "render_sequence", "sample_initial_state",
    "sample_positions", "save_dataset", "dataset_bytes", "sequence_rng", "step", "step_billiards",
    "step_controlled", "step_gravity", "velocity_energy",
]
