"""Python interface to the orbitall SCF engine and energy model."""

from ._core import (
    ANGSTROM_TO_BOHR,
    CHEMICAL_ACCURACY_MEV,
    HARTREE_TO_EV,
    Error,
    Model,
    ScfOutput,
    System,
    cg_table,
    engine_version,
    lr_schedule,
    read_xyz,
    run_scf,
    spin_gaps,
)

__all__ = [
    "ANGSTROM_TO_BOHR",
    "CHEMICAL_ACCURACY_MEV",
    "HARTREE_TO_EV",
    "Error",
    "Model",
    "ScfOutput",
    "System",
    "cg_table",
    "engine_version",
    "lr_schedule",
    "read_xyz",
    "run_scf",
    "spin_gaps",
]
