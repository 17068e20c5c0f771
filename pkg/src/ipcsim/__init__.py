"""Intersection-free implicit elastodynamics on tetrahedral meshes.

Submodules
----------
geometry   meshes, distance primitives, broad phase, file formats
energy     incremental potential, elastic models, Hessian snapshots
contact    barrier function, constraint sets, contact classification
mas        multilevel additive Schwarz preconditioner
woodbury   per-subdomain low-rank preconditioner updates
ccd        conservative continuous collision detection
solver     the preconditioned nonlinear CG time stepper and baselines
cli        scene configs, simulation driver, comparison and check tools

The package __init__ stays import-light on purpose: the command line entry
point applies the THREADS environment cap before numpy is first imported.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "geometry",
    "energy",
    "contact",
    "mas",
    "woodbury",
    "ccd",
    "solver",
    "cli",
    "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
