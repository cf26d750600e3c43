"""Pilot-wave (Bohmian) hydrodynamics of the Schrodinger and Klein-Gordon equations.

Wave-function evolution, Madelung fields, guided trajectories, the
momentum-fluctuation model, residual diagnostics and a scenario runner.
"""
__version__ = "0.1.0"
