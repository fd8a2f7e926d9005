"""Neural samplers for unnormalized densities and their Langevin-preconditioning ablations."""

__version__ = "0.1.0"
