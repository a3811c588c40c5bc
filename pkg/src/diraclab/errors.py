"""Exception hierarchy shared across the package."""


class DiracLabError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DiracLabError):
    """Malformed or incomplete experiment configuration (CLI exit code 2)."""


class DegeneracyError(DiracLabError):
    """Numerical degeneracy: band edge, Dirichlet-eigenvalue collision,
    vanishing Wronskian, modulus tie of Floquet multipliers (exit code 3)."""


class OutputError(DiracLabError):
    """I/O failure while writing results (exit code 4)."""
