"""Construction and certification of hyperbolic solutions of perturbed
functional differential equations.

The pipeline: represent the unperturbed orbit and its hyperbolic
splitting (``hyperbolic``), describe the functional perturbation acting
on history segments (``perturbations``), and iterate the invariance
operator for the reparametrization X and the stable/unstable corrections
(``invariance``) built on top of the grid calculus (``funcspace``) and
the scalar flow machinery (``flows``). Implicitly defined delays of the
two-charge kind live in ``electrodynamics``; the command line front end
in ``cli``.
"""

__version__ = "0.1.0"

from . import funcspace, flows, hyperbolic, perturbations, invariance
from . import electrodynamics

__all__ = [
    "funcspace",
    "flows",
    "hyperbolic",
    "perturbations",
    "invariance",
    "electrodynamics",
]
