"""Triangular finite elements for Kirchhoff plate bending.

Solves the fourth-order plate problem with an interior penalty method on
standard continuous elements and with the Hellan-Herrmann-Johnson mixed
method, and certifies the discretization error through an equilibrated
moment tensor (two-energies principle).
"""

__version__ = "0.1.0"
