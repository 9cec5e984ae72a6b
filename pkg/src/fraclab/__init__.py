"""Discrete fractional Sobolev and interpolation spaces on lattices.

Modules
-------
domain       lattice domains, cracked cubes and convex polygons
norms        L^p, gradient and Gagliardo seminorms on grid functions
kfunctional  K-functional of (L^p, D^{1,p}_0) and the interpolation norm
constants    sharp Poincare constants and their comparisons
capacity     (s,p)-capacities, local capacities and flat cracks
hardy        one-dimensional weighted Hardy and Picone inequalities
cli          command line driver
"""

__version__ = "0.1.0"
