"""Numerical core: tableaux, linear algebra, networks, integrators, adjoints, training, data."""
