"""Physical constants (CODATA 2018). Every module takes them from here."""

EPSILON_0 = 8.8541878128e-12  # vacuum permittivity, F/m
K_B = 1.380649e-23            # Boltzmann constant, J/K
ELEMENTARY_CHARGE = 1.602176634e-19  # C
ATOMIC_MASS = 1.66053906660e-27      # kg
