"""imexode - semi-implicit neural ODE integration with discrete adjoints."""

__version__ = "1.0.0"
__description__ = "IMEX Runge-Kutta integrators, discrete adjoints and KS/Burgers learning experiments"
