"""Pseudo-spectral harmonic-analysis lab for the mSQG active scalar family on the 2-torus."""

__version__ = "0.1.0"

SIGN_CONVENTION = "m^l(xi) = sign * i eps^{la} xi_a |xi|^{2(-1+delta)}, eps^{12} = 1; B(psi,theta) = int grad_l psi theta T^l theta dx"
