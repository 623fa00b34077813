"""Pinned physical constants (CODATA 2018 exact values) and unit factors.

Everything inside the package is SI. Millibar and hertz appear only at the
edges (configs, CLI, reports) and are converted with the factors below.
"""

import math

K_B = 1.380649e-23  # J/K
HBAR = 1.054571817e-34  # J s
E_CHARGE = 1.602176634e-19  # C

MBAR = 100.0  # Pa per mbar
TWO_PI = 2.0 * math.pi

# molecular hydrogen, the assumed residual gas in UHV
M_H2 = 3.34e-27  # kg


def mbar_to_pa(p_mbar):
    return p_mbar * MBAR


def pa_to_mbar(p_pa):
    return p_pa / MBAR


def hz_to_rad(f_hz):
    return TWO_PI * f_hz


def rad_to_hz(omega):
    return omega / TWO_PI
