"""Read-only registry of reference values for the trapped-particle experiment.

Each entry carries its value, 1 sigma (0 when none was quoted), unit and a
short ``source`` describing the measurement or calculation it comes from.
Values are stored in the units they were quoted in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType


@dataclass(frozen=True)
class ReferenceValue:
    key: str
    value: float
    sigma: float
    unit: str
    source: str

    @property
    def relative_sigma(self):
        return self.sigma / abs(self.value) if self.value else math.inf


_TWO_PI = 2 * math.pi

_ENTRIES = [
    # operating points
    ReferenceValue("P1", 1.2e-4, 0.0, "mbar", "ring-up pressure"),
    ReferenceValue("P2", 5.4e-8, 0.0, "mbar", "ring-down pressure, first UHV point"),
    ReferenceValue("P3", 5e-9, 0.0, "mbar", "ring-down pressure, second UHV point"),
    ReferenceValue("P4", 7e-11, 0.0, "mbar", "ring-down pressure, lowest point"),
    ReferenceValue("f_z", 1.28e3, 0.0, "Hz", "secular frequency of the main particle"),
    ReferenceValue("mass", 4.3e-17, 0.0, "kg", "mass of the main particle"),
    ReferenceValue("charge", 300, 30, "e", "charge of the main particle"),
    ReferenceValue("electrode_distance", 0.92e-3, 0.0, "m", "particle-to-electrode distance"),
    # damping
    ReferenceValue("gamma_P1", _TWO_PI * 37e-3, _TWO_PI * 9e-3, "rad/s",
                   "ring-up fit at P1 with T_fb fixed to 1 K, 400 traces"),
    ReferenceValue("gamma_P2", _TWO_PI * 59e-6, _TWO_PI * 2e-6, "rad/s", "ring-down fit at P2"),
    ReferenceValue("gamma_P3", _TWO_PI * 5.9e-6, _TWO_PI * 0.2e-6, "rad/s", "ring-down fit at P3"),
    ReferenceValue("gamma_P4", _TWO_PI * 69e-9, _TWO_PI * 22e-9, "rad/s", "ring-down fit at P4"),
    ReferenceValue("a_fit", 0.9e3, 0.2e3, "Hz/mbar",
                   "total-least-squares fit of gamma/2pi = a P over the four pressures"),
    ReferenceValue("Q_P4", 1.8e10, 0.6e10, "1", "quality factor Omega_z/gamma at P4"),
    ReferenceValue("Qf_P4", 2.4e13, 0.7e13, "Hz", "Q-frequency product at P4"),
    ReferenceValue("gamma_B", _TWO_PI * 49e-9, _TWO_PI * 26e-9, "rad/s",
                   "second ring-down data set at P4, f_z = 1.45 kHz"),
    ReferenceValue("Q_B", 3e10, 2e10, "1", "quality factor of the second P4 data set"),
    ReferenceValue("gamma_ringup_S", _TWO_PI * 311e-3, _TWO_PI * 8e-3, "rad/s",
                   "ring-up of a second particle at 3.1e-4 mbar, T_fb = 0.1 K"),
    ReferenceValue("gamma_ringdown_S", _TWO_PI * 333e-3, _TWO_PI * 5e-3, "rad/s",
                   "ring-down of the second particle at 3.1e-4 mbar"),
    ReferenceValue("a_th_sphere", 107, 10, "Hz/mbar",
                   "free-molecular drag, sphere of twice the single-sphere volume"),
    ReferenceValue("a_th_dumbbell", 127, 12, "Hz/mbar",
                   "free-molecular drag, spherocylinder with L = 2 r_c"),
    # heating and noise
    ReferenceValue("Gamma_gas", 2.1e3, 0.0, "1/s", "gas heating rate k_B T0 gamma_P4/(hbar Omega_z)"),
    ReferenceValue("Gamma_tot", 3.3e4, 0.2e4, "1/s",
                   "linear reheating fit at P4, continuous illumination, 100 traces"),
    ReferenceValue("Gamma_dark", 3.1e4, 0.8e4, "1/s",
                   "linear reheating fit at P4, stroboscopic illumination"),
    ReferenceValue("S_ff", 4e-42, 0.0, "N^2/Hz", "force noise from the stroboscopic heating rate"),
    ReferenceValue("S_EE", 1.7e-9, 0.0, "(V/m)^2/Hz", "field noise S_ff/q^2"),
    ReferenceValue("S_v", 38e-9, 0.0, "V/sqrt(Hz)", "electrode voltage noise d sqrt(S_EE)"),
    ReferenceValue("S_zz", 9.5e-26, 0.0, "m^2/Hz", "trap displacement noise from the heating rate"),
    ReferenceValue("S_zz_measured", 2e-25, 0.0, "m^2/Hz",
                   "accelerometer vibration PSD at the chamber, 1.28 kHz"),
    ReferenceValue("S_EE_surface", 3.1e-19, 0.0, "(V/m)^2/Hz",
                   "Johnson field noise of resistive electrodes, d = 0.9 mm"),
    ReferenceValue("Gamma_m", 163, 0.0, "1/s", "heating rate quoted for the electrode Johnson noise"),
    ReferenceValue("collision_rate_P4", 1.1e3, 0.0, "1/s", "gas collision rate at P4"),
    # frequency stability and calibration
    ReferenceValue("sigma_tau_opt", 2e-6, 0.0, "1", "minimum Allan deviation at P4"),
    ReferenceValue("tau_opt", 20, 0.0, "s", "averaging time of the Allan minimum"),
    ReferenceValue("sigma_thermal", 2e-8, 0.0, "1", "thermal Allan limit 1/sqrt(Q Omega tau_opt)"),
    ReferenceValue("drift_rate", 8e-8, 0.0, "Hz/s", "linear frequency drift at P4"),
    ReferenceValue("rescale_factor", 30.1, 0.0, "1", "drive-tone APD gain correction (A'_cal/A'_meas)^2"),
    ReferenceValue("delta_a_P2", 3.9e-6, 0.0, "m", "camera amplitude uncertainty at P2"),
    ReferenceValue("delta_a_P3", 3.2e-6, 0.0, "m", "camera amplitude uncertainty at P3"),
    ReferenceValue("delta_a_P4", 1.9e-6, 0.0, "m", "camera amplitude uncertainty at P4"),
    ReferenceValue("mean_var_P2", 0.004, 0.0, "1", "ring-down mean log-variance at P2"),
    ReferenceValue("mse_P2", 0.003, 0.0, "1", "ring-down MSE at P2"),
    ReferenceValue("mean_var_P3", 0.004, 0.0, "1", "ring-down mean log-variance at P3"),
    ReferenceValue("mse_P3", 0.006, 0.0, "1", "ring-down MSE at P3"),
    ReferenceValue("mean_var_P4", 0.001, 0.0, "1", "ring-down mean log-variance at P4"),
    ReferenceValue("mse_P4", 0.025, 0.0, "1", "ring-down MSE at P4"),
    # intensity-profile example fit (pixels)
    ReferenceValue("profile_z0", 188.5, 0.2, "px", "example camera profile fit, centre"),
    ReferenceValue("profile_a", 74.5, 0.1, "px", "example camera profile fit, amplitude"),
    ReferenceValue("profile_I0", 2.1, 0.1, "1", "example camera profile fit, scale"),
    ReferenceValue("profile_w", 8.2, 0.3, "px", "example camera profile fit, image width"),
    ReferenceValue("profile_b", 1.0e-3, 0.4e-3, "1/px", "example camera profile fit, illumination slope"),
    ReferenceValue("profile_c", 0.106, 0.003, "1", "example camera profile fit, offset"),
]

REFERENCE_VALUES = MappingProxyType({e.key: e for e in _ENTRIES})


def reference(key) -> ReferenceValue:
    try:
        return REFERENCE_VALUES[key]
    except KeyError:
        raise KeyError(f"no reference value named {key!r}") from None
