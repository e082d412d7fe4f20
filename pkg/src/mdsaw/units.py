"""Physical constants and small unit conversions shared across the package."""

import math

#: Vacuum permittivity, F/m (CODATA 2018).
EPS0 = 8.8541878128e-12

GPA = 1e9


def velocity_from_frequency(frequency_hz: float, wavelength_m: float) -> float:
    """Phase velocity v = f * lambda in m/s."""
    if frequency_hz <= 0 or wavelength_m <= 0:
        raise ValueError("frequency and wavelength must be positive")
    return frequency_hz * wavelength_m


def deg2rad(angle):
    return angle * (math.pi / 180.0)


def rad2deg(angle):
    return angle * (180.0 / math.pi)
