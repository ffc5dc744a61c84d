"""Physical constants and unit conversions.

Energies cross module boundaries in neV, lengths in nm, times in ns and
frequencies in MHz. Internally everything is converted to eV, m, s and Hz
through the helpers below so there is exactly one place where the factors live.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    h: float = 4.135667696e-15  # Planck constant, eV s
    mu_B: float = 5.7883818060e-5  # Bohr magneton, eV / T

    @property
    def hbar(self) -> float:
        return self.h / (2.0 * 3.141592653589793)

    def zeeman_frequency(self, dg: float, B: float) -> float:
        """Frequency in Hz of a g-factor difference ``dg`` at field ``B`` (tesla)."""
        return dg * self.mu_B * B / self.h

    def energy_to_frequency(self, energy_ev: float) -> float:
        return energy_ev / self.h

    def dg_for_frequency(self, nu_hz: float, B: float) -> float:
        """Inverse of :meth:`zeeman_frequency`."""
        return nu_hz * self.h / (self.mu_B * B)


CONSTANTS = PhysicalConstants()

NM = 1e-9
NS = 1e-9
MHZ = 1e6
NEV = 1e-9  # neV -> eV
