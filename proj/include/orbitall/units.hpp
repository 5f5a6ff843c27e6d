#pragma once

namespace orbitall::units {

inline constexpr double kHartreeToEv = 27.211386245988;
inline constexpr double kEvToHartree = 1.0 / kHartreeToEv;
inline constexpr double kAngstromToBohr = 1.0 / 0.529177210903;
inline constexpr double kBohrToAngstrom = 0.529177210903;

// 1 kcal/mol expressed in meV, the accuracy threshold used in reports.
inline constexpr double kChemicalAccuracyMeV = 43.4;

}  // namespace orbitall::units
