#pragma once

namespace spincav {

/// Physical constants in the frequency units used throughout the library.
/// Energies are stored as E/h in GHz.
struct PhysicalConstants {
  double mu_B_over_h = 13.996245;     // GHz / T
  double mu_N_over_h = 7.6225932e-3;  // GHz / T
  double h = 6.62607015e-34;          // J s
  double hbar = 1.054571817e-34;      // J s
  double k_B_over_h = 20.836619;      // GHz / K
};

inline constexpr PhysicalConstants kCodata{};

// mu_0 / 4pi in T m / A.
inline constexpr double kMu0Over4Pi = 1e-7;

inline constexpr double kPi = 3.14159265358979323846;

}  // namespace spincav
