#pragma once

#include <string>

#include <json.hpp>

namespace bandmod {

/// The modulation dictionary: natural (unshaped), sinusoidal, square and
/// triangular throughput patterns. Class ids 0..3 follow this order.
enum class Waveform { Natural = 0, Sine = 1, Square = 2, Triangle = 3 };

const char* waveform_name(Waveform k);
Waveform waveform_from_name(const std::string& name);

/// Parameters of a time-varying shaping-rate target. All rates are in
/// bytes per second; Mbps conversion happens at the CLI boundary.
struct ModulationSpec {
  Waveform kind = Waveform::Natural;
  double r_base = 0.0;       // baseline rate (sine/triangle midline)
  double amplitude_A = 0.0;  // modulation amplitude around r_base
  double f_mod = 0.0;        // modulation frequency, Hz
  double phase_phi = 0.0;    // phase offset, radians
  double r_high = 0.0;       // square-wave high state
  double r_low = 0.0;        // square-wave low state
  double r_min = 0.0;        // lower clamp (flow-control safety floor)
  double r_max = 0.0;        // upper clamp

  /// Throws ValidationError naming the violated field.
  void validate() const;

  double period() const { return 1.0 / f_mod; }
};

/// Default spec for a waveform at a given baseline rate: 30 s period,
/// amplitude 0.4*r_base, zero phase. Square gets an amplitude-matched
/// high/low pair; Natural is the uncapped baseline.
ModulationSpec default_modulation(Waveform kind, double r_base);

/// Target rate per the modulation dictionary, before bounding.
/// Natural evaluates to r_max (uncapped baseline).
double eval_target(const ModulationSpec& spec, double t);

/// Target rate clamped into [r_min, r_max].
double eval_bounded(const ModulationSpec& spec, double t);

/// Time-average of eval_bounded over [t0, t0+span], composite Simpson
/// with `intervals` subdivisions (rounded up to even).
double mean_bounded_rate(const ModulationSpec& spec, double t0, double span,
                         int intervals = 200000);

ModulationSpec modulation_from_json(const nlohmann::json& j);
nlohmann::json modulation_to_json(const ModulationSpec& spec);

}  // namespace bandmod
