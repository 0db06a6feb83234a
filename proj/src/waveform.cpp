#include "bandmod/waveform.hpp"

#include <cmath>

#include "bandmod/errors.hpp"

namespace bandmod {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

const char* waveform_name(Waveform k) {
  switch (k) {
    case Waveform::Natural:
      return "natural";
    case Waveform::Sine:
      return "sine";
    case Waveform::Square:
      return "square";
    case Waveform::Triangle:
      return "triangle";
  }
  return "?";
}

Waveform waveform_from_name(const std::string& name) {
  if (name == "natural") return Waveform::Natural;
  if (name == "sine") return Waveform::Sine;
  if (name == "square") return Waveform::Square;
  if (name == "triangle") return Waveform::Triangle;
  throw ValidationError("unknown waveform kind: " + name);
}

void ModulationSpec::validate() const {
  if (!(r_min > 0.0)) throw ValidationError("ModulationSpec.r_min must be > 0");
  if (!(r_min <= r_max)) throw ValidationError("ModulationSpec.r_max must be >= r_min");
  if (kind == Waveform::Natural) return;  // other fields ignored
  if (!(f_mod > 0.0)) throw ValidationError("ModulationSpec.f_mod must be > 0");
  if (kind == Waveform::Square) {
    if (!(r_low <= r_high)) throw ValidationError("ModulationSpec.r_low must be <= r_high");
  } else {
    if (amplitude_A < 0.0) throw ValidationError("ModulationSpec.amplitude_A must be >= 0");
  }
}

ModulationSpec default_modulation(Waveform kind, double r_base) {
  ModulationSpec s;
  s.kind = kind;
  s.r_base = r_base;
  s.amplitude_A = 0.4 * r_base;
  s.f_mod = 1.0 / 30.0;  // 30 s modulation period
  s.phase_phi = 0.0;
  s.r_high = r_base + s.amplitude_A;
  s.r_low = r_base - s.amplitude_A;
  s.r_min = 0.1 * r_base;
  switch (kind) {
    case Waveform::Natural:
      s.r_max = 1e12;  // uncapped baseline
      break;
    case Waveform::Square:
      s.r_max = s.r_high;
      break;
    default:
      s.r_max = r_base + s.amplitude_A;
      break;
  }
  return s;
}

double eval_target(const ModulationSpec& spec, double t) {
  spec.validate();
  switch (spec.kind) {
    case Waveform::Natural:
      return spec.r_max;
    case Waveform::Sine:
      return spec.r_base + spec.amplitude_A * std::sin(kTwoPi * spec.f_mod * t + spec.phase_phi);
    case Waveform::Square:
      // Boundary convention: sin == 0 counts as the high state.
      return std::sin(kTwoPi * spec.f_mod * t) >= 0.0 ? spec.r_high : spec.r_low;
    case Waveform::Triangle:
      return spec.r_base + (2.0 * spec.amplitude_A / M_PI) *
                               std::asin(std::sin(kTwoPi * spec.f_mod * t + spec.phase_phi));
  }
  throw ValidationError("ModulationSpec.kind is invalid");
}

double eval_bounded(const ModulationSpec& spec, double t) {
  const double target = eval_target(spec, t);
  return std::fmin(std::fmax(target, spec.r_min), spec.r_max);
}

double mean_bounded_rate(const ModulationSpec& spec, double t0, double span, int intervals) {
  int n = intervals < 2 ? 2 : intervals;
  if (n % 2) ++n;
  const double h = span / n;
  double acc = eval_bounded(spec, t0) + eval_bounded(spec, t0 + span);
  for (int i = 1; i < n; ++i) {
    acc += (i % 2 ? 4.0 : 2.0) * eval_bounded(spec, t0 + i * h);
  }
  return acc * h / 3.0 / span;
}

ModulationSpec modulation_from_json(const nlohmann::json& j) {
  static const char* known[] = {"kind",      "r_base", "amplitude_A", "f_mod", "phase_phi",
                                "r_high",    "r_low",  "r_min",       "r_max"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ValidationError("ModulationSpec: unknown key '" + it.key() + "'");
  }
  ModulationSpec s;
  s.kind = waveform_from_name(j.at("kind").get<std::string>());
  s.r_base = j.value("r_base", 0.0);
  s.amplitude_A = j.value("amplitude_A", 0.0);
  s.f_mod = j.value("f_mod", 0.0);
  s.phase_phi = j.value("phase_phi", 0.0);
  s.r_high = j.value("r_high", 0.0);
  s.r_low = j.value("r_low", 0.0);
  s.r_min = j.value("r_min", 0.0);
  s.r_max = j.value("r_max", 0.0);
  s.validate();
  return s;
}

nlohmann::json modulation_to_json(const ModulationSpec& spec) {
  return nlohmann::json{{"kind", waveform_name(spec.kind)},
                        {"r_base", spec.r_base},
                        {"amplitude_A", spec.amplitude_A},
                        {"f_mod", spec.f_mod},
                        {"phase_phi", spec.phase_phi},
                        {"r_high", spec.r_high},
                        {"r_low", spec.r_low},
                        {"r_min", spec.r_min},
                        {"r_max", spec.r_max}};
}

}  // namespace bandmod
