#include <doctest.h>

#include <cmath>

#include "bandmod/errors.hpp"
#include "bandmod/rng.hpp"
#include "bandmod/waveform.hpp"

using namespace bandmod;

namespace {

ModulationSpec sine_spec() {
  ModulationSpec s;
  s.kind = Waveform::Sine;
  s.r_base = 500000;
  s.amplitude_A = 200000;
  s.f_mod = 1.0 / 30.0;
  s.phase_phi = 0.0;
  s.r_min = 50000;
  s.r_max = 700000;
  return s;
}

ModulationSpec square_spec() {
  ModulationSpec s;
  s.kind = Waveform::Square;
  s.r_high = 7e5;
  s.r_low = 1e5;
  s.f_mod = 1.0 / 30.0;
  s.r_min = 5e4;
  s.r_max = 7e5;
  return s;
}

ModulationSpec triangle_spec() {
  ModulationSpec s = sine_spec();
  s.kind = Waveform::Triangle;
  return s;
}

}  // namespace

TEST_SUITE_BEGIN("waveform");

TEST_CASE("target rates at reference points") {
  CHECK(eval_target(sine_spec(), 0.0) == doctest::Approx(500000).epsilon(1e-12));
  CHECK(eval_target(square_spec(), 0.0) == doctest::Approx(700000).epsilon(1e-12));
  CHECK(eval_target(triangle_spec(), 7.5) == doctest::Approx(700000).epsilon(1e-9));
  CHECK(eval_target(sine_spec(), 7.5) == doctest::Approx(700000).epsilon(1e-12));
}

TEST_CASE("natural evaluates to the uncapped ceiling") {
  ModulationSpec s;
  s.kind = Waveform::Natural;
  s.r_min = 1.0;
  s.r_max = 1e12;
  CHECK(eval_target(s, 123.0) == 1e12);
  CHECK(eval_bounded(s, 123.0) == 1e12);
}

TEST_CASE("bounded rate clamps floor and ceiling") {
  ModulationSpec s = sine_spec();
  s.r_base = 2e5;
  s.amplitude_A = 2e5;
  s.r_min = 1e5;
  s.r_max = 4e5;
  // Trough of the sine hits zero target; floor applies.
  CHECK(eval_bounded(s, 22.5) == doctest::Approx(1e5).epsilon(1e-12));
  // Inside [r_min, r_max] the target passes through unchanged.
  CHECK(eval_bounded(s, 1.0) == doctest::Approx(eval_target(s, 1.0)).epsilon(1e-12));

  ModulationSpec t = triangle_spec();
  t.r_max = 6e5;  // nominal peak is 7e5
  CHECK(eval_bounded(t, 7.5) == doctest::Approx(6e5).epsilon(1e-12));
}

TEST_CASE("bounded rate stays within limits everywhere") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    ModulationSpec s = default_modulation(
        static_cast<Waveform>(1 + rng.below(3)), rng.uniform(1e3, 1e6));
    s.phase_phi = rng.uniform(0, 6.28);
    s.r_min = 0.7 * s.r_base;  // force the floor to engage
    s.r_max = 1.2 * s.r_base;
    for (int i = 0; i < 2000; ++i) {
      const double r = eval_bounded(s, rng.uniform(0.0, 90.0));
      CHECK(r >= s.r_min);
      CHECK(r <= s.r_max);
    }
  }
}

TEST_CASE("periodicity over one modulation period") {
  for (auto spec : {sine_spec(), square_spec(), triangle_spec()}) {
    for (int i = 0; i < 500; ++i) {
      const double t = i * 0.6 + 0.13;
      CHECK(std::fabs(eval_target(spec, t) - eval_target(spec, t + spec.period())) <=
            1e-9 * (spec.r_base > 0 ? spec.r_base : spec.r_high));
    }
  }
}

TEST_CASE("sine and triangle average to the baseline over a period") {
  for (auto spec : {sine_spec(), triangle_spec()}) {
    spec.r_min = 1.0;  // keep clamps out of the way
    spec.r_max = 1e9;
    const double mean = mean_bounded_rate(spec, 0.0, spec.period());
    CHECK(mean == doctest::Approx(spec.r_base).epsilon(1e-6));
  }
}

TEST_CASE("square duty cycle is exactly one half") {
  const ModulationSpec s = square_spec();
  const int n = 10000;  // midpoint grid never lands on the switch instants
  int high = 0;
  for (int i = 0; i < n; ++i) {
    const double t = (i + 0.5) * s.period() / n;
    if (eval_target(s, t) == s.r_high) ++high;
  }
  CHECK(high * 2 == n);
}

TEST_CASE("validation names the violated field") {
  ModulationSpec s = sine_spec();
  s.f_mod = 0.0;
  CHECK_THROWS_WITH_AS(eval_target(s, 0.0), doctest::Contains("f_mod"), ValidationError);
  s = sine_spec();
  s.r_min = 0.0;
  CHECK_THROWS_WITH_AS(eval_target(s, 0.0), doctest::Contains("r_min"), ValidationError);
  s = square_spec();
  s.r_low = 8e5;
  CHECK_THROWS_WITH_AS(eval_target(s, 0.0), doctest::Contains("r_low"), ValidationError);
}

TEST_CASE("json round trip and unknown key rejection") {
  const ModulationSpec s = triangle_spec();
  const ModulationSpec back = modulation_from_json(modulation_to_json(s));
  CHECK(back.kind == s.kind);
  CHECK(back.r_base == s.r_base);
  CHECK(back.amplitude_A == s.amplitude_A);
  CHECK(back.f_mod == s.f_mod);
  CHECK(back.r_min == s.r_min);

  nlohmann::json j = modulation_to_json(s);
  j["bogus_key"] = 1;
  CHECK_THROWS_AS(modulation_from_json(j), ValidationError);
}

TEST_SUITE_END();
