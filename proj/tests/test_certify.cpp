#include <gtest/gtest.h>

#include "certify.hpp"

namespace {

using namespace gsgn;

constexpr double kTolerance = 1e-4;

void run_all(const std::vector<certify::Case>& cases, std::uint64_t seeds) {
  for (const auto& c : cases) {
    for (std::uint64_t s = 0; s < seeds; ++s) {
      const double err = c.run(s);
      EXPECT_LT(err, kTolerance) << c.name << " seed " << s;
    }
  }
}

TEST(Certify, Ops) { run_all(certify::op_cases(), 20); }
TEST(Certify, Layers) { run_all(certify::layer_cases(), 20); }
TEST(Certify, Losses) { run_all(certify::loss_cases(), 20); }
TEST(Certify, DeskGenerators) { run_all(certify::model_cases(), 20); }
TEST(Certify, DefaultGenerators) { run_all(certify::full_model_cases(), 1); }

}  // namespace
