#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "gentle/numkit/gradcheck.hpp"
#include "gentle/tae.hpp"

using namespace gentle;

namespace {

ContextBatch random_context(Index n, Index xd, Index yd, nk::Rng& rng, double shift = 0.0) {
  ContextBatch c{Matrix(n, xd), Matrix(n, yd)};
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < xd; ++j) c.x(i, j) = rng.uniform(-1, 1);
    for (Index j = 0; j < yd; ++j) c.y(i, j) = rng.uniform(-1, 1) + shift;
  }
  return c;
}

ContextBatch permuted(const ContextBatch& c, nk::Rng& rng) {
  std::vector<Index> order(static_cast<std::size_t>(c.size()));
  std::iota(order.begin(), order.end(), Index{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  ContextBatch out{Matrix(c.x.rows(), c.x.cols()), Matrix(c.y.rows(), c.y.cols())};
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.x.row(static_cast<Index>(i)) = c.x.row(order[i]);
    out.y.row(static_cast<Index>(i)) = c.y.row(order[i]);
  }
  return out;
}

TaePair small_tae(Index xd, Index yd, std::uint64_t seed) {
  nk::Rng rng(seed);
  return make_tae(xd, yd, TaeConfig{3, 16, 2}, rng);
}

}  // namespace

TEST(Encoder, PermutationInvariantBitForBit) {
  nk::Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const TaePair p = small_tae(4, 1, static_cast<std::uint64_t>(trial));
    const ContextBatch c = random_context(64, 4, 1, rng);
    const Vector z = encode(p, c);
    for (int k = 0; k < 10; ++k) ASSERT_EQ(encode(p, permuted(c, rng)), z);
  }
}

TEST(Encoder, LatentStrictlyInsideUnitBox) {
  nk::Rng rng(2);
  TaePair p = small_tae(6, 5, 3);
  for (auto& layer : p.feature.layers) layer.weight *= 5.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Vector z = encode(p, random_context(32, 6, 5, rng, rng.uniform(-20, 20)));
    EXPECT_LT(z.cwiseAbs().maxCoeff(), 1.0);
    EXPECT_TRUE(z.allFinite());
  }
}

TEST(Encoder, EmptyContextGivesZeroLatent) {
  const TaePair p = small_tae(4, 1, 4);
  const ContextBatch empty{Matrix(0, 4), Matrix(0, 1)};
  EXPECT_EQ(encode(p, empty), Vector::Zero(3));
  EXPECT_THROW(tae_loss(p, empty), ConfigError);
}

TEST(Encoder, RejectsMismatchedPairs) {
  const TaePair p = small_tae(4, 1, 5);
  nk::Rng rng(5);
  EXPECT_THROW(encode(p, random_context(8, 3, 1, rng)), ConfigError);
  ContextBatch ragged{Matrix::Zero(4, 4), Matrix::Zero(3, 1)};
  EXPECT_THROW(encode(p, ragged), ConfigError);
  EXPECT_THROW(decode(p, Vector::Zero(2), Matrix::Zero(1, 4)), ConfigError);
}

TEST(Encoder, MeanPoolingOfIdenticalRows) {
  // Replicating a single pair must not change its embedding.
  const TaePair p = small_tae(4, 1, 6);
  nk::Rng rng(6);
  const ContextBatch one = random_context(1, 4, 1, rng);
  ContextBatch many{one.x.replicate(7, 1), one.y.replicate(7, 1)};
  EXPECT_TRUE(encode(p, many).isApprox(encode(p, one), 1e-14));
}

TEST(TaeGradient, ReconstructionLossMatchesDifferences) {
  nk::Rng rng(7);
  for (auto [xd, yd] : {std::pair<Index, Index>{4, 1}, {6, 5}}) {
    TaePair p = small_tae(xd, yd, 8);
    const ContextBatch c = random_context(12, xd, yd, rng);
    TaeGrads g = TaeGrads::zeros_like(p);
    tae_loss_grad(p, c, g);
    const auto dec = nk::check_gradient(p.decoder, g.decoder, [&] { return tae_loss(p, c); }, 1e-6);
    const auto enc = nk::check_gradient(p.feature, g.feature, [&] { return tae_loss(p, c); }, 1e-6);
    EXPECT_LT(dec.max_relative_error, 1e-4);
    EXPECT_LT(enc.max_relative_error, 1e-4);
  }
}

TEST(TaeGradient, ScaleMultipliesGradient) {
  nk::Rng rng(9);
  const TaePair p = small_tae(4, 1, 9);
  const ContextBatch c = random_context(10, 4, 1, rng);
  TaeGrads g1 = TaeGrads::zeros_like(p), g10 = TaeGrads::zeros_like(p);
  tae_loss_grad(p, c, g1, 1.0);
  tae_loss_grad(p, c, g10, 10.0);
  EXPECT_TRUE(g10.decoder.weight[0].isApprox(10.0 * g1.decoder.weight[0], 1e-12));
  EXPECT_TRUE(g10.feature.weight[0].isApprox(10.0 * g1.feature.weight[0], 1e-12));
}

TEST(TaeGradient, ContrastiveLossMatchesDifferences) {
  nk::Rng rng(10);
  TaePair p = small_tae(4, 1, 11);
  std::vector<std::vector<ContextBatch>> per_task;
  for (int t = 0; t < 3; ++t)
    per_task.push_back({random_context(6, 4, 1, rng, t), random_context(6, 4, 1, rng, t)});
  nk::MlpGrads g = nk::MlpGrads::zeros_like(p.feature);
  contrastive_loss(p, per_task, &g);
  const auto r = nk::check_gradient(p.feature, g, [&] { return contrastive_loss(p, per_task); }, 1e-6);
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(Contrastive, PartsAndPreconditions) {
  nk::Rng rng(12);
  const TaePair p = small_tae(4, 1, 12);
  const ContextBatch a = random_context(5, 4, 1, rng);
  const ContextBatch b = random_context(5, 4, 1, rng, 3.0);
  ContrastiveParts parts;
  const double loss = contrastive_loss(p, {{a, a}, {b, b}}, nullptr, 1.0, kContrastiveEpsilon, &parts);
  EXPECT_EQ(parts.same_task, 0.0);
  const double d2 = (encode(p, a) - encode(p, b)).squaredNorm();
  EXPECT_NEAR(parts.cross_task, 1.0 / (d2 + kContrastiveEpsilon), 1e-9);
  EXPECT_DOUBLE_EQ(loss, parts.same_task + parts.cross_task);
  EXPECT_THROW(contrastive_loss(p, {{a, a}}), ConfigError);
  EXPECT_THROW(contrastive_loss(p, {{a}, {b, b}}), ConfigError);
}

TEST(TaeTraining, SeparatesTwoTasks) {
  // Two reward functions of opposite sign; a briefly trained TAE must embed
  // them apart and reconstruct both.
  nk::Rng rng(13);
  nk::Rng init(14);
  TaePair p = make_tae(2, 1, TaeConfig{2, 32, 2}, init);
  TaeOptimizer opt(p, 3e-3);
  auto make = [&](double sign) {
    ContextBatch c{Matrix(32, 2), Matrix(32, 1)};
    for (Index i = 0; i < 32; ++i) {
      c.x(i, 0) = rng.uniform(-1, 1);
      c.x(i, 1) = rng.uniform(-1, 1);
      c.y(i, 0) = sign * c.x(i, 0);
    }
    return c;
  };
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 600; ++step) {
    TaeGrads g = TaeGrads::zeros_like(p);
    const double l = tae_loss_grad(p, make(1.0), g) + tae_loss_grad(p, make(-1.0), g);
    if (step == 0) first = l;
    last = l;
    opt.step(p, g);
  }
  EXPECT_LT(last, 0.1 * first);
  EXPECT_GT((encode(p, make(1.0)) - encode(p, make(-1.0))).norm(), 0.1);
}
