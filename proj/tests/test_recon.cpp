#include <gtest/gtest.h>

#include <random>

#include "s2s/phantom.hpp"
#include "s2s/recon.hpp"
#include "support.hpp"

using namespace s2s;
using s2s::testing::as_vector;
using s2s::testing::dense_system_matrix;
using s2s::testing::random_tensor;

namespace {

FanBeamGeometry small_geometry() { return FanBeamGeometry::uniform(12, 16, 1.0, 8, 1.0, 40.0, 70.0); }

SpectralSinogram wrap(std::vector<Sinogram> bins, const FanBeamGeometry& g) {
  SpectralSinogram s;
  s.bins = std::move(bins);
  s.geometry = g;
  s.photons_per_bin.assign(s.bins.size(), INFINITY);
  return s;
}

// Small noisy two-bin problem on a 32x32 grid.
struct SmallProblem {
  FanBeamGeometry geom = FanBeamGeometry::uniform(40, 48, 0.6, 32, 0.7);
  SirtOperator op{geom};
  SpectralPhantom phantom;
  SpectralSinogram sino;

  explicit SmallProblem(double n0 = 2e3) {
    PhantomConfig cfg;
    cfg.materials["soft"] = {0.03, 0.025};
    cfg.materials["bone"] = {0.07, 0.05};
    cfg.primitives = {{0.0, 0.0, 9.0, 8.0, 0.0, "soft"}, {2.0, -2.0, 2.5, 2.5, 0.0, "bone"}};
    phantom = make_phantom(cfg, geom, 2);
    sino = simulate_counts(phantom, op.matrix(), EnergyBinSpec::uniform({20, 40, 60}, n0), 3);
  }
};

TrainConfig tiny_training(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.steps_per_epoch = 1;
  t.arch.width0 = 4;
  t.arch.width1 = 8;
  t.seed = 5;
  return t;
}

}  // namespace

TEST(ReconConfig, Validation) {
  EXPECT_NO_THROW(ReconConfig{}.validate());
  ReconConfig c;
  c.relaxation = 2.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lambda1 = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.sirt_iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.outer_iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Sirt, ConvergesToDenseLeastSquares) {
  const auto g = small_geometry();
  const Eigen::MatrixXd a = dense_system_matrix(g);
  std::mt19937_64 rng(21);
  const auto truth = random_tensor(g.image_shape(), rng, 0.0, 1.0);
  const Eigen::VectorXd y = a * as_vector(truth);
  const Eigen::VectorXd x_ls = a.completeOrthogonalDecomposition().solve(y);

  Sinogram sino(g.sinogram_shape());
  for (std::size_t i = 0; i < sino.size(); ++i) sino[i] = y(static_cast<Eigen::Index>(i));
  ReconConfig cfg;
  cfg.sirt_iterations = 2000;
  cfg.nonnegative = false;
  const auto x = sirt_run(wrap({sino}, g), SirtOperator(g), cfg).images.bins[0];
  EXPECT_LT((as_vector(x) - x_ls).norm() / x_ls.norm(), 1e-3);
}

TEST(Sirt, ZeroSinogramStaysZero) {
  const auto g = small_geometry();
  const SirtOperator op(g);
  auto state = SplitState::zeros(1, 8);
  const auto sino = wrap({Sinogram(g.sinogram_shape())}, g);
  for (int it = 0; it < 20; ++it) {
    x_update(state, sino, op, ReconConfig{}, 0.0, 1);
    for (double v : state.x.bins[0].values()) ASSERT_EQ(v, 0.0);
  }
}

TEST(Sirt, ResidualIsNonIncreasingOnNoiselessData) {
  SmallProblem p(INFINITY);
  ReconConfig cfg;
  cfg.sirt_iterations = 100;
  const auto r = sirt_run(p.sino, p.op, cfg);
  for (const auto& history : r.residuals)
    for (std::size_t i = 1; i < history.size(); ++i) EXPECT_LE(history[i], history[i - 1] * (1 + 1e-12));
}

TEST(Sirt, OutputsAreNonNegative) {
  SmallProblem p(200.0);
  const auto r = sirt_run(p.sino, p.op, ReconConfig{});
  for (const auto& bin : r.images.bins)
    for (double v : bin.values()) EXPECT_GE(v, 0.0);
}

TEST(Sirt, PermutingBinsPermutesOutputs) {
  SmallProblem p;
  ReconConfig cfg;
  cfg.sirt_iterations = 10;
  const auto forward = sirt_run(p.sino, p.op, cfg);
  auto swapped = p.sino;
  std::swap(swapped.bins[0], swapped.bins[1]);
  const auto reversed = sirt_run(swapped, p.op, cfg);
  EXPECT_EQ(forward.images.bins[0], reversed.images.bins[1]);
  EXPECT_EQ(forward.images.bins[1], reversed.images.bins[0]);
}

TEST(Sirt, DivergenceIsReported) {
  ReconConfig cfg;
  EXPECT_NO_THROW(detail::check_divergence({1.0, 5.0, 9.0}, cfg, 0));
  EXPECT_THROW(detail::check_divergence({1.0, 5.0, 11.0}, cfg, 0), NumericError);
}

TEST(XUpdate, ZeroCouplingIsOneSirtSweep) {
  SmallProblem p;
  ReconConfig cfg;
  cfg.sirt_iterations = 1;
  auto state = SplitState::zeros(2, 32);
  std::mt19937_64 rng(5);
  for (auto& z : state.z.bins) z = random_tensor(z.shape(), rng, 0.0, 0.05);
  x_update(state, p.sino, p.op, cfg, 0.0, 1);
  const auto sirt = sirt_run(p.sino, p.op, cfg);
  EXPECT_EQ(state.x.bins[0], sirt.images.bins[0]);
  EXPECT_EQ(state.x.bins[1], sirt.images.bins[1]);
}

TEST(XUpdate, ConsistentDataAndMatchingZIsAFixedPoint) {
  SmallProblem p;
  std::mt19937_64 rng(6);
  auto state = SplitState::zeros(2, 32);
  SpectralSinogram sino = p.sino;
  for (std::size_t b = 0; b < 2; ++b) {
    state.x.bins[b] = random_tensor(state.x.bins[b].shape(), rng, 0.0, 0.05);
    state.z.bins[b] = state.x.bins[b];
    sino.bins[b] = p.op.matrix().forward(state.x.bins[b]);
  }
  const auto before = state.x;
  x_update(state, sino, p.op, ReconConfig{}, 0.3 * p.op.mean_col_sum(), 3);
  EXPECT_EQ(state.x, before);
}

TEST(XUpdate, MatchesDenseUpdate) {
  const auto g = small_geometry();
  const Eigen::MatrixXd a = dense_system_matrix(g);
  const SirtOperator op(g);
  std::mt19937_64 rng(7);
  const auto x0 = random_tensor(g.image_shape(), rng, 0.0, 1.0);
  const auto z = random_tensor(g.image_shape(), rng, 0.0, 1.0);
  const auto y = random_tensor(g.sinogram_shape(), rng, 0.0, 5.0);
  ReconConfig cfg;
  cfg.nonnegative = false;
  cfg.relaxation = 0.8;
  const double lambda = 0.7;

  auto state = SplitState::zeros(1, 8);
  state.x.bins[0] = x0;
  state.z.bins[0] = z;
  x_update(state, wrap({y}, g), op, cfg, lambda, 1);

  const Eigen::VectorXd row = a.rowwise().sum(), col = a.colwise().sum().transpose();
  const Eigen::VectorXd r_inv = row.unaryExpr([](double v) { return v == 0.0 ? 1.0 : 1.0 / v; });
  const Eigen::VectorXd xv = as_vector(x0), zv = as_vector(z);
  const Eigen::VectorXd rhs = a.transpose() * r_inv.cwiseProduct(as_vector(y) - a * xv) + lambda * (zv - xv);
  const Eigen::VectorXd d = (col.array() + lambda).inverse().matrix();
  const Eigen::VectorXd expect = xv + cfg.relaxation * d.cwiseProduct(rhs);
  for (Eigen::Index j = 0; j < expect.size(); ++j)
    EXPECT_NEAR(state.x.bins[0][static_cast<std::size_t>(j)], expect(j), 1e-10);
}

TEST(XUpdate, RejectsMismatchedSinogram) {
  SmallProblem p;
  auto state = SplitState::zeros(3, 32);
  EXPECT_THROW(x_update(state, p.sino, p.op, ReconConfig{}, 0.0, 1), ShapeError);
}

TEST(Tv, ConstantImageIsUnchangedByDescent) {
  Image x = make_image(16, 0.013);
  const auto before = x;
  tv_descent(x, ReconConfig{});
  EXPECT_EQ(x, before);
}

TEST(Tv, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({6, 7}, rng);
  const auto g = tv_gradient(x, 1e-8);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = x[i];
    x[i] = s + 1e-6;
    const double up = total_variation(x, 1e-8);
    x[i] = s - 1e-6;
    const double down = total_variation(x, 1e-8);
    x[i] = s;
    EXPECT_NEAR(g[i], (up - down) / 2e-6, 1e-5 * std::max(1.0, std::abs(g[i])));
  }
}

TEST(Tvm, ZeroWeightEqualsSirt) {
  SmallProblem p;
  ReconConfig cfg;
  cfg.sirt_iterations = 20;
  cfg.tv_weight = 0.0;
  const auto tvm = tvm_reconstruct(p.sino, p.op, cfg);
  const auto sirt = sirt_run(p.sino, p.op, cfg);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < tvm.images.bins[b].size(); ++i)
      EXPECT_NEAR(tvm.images.bins[b][i], sirt.images.bins[b][i], 1e-12);
}

TEST(Tvm, LowersTotalVariationAtComparableResidual) {
  SmallProblem p(INFINITY);
  ReconConfig cfg;
  cfg.sirt_iterations = 200;
  cfg.tv_step = 1e-4;
  const auto tvm = tvm_reconstruct(p.sino, p.op, cfg);
  const auto sirt = sirt_run(p.sino, p.op, cfg);
  for (std::size_t b = 0; b < 2; ++b) {
    const double norm_y = detail::l2(p.sino.bins[b]);
    const double res_tvm = tvm.residuals[b].back() / norm_y, res_sirt = sirt.residuals[b].back() / norm_y;
    EXPECT_LT(res_tvm, 0.05);
    EXPECT_LT(res_sirt, 0.05);
    EXPECT_LE(total_variation(tvm.images.bins[b]), total_variation(sirt.images.bins[b]));
  }
}

TEST(S2S, EpochsAreSpreadOverOuterIterations) {
  EXPECT_EQ(epochs_for_outer(50, 5, 0), 10);
  EXPECT_EQ(epochs_for_outer(7, 3, 0), 3);
  EXPECT_EQ(epochs_for_outer(7, 3, 1), 2);
  EXPECT_EQ(epochs_for_outer(7, 3, 2), 2);
}

TEST(S2S, UntrainedSingleRoundIsCloseToSirt) {
  SmallProblem p;
  ReconConfig cfg;
  cfg.outer_iterations = 1;
  cfg.sweeps_per_outer = 15;
  const auto r = s2s_reconstruct<double>(p.sino, p.op, cfg, tiny_training(0));
  ReconConfig plain = cfg;
  plain.sirt_iterations = 15;
  const auto sirt = sirt_run(p.sino, p.op, plain);
  EXPECT_EQ(r.reconstruction, sirt.images);
  for (std::size_t b = 0; b < 2; ++b) {
    double diff = 0.0;
    for (std::size_t i = 0; i < r.output.bins[b].size(); ++i)
      diff = std::max(diff, std::abs(r.output.bins[b][i] - sirt.images.bins[b][i]));
    double peak = 0.0;
    for (double v : sirt.images.bins[b].values()) peak = std::max(peak, v);
    EXPECT_LT(diff, 0.02 * peak);
  }
}

TEST(S2S, RerunWithSameSeedIsBitIdentical) {
  SmallProblem p;
  ReconConfig cfg;
  cfg.outer_iterations = 2;
  cfg.sweeps_per_outer = 3;
  const auto a = s2s_reconstruct(p.sino, p.op, cfg, tiny_training(4));
  const auto b = s2s_reconstruct(p.sino, p.op, cfg, tiny_training(4));
  EXPECT_EQ(a.output, b.output);
  EXPECT_EQ(a.losses, b.losses);
  ASSERT_EQ(a.losses.size(), 4u);
}

TEST(S2S, PostProcessingIsTheFeedbackFreeSingleRound) {
  SmallProblem p;
  ReconConfig cfg;
  cfg.sirt_iterations = 8;
  const auto tcfg = tiny_training(3);
  const auto post = n2n_postprocess(p.sino, p.op, cfg, tcfg);
  const auto loop = s2s_run(p.sino, p.op, cfg, tcfg, S2SSchedule{1, 8, false});
  EXPECT_EQ(post.output, loop.output);
  EXPECT_EQ(post.losses, loop.losses);
}

TEST(S2S, OutputsHaveTheInputShapeAndAreFinite) {
  SmallProblem p;
  ReconConfig cfg;
  cfg.outer_iterations = 2;
  cfg.sweeps_per_outer = 2;
  const auto r = s2s_reconstruct(p.sino, p.op, cfg, tiny_training(2));
  ASSERT_EQ(r.output.bin_count(), 2u);
  for (const auto& bin : r.output.bins) {
    EXPECT_EQ(bin.shape(), (Shape{32, 32}));
    EXPECT_TRUE(bin.all_finite());
  }
  EXPECT_EQ(r.residuals[0].size(), 4u);
}

TEST(S2S, PostProcessingBarelyChangesCleanInput) {
  SmallProblem p(INFINITY);
  ReconConfig cfg;
  cfg.sirt_iterations = 30;
  auto tcfg = tiny_training(10);
  const auto post = n2n_postprocess(p.sino, p.op, cfg, tcfg);
  const auto sirt = sirt_run(p.sino, p.op, cfg);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto& x = sirt.images.bins[b];
    const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
    double mse = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) mse += std::pow(post.output.bins[b][i] - x[i], 2);
    mse /= static_cast<double>(x.size());
    EXPECT_LT(std::sqrt(mse), 0.01 * (*hi - *lo));
  }
}

TEST(S2S, NonFiniteDataIsReported) {
  SmallProblem p;
  auto sino = p.sino;
  sino.bins[0][5] = NAN;
  ReconConfig cfg;
  cfg.outer_iterations = 1;
  cfg.sweeps_per_outer = 1;
  EXPECT_THROW(s2s_reconstruct(sino, p.op, cfg, tiny_training(1)), NumericError);
}

TEST(S2S, ExplodingTrainingAbortsWithEpoch) {
  SmallProblem p;
  ReconConfig cfg;
  cfg.outer_iterations = 1;
  cfg.sweeps_per_outer = 5;
  auto tcfg = tiny_training(20);
  tcfg.learning_rate = 1e30;
  try {
    s2s_reconstruct<double>(p.sino, p.op, cfg, tcfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
  }
}
