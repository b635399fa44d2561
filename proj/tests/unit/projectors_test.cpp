#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "../support/d_abstractor_oracle.hpp"
#include "../support/fixtures.hpp"
#include "vlconn/grad_check.hpp"
#include "vlconn/ops.hpp"
#include "vlconn/projectors.hpp"

using namespace vlc;
using fixtures::fill;
using fixtures::random_features;
using fixtures::set_identity;
using fixtures::zero_offset_d_abstractor;

namespace {

ProjectorSpec make_spec(ProjectorKind kind, std::size_t m, std::size_t dv, std::size_t dt) {
  ProjectorSpec s;
  s.kind = kind;
  s.num_tokens = m;
  s.vision_width = dv;
  s.text_width = dt;
  return s;
}

// Floor/ceil window means over a row-major [N, C] map.
std::vector<double> pool_oracle(const FeatureMap& fm, std::size_t side) {
  const std::size_t H = fm.height, W = fm.width, C = fm.channels();
  std::vector<double> out(side * side * C, 0.0);
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j) {
      const std::size_t r0 = i * H / side, r1 = ((i + 1) * H + side - 1) / side;
      const std::size_t c0 = j * W / side, c1 = ((j + 1) * W + side - 1) / side;
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t q = c0; q < c1; ++q) s += fm.features.data()[(r * W + q) * C + c];
        out[(i * side + j) * C + c] = s / double((r1 - r0) * (c1 - c0));
      }
    }
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<unsigned char> read_pgm_pixels(const std::string& path, std::size_t& w, std::size_t& h) {
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  int maxval = 0;
  is >> magic >> w >> h >> maxval;
  is.get();
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(maxval, 255);
  std::vector<unsigned char> px(w * h);
  is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  return px;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vlconn_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

// ---- linear / mlp ----------------------------------------------------------

TEST(Linear, IdentityWeightsPassFeaturesThrough) {
  auto p = make_projector(make_spec(ProjectorKind::linear, 4, 6, 6));
  set_identity(p->parameter("proj.weight"));
  const auto fm = random_features(2, 2, 6, 1);
  const auto tokens = linear_project(*p, fm).tokens;
  EXPECT_EQ(max_abs_diff(tokens.data(), fm.features.data()), 0.0);
}

TEST(Linear, RejectsTokenCountOtherThanN) {
  auto p = make_projector(make_spec(ProjectorKind::linear, 16, 4, 4));
  const auto fm = random_features(2, 2, 4, 1);
  try {
    linear_project(*p, fm);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("linear projector is inflexible"), std::string::npos) << e.what();
  }
}

TEST(Linear, MatchesPerRowMatmulOracle) {
  auto spec = make_spec(ProjectorKind::linear, 12, 5, 7);
  auto p = make_projector(spec);
  fixtures::randomize(*p, 3, 1.0);
  const auto fm = random_features(3, 4, 5, 2);
  const auto tokens = linear_project(*p, fm).tokens;
  const Tensor w = p->parameter("proj.weight"), b = p->parameter("proj.bias");
  std::vector<double> expect;
  for (std::size_t n = 0; n < 12; ++n)
    for (std::size_t o = 0; o < 7; ++o) {
      double acc = b.data()[o];
      for (std::size_t i = 0; i < 5; ++i) acc += w.data()[o * 5 + i] * fm.features.data()[n * 5 + i];
      expect.push_back(acc);
    }
  EXPECT_LT(max_abs_diff(tokens.data(), expect), 1e-12);
}

TEST(Mlp, IdentityTwoLayerIsGeluPassThrough) {
  auto p = make_projector(make_spec(ProjectorKind::mlp, 9, 4, 4));
  set_identity(p->parameter("layers.0.weight"));
  set_identity(p->parameter("layers.1.weight"));
  const auto fm = random_features(3, 3, 4, 5);
  const auto tokens = mlp_project(*p, fm).tokens;
  ASSERT_EQ(tokens.shape(), (Shape{9, 4}));
  for (std::size_t i = 0; i < tokens.numel(); ++i) {
    const double x = fm.features.data()[i];
    EXPECT_NEAR(tokens.data()[i], 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))), 1e-15);
  }
}

TEST(Mlp, DepthRange) {
  auto spec = make_spec(ProjectorKind::mlp, 4, 4, 8);
  spec.mlp_layers = 6;
  auto p = make_projector(spec);
  EXPECT_EQ(mlp_project(*p, random_features(2, 2, 4, 1)).tokens.shape(), (Shape{4, 8}));
  spec.mlp_layers = 1;
  EXPECT_THROW(make_projector(spec), std::invalid_argument);
  spec.mlp_layers = 7;
  EXPECT_THROW(make_projector(spec), std::invalid_argument);
}

TEST(Mlp, ZeroWeightsGiveZeroTokens) {
  auto spec = make_spec(ProjectorKind::mlp, 4, 4, 8);
  spec.mlp_layers = 3;
  auto p = make_projector(spec);
  for (const auto& nt : p->parameters()) fill(nt.tensor, 0.0);
  const auto tokens = mlp_project(*p, random_features(2, 2, 4, 1)).tokens;
  for (double v : tokens.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, RejectsTokenCountOtherThanN) {
  auto p = make_projector(make_spec(ProjectorKind::mlp, 5, 4, 4));
  EXPECT_THROW(mlp_project(*p, random_features(2, 2, 4, 1)), std::invalid_argument);
}

// ---- resampler -------------------------------------------------------------

TEST(Resampler, UniformAttentionLimitIsFeatureMean) {
  auto spec = make_spec(ProjectorKind::resampler, 1, 4, 4);
  spec.depth = 1;
  auto p = make_projector(spec);
  fill(p->parameter("queries"), 0.0);
  set_identity(p->parameter("input.weight"));
  fill(p->parameter("blocks.0.attn.q.weight"), 0.0);
  fill(p->parameter("blocks.0.attn.k.weight"), 0.0);
  set_identity(p->parameter("blocks.0.attn.v.weight"));
  set_identity(p->parameter("blocks.0.attn.o.weight"));
  fill(p->parameter("blocks.0.ffn.down.weight"), 0.0);
  set_identity(p->parameter("readout.weight"));
  const auto fm = random_features(2, 2, 4, 8);
  const auto [tokens, trace] = resampler_project(*p, fm);
  ASSERT_EQ(tokens.tokens.shape(), (Shape{1, 4}));
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (std::size_t n = 0; n < 4; ++n) mean += fm.features.data()[n * 4 + c] / 4.0;
    EXPECT_NEAR(tokens.tokens.data()[c], mean, 1e-14);
  }
  for (double v : trace.mass) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Resampler, AnyTokenCountFromN256) {
  const auto fm = random_features(16, 16, 8, 4);
  for (std::size_t m : {64, 144, 256, 400}) {
    auto spec = make_spec(ProjectorKind::resampler, m, 8, 6);
    auto p = make_projector(spec);
    EXPECT_EQ(p->forward(fm).tokens.tokens.shape(), (Shape{m, 6}));
  }
}

TEST(Resampler, AttentionRowsSumToOne) {
  auto spec = make_spec(ProjectorKind::resampler, 7, 8, 8);
  spec.depth = 2;
  auto p = make_projector(spec);
  fixtures::randomize(*p, 11);
  const auto [tokens, trace] = resampler_project(*p, random_features(4, 5, 8, 12));
  ASSERT_EQ(trace.layers, 2u);
  ASSERT_EQ(trace.queries, 7u);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t q = 0; q < 7; ++q) EXPECT_NEAR(trace.slice_sum(l, q), 1.0, 1e-9);
}

TEST(Resampler, PositionTableIsTiedToGrid) {
  auto spec = make_spec(ProjectorKind::resampler, 4, 8, 8);
  spec.depth = 1;
  spec.pos_emb = true;
  spec.grid_height = 4;
  spec.grid_width = 4;
  auto with = make_projector(spec);
  EXPECT_EQ(with->parameter("pos_emb").shape(), (Shape{16, 8}));
  EXPECT_NO_THROW(with->forward(random_features(4, 4, 8, 1)));
  EXPECT_THROW(with->forward(random_features(3, 3, 8, 1)), std::invalid_argument);
  spec.pos_emb = false;
  auto without = make_projector(spec);
  EXPECT_EQ(with->parameter_count() - without->parameter_count(), 16u * 8u);
}

// ---- c_abstractor ----------------------------------------------------------

TEST(CAbstractor, IdentityResidualReducesToPooling) {
  for (auto block : {ConvBlockKind::resnet, ConvBlockKind::convnext}) {
    for (auto [h, m] : {std::pair<std::size_t, std::size_t>{8, 16}, {16, 144}, {6, 9}}) {
      auto spec = make_spec(ProjectorKind::c_abstractor, m, 8, 8);
      spec.conv_block = block;
      auto p = make_projector(spec);
      set_identity(p->parameter("readout.weight"));
      const auto fm = random_features(h, h, 8, 21);
      const auto tokens = c_abstractor_project(*p, fm).tokens;
      EXPECT_LT(max_abs_diff(tokens.data(), pool_oracle(fm, std::size_t(std::lround(std::sqrt(double(m)))))), 1e-12)
          << to_string(block) << " M=" << m;
    }
  }
}

TEST(CAbstractor, PaperTokenCountsFrom16x16) {
  const auto fm = random_features(16, 16, 8, 2);
  auto spec = make_spec(ProjectorKind::c_abstractor, 144, 8, 12);
  EXPECT_EQ(c_abstractor_project(*make_projector(spec), fm).tokens.shape(), (Shape{144, 12}));
  spec.num_tokens = 400;
  EXPECT_THROW(c_abstractor_project(*make_projector(spec), fm), std::invalid_argument);
  spec.allow_upsample = true;
  EXPECT_EQ(c_abstractor_project(*make_projector(spec), fm).tokens.shape(), (Shape{400, 12}));
}

TEST(CAbstractor, RejectsNonSquareTokenCount) {
  auto spec = make_spec(ProjectorKind::c_abstractor, 150, 8, 8);
  EXPECT_THROW(make_projector(spec), std::invalid_argument);
}

TEST(CAbstractor, BlockVariantsRunAndDiffer) {
  const auto fm = random_features(6, 6, 8, 9);
  std::vector<std::vector<double>> outputs;
  for (auto block : {ConvBlockKind::resnet, ConvBlockKind::convnext, ConvBlockKind::standard}) {
    auto spec = make_spec(ProjectorKind::c_abstractor, 9, 8, 4);
    spec.conv_block = block;
    spec.depth = 1;
    auto p = make_projector(spec);
    fixtures::randomize(*p, 5);
    const auto t = p->forward(fm).tokens.tokens;
    EXPECT_EQ(t.shape(), (Shape{9, 4}));
    outputs.emplace_back(t.data().begin(), t.data().end());
  }
  EXPECT_GT(max_abs_diff(outputs[0], outputs[2]), 1e-6);
}

// ---- d_abstractor ----------------------------------------------------------

TEST(DAbstractor, ZeroOffsetsAddFeatureAtReferencePoint) {
  auto p = zero_offset_d_abstractor(16, 6, 1);
  const auto fm = random_features(4, 4, 6, 31);
  // random attention logits: A still sums to one, and every sample is the same point
  Rng rng(1);
  for (auto& v : p->parameter("blocks.0.weights.weight").mutable_data()) v = rng.uniform(-1, 1);
  const auto [tokens, trace] = d_abstractor_project(*p, fm);
  // z0 = pool(X) = X when M = N; one block adds X again.
  for (std::size_t i = 0; i < tokens.tokens.numel(); ++i) {
    EXPECT_NEAR(tokens.tokens.data()[i] - fm.features.data()[i], fm.features.data()[i], 1e-12);
  }
  for (std::size_t q = 0; q < 16; ++q) {
    EXPECT_NEAR(trace.at(0, q, q / 4, q % 4), 1.0, 1e-12);
    EXPECT_NEAR(trace.slice_sum(0, q), 1.0, 1e-12);
  }
}

TEST(DAbstractor, ManualReferenceGridForNineTokens) {
  const auto p = manual_reference_points(9);
  const double c[3] = {1.0 / 6.0, 0.5, 5.0 / 6.0};
  ASSERT_EQ(p.size(), 18u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_DOUBLE_EQ(p[2 * (i * 3 + j)], c[i]);
      EXPECT_DOUBLE_EQ(p[2 * (i * 3 + j) + 1], c[j]);
    }
  EXPECT_THROW(manual_reference_points(10), std::invalid_argument);
}

TEST(DAbstractor, SingleBlockMatchesBruteForceOracle) {
  for (std::size_t h : {3, 6, 8}) {
    auto spec = make_spec(ProjectorKind::d_abstractor, 9, 8, 5);
    spec.depth = 1;
    spec.offsets = 4;
    spec.seed = h;
    auto p = make_projector(spec);
    fixtures::randomize(*p, 40 + h);
    const auto fm = random_features(h, h, 8, 50 + h);
    const auto tokens = p->forward(fm).tokens.tokens;
    const auto expect = oracle::d_abstractor_forward(*p, fm);
    double err = 0.0;
    for (std::size_t q = 0; q < 9; ++q)
      for (std::size_t o = 0; o < 5; ++o) err = std::max(err, std::abs(tokens.data()[q * 5 + o] - expect[q][o]));
    EXPECT_LT(err, 1e-10) << "grid " << h;
  }
}

TEST(DAbstractor, StackedBlocksMatchOracle) {
  auto spec = make_spec(ProjectorKind::d_abstractor, 16, 6, 6);
  spec.offsets = 3;
  auto p = make_projector(spec);
  fixtures::randomize(*p, 77, 0.3);
  const auto fm = random_features(8, 8, 6, 78);
  const auto tokens = p->forward(fm).tokens.tokens;
  const auto expect = oracle::d_abstractor_forward(*p, fm);
  double err = 0.0;
  for (std::size_t q = 0; q < 16; ++q)
    for (std::size_t o = 0; o < 6; ++o) err = std::max(err, std::abs(tokens.data()[q * 6 + o] - expect[q][o]));
  EXPECT_LT(err, 1e-10);
}

TEST(DAbstractor, OffsetWeightsSumToOnePerQuery) {
  auto spec = make_spec(ProjectorKind::d_abstractor, 9, 8, 8);
  spec.depth = 2;
  auto p = make_projector(spec);
  fixtures::randomize(*p, 3);
  const auto [tokens, trace] = d_abstractor_project(*p, random_features(5, 7, 8, 4));
  EXPECT_EQ(trace.height, 5u);
  EXPECT_EQ(trace.width, 7u);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t q = 0; q < 9; ++q) EXPECT_NEAR(trace.slice_sum(l, q), 1.0, 1e-12);
}

TEST(DAbstractor, FreshModelSamplesNearReferencePoints) {
  auto spec = make_spec(ProjectorKind::d_abstractor, 16, 8, 8);
  spec.depth = 1;
  auto p = make_projector(spec);
  const auto [tokens, trace] = d_abstractor_project(*p, random_features(16, 16, 8, 4));
  // Offsets are scaled by 1/sqrt(M): the mass centroid of each query stays
  // within one reference cell (4 pixels here) of its reference point.
  for (std::size_t q = 0; q < 16; ++q) {
    double r = 0.0, c = 0.0;
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) {
        r += trace.at(0, q, i, j) * double(i);
        c += trace.at(0, q, i, j) * double(j);
      }
    const double ref_r = double(q / 4) * 4 + 1.5, ref_c = double(q % 4) * 4 + 1.5;
    EXPECT_LT(std::hypot(r - ref_r, c - ref_c), 4.0) << "query " << q;
  }
}

TEST(DAbstractor, VariantsConstructAndRun) {
  const auto fm = random_features(4, 4, 8, 1);
  for (int variant = 0; variant < 4; ++variant) {
    auto spec = make_spec(ProjectorKind::d_abstractor, 4, 8, 8);
    spec.depth = 2;
    spec.self_attn = variant & 1;
    spec.pooled_queries = variant & 2;
    spec.manual_ref_points = variant != 3;
    auto p = make_projector(spec);
    const auto out = p->forward(fm, true);
    EXPECT_EQ(out.tokens.tokens.shape(), (Shape{4, 8}));
    for (double v : out.tokens.tokens.data()) EXPECT_TRUE(std::isfinite(v));
  }
  auto spec = make_spec(ProjectorKind::d_abstractor, 10, 8, 8);
  EXPECT_THROW(make_projector(spec), std::invalid_argument);
  spec.num_tokens = 9;
  spec.offsets = 0;
  EXPECT_THROW(make_projector(spec), std::invalid_argument);
}

// ---- flexibility, parameters, gradients ------------------------------------

TEST(Flexibility, FlexibleKindsAcceptAnyAdmissibleM) {
  const auto fm = random_features(4, 4, 4, 1);
  for (auto kind : {ProjectorKind::resampler, ProjectorKind::c_abstractor, ProjectorKind::d_abstractor}) {
    for (std::size_t m : {1, 4, 9, 16, 25, 36}) {
      auto spec = make_spec(kind, m, 4, 4);
      spec.depth = 1;
      spec.allow_upsample = true;
      EXPECT_EQ(make_projector(spec)->forward(fm).tokens.count(), m) << to_string(kind) << " M=" << m;
    }
  }
  for (auto kind : {ProjectorKind::linear, ProjectorKind::mlp}) {
    for (std::size_t m : {1, 4, 9, 25}) {
      auto p = make_projector(make_spec(kind, m, 4, 4));
      EXPECT_THROW(p->forward(fm), std::invalid_argument) << to_string(kind) << " M=" << m;
    }
    EXPECT_NO_THROW(make_projector(make_spec(kind, 16, 4, 4))->forward(fm));
  }
}

TEST(Parameters, ReportIsDeterministicAndInputIndependent) {
  for (auto kind : {ProjectorKind::linear, ProjectorKind::mlp, ProjectorKind::resampler, ProjectorKind::c_abstractor,
                    ProjectorKind::d_abstractor}) {
    auto spec = make_spec(kind, 16, 8, 12);
    auto a = make_projector(spec);
    spec.seed = 99;
    auto b = make_projector(spec);
    const auto before = a->parameter_report();
    a->forward(random_features(4, 4, 8, 1));
    const auto after = a->parameter_report();
    ASSERT_EQ(before.size(), after.size());
    ASSERT_EQ(before.size(), b->parameter_report().size());
    for (std::size_t i = 0; i < before.size(); ++i) {
      EXPECT_EQ(before[i].name, after[i].name);
      EXPECT_EQ(before[i].count, after[i].count);
      EXPECT_EQ(before[i].count, b->parameter_report()[i].count);
    }
    EXPECT_EQ(a->parameter_count(), b->parameter_count());
    std::size_t total = 0;
    for (const auto& g : before) total += g.count;
    EXPECT_EQ(total, a->parameter_count());
  }
}

TEST(Parameters, LinearCountIsClosedForm) {
  EXPECT_EQ(make_projector(make_spec(ProjectorKind::linear, 4, 1024, 4096))->parameter_count(), 1024u * 4096u + 4096u);
}

TEST(Gradients, EveryProjectorPassesGradCheck) {
  const auto fm = random_features(4, 4, 4, 17);
  for (auto kind : {ProjectorKind::linear, ProjectorKind::mlp, ProjectorKind::resampler, ProjectorKind::c_abstractor,
                    ProjectorKind::d_abstractor}) {
    const bool one_to_one = kind == ProjectorKind::linear || kind == ProjectorKind::mlp;
    auto spec = make_spec(kind, one_to_one ? 16 : 4, 4, 3);
    spec.depth = 1;
    auto p = make_projector(spec);
    fixtures::randomize(*p, 23);
    auto f = [&] { return fixtures::probe(p->forward(fm).tokens.tokens); };
    const auto report = grad_check(f, p->parameters(), 1e-5, 1e-4);
    EXPECT_TRUE(report.pass) << to_string(kind) << " max rel err " << report.max_relative_error;
    for (const auto& e : report.per_param)
      if (!report.pass && e.max_relative_error > 1e-6) std::cerr << to_string(kind) << ' ' << e.name << ' ' << e.max_relative_error << '\n';
  }
}

TEST(Gradients, OptionalVariantsPassGradCheck) {
  const auto fm = random_features(4, 4, 4, 19);
  std::vector<ProjectorSpec> specs;
  for (auto block : {ConvBlockKind::convnext, ConvBlockKind::standard}) {
    auto s = make_spec(ProjectorKind::c_abstractor, 4, 4, 3);
    s.depth = 1;
    s.conv_block = block;
    specs.push_back(s);
  }
  {
    auto s = make_spec(ProjectorKind::resampler, 3, 4, 3);
    s.depth = 1;
    s.pos_emb = true;
    s.grid_height = s.grid_width = 4;
    specs.push_back(s);
  }
  {
    auto s = make_spec(ProjectorKind::d_abstractor, 4, 4, 3);
    s.depth = 1;
    s.self_attn = true;
    s.pooled_queries = false;
    s.manual_ref_points = false;
    specs.push_back(s);
  }
  for (const auto& spec : specs) {
    auto p = make_projector(spec);
    fixtures::randomize(*p, 29);
    auto f = [&] { return fixtures::probe(p->forward(fm).tokens.tokens); };
    const auto report = grad_check(f, p->parameters(), 1e-5, 1e-4);
    EXPECT_TRUE(report.pass) << nlohmann::json(spec).dump() << " max rel err " << report.max_relative_error;
  }
}

// ---- export and checkpoints ------------------------------------------------

TEST(Export, UniformAndOneHotTraces) {
  const auto dir = scratch_dir("export_basic");
  AttentionTrace trace{1, 2, 3, 4, std::vector<double>(24, 1.0 / 12.0)};
  for (std::size_t i = 0; i < 12; ++i) trace.at(0, 1, i / 4, i % 4) = 0.0;
  trace.at(0, 1, 2, 1) = 1.0;
  const auto paths = export_attention_trace(trace, dir.string());
  ASSERT_EQ(paths.size(), 3u);
  std::size_t w = 0, h = 0;
  const auto uniform = read_pgm_pixels((dir / "layer0_query0.pgm").string(), w, h);
  EXPECT_EQ(w, 4u);
  EXPECT_EQ(h, 3u);
  for (auto px : uniform) EXPECT_EQ(px, uniform[0]);
  const auto onehot = read_pgm_pixels((dir / "layer0_query1.pgm").string(), w, h);
  for (std::size_t i = 0; i < onehot.size(); ++i) EXPECT_EQ(onehot[i], i == 2 * 4 + 1 ? 255 : 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "layer0_aggregate.pgm"));
  std::filesystem::remove_all(dir);
}

TEST(Export, ZeroOffsetTraceLightsReferenceCells) {
  const auto dir = scratch_dir("export_dabs");
  auto p = zero_offset_d_abstractor(4, 4, 2);
  const auto [tokens, trace] = d_abstractor_project(*p, random_features(4, 4, 4, 2));
  export_attention_trace(trace, dir.string());
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t q = 0; q < 4; ++q) {
      std::size_t w = 0, h = 0;
      const auto px = read_pgm_pixels((dir / ("layer" + std::to_string(l) + "_query" + std::to_string(q) + ".pgm")).string(), w, h);
      // reference point of query q on the 2x2 grid covers a 2x2 patch of the 4x4 map
      const std::size_t r0 = (q / 2) * 2, c0 = (q % 2) * 2;
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          const bool inside = i >= r0 && i < r0 + 2 && j >= c0 && j < c0 + 2;
          EXPECT_EQ(px[i * 4 + j], inside ? 255 : 0) << "layer " << l << " query " << q;
        }
    }
  std::filesystem::remove_all(dir);
}

TEST(Export, UnwritablePathIsAnError) {
  const auto dir = scratch_dir("export_blocked");
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "file") << "x";
  AttentionTrace trace{1, 1, 1, 1, {1.0}};
  EXPECT_ANY_THROW(export_attention_trace(trace, (dir / "file" / "sub").string()));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RoundTripRestoresOutputs) {
  const auto dir = scratch_dir("ckpt");
  std::filesystem::create_directories(dir);
  auto spec = make_spec(ProjectorKind::d_abstractor, 9, 8, 8);
  spec.depth = 2;
  auto a = make_projector(spec);
  fixtures::randomize(*a, 1);
  const nlohmann::json echo = spec;
  const auto path = (dir / "p.ckpt").string();
  save_checkpoint(path, echo.dump(), a->parameters());

  const auto ckpt = load_checkpoint(path);
  EXPECT_EQ(nlohmann::json::parse(ckpt.spec_echo), echo);
  auto b = make_projector(nlohmann::json::parse(ckpt.spec_echo).get<ProjectorSpec>());
  EXPECT_NE(parameter_checksum(a->parameters()), parameter_checksum(b->parameters()));
  restore_parameters(ckpt, b->parameters());
  EXPECT_EQ(parameter_checksum(a->parameters()), parameter_checksum(b->parameters()));
  const auto fm = random_features(6, 6, 8, 2);
  EXPECT_EQ(max_abs_diff(a->forward(fm).tokens.tokens.data(), b->forward(fm).tokens.tokens.data()), 0.0);

  spec.vision_width = 4;
  auto wrong = make_projector(spec);
  EXPECT_THROW(restore_parameters(ckpt, wrong->parameters()), std::runtime_error);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint at all";
  EXPECT_THROW(load_checkpoint((dir / "junk.ckpt").string()), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Spec, JsonRoundTrip) {
  ProjectorSpec s;
  s.kind = ProjectorKind::resampler;
  s.num_tokens = 64;
  s.pos_emb = true;
  s.conv_block = ConvBlockKind::convnext;
  const nlohmann::json j = s;
  const auto back = j.get<ProjectorSpec>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_THROW(nlohmann::json({{"kind", "qformer"}}).get<ProjectorSpec>(), std::invalid_argument);
}
