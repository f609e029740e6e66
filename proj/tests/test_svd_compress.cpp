// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include <Eigen/SVD>

#include "familykit/checkpoint.hpp"
#include "familykit/compress.hpp"
#include "familykit/eval.hpp"
#include "familykit/expand.hpp"
#include "familykit/linalg.hpp"
#include "familykit/json_io.hpp"
#include "test_support.hpp"

using namespace familykit;
using familykit::testing::random_matrix;

namespace {

MatrixD spd(std::uint64_t seed, Index n, Index samples) {
  const MatrixD x = random_matrix<double>(seed, n, samples);
  return x * x.transpose();
}

// Optimal rank-r error of W X over all rank-r W' when X has full row rank:
// the tail singular values of W X itself.
double eckart_young(const MatrixD& wx, Index r) {
  Eigen::JacobiSVD<MatrixD> s(wx);
  return std::sqrt(s.singularValues().tail(s.singularValues().size() - r).squaredNorm());
}

struct Trained {
  FamilialModel<float> base;
  FamilialModel<float> expanded;
  std::vector<TokenId> heldout;
  std::vector<TokenBatch> calib;
};

// Small joint run, expansion, and a short expansion run; shared across cases.
const Trained& trained() {
  static const Trained t = [] {
    const auto tokens = ByteTokenizer::encode(familykit::testing::synthetic_corpus(5, 24000));
    const std::vector<TokenId> train(tokens.begin(), tokens.begin() + 20000);
    Trained out;
    out.heldout.assign(tokens.begin() + 20000, tokens.end());
    TrainConfig cfg;
    cfg.total_steps = 80;
    cfg.warmup_steps = 10;
    cfg.batch = 4;
    cfg.seq_len = 32;
    TrainState st{init_model<float>(desk_config(), 1), {}, 0, {}};
    const WindowSampler sampler(train, cfg.seq_len, cfg.batch, 2);
    const auto sched = LambdaSchedule::default_for(2, cfg.total_steps);
    for (std::int64_t s = 0; s < cfg.total_steps; ++s) train_step(st, cfg, sched, sampler.batch_at(s));
    out.base = st.model;
    TrainState ex{expand(st.model, ExpansionSpec{}).model, {}, 0, {}};
    cfg.total_steps = 40;
    const auto esched = expansion_schedule(ex.model.config, 0, cfg.total_steps);
    for (std::int64_t s = 0; s < cfg.total_steps; ++s) train_step(ex, cfg, esched, sampler.batch_at(1000 + s));
    out.expanded = ex.model;
    out.calib = eval_batches(std::span<const TokenId>(train).subspan(0, 16 * 64), 64, 8);
    return out;
  }();
  return t;
}

}  // namespace

TEST_CASE("Gram accumulation") {
  GramStat g;
  MatrixF e = MatrixF::Zero(1, 4);
  e(0, 2) = 1.0f;
  g.add(e);
  MatrixD want = MatrixD::Zero(4, 4);
  want(2, 2) = 1.0;
  CHECK(g.gram == want);
  CHECK(g.samples == 1);

  const auto& t = trained();
  auto scope = [&](const std::string& n) { return in_expanded_scope(t.expanded.config, n); };
  TokenBatch joined = t.calib[0];
  joined.batch += t.calib[1].batch;
  joined.ids.insert(joined.ids.end(), t.calib[1].ids.begin(), t.calib[1].ids.end());
  const auto two = capture_activations(t.expanded, std::span(t.calib).subspan(0, 2), scope);
  const auto one = capture_activations(t.expanded, std::span(&joined, 1), scope);
  REQUIRE(two.grams.size() == 22);
  for (const auto& [name, stat] : two.grams) {
    CHECK_FALSE(name.starts_with("backbone"));
    CHECK(stat.samples == 1024);
    const double rel = (stat.gram - one.grams.at(name).gram).norm() / stat.gram.norm();
    CHECK_MESSAGE(rel < 1e-6, name);
  }
  CHECK(two.grams.count("exits.0.lm_proj") == 1);
  CHECK(two.grams.count("exits.1.lm_proj") == 0);
  CHECK(two.grams.count("exits.0.blocks.0.wq") == 0);
  CHECK_THROWS_AS(capture_activations(t.expanded, std::span<const TokenBatch>(), scope), Error);
}

TEST_CASE("Gram identity") {
  const MatrixD x = random_matrix<double>(1, 6, 40);
  const MatrixD m = random_matrix<double>(2, 5, 6);
  const double direct = (m * x).norm();
  CHECK(std::abs(gram_norm(m, x * x.transpose()) - direct) <= 1e-5 * direct);
}

TEST_CASE("whitening") {
  SUBCASE("identity") {
    const auto w = whiten(MatrixD::Identity(3, 3));
    CHECK(w.path == WhiteningPath::cholesky);
    CHECK(w.factor == MatrixD::Identity(3, 3));
    CHECK(w.inverse == MatrixD::Identity(3, 3));
    const auto s = whiten(MatrixD::Identity(3, 3), 0.0, false);
    CHECK(s.sqrt_s.isOnes(1e-12));
    CHECK((s.factor * s.inverse).isIdentity(1e-12));
  }
  SUBCASE("diagonal") {
    MatrixD g = MatrixD::Zero(2, 2);
    g(0, 0) = 4;
    g(1, 1) = 1;
    const auto s = whiten(g, 0.0, false);
    CHECK(s.sqrt_s(0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(s.sqrt_s(1) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("round trip on random SPD") {
    const MatrixD g = spd(3, 7, 30);
    for (bool chol : {true, false}) {
      const auto w = whiten(g, 0.0, chol);
      CHECK((w.factor * w.inverse - MatrixD::Identity(7, 7)).cwiseAbs().maxCoeff() < 1e-5);
      CHECK(relative_frobenius(w.factor * w.factor.transpose(), g) < 1e-10);
    }
  }
  SUBCASE("semidefinite Gram falls back to SVD") {
    const MatrixD g = spd(4, 6, 3);
    const auto w = whiten(g);
    CHECK(w.fell_back);
    CHECK(w.path == WhiteningPath::svd);
    CHECK(w.inverse.allFinite());
    CHECK(whiten(g, 1e-6).path == WhiteningPath::cholesky);
  }
}

TEST_CASE("rank_for_ratio") {
  CHECK(rank_for_ratio(32, 32, 0.4) == 9);     // floor(0.6 * 1024 / 64)
  CHECK(rank_for_ratio(128, 32, 0.4) == 15);   // floor(0.6 * 4096 / 160)
  CHECK(rank_for_ratio(259, 32, 0.4) == 17);   // floor(0.6 * 8288 / 291)
  CHECK(rank_for_ratio(8, 8, 0.99) == 1);
  CHECK(rank_for_ratio(8, 6, 0.0) == 3);
  CHECK_THROWS_AS(rank_for_ratio(8, 8, 1.0), Error);
}

TEST_CASE("truncation loss") {
  const MatrixF w = random_matrix<float>(5, 8, 8);
  const MatrixD wd = w.cast<double>();
  SUBCASE("identity Gram matches the plain singular value tail") {
    Eigen::JacobiSVD<MatrixD> s(wd);
    for (Index r = 1; r <= 8; ++r) {
      const double tail = s.singularValues().tail(8 - r).squaredNorm();
      const double l = truncation_loss(w, MatrixD::Identity(8, 8), r);
      CHECK(std::abs(l * l - tail) <= 1e-9 * wd.squaredNorm());
    }
  }
  SUBCASE("full rank and exact low rank") {
    const MatrixD g = spd(6, 8, 50);
    CHECK(truncation_loss(w, g, 8) <= 1e-4 * gram_norm(wd, g));
    const MatrixF rank1 = random_matrix<float>(7, 8, 1) * random_matrix<float>(8, 1, 8);
    for (Index r : {1, 3, 8}) CHECK(truncation_loss(rank1, g, r) <= 1e-5 * gram_norm(rank1.cast<double>(), g));
  }
  SUBCASE("equals the measured residual of the truncated weights") {
    const MatrixD x = random_matrix<double>(8, 8, 30);
    const MatrixD g = x * x.transpose();
    for (Index r = 1; r <= 8; ++r) {
      const auto f = decompose_rank(w, whiten(g), r);
      const double measured = ((wd - f.a.cast<double>() * f.b.cast<double>()) * x).norm();
      CHECK(std::abs(truncation_loss(w, g, r) - measured) <= 1e-5 * (wd * x).norm());
    }
  }
  SUBCASE("nonincreasing in rank") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const MatrixD g = spd(10 + seed, 8, seed % 2 ? 5 : 12);  // odd seeds: singular Gram
      double prev = std::numeric_limits<double>::infinity();
      for (Index r = 1; r <= 8; ++r) {
        const double l = truncation_loss(w, g, r);
        CHECK(l <= prev);
        prev = l;
      }
    }
  }
}

TEST_CASE("decompose") {
  SUBCASE("full rank with identity whitening reconstructs W") {
    const MatrixF w = random_matrix<float>(20, 8, 6);
    const auto f = decompose_rank(w, whiten(MatrixD::Identity(6, 6)), 6);
    CHECK(relative_frobenius(f.a * f.b, w) < 1e-4);
    const MatrixF low = random_matrix<float>(21, 8, 2) * random_matrix<float>(22, 2, 6);
    const auto z = decompose(low, MatrixD::Identity(6, 6), 0.0);
    CHECK(z.a.cols() == 3);
    CHECK(relative_frobenius(z.a * z.b, low) < 1e-5);
  }
  SUBCASE("full-rank reconstruction of WX under a random Gram") {
    const MatrixD x = random_matrix<double>(23, 6, 30);
    const MatrixF w = random_matrix<float>(24, 8, 6);
    const auto f = decompose_rank(w, whiten(x * x.transpose()), 6);
    CHECK(relative_frobenius((f.a * f.b).cast<double>() * x, w.cast<double>() * x) < 1e-4);
  }
  SUBCASE("rank-1 weights are recovered at any rank") {
    const MatrixF w = random_matrix<float>(25, 8, 1) * random_matrix<float>(26, 1, 6);
    const MatrixD g = spd(27, 6, 20);
    for (Index r : {1, 2, 6}) {
      const auto f = decompose_rank(w, whiten(g), r);
      CHECK((f.a * f.b - w).cwiseAbs().maxCoeff() < 1e-5);
    }
  }
  SUBCASE("identity Gram equals plain truncated SVD") {
    const MatrixF w = random_matrix<float>(28, 8, 6);
    Eigen::JacobiSVD<MatrixD> s(w.cast<double>(), Eigen::ComputeThinU | Eigen::ComputeThinV);
    for (Index r = 1; r <= 6; ++r) {
      const MatrixD oracle =
          s.matrixU().leftCols(r) * s.singularValues().head(r).asDiagonal() * s.matrixV().leftCols(r).transpose();
      const auto f = decompose_rank(w, whiten(MatrixD::Identity(6, 6)), r);
      CHECK((f.a.cast<double>() * f.b.cast<double>() - oracle).cwiseAbs().maxCoeff() < 1e-5);
    }
  }
  SUBCASE("optimal in whitened space") {
    const MatrixD x = random_matrix<double>(29, 6, 25);
    const MatrixF w = random_matrix<float>(30, 8, 6);
    const MatrixD wx = w.cast<double>() * x;
    const auto f = decompose_rank(w, whiten(x * x.transpose()), 3);
    const double got = ((w - f.a * f.b).cast<double>() * x).norm();
    const double best = eckart_young(wx, 3);
    CHECK(std::abs(got - best) <= 1e-5 * wx.norm());
    // Plain (unwhitened) truncation is a valid rank-3 candidate and cannot beat it.
    const auto plain = decompose_rank(w, whiten(MatrixD::Identity(6, 6)), 3);
    CHECK(got <= ((w - plain.a * plain.b).cast<double>() * x).norm() + 1e-6);
    for (std::uint64_t s = 0; s < 20; ++s) {
      const MatrixD cand = random_matrix<double>(100 + s, 8, 3) * random_matrix<double>(200 + s, 3, 6);
      CHECK(got <= ((w.cast<double>() - cand) * x).norm() + 1e-6);
    }
  }
}

TEST_CASE("allocate_ratios") {
  const std::vector<MatrixGroup> same{{"g", {"a", "b", "c"}, {5.0, 5.0, 5.0}}};
  const auto eq = allocate_ratios(same, 0.4);
  for (double r : eq.ratio[0]) CHECK(r == 0.4);

  const std::vector<MatrixGroup> two{{"g", {"a", "b"}, {std::exp(0.5), std::exp(1.0)}}};
  const auto a = allocate_ratios(two, 0.3);
  CHECK(a.score[0][0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(a.ratio[0][0] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(a.ratio[0][1] == doctest::Approx(0.2).epsilon(1e-12));

  CounterRng rng(9);
  std::vector<MatrixGroup> groups;
  for (int g = 0; g < 4; ++g) {
    MatrixGroup grp{"g" + std::to_string(g), {}, {}};
    for (int i = 0; i < 7; ++i) {
      grp.members.push_back(std::to_string(i));
      grp.l_min.push_back(2.0 + 50.0 * rng.uniform());
    }
    groups.push_back(grp);
  }
  const auto r = allocate_ratios(groups, 0.4);
  for (const auto& u : r.unclamped) {
    double mean = 0;
    for (double v : u) mean += v;
    CHECK(std::abs(mean / static_cast<double>(u.size()) - 0.4) < 1e-12);
  }
  for (const auto& g : r.ratio) {
    for (double v : g) CHECK((v >= 0.05 && v <= 0.95));
  }
  CHECK_FALSE(r.degenerate);

  const std::vector<MatrixGroup> tiny{{"g", {"a", "b"}, {0.5, 0.01}}};
  const auto d = allocate_ratios(tiny, 0.4);
  CHECK(d.degenerate);
  CHECK(d.ratio[0][0] == 0.4);
  CHECK(d.ratio[0][1] == 0.4);
  CHECK_THROWS_AS(allocate_ratios(tiny, 1.0), Error);
}

TEST_CASE("plans on an expanded model") {
  const auto& t = trained();
  auto scope = [&](const std::string& n) { return in_expanded_scope(t.expanded.config, n); };
  const auto calib = capture_activations(t.expanded, t.calib, scope);

  SUBCASE("empty plan leaves the model unchanged") {
    const auto same = apply_compression(t.expanded, CompressionPlan{});
    CHECK(parameter_hash(same) == parameter_hash(t.expanded));
  }
  SUBCASE("R = 0.4 removes 40% of the planned and of the added parameters") {
    CompressionOptions opt;
    const auto plan = build_plan(t.expanded, calib, opt);
    REQUIRE(plan.entries.size() == 22);
    CHECK(std::abs(plan.achieved_removal() - 0.4) <= 0.02);
    CHECK(plan.achieved_removal() >= 0.4);
    const auto c = apply_compression(t.expanded, plan);
    const Index scope_before = plan.params_before();
    Index scope_after = 0;
    c.for_each_parameter([&](const std::string& n, const MatrixF& p) {
      const std::string dense = n.ends_with(".A") || n.ends_with(".B") ? n.substr(0, n.size() - 2) : n;
      if (scope(dense)) scope_after += p.size();
    });
    CHECK(scope_after == plan.params_after());
    CHECK(param_count(t.expanded).total - param_count(c).total == scope_before - scope_after);

    Index added_before = 0, added_after = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      added_before += block_parameters(t.expanded.exits[0].expansion[j]);
      added_after += block_parameters(c.exits[0].expansion[j]);
    }
    const double added_removal = 1.0 - static_cast<double>(added_after) / static_cast<double>(added_before);
    MESSAGE("plan removal " << plan.achieved_removal() << ", added-block removal " << added_removal);
    CHECK(std::abs(added_removal - 0.4) <= 0.02);

    // Untouched parameters stay bit-identical.
    t.expanded.for_each_parameter([&](const std::string& n, const MatrixF& p) {
      if (scope(n)) return;
      auto* q = const_cast<FamilialModel<float>&>(c).find_parameter(n);
      REQUIRE(q);
      CHECK(*q == p);
    });
    CHECK(c.exits[0].lm_proj.factored());
    CHECK(c.trainable("exits.0.lm_proj.A"));

    std::ostringstream js;
    write_plan_json(js, plan);
    const json doc = json::parse(js.str());
    CHECK(doc.at("matrices").size() == 22);
    Index before = 0, after = 0;
    for (const auto& m : doc.at("matrices")) {
      before += m.at("params_before").get<Index>();
      after += m.at("params_after").get<Index>();
      CHECK(m.at("rank").get<Index>() >= 1);
    }
    CHECK(std::abs(1.0 - static_cast<double>(after) / static_cast<double>(before) - 0.4) <= 0.02);
  }
  SUBCASE("full-rank plan matches the uncompressed logits") {
    CompressionOptions opt;
    opt.ratio = 0.01;
    opt.budget_correction = false;
    auto plan = build_plan(t.expanded, calib, opt);
    for (auto& e : plan.entries) {
      e.rank = std::min(e.out, e.in);
      const auto f = decompose_rank(*const_cast<FamilialModel<float>&>(t.expanded).find_parameter(e.name),
                                    whiten(calib.grams.at(e.name).gram, opt.ridge_rel), e.rank);
      e.a = f.a;
      e.b = f.b;
      e.params_after = (e.out + e.in) * e.rank;
    }
    const auto c = apply_compression(t.expanded, plan);
    const TokenBatch probe = t.calib[1];
    const auto a = forward_all_branches(t.expanded, probe);
    const auto b = forward_all_branches(c, probe);
    CHECK((a[0] - b[0]).cwiseAbs().maxCoeff() < 1e-3);
    CHECK(a[1] == b[1]);
  }
  SUBCASE("mismatched plans are rejected") {
    auto plan = build_plan(t.expanded, calib, CompressionOptions{});
    auto bad = plan;
    bad.entries[0].name = "exits.0.expand.9.wq";
    CHECK_THROWS_AS(apply_compression(t.expanded, bad), Error);
    bad = plan;
    bad.entries[0].a.resize(3, 3);
    CHECK_THROWS_AS(apply_compression(t.expanded, bad), Error);
    const auto once = apply_compression(t.expanded, plan);
    try {
      apply_compression(once, plan);
      FAIL("expected an integrity error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::integrity);
    }
  }
  SUBCASE("measure_compression") {
    const auto same = measure_compression(t.expanded, t.expanded, CompressionPlan{}, t.heldout, 64);
    for (std::size_t k = 0; k < 2; ++k) CHECK(same.compressed_perplexity[k] == same.base_perplexity[k]);
    CompressionOptions extreme;
    extreme.ratio = 0.95;
    const auto plan = build_plan(t.expanded, calib, extreme);
    const auto c = apply_compression(t.expanded, plan);
    const auto r = measure_compression(t.expanded, c, plan, t.heldout, 64);
    CHECK(r.compressed_perplexity[0] > r.base_perplexity[0]);
    CHECK(r.compressed_perplexity[1] == r.base_perplexity[1]);
    CHECK(r.params_after < r.params_before);
    std::ostringstream csv, text;
    write_report_csv(csv, r);
    write_report_text(text, r, plan);
    CHECK(csv.str().starts_with("branch,base_ppl,compressed_ppl,delta_ppl,relative_delta\n0,"));
    CHECK(text.str().find("branch 0: perplexity") != std::string::npos);
  }
  SUBCASE("compressed checkpoints round-trip") {
    const auto c = apply_compression(t.expanded, build_plan(t.expanded, calib, CompressionOptions{}));
    const auto dir = std::filesystem::temp_directory_path() / "familykit_compress_ckpt";
    std::filesystem::remove_all(dir);
    save_checkpoint(dir, c);
    const auto back = load_checkpoint(dir);
    CHECK(parameter_hash(back.model) == parameter_hash(c));
    CHECK(forward_branch(back.model, t.calib[0], 0) == forward_branch(c, t.calib[0], 0));
    std::filesystem::remove_all(dir);
  }
}
