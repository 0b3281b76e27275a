#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace c2crs;
using c2crs::testing::check_gradients;
using c2crs::testing::reference_recall;
using c2crs::testing::tiny_corpus;
using c2crs::testing::tiny_model_config;

TEST_CASE("rec_loss closed forms") {
  ad::Tape<double> t(false);
  SECTION("uniform scores over four items") {
    auto l = rec_loss(t.constant(Matrix<double>::Constant(4, 3, 0.25)), std::vector<int>{0, 2, 3});
    CHECK(l.scalar() == Catch::Approx(std::log(4.0)).margin(1e-6));
  }
  SECTION("confident prediction") {
    Matrix<double> logits = Matrix<double>::Zero(4, 1);
    logits(1, 0) = 30;
    CHECK(rec_loss(t.constant(logits), std::vector<int>{1}).scalar() <= 1e-6);
  }
  SECTION("batch mean") {
    Matrix<double> logits(3, 2);
    logits << 1, 0.2, -1, 2, 0.5, -0.3;
    const double a = rec_loss(t.constant(Matrix<double>(logits.col(0))), std::vector<int>{2}).scalar();
    const double b = rec_loss(t.constant(Matrix<double>(logits.col(1))), std::vector<int>{0}).scalar();
    CHECK(rec_loss(t.constant(logits), std::vector<int>{2, 0}).scalar() == Catch::Approx((a + b) / 2).epsilon(1e-12));
  }
  SECTION("targets outside the item set") {
    CHECK_THROWS_AS(rec_loss(t.constant(Matrix<double>::Zero(3, 1)), std::vector<int>{3}), Error);
    KnowledgeGraph kg(4, 1, {0, 1}, {});
    CHECK_THROWS_AS(rec_loss(t.constant(Matrix<double>::Zero(2, 1)), std::vector<EntityId>{3}, kg), Error);
  }
}

TEST_CASE("item scoring and ranking") {
  SECTION("probabilities sum to one") {
    Rng rng(4);
    Matrix<double> items(3, 6);
    for (Eigen::Index i = 0; i < items.size(); ++i) items.data()[i] = rng.normal();
    Vector<double> u(3);
    u << 0.4, -1.2, 2;
    auto p = score_items<double>(u, items);
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("dominant item ranks first") {
    Matrix<double> items = Matrix<double>::Identity(8, 8);
    Vector<double> u = 50.0 * items.col(7);
    auto r = rank_items(score_items<double>(u, items), {0, 1, 2, 3, 4, 5, 6, 7});
    CHECK(r.ranked_items.front() == 7);
  }
  SECTION("zero user vector is uniform and ties go to the lower id") {
    Matrix<double> items = Matrix<double>::Random(3, 5);
    auto p = score_items<double>(Vector<double>::Zero(3), items);
    for (double v : p) CHECK(v == Catch::Approx(0.2).margin(1e-12));
    auto r = rank_items(p, {9, 4, 7, 1, 3});
    CHECK(r.ranked_items == std::vector<EntityId>{1, 3, 4, 7, 9});
  }
  SECTION("scores are sorted and invariant to a logit shift") {
    std::vector<double> logits = {0.3, -2.0, 1.7, 0.3, 5.0};
    std::vector<double> shifted;
    for (double l : logits) shifted.push_back(l + 12.5);
    const std::vector<EntityId> ids = {10, 11, 12, 13, 14};
    auto a = rank_items(logits, ids), b = rank_items(shifted, ids);
    CHECK(a.ranked_items == b.ranked_items);
    CHECK(std::is_sorted(a.scores.rbegin(), a.scores.rend()));
  }
  SECTION("fewer than two items") { CHECK_THROWS_AS(score_items<double>(Vector<double>::Ones(2), Matrix<double>::Ones(2, 1)), Error); }
}

TEST_CASE("user representation") {
  Corpus c = tiny_corpus();
  C2crsModel<double> model(tiny_model_config(), shape_of(c), 8);
  ad::Tape<double> t(false);
  auto nodes = model.graph().nodes(t, c.kg);
  CHECK(model.recommender().user_representation(t, nodes, {2}).vector.value() == nodes.value().col(2));
  CHECK(model.recommender().user_representation(t, nodes, {}).cold);

  Matrix<double> same = Matrix<double>::Ones(nodes.rows(), nodes.cols()) * 0.3;
  CHECK(model.recommender().user_representation(t, t.constant(same), {1, 4, 5}).vector.value().isApprox(same.col(0)));

  auto dup = model.recommender().user_representation(t, nodes, {1, 4, 1});
  for (Eigen::Index i = 0; i < nodes.rows(); ++i) {
    const double lo = std::min(nodes.value()(i, 1), nodes.value()(i, 4));
    const double hi = std::max(nodes.value()(i, 1), nodes.value()(i, 4));
    CHECK(dup.vector.value()(i, 0) >= lo - 1e-12);
    CHECK(dup.vector.value()(i, 0) <= hi + 1e-12);
  }
}

TEST_CASE("rec_loss gradients through the graph encoder and user pooling") {
  Corpus c = tiny_corpus();
  C2crsModel<double> model(tiny_model_config(), shape_of(c), 9);
  auto r = check_gradients(model.params(), [&](ad::Tape<double>& t) {
    auto nodes = model.graph().nodes(t, c.kg);
    std::vector<ad::Var<double>> cols;
    for (const auto& ents : std::vector<std::vector<EntityId>>{{4, 6}, {5, 0, 7}})
      cols.push_back(Recommender<double>::item_logits(model.recommender().user_representation(t, nodes, ents).vector,
                                                      nodes, c.kg.items()));
    return rec_loss(ad::concat_cols(cols), std::vector<EntityId>{c.kg.items()[1], c.kg.items()[3]}, c.kg);
  }, 60, 5);
  CAPTURE(r.worst);
  CHECK(r.max_rel_err <= 1e-4);
}

TEST_CASE("recall@k") {
  SECTION("worked example") {
    // Targets placed at ranks 1, 2, 11, 51 and 4 of a 60-item ranking.
    std::vector<std::vector<EntityId>> rankings;
    std::vector<EntityId> targets;
    for (int rank : {1, 2, 11, 51, 4}) {
      std::vector<EntityId> r(60);
      std::iota(r.begin(), r.end(), 100);
      rankings.push_back(r);
      targets.push_back(r[static_cast<std::size_t>(rank - 1)]);
    }
    auto rep = recall_at_k(rankings, targets);
    CHECK(rep.recall_at[1] == 0.2);
    CHECK(rep.recall_at[10] == 0.6);
    CHECK(rep.recall_at[50] == 0.8);
    CHECK(rep.n_instances == 5);
  }
  SECTION("rank three counts for 10 and 50 only") {
    auto rep = recall_at_k({{5, 6, 7, 8}}, {7});
    CHECK(rep.recall_at[1] == 0.0);
    CHECK(rep.recall_at[10] == 1.0);
    CHECK(rep.recall_at[50] == 1.0);
  }
  SECTION("matches the brute-force counter on random cases") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n_items = 2 + rng.index(70), n = 1 + rng.index(12);
      std::vector<std::vector<EntityId>> rankings;
      std::vector<EntityId> targets;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<EntityId> r(n_items);
        std::iota(r.begin(), r.end(), 0);
        rng.shuffle(r.begin(), r.end());
        rankings.push_back(r);
        targets.push_back(static_cast<EntityId>(rng.index(n_items)));
      }
      const std::vector<int> ks = {1, 10, 50};
      auto rep = recall_at_k(rankings, targets, ks);
      auto ref = reference_recall(rankings, targets, ks);
      for (int k : ks) CHECK(rep.recall_at[k] == ref[k]);
      CHECK(rep.recall_at[1] <= rep.recall_at[10]);
      CHECK(rep.recall_at[10] <= rep.recall_at[50]);
    }
  }
}
