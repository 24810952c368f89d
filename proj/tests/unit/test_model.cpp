#include "../support.hpp"
#include "doctest.h"
#include "pral/model.hpp"

using namespace pral;
using namespace pral::testing;

namespace {
ModelConfig small(std::size_t vocab = 40) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = vocab;
  c.max_positions = 12;
  c.dropout_rate = 0.0;
  c.init_seed = 5;
  return c;
}
}  // namespace

TEST_SUITE("model") {
  TEST_CASE("config validation") {
    ModelConfig c = small();
    c.validate();
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small();
    c.dropout_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(ModelConfig::from_json(small().to_json()) == small());
    CHECK_THROWS_AS(ModelConfig::from_json({{"depth", 3}}), ConfigError);
  }

  TEST_CASE("parameter count matches the tensors") {
    const TransformerLM<float> lm(small());
    std::size_t n = 0;
    for (const auto& p : lm.parameters()) n += p->value.size();
    CHECK(n == parameter_count(small()));
  }

  TEST_CASE("logits shape, capacity and offsets") {
    TransformerLM<double> lm(small());
    Rng rng(1);
    scramble(lm, rng);
    const std::vector<TokenId> ids{1, 2, 3, 4};
    const auto a = lm.logits(ids, 0);
    CHECK(a.rows() == 4);
    CHECK(a.cols() == 40);
    CHECK(lm.logits(ids, 8).rows() == 4);
    CHECK_THROWS_AS(lm.logits(ids, 9), CapacityError);
    CHECK(lm.logits(ids, 3) != a);
  }

  TEST_CASE("attention is causal") {
    TransformerLM<double> lm(small());
    Rng rng(2);
    scramble(lm, rng);
    const auto a = lm.logits(std::vector<TokenId>{5, 6, 7, 8}, 0);
    const auto b = lm.logits(std::vector<TokenId>{5, 6, 7, 30}, 0);
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 40; ++c) CHECK(a.at(r, c) == b.at(r, c));
    }
    bool last_differs = false;
    for (std::size_t c = 0; c < 40; ++c) last_differs = last_differs || a.at(3, c) != b.at(3, c);
    CHECK(last_differs);
  }

  TEST_CASE("the two role models start from different weights") {
    const RoleAlternatingModel<float> m(small());
    CHECK(m.user_lm.parameters()[0]->value != m.system_lm.parameters()[0]->value);
    CHECK(m.user_lm.parameters()[0]->name.rfind("user_lm.", 0) == 0);
  }

  TEST_CASE("checkpoints restore identical logits") {
    RoleAlternatingModel<float> m(small());
    Rng rng(3);
    scramble(m.user_lm, rng);
    scramble(m.system_lm, rng);
    const auto back = RoleAlternatingModel<float>::from_checkpoint(m.to_checkpoint());
    const std::vector<TokenId> ids{3, 1, 4, 1, 5};
    CHECK(back.user_lm.logits(ids, 2) == m.user_lm.logits(ids, 2));
    CHECK(back.system_lm.logits(ids, 0) == m.system_lm.logits(ids, 0));
    CHECK(back.config() == m.config());

    const auto single = lm_checkpoint(m.user_lm, "teacher");
    CHECK_THROWS_AS(RoleAlternatingModel<float>::from_checkpoint(single), FormatError);
    CHECK(lm_from_checkpoint<float>(single, "teacher").logits(ids, 0) == m.user_lm.logits(ids, 0));
  }

  TEST_CASE("prediction layout of a hand dialog") {
    TokenizedDialog td;
    td.ids = {Vocab::kUserPrefix, 7, Vocab::kSystemPrefix, 8, 9};
    td.spans = {{0, 2, Role::User, 1}, {2, 5, Role::System, 2}};
    const auto lay = PredictionLayout::of(td);
    CHECK(lay.rows() == 4);
    CHECK(lay.targets == std::vector<TokenId>{7, Vocab::kSystemPrefix, 8, 9});
    CHECK(lay.role == std::vector<Role>{Role::User, Role::System, Role::System, Role::System});
    CHECK(lay.utterance == std::vector<std::size_t>{1, 2, 2, 2});
    CHECK(lay.mask<double>(Role::User) == std::vector<double>{1, 0, 0, 0});
    const auto counts = lay.counts_per_utterance(2);
    CHECK(counts[1] == 1);
    CHECK(counts[2] == 3);
  }

  TEST_CASE("position sampler range") {
    PositionSampler s(10, 4);
    for (int i = 0; i < 500; ++i) CHECK(s.sample(7) <= 3);
    CHECK(s.sample(10) == 0);
    CHECK_THROWS_AS(s.sample(11), CapacityError);
  }
}
