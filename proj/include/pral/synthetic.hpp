#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pral/corpus.hpp"

namespace pral {

// A toy restaurant-search grammar: greeting -> request -> inform -> thanks.
// Restaurants come from a fixed database shared by every seed, so slot
// values are consistent knowledge across corpora.
struct SyntheticGrammar {
  enum class Breadth { Standard, Broad };
  Breadth breadth = Breadth::Standard;
  double system_opens_probability = 0.25;
  double follow_up_probability = 0.5;
};

struct Restaurant {
  std::string name;
  std::string food;
  std::string area;
  std::string price;
  std::string address;
  std::string phone;
  std::string postcode;
};

const std::vector<Restaurant>& synthetic_database();

std::vector<Dialog> generate_synthetic(std::uint64_t seed, std::size_t n_dialogs,
                                       const SyntheticGrammar& grammar = {});

}  // namespace pral
