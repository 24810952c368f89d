#include "pral/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <string_view>

#include "pral/rng.hpp"

namespace pral {

namespace {

constexpr std::array<std::string_view, 24> kNames = {
    "golden wok",     "the copper kettle", "saffron brasserie", "curry garden",    "la margherita",
    "the river bar",  "the nirala",        "sala thong",        "royal spice",     "bedouin",
    "meghna",         "the varsity",       "charlie chan",      "rice house",      "the gandhi",
    "cote",           "the oak bistro",    "pipasha",           "kymmoy",          "the lucky star",
    "yu garden",      "zizzi",             "tandoori palace",   "the slug and lettuce"};
constexpr std::array<std::string_view, 10> kFoods = {"italian", "chinese", "indian",  "thai",    "british",
                                                     "french",  "korean",  "spanish", "turkish", "mediterranean"};
constexpr std::array<std::string_view, 5> kAreas = {"north", "south", "east", "west", "centre"};
constexpr std::array<std::string_view, 3> kPrices = {"cheap", "moderate", "expensive"};
constexpr std::array<std::string_view, 10> kStreets = {"regent street", "mill road",       "king street",
                                                       "hills road",    "bridge street",   "castle street",
                                                       "newmarket road", "trumpington street", "market hill",
                                                       "jesus lane"};

enum class Requestable { Address, Phone, Postcode };
constexpr std::array<Requestable, 3> kRequestables = {Requestable::Address, Requestable::Phone,
                                                      Requestable::Postcode};

std::string_view requestable_slot(Requestable r) {
  switch (r) {
    case Requestable::Address: return "address";
    case Requestable::Phone: return "phone";
    case Requestable::Postcode: return "postcode";
  }
  return "";
}

std::string_view requestable_phrase(Requestable r) {
  return r == Requestable::Phone ? "phone number" : requestable_slot(r);
}

const std::string& requestable_value(const Restaurant& r, Requestable q) {
  switch (q) {
    case Requestable::Address: return r.address;
    case Requestable::Phone: return r.phone;
    case Requestable::Postcode: return r.postcode;
  }
  return r.name;
}

template <std::size_t N>
std::string_view pick(Rng& rng, const std::array<std::string_view, N>& options) {
  return options[uniform_index(rng, N)];
}

std::string_view pick(Rng& rng, const std::vector<std::string_view>& options) {
  return options[uniform_index(rng, options.size())];
}

bool chance(Rng& rng, double p) { return uniform_unit(rng) < p; }

// Replaces each "{key}" in `tmpl` with the matching value.
std::string fill(std::string_view tmpl, std::initializer_list<std::pair<std::string_view, std::string_view>> vars) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const std::size_t close = tmpl.find('}', i);
      const std::string_view key = tmpl.substr(i + 1, close - i - 1);
      for (const auto& [k, v] : vars) {
        if (k == key) out += v;
      }
      i = close + 1;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

struct Constraint {
  bool food = false;
  bool area = false;
  bool price = false;
};

struct RequestTemplate {
  std::string_view text;
  Constraint uses;
};

std::vector<RequestTemplate> request_templates(SyntheticGrammar::Breadth breadth) {
  std::vector<RequestTemplate> t = {
      {"i am looking for a {price} {food} restaurant in the {area} of town .", {true, true, true}},
      {"i want a {food} restaurant in the {area} .", {true, true, false}},
      {"can you find me a {price} restaurant that serves {food} food ?", {true, false, true}},
      {"i would like {food} food in the {area} part of town please .", {true, true, false}},
      {"is there a {price} place in the {area} serving {food} food ?", {true, true, true}},
  };
  if (breadth == SyntheticGrammar::Breadth::Broad) {
    t.push_back({"my friends and i are hungry . we want {food} food in the {area} .", {true, true, false}});
    t.push_back({"please recommend a {price} {food} place .", {true, false, true}});
    t.push_back({"do you know any good {food} restaurants around the {area} ?", {true, true, false}});
  }
  return t;
}

const Restaurant& first_match(const Restaurant& target, const Constraint& c) {
  for (const auto& r : synthetic_database()) {
    if (c.food && r.food != target.food) continue;
    if (c.area && r.area != target.area) continue;
    if (c.price && r.price != target.price) continue;
    return r;
  }
  return target;
}

}  // namespace

const std::vector<Restaurant>& synthetic_database() {
  static const std::vector<Restaurant> db = [] {
    Rng rng(derive_seed(2020, "synthetic.database"));
    std::vector<Restaurant> out;
    for (std::size_t i = 0; i < kNames.size(); ++i) {
      Restaurant r;
      r.name = kNames[i];
      r.food = kFoods[uniform_index(rng, kFoods.size())];
      r.area = kAreas[uniform_index(rng, kAreas.size())];
      r.price = kPrices[uniform_index(rng, kPrices.size())];
      r.address = std::to_string(1 + uniform_index(rng, 99)) + " " + std::string(kStreets[uniform_index(rng, kStreets.size())]);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "01223 %06u", static_cast<unsigned>(uniform_index(rng, 1000000)));
      r.phone = buf;
      std::snprintf(buf, sizeof(buf), "cb%u %u%c%c", static_cast<unsigned>(1 + uniform_index(rng, 5)),
                    static_cast<unsigned>(uniform_index(rng, 10)), static_cast<char>('a' + uniform_index(rng, 26)),
                    static_cast<char>('a' + uniform_index(rng, 26)));
      r.postcode = buf;
      out.push_back(std::move(r));
    }
    return out;
  }();
  return db;
}

std::vector<Dialog> generate_synthetic(std::uint64_t seed, std::size_t n_dialogs, const SyntheticGrammar& grammar) {
  const bool broad = grammar.breadth == SyntheticGrammar::Breadth::Broad;
  const auto requests = request_templates(grammar.breadth);
  const std::vector<std::string_view> openings = {"hello , welcome to the cambridge restaurant system . how may i help you ?",
                                                  "hello , how can i help you ?",
                                                  "good day . what are you looking for ?"};
  const std::vector<std::string_view> user_greetings = {"", "hi , ", "hello , ", "good morning . "};
  std::vector<std::string_view> informs = {
      "{name} serves {food} food in the {area} of town and is in the {price} price range .",
      "{name} is a {price} {food} restaurant in the {area} .",
      "i would recommend {name} . it is a {price} {food} place in the {area} ."};
  std::vector<std::string_view> ask_one = {"what is the {a} ?", "may i have the {a} please ?", "could you tell me the {a} ?"};
  std::vector<std::string_view> ask_two = {"could i have the {a} and {b} please ?", "what are the {a} and {b} ?"};
  std::vector<std::string_view> give_one = {"the {a} is {va} .", "sure , the {a} is {va} ."};
  std::vector<std::string_view> give_two = {"the {a} is {va} and the {b} is {vb} .",
                                            "sure , the {a} is {va} and the {b} is {vb} ."};
  std::vector<std::string_view> follow_ups = {"and the {a} ?", "what about the {a} ?"};
  std::vector<std::string_view> thanks = {"thank you , goodbye .", "thanks , that is all i need .", "great , thank you ."};
  std::vector<std::string_view> byes = {"you are welcome . goodbye .", "thank you for using our service . goodbye .",
                                        "enjoy your meal . goodbye ."};
  if (broad) {
    informs.push_back("how about {name} ? they serve {price} {food} food in the {area} .");
    ask_one.push_back("can you give me the {a} ?");
    give_one.push_back("of course . the {a} is {va} .");
    thanks.push_back("that is perfect , thank you so much .");
    byes.push_back("have a lovely evening . goodbye .");
  }

  Rng rng(derive_seed(seed, "synthetic.corpus"));
  std::vector<Dialog> out;
  out.reserve(n_dialogs);
  char id_buf[64];
  for (std::size_t i = 0; i < n_dialogs; ++i) {
    Dialog d;
    std::snprintf(id_buf, sizeof(id_buf), "synth-%llu-%05zu", static_cast<unsigned long long>(seed), i);
    d.id = id_buf;
    auto say = [&d](Role role, std::string text) { d.utterances.push_back({role, std::move(text)}); };

    const bool system_opens = chance(rng, grammar.system_opens_probability);
    if (system_opens) say(Role::System, std::string(pick(rng, openings)));
    if (broad && chance(rng, 0.3)) {
      if (!system_opens) say(Role::User, "hello , how are you today ?");
      else say(Role::User, "hi , how are you today ?");
      say(Role::System, "i am doing well , thank you for asking . what can i do for you ?");
    }

    const auto& db = synthetic_database();
    const Restaurant& target = db[uniform_index(rng, db.size())];
    const RequestTemplate& req = requests[uniform_index(rng, requests.size())];
    const Restaurant& offered = first_match(target, req.uses);
    const std::string_view greeting = (system_opens || d.utterances.size() > 1) ? "" : pick(rng, user_greetings);
    say(Role::User, std::string(greeting) + fill(req.text, {{"price", target.price}, {"food", target.food}, {"area", target.area}}));
    say(Role::System, fill(pick(rng, informs), {{"name", offered.name}, {"food", offered.food}, {"area", offered.area},
                                                {"price", offered.price}}));
    d.slots["name"] = offered.name;

    std::array<Requestable, 3> order = kRequestables;
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[uniform_index(rng, k)]);
    const std::size_t n_asked = 1 + uniform_index(rng, 2);
    const Requestable a = order[0];
    const Requestable b = order[1];
    if (n_asked == 1) {
      say(Role::User, fill(pick(rng, ask_one), {{"a", requestable_phrase(a)}}));
      say(Role::System, fill(pick(rng, give_one), {{"a", requestable_phrase(a)}, {"va", requestable_value(offered, a)}}));
    } else {
      say(Role::User, fill(pick(rng, ask_two), {{"a", requestable_phrase(a)}, {"b", requestable_phrase(b)}}));
      say(Role::System, fill(pick(rng, give_two), {{"a", requestable_phrase(a)}, {"va", requestable_value(offered, a)},
                                                   {"b", requestable_phrase(b)}, {"vb", requestable_value(offered, b)}}));
    }
    for (std::size_t k = 0; k < n_asked; ++k) d.slots[std::string(requestable_slot(order[k]))] = requestable_value(offered, order[k]);

    if (chance(rng, grammar.follow_up_probability)) {
      const Requestable c = order[n_asked];
      say(Role::User, fill(pick(rng, follow_ups), {{"a", requestable_phrase(c)}}));
      say(Role::System, fill(pick(rng, give_one), {{"a", requestable_phrase(c)}, {"va", requestable_value(offered, c)}}));
      d.slots[std::string(requestable_slot(c))] = requestable_value(offered, c);
    }

    say(Role::User, std::string(pick(rng, thanks)));
    say(Role::System, std::string(pick(rng, byes)));
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace pral
