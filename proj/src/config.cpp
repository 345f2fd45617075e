#include "alignlab/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "alignlab/frozen_lake.hpp"

namespace alignlab {

LossConfig LabConfig::loss_for_dpo() const {
  LossConfig out = loss;
  out.beta = beta_dpo;
  return out;
}

LossConfig LabConfig::loss_for_orpo() const {
  LossConfig out = loss;
  out.beta = beta_orpo;
  return out;
}

void LabConfig::validate() const {
  loss_for_dpo().validate();
  loss_for_orpo().validate();
  if (!(frozen_lake.discount > 0.0 && frozen_lake.discount < 1.0)) {
    throw std::invalid_argument("discount must lie in (0, 1)");
  }
  if (frozen_lake.epochs < 1 || frozen_lake.lr <= 0.0 ||
      frozen_lake.hidden_dim < 1 || frozen_lake.rollouts < 1 ||
      frozen_lake.rollout_cap < 1) {
    throw std::invalid_argument("invalid frozen_lake settings");
  }
  if (frozen_lake.seeds.empty() || frozen_lake.methods.empty()) {
    throw std::invalid_argument("frozen_lake needs seeds and methods");
  }
  for (const std::string& m : frozen_lake.methods) {
    bool known = false;
    for (const std::string& k : kGridMethods) known = known || k == m;
    if (!known) throw std::invalid_argument("unknown method: " + m);
  }
  if (toy_lm.epochs < 1 || toy_lm.batch < 1 || toy_lm.lr <= 0.0 ||
      toy_lm.embed_dim < 1 || toy_lm.hidden_dim < 1 ||
      toy_lm.max_positions < 2 || toy_lm.eval_every < 1) {
    throw std::invalid_argument("invalid toy_lm settings");
  }
  if (toy_lm.seeds.empty() || toy_lm.methods.empty()) {
    throw std::invalid_argument("toy_lm needs seeds and methods");
  }
  for (const std::string& m : toy_lm.methods) {
    bool known = false;
    for (const std::string& k : kToyLmMethods) known = known || k == m;
    if (!known) throw std::invalid_argument("unknown method: " + m);
  }
}

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

Scalar parse_real(const std::string& value) {
  try {
    std::size_t used = 0;
    const Scalar out = std::stod(value, &used);
    if (used == value.size()) return out;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("malformed number: " + value);
}

int parse_int(const std::string& value) {
  try {
    std::size_t used = 0;
    const int out = std::stoi(value, &used);
    if (used == value.size()) return out;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("malformed integer: " + value);
}

bool parse_bool(const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw std::invalid_argument("expected true or false, got: " + value);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::uint64_t parse_seed(const std::string& value) {
  try {
    std::size_t used = 0;
    const std::uint64_t out = std::stoull(value, &used);
    if (used == value.size()) return out;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("malformed seed: " + value);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& value) {
  std::vector<std::uint64_t> out;
  for (const std::string& item : split_list(value)) {
    out.push_back(parse_seed(item));
  }
  return out;
}

std::string format_real(Scalar x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  if (ec != std::errc{}) throw std::logic_error("number formatting failed");
  return std::string(buf, end);
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += items[i];
  }
  return out;
}

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::vector<std::string> items;
  items.reserve(seeds.size());
  for (std::uint64_t s : seeds) items.push_back(std::to_string(s));
  return join(items);
}

struct KeyEntry {
  std::function<void(LabConfig&, const std::string&)> set;
  std::function<std::string(const LabConfig&)> get;
};

using KeyTable = std::map<std::string, std::map<std::string, KeyEntry>>;

const KeyTable& key_table() {
  static const KeyTable table = [] {
    KeyTable t;
    auto& loss = t["loss"];
    loss["lambda"] = {[](LabConfig& c, const std::string& v) {
                        c.loss.lambda = parse_real(v);
                      },
                      [](const LabConfig& c) {
                        return format_real(c.loss.lambda);
                      }};
    loss["alpha"] = {[](LabConfig& c, const std::string& v) {
                       c.loss.decay = parse_real(v);
                     },
                     [](const LabConfig& c) {
                       return format_real(c.loss.decay);
                     }};
    loss["propagation"] = {[](LabConfig& c, const std::string& v) {
                             c.loss.propagation = propagation_from_name(v);
                           },
                           [](const LabConfig& c) {
                             return std::string(
                                 propagation_name(c.loss.propagation));
                           }};
    loss["normalize"] = {[](LabConfig& c, const std::string& v) {
                           c.loss.normalize = normalize_from_name(v);
                         },
                         [](const LabConfig& c) {
                           return std::string(
                               normalize_name(c.loss.normalize));
                         }};
    loss["beta_dpo"] = {[](LabConfig& c, const std::string& v) {
                          c.beta_dpo = parse_real(v);
                        },
                        [](const LabConfig& c) {
                          return format_real(c.beta_dpo);
                        }};
    loss["beta_orpo"] = {[](LabConfig& c, const std::string& v) {
                           c.beta_orpo = parse_real(v);
                         },
                         [](const LabConfig& c) {
                           return format_real(c.beta_orpo);
                         }};
    loss["orpo_mix"] = {[](LabConfig& c, const std::string& v) {
                          c.loss.orpo_mix = parse_real(v);
                        },
                        [](const LabConfig& c) {
                          return format_real(c.loss.orpo_mix);
                        }};
    loss["dot_product_total"] = {
        [](LabConfig& c, const std::string& v) {
          c.loss.dot_product_total = parse_bool(v);
        },
        [](const LabConfig& c) {
          return std::string(c.loss.dot_product_total ? "true" : "false");
        }};

    auto& fl = t["frozen_lake"];
    fl["map"] = {[](LabConfig& c, const std::string& v) {
                   c.frozen_lake.map = v;
                 },
                 [](const LabConfig& c) { return c.frozen_lake.map; }};
    fl["detour"] = {[](LabConfig& c, const std::string& v) {
                      c.frozen_lake.detour = v;
                    },
                    [](const LabConfig& c) { return c.frozen_lake.detour; }};
    fl["epochs"] = {[](LabConfig& c, const std::string& v) {
                      c.frozen_lake.epochs = parse_int(v);
                    },
                    [](const LabConfig& c) {
                      return std::to_string(c.frozen_lake.epochs);
                    }};
    fl["lr"] = {[](LabConfig& c, const std::string& v) {
                  c.frozen_lake.lr = parse_real(v);
                },
                [](const LabConfig& c) {
                  return format_real(c.frozen_lake.lr);
                }};
    fl["hidden_dim"] = {[](LabConfig& c, const std::string& v) {
                          c.frozen_lake.hidden_dim = parse_int(v);
                        },
                        [](const LabConfig& c) {
                          return std::to_string(c.frozen_lake.hidden_dim);
                        }};
    fl["discount"] = {[](LabConfig& c, const std::string& v) {
                        c.frozen_lake.discount = parse_real(v);
                      },
                      [](const LabConfig& c) {
                        return format_real(c.frozen_lake.discount);
                      }};
    fl["rollouts"] = {[](LabConfig& c, const std::string& v) {
                        c.frozen_lake.rollouts = parse_int(v);
                      },
                      [](const LabConfig& c) {
                        return std::to_string(c.frozen_lake.rollouts);
                      }};
    fl["rollout_cap"] = {[](LabConfig& c, const std::string& v) {
                           c.frozen_lake.rollout_cap = parse_int(v);
                         },
                         [](const LabConfig& c) {
                           return std::to_string(c.frozen_lake.rollout_cap);
                         }};
    fl["seeds"] = {[](LabConfig& c, const std::string& v) {
                     c.frozen_lake.seeds = parse_seed_list(v);
                   },
                   [](const LabConfig& c) {
                     return join_seeds(c.frozen_lake.seeds);
                   }};
    fl["methods"] = {[](LabConfig& c, const std::string& v) {
                       c.frozen_lake.methods = split_list(v);
                     },
                     [](const LabConfig& c) {
                       return join(c.frozen_lake.methods);
                     }};

    auto& tl = t["toy_lm"];
    tl["task"] = {[](LabConfig& c, const std::string& v) {
                    c.toy_lm.corpus.task = task_from_name(v);
                  },
                  [](const LabConfig& c) {
                    return std::string(task_name(c.toy_lm.corpus.task));
                  }};
    tl["vocab_size"] = {[](LabConfig& c, const std::string& v) {
                          c.toy_lm.corpus.vocab_size = parse_int(v);
                        },
                        [](const LabConfig& c) {
                          return std::to_string(c.toy_lm.corpus.vocab_size);
                        }};
    tl["min_len"] = {[](LabConfig& c, const std::string& v) {
                       c.toy_lm.corpus.min_len = parse_int(v);
                     },
                     [](const LabConfig& c) {
                       return std::to_string(c.toy_lm.corpus.min_len);
                     }};
    tl["max_len"] = {[](LabConfig& c, const std::string& v) {
                       c.toy_lm.corpus.max_len = parse_int(v);
                     },
                     [](const LabConfig& c) {
                       return std::to_string(c.toy_lm.corpus.max_len);
                     }};
    tl["modulus"] = {[](LabConfig& c, const std::string& v) {
                       c.toy_lm.corpus.modulus = parse_int(v);
                     },
                     [](const LabConfig& c) {
                       return std::to_string(c.toy_lm.corpus.modulus);
                     }};
    tl["mult"] = {[](LabConfig& c, const std::string& v) {
                    c.toy_lm.corpus.mult = parse_int(v);
                  },
                  [](const LabConfig& c) {
                    return std::to_string(c.toy_lm.corpus.mult);
                  }};
    tl["add"] = {[](LabConfig& c, const std::string& v) {
                   c.toy_lm.corpus.add = parse_int(v);
                 },
                 [](const LabConfig& c) {
                   return std::to_string(c.toy_lm.corpus.add);
                 }};
    tl["chain_steps"] = {[](LabConfig& c, const std::string& v) {
                           c.toy_lm.corpus.chain_steps = parse_int(v);
                         },
                         [](const LabConfig& c) {
                           return std::to_string(c.toy_lm.corpus.chain_steps);
                         }};
    tl["train_count"] = {[](LabConfig& c, const std::string& v) {
                           c.toy_lm.corpus.train_count = parse_int(v);
                         },
                         [](const LabConfig& c) {
                           return std::to_string(c.toy_lm.corpus.train_count);
                         }};
    tl["eval_count"] = {[](LabConfig& c, const std::string& v) {
                          c.toy_lm.corpus.eval_count = parse_int(v);
                        },
                        [](const LabConfig& c) {
                          return std::to_string(c.toy_lm.corpus.eval_count);
                        }};
    tl["corpus_seed"] = {[](LabConfig& c, const std::string& v) {
                           c.toy_lm.corpus.seed = parse_seed(v);
                         },
                         [](const LabConfig& c) {
                           return std::to_string(c.toy_lm.corpus.seed);
                         }};
    tl["epochs"] = {[](LabConfig& c, const std::string& v) {
                      c.toy_lm.epochs = parse_int(v);
                    },
                    [](const LabConfig& c) {
                      return std::to_string(c.toy_lm.epochs);
                    }};
    tl["batch"] = {[](LabConfig& c, const std::string& v) {
                     c.toy_lm.batch = parse_int(v);
                   },
                   [](const LabConfig& c) {
                     return std::to_string(c.toy_lm.batch);
                   }};
    tl["lr"] = {[](LabConfig& c, const std::string& v) {
                  c.toy_lm.lr = parse_real(v);
                },
                [](const LabConfig& c) { return format_real(c.toy_lm.lr); }};
    tl["embed_dim"] = {[](LabConfig& c, const std::string& v) {
                         c.toy_lm.embed_dim = parse_int(v);
                       },
                       [](const LabConfig& c) {
                         return std::to_string(c.toy_lm.embed_dim);
                       }};
    tl["hidden_dim"] = {[](LabConfig& c, const std::string& v) {
                          c.toy_lm.hidden_dim = parse_int(v);
                        },
                        [](const LabConfig& c) {
                          return std::to_string(c.toy_lm.hidden_dim);
                        }};
    tl["max_positions"] = {[](LabConfig& c, const std::string& v) {
                             c.toy_lm.max_positions = parse_int(v);
                           },
                           [](const LabConfig& c) {
                             return std::to_string(c.toy_lm.max_positions);
                           }};
    tl["eval_every"] = {[](LabConfig& c, const std::string& v) {
                          c.toy_lm.eval_every = parse_int(v);
                        },
                        [](const LabConfig& c) {
                          return std::to_string(c.toy_lm.eval_every);
                        }};
    tl["seeds"] = {[](LabConfig& c, const std::string& v) {
                     c.toy_lm.seeds = parse_seed_list(v);
                   },
                   [](const LabConfig& c) {
                     return join_seeds(c.toy_lm.seeds);
                   }};
    tl["methods"] = {[](LabConfig& c, const std::string& v) {
                       c.toy_lm.methods = split_list(v);
                     },
                     [](const LabConfig& c) {
                       return join(c.toy_lm.methods);
                     }};
    return t;
  }();
  return table;
}

// Resolves `key` (either bare or section.key) to a table entry. Bare keys
// must exist in exactly one section.
const KeyEntry& resolve_key(const std::string& key, std::string* section_out) {
  const KeyTable& table = key_table();
  const std::size_t dot = key.find('.');
  if (dot != std::string::npos) {
    const std::string section = key.substr(0, dot);
    const std::string name = key.substr(dot + 1);
    auto sit = table.find(section);
    if (sit == table.end()) {
      throw std::invalid_argument("unknown config keys: " + key);
    }
    auto kit = sit->second.find(name);
    if (kit == sit->second.end()) {
      throw std::invalid_argument("unknown config keys: " + key);
    }
    if (section_out) *section_out = section;
    return kit->second;
  }
  const KeyEntry* found = nullptr;
  std::vector<std::string> sections;
  for (const auto& [section, keys] : table) {
    auto kit = keys.find(key);
    if (kit != keys.end()) {
      found = &kit->second;
      sections.push_back(section);
    }
  }
  if (!found) {
    throw std::invalid_argument("unknown config keys: " + key);
  }
  if (sections.size() > 1) {
    std::string msg = "ambiguous key '" + key + "'; qualify as";
    for (const std::string& s : sections) msg += " " + s + "." + key;
    throw std::invalid_argument(msg);
  }
  if (section_out) *section_out = sections.front();
  return *found;
}

}  // namespace

LabConfig parse_config(const std::string& text) {
  const KeyTable& table = key_table();
  LabConfig config;
  std::vector<std::string> unknown;
  std::string section;
  std::istringstream lines(text);
  std::string raw;
  while (std::getline(lines, raw)) {
    const std::string line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw std::invalid_argument("malformed section header: " + line);
      }
      section = trim(line.substr(1, line.size() - 2));
      if (table.find(section) == table.end()) {
        unknown.push_back("[" + section + "]");
      }
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("expected key=value, got: " + line);
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto sit = table.find(section);
    if (sit == table.end()) {
      // inside an unknown section every key is an offender
      unknown.push_back(section.empty() ? key : section + "." + key);
      continue;
    }
    if (section.empty()) {
      // top-level keys resolve like bare overrides
      try {
        resolve_key(key, nullptr).set(config, value);
      } catch (const std::invalid_argument&) {
        unknown.push_back(key);
      }
      continue;
    }
    auto kit = sit->second.find(key);
    if (kit == sit->second.end()) {
      unknown.push_back(section + "." + key);
      continue;
    }
    kit->second.set(config, value);
  }
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const std::string& k : unknown) msg += " " + k;
    throw std::invalid_argument(msg);
  }
  return config;
}

void apply_override(LabConfig& config, const std::string& override_arg) {
  std::istringstream in(override_arg);
  std::string pair;
  bool any = false;
  while (in >> pair) {
    any = true;
    const std::size_t eq = pair.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw std::invalid_argument("override must be key=value, got: " + pair);
    }
    resolve_key(pair.substr(0, eq), nullptr)
        .set(config, pair.substr(eq + 1));
  }
  if (!any) {
    throw std::invalid_argument("empty override");
  }
}

LabConfig load_config(const std::string& path,
                      const std::vector<std::string>& overrides) {
  LabConfig config;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    config = parse_config(buffer.str());
  }
  for (const std::string& o : overrides) apply_override(config, o);
  config.validate();
  return config;
}

std::string canonical_config(const LabConfig& config) {
  // std::map iteration gives a fixed section and key order.
  std::string out;
  for (const auto& [section, keys] : key_table()) {
    out += "[" + section + "]\n";
    for (const auto& [key, entry] : keys) {
      out += key + "=" + entry.get(config) + "\n";
    }
    out += "\n";
  }
  return out;
}

std::string config_hash(const LabConfig& config) {
  const std::string echo = canonical_config(config);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : echo) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  static const char* hex = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = hex[h & 0xf];
    h >>= 4;
  }
  buf[16] = '\0';
  return std::string(buf);
}

}  // namespace alignlab
