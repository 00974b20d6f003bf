#pragma once

// Synthetic word-recognition data, JSONL datasets and multilabel ARFF files.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gspen/errors.hpp"
#include "gspen/metrics.hpp"

namespace gspen {

/// Fifty common five-letter English words.
inline const std::vector<std::string>& default_words() {
  static const std::vector<std::string> words = {
      "about", "other", "which", "their", "there", "first", "would", "these", "click", "price",
      "state", "email", "world", "music", "after", "video", "where", "books", "links", "years",
      "order", "items", "group", "under", "games", "could", "great", "hotel", "store", "terms",
      "right", "local", "those", "using", "phone", "forum", "based", "black", "check", "index",
      "being", "women", "today", "south", "pages", "found", "house", "photo", "power", "while"};
  return words;
}

/// Lowercase letters to labels 0..25.
inline std::vector<int> word_labels(const std::string& w) {
  std::vector<int> y;
  for (char c : w) {
    if (c < 'a' || c > 'z') throw InvalidArgument("word '" + w + "' has a non-lowercase letter");
    y.push_back(c - 'a');
  }
  return y;
}

struct SyntheticSpec {
  std::vector<std::vector<int>> vocabulary;
  std::size_t num_variables = 5;
  int num_labels = 26;
  double noise = 0.5;
  std::size_t feature_dim = 26;  // per variable
  std::size_t train_size = 10000, val_size = 2000, test_size = 2000;
  std::uint64_t seed = 0;

  static SyntheticSpec words() {
    SyntheticSpec s;
    for (const auto& w : default_words()) s.vocabulary.push_back(word_labels(w));
    return s;
  }

  void validate() const {
    if (vocabulary.empty()) throw InvalidArgument("synthetic.vocabulary is empty");
    if (num_labels < 1) throw InvalidArgument("synthetic.num_labels must be >= 1");
    if (!(noise >= 0.0)) throw InvalidArgument("synthetic.noise must be >= 0");
    if (feature_dim < static_cast<std::size_t>(num_labels))
      throw InvalidArgument("synthetic.feature_dim must be >= num_labels (one prototype axis per label)");
    for (const auto& w : vocabulary) {
      if (w.size() != num_variables) throw InvalidArgument("synthetic vocabulary entry has the wrong length");
      for (int y : w)
        if (y < 0 || y >= num_labels) throw InvalidArgument("synthetic vocabulary label out of range");
    }
  }
};

struct DatasetSplits {
  std::vector<Example> train, val, test;
};

/// Each example: a uniformly drawn word; variable k gets the unit axis vector
/// of its label plus N(0, noise²) per coordinate. Splits use distinct streams.
inline DatasetSplits generate_synthetic_sequence_dataset(const SyntheticSpec& spec) {
  spec.validate();
  auto make = [&](std::size_t n, std::uint64_t split) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(split)};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::size_t> pick(0, spec.vocabulary.size() - 1);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Example ex;
      ex.y = spec.vocabulary[pick(rng)];
      ex.x.assign(spec.num_variables * spec.feature_dim, 0.0);
      for (std::size_t k = 0; k < spec.num_variables; ++k) {
        double* block = ex.x.data() + k * spec.feature_dim;
        block[ex.y[k]] = 1.0;
        for (std::size_t j = 0; j < spec.feature_dim; ++j) block[j] += spec.noise * noise(rng);
      }
      out.push_back(std::move(ex));
    }
    return out;
  };
  return {make(spec.train_size, 1), make(spec.val_size, 2), make(spec.test_size, 3)};
}

/// Every example has `feature_dim` features and labels inside `domains`.
inline void check_examples(const std::vector<Example>& data, std::size_t feature_dim, const std::vector<int>& domains,
                           const std::string& where) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    const std::string at = where + ": example " + std::to_string(i);
    if (ex.x.size() != feature_dim)
      throw FormatError(at, "has " + std::to_string(ex.x.size()) + " features, expected " + std::to_string(feature_dim));
    if (ex.y.size() != domains.size())
      throw FormatError(at, "has " + std::to_string(ex.y.size()) + " labels, expected " + std::to_string(domains.size()));
    for (std::size_t k = 0; k < domains.size(); ++k)
      if (ex.y[k] < 0 || ex.y[k] >= domains[k]) throw FormatError(at, "label " + std::to_string(k) + " out of range");
  }
}

// ---------------------------------------------------------------------------
// JSONL: one {"x": [...], "y": [...], "id"?: "..."} object per line.

inline void write_jsonl(std::ostream& os, const std::vector<Example>& data) {
  for (const auto& ex : data) {
    nlohmann::json j = {{"x", ex.x}, {"y", ex.y}};
    if (ex.id) j["id"] = *ex.id;
    os << j.dump() << '\n';
  }
}

inline std::vector<Example> read_jsonl(std::istream& is, const std::string& where) {
  std::vector<Example> out;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example ex;
      ex.x = j.at("x").get<std::vector<double>>();
      ex.y = j.at("y").get<std::vector<int>>();
      if (j.contains("id")) ex.id = j.at("id").get<std::string>();
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ":" + std::to_string(n), e.what());
    }
  }
  return out;
}

inline std::vector<Example> load_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError(path, "cannot open file");
  return read_jsonl(f, path);
}

inline void save_jsonl(const std::string& path, const std::vector<Example>& data) {
  std::ofstream f(path);
  if (!f) throw FormatError(path, "cannot write file");
  f.precision(17);
  write_jsonl(f, data);
}

// ---------------------------------------------------------------------------
// Multilabel ARFF. Label attributes are the trailing `num_labels` attributes
// unless `label_columns` lists their attribute indices explicitly.

struct ArffData {
  std::vector<std::string> feature_names, label_names;
  std::vector<Example> examples;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline double parse_number(const std::string& tok, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where, "'" + tok + "' is not a number");
  }
}

}  // namespace detail

inline ArffData read_arff_multilabel(std::istream& is, std::size_t num_labels, const std::string& where,
                                     std::vector<std::size_t> label_columns = {}) {
  std::vector<std::string> names;
  std::string line;
  std::size_t n = 0;
  bool in_data = false;
  std::vector<char> is_label;
  std::vector<std::size_t> feature_slot, label_slot;
  ArffData out;

  auto setup = [&](const std::string& at) {
    const std::size_t A = names.size();
    if (label_columns.empty()) {
      if (num_labels > A) throw FormatError(at, "fewer attributes than labels");
      for (std::size_t i = A - num_labels; i < A; ++i) label_columns.push_back(i);
    }
    if (label_columns.size() != num_labels) throw FormatError(at, "label column list does not match num_labels");
    is_label.assign(A, 0);
    for (std::size_t c : label_columns) {
      if (c >= A) throw FormatError(at, "label column " + std::to_string(c) + " out of range");
      is_label[c] = 1;
    }
    feature_slot.assign(A, 0);
    label_slot.assign(A, 0);
    for (std::size_t i = 0; i < num_labels; ++i) label_slot[label_columns[i]] = i;
    for (std::size_t i = 0; i < A; ++i)
      if (!is_label[i]) {
        feature_slot[i] = out.feature_names.size();
        out.feature_names.push_back(names[i]);
      }
    for (std::size_t c : label_columns) out.label_names.push_back(names[c]);
  };

  auto set_value = [&](Example& ex, std::size_t col, double v, const std::string& at) {
    if (col >= names.size()) throw FormatError(at, "attribute index " + std::to_string(col) + " out of range");
    if (is_label[col]) {
      if (v != 0.0 && v != 1.0) throw FormatError(at, "label value must be 0 or 1");
      ex.y[label_slot[col]] = static_cast<int>(v);
    } else {
      ex.x[feature_slot[col]] = v;
    }
  };

  while (std::getline(is, line)) {
    ++n;
    const std::string at = where + ":" + std::to_string(n);
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '%') continue;
    if (!in_data) {
      const std::string low = detail::lower(t);
      if (low.rfind("@relation", 0) == 0) continue;
      if (low.rfind("@attribute", 0) == 0) {
        std::istringstream ss(t.substr(10));
        std::string name;
        ss >> std::ws;
        if (ss.peek() == '\'' || ss.peek() == '"') {
          const char q = static_cast<char>(ss.get());
          std::getline(ss, name, q);
        } else {
          ss >> name;
        }
        if (name.empty()) throw FormatError(at, "attribute without a name");
        names.push_back(name);
        continue;
      }
      if (low.rfind("@data", 0) == 0) {
        in_data = true;
        setup(at);
        continue;
      }
      throw FormatError(at, "unexpected header line");
    }
    Example ex;
    ex.x.assign(out.feature_names.size(), 0.0);
    ex.y.assign(num_labels, 0);
    if (t.front() == '{') {
      if (t.back() != '}') throw FormatError(at, "unterminated sparse row");
      std::istringstream ss(t.substr(1, t.size() - 2));
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = detail::trim(item);
        if (item.empty()) continue;
        const auto sp = item.find_first_of(" \t");
        if (sp == std::string::npos) throw FormatError(at, "sparse entry '" + item + "' needs 'index value'");
        const double idx = detail::parse_number(detail::trim(item.substr(0, sp)), at);
        if (idx < 0 || idx != std::floor(idx)) throw FormatError(at, "bad attribute index");
        set_value(ex, static_cast<std::size_t>(idx), detail::parse_number(detail::trim(item.substr(sp)), at), at);
      }
    } else {
      std::istringstream ss(t);
      std::string item;
      std::size_t col = 0;
      while (std::getline(ss, item, ',')) set_value(ex, col++, detail::parse_number(detail::trim(item), at), at);
      if (col != names.size())
        throw FormatError(at, "row has " + std::to_string(col) + " values, expected " + std::to_string(names.size()));
    }
    out.examples.push_back(std::move(ex));
  }
  if (!in_data) throw FormatError(where, "no @data section");
  return out;
}

/// Variable whose label is nonzero in the most examples; ties go to the lowest
/// index. Picks the hub of a star graph over multilabel outputs.
inline std::size_t most_frequent_label(const std::vector<Example>& data, std::size_t num_variables) {
  std::vector<std::size_t> active(num_variables, 0);
  for (const auto& ex : data)
    for (std::size_t k = 0; k < std::min(num_variables, ex.y.size()); ++k) active[k] += ex.y[k] != 0;
  return num_variables == 0 ? 0 : static_cast<std::size_t>(std::max_element(active.begin(), active.end()) - active.begin());
}

inline ArffData load_arff_multilabel(const std::string& path, std::size_t num_labels,
                                     std::vector<std::size_t> label_columns = {}) {
  std::ifstream f(path);
  if (!f) throw FormatError(path, "cannot open file");
  return read_arff_multilabel(f, num_labels, path, std::move(label_columns));
}

/// Dense ARFF with features first and labels last.
inline void write_arff_multilabel(std::ostream& os, const ArffData& d, const std::string& relation = "gspen") {
  os << "@relation " << relation << "\n\n";
  for (const auto& n : d.feature_names) os << "@attribute " << n << " numeric\n";
  for (const auto& n : d.label_names) os << "@attribute " << n << " {0,1}\n";
  os << "\n@data\n";
  os.precision(17);
  for (const auto& ex : d.examples) {
    for (std::size_t i = 0; i < ex.x.size(); ++i) os << (i ? "," : "") << ex.x[i];
    for (int y : ex.y) os << ',' << y;
    os << '\n';
  }
}

}  // namespace gspen
