#include "moekit/routing.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "moekit/random.hpp"

namespace moekit {

void RoutingChoice::validate() const {
  if (k == 0 || assignments.size() != k) {
    throw ShapeError("RoutingChoice: expected k assignment vectors");
  }
  if (k > n_experts) {
    throw std::invalid_argument("RoutingChoice: k exceeds expert count");
  }
  for (const auto& a : assignments) {
    if (a.size() != n_tokens) {
      throw ShapeError("RoutingChoice: assignment length != n_tokens");
    }
    for (std::int32_t e : a) {
      if (e < 0 || static_cast<std::size_t>(e) >= n_experts) {
        throw std::invalid_argument("RoutingChoice: expert id out of range");
      }
    }
  }
  for (std::size_t t = 0; t < n_tokens; ++t) {
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = i + 1; j < k; ++j) {
        if (assignments[i][t] == assignments[j][t]) {
          throw std::invalid_argument(
              "RoutingChoice: duplicate expert for token " + std::to_string(t));
        }
      }
    }
  }
}

ReIndex build_reindex(const std::vector<std::int32_t>& assignment,
                      std::size_t n_experts, std::size_t blk) {
  if (blk == 0) throw std::invalid_argument("build_reindex: blk must be >= 1");
  std::vector<std::size_t> count(n_experts, 0);
  for (std::int32_t e : assignment) {
    if (e < 0 || static_cast<std::size_t>(e) >= n_experts) {
      throw std::invalid_argument("build_reindex: expert id out of range");
    }
    ++count[static_cast<std::size_t>(e)];
  }

  ReIndex rx;
  rx.blk = blk;
  rx.n_tokens = assignment.size();
  rx.idx.assign(n_experts + 1, 0);
  for (std::size_t e = 0; e < n_experts; ++e) {
    // Round each segment up to a whole number of blk-sized tiles.
    const std::size_t padded = blk * ((count[e] + blk - 1) / blk);
    rx.idx[e + 1] = rx.idx[e] + static_cast<std::int64_t>(padded);
  }
  rx.v.assign(static_cast<std::size_t>(rx.idx[n_experts]), -1);

  std::vector<std::int64_t> cursor(rx.idx.begin(), rx.idx.end() - 1);
  for (std::size_t t = 0; t < assignment.size(); ++t) {
    const auto e = static_cast<std::size_t>(assignment[t]);
    rx.v[static_cast<std::size_t>(cursor[e]++)] = static_cast<std::int64_t>(t);
  }
  return rx;
}

std::vector<ReIndex> build_reindex_all(const RoutingChoice& r,
                                       std::size_t blk) {
  std::vector<ReIndex> out;
  out.reserve(r.k);
  for (const auto& a : r.assignments) {
    out.push_back(build_reindex(a, r.n_experts, blk));
  }
  return out;
}

RoutingDistribution RoutingDistribution::parse(std::string_view text) {
  if (text == "uniform") return uniform();
  if (text == "balanced") return balanced();
  if (text.starts_with("zipf:")) {
    return zipf(std::stod(std::string(text.substr(5))));
  }
  if (text.starts_with("fixed:")) {
    return fixed_expert(std::stoul(std::string(text.substr(6))));
  }
  throw std::invalid_argument("unknown routing distribution: " +
                              std::string(text));
}

std::string RoutingDistribution::to_string() const {
  switch (kind) {
    case Kind::kUniform:
      return "uniform";
    case Kind::kZipf:
      return "zipf:" + std::to_string(zipf_s);
    case Kind::kFixedExpert:
      return "fixed:" + std::to_string(expert);
    case Kind::kBalanced:
      return "balanced";
  }
  return "uniform";
}

namespace {

// Draws one expert from the zipf-weighted categorical via CDF inversion.
std::size_t draw_zipf(const std::vector<double>& cdf, Rng& rng) {
  const double u = rng.uniform01() * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()),
                               cdf.size() - 1);
}

}  // namespace

RoutingChoice synthesize_routing(std::size_t n_tokens, std::size_t n_experts,
                                 std::size_t k,
                                 const RoutingDistribution& dist,
                                 std::uint64_t seed) {
  if (k == 0 || n_experts == 0) {
    throw std::invalid_argument("synthesize_routing: k and E must be >= 1");
  }
  if (k > n_experts) {
    throw std::invalid_argument("synthesize_routing: k > n_experts");
  }
  if (dist.kind == RoutingDistribution::Kind::kFixedExpert &&
      dist.expert >= n_experts) {
    throw std::invalid_argument("synthesize_routing: fixed expert out of range");
  }

  RoutingChoice r;
  r.n_tokens = n_tokens;
  r.n_experts = n_experts;
  r.k = k;
  r.assignments.assign(k, std::vector<std::int32_t>(n_tokens, 0));

  Rng rng(seed);
  std::vector<double> cdf;
  if (dist.kind == RoutingDistribution::Kind::kZipf) {
    cdf.resize(n_experts);
    double acc = 0.0;
    for (std::size_t e = 0; e < n_experts; ++e) {
      acc += 1.0 / std::pow(static_cast<double>(e + 1), dist.zipf_s);
      cdf[e] = acc;
    }
  }

  std::vector<std::int32_t> pool(n_experts);
  for (std::size_t t = 0; t < n_tokens; ++t) {
    switch (dist.kind) {
      case RoutingDistribution::Kind::kUniform: {
        // Partial Fisher-Yates gives k distinct experts.
        for (std::size_t e = 0; e < n_experts; ++e) {
          pool[e] = static_cast<std::int32_t>(e);
        }
        for (std::size_t i = 0; i < k; ++i) {
          const std::size_t j =
              i + static_cast<std::size_t>(rng.below(n_experts - i));
          std::swap(pool[i], pool[j]);
          r.assignments[i][t] = pool[i];
        }
        break;
      }
      case RoutingDistribution::Kind::kZipf: {
        std::size_t chosen = 0;
        std::vector<std::int32_t> picked;
        picked.reserve(k);
        while (chosen < k) {
          const auto e = static_cast<std::int32_t>(draw_zipf(cdf, rng));
          if (std::find(picked.begin(), picked.end(), e) == picked.end()) {
            picked.push_back(e);
            r.assignments[chosen][t] = e;
            ++chosen;
          }
        }
        break;
      }
      case RoutingDistribution::Kind::kFixedExpert: {
        for (std::size_t i = 0; i < k; ++i) {
          r.assignments[i][t] =
              static_cast<std::int32_t>((dist.expert + i) % n_experts);
        }
        break;
      }
      case RoutingDistribution::Kind::kBalanced: {
        for (std::size_t i = 0; i < k; ++i) {
          r.assignments[i][t] =
              static_cast<std::int32_t>((t + i) % n_experts);
        }
        break;
      }
    }
  }
  return r;
}

std::string routing_to_csv(const RoutingChoice& r) {
  std::ostringstream os;
  os << "token_index,choice_index,expert_id\n";
  for (std::size_t t = 0; t < r.n_tokens; ++t) {
    for (std::size_t i = 0; i < r.k; ++i) {
      os << t << ',' << i << ',' << r.assignments[i][t] << '\n';
    }
  }
  return os.str();
}

RoutingChoice routing_from_csv(const std::string& text) {
  RoutingChoice r;
  std::istringstream is(text);
  std::string line;
  std::size_t max_token = 0, max_choice = 0;
  std::int32_t max_expert = 0;
  struct Row {
    std::size_t token, choice;
    std::int32_t expert;
  };
  std::vector<Row> rows;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (first && line.find("token_index") != std::string::npos) {
      first = false;
      continue;
    }
    first = false;
    Row row{};
    const char* p = line.data();
    const char* end = line.data() + line.size();
    auto parse_field = [&](auto& out) {
      auto [next, ec] = std::from_chars(p, end, out);
      if (ec != std::errc{}) {
        throw std::invalid_argument("routing CSV: bad field in line: " + line);
      }
      p = next;
      if (p < end && *p == ',') ++p;
    };
    parse_field(row.token);
    parse_field(row.choice);
    parse_field(row.expert);
    max_token = std::max(max_token, row.token);
    max_choice = std::max(max_choice, row.choice);
    max_expert = std::max(max_expert, row.expert);
    rows.push_back(row);
  }
  if (rows.empty()) {
    throw std::invalid_argument("routing CSV: no data rows");
  }
  r.n_tokens = max_token + 1;
  r.k = max_choice + 1;
  r.n_experts = static_cast<std::size_t>(max_expert) + 1;
  r.assignments.assign(r.k, std::vector<std::int32_t>(r.n_tokens, -1));
  for (const Row& row : rows) {
    r.assignments[row.choice][row.token] = row.expert;
  }
  for (const auto& a : r.assignments) {
    if (std::find(a.begin(), a.end(), -1) != a.end()) {
      throw std::invalid_argument("routing CSV: missing (token, choice) rows");
    }
  }
  r.validate();
  return r;
}

void write_routing_csv(const std::string& path, const RoutingChoice& r) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << routing_to_csv(r);
}

RoutingChoice read_routing_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error(path + ": cannot open for reading");
  std::ostringstream buf;
  buf << is.rdbuf();
  return routing_from_csv(buf.str());
}

}  // namespace moekit
