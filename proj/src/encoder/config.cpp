#include "convbert/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "convbert/errors.hpp"

namespace convbert {

namespace {

struct VariantEntry {
  Variant variant;
  std::string_view name;
};

constexpr VariantEntry kVariants[] = {
    {Variant::BertBaseline, "bert-baseline"}, {Variant::Bottleneck, "bnk"},
    {Variant::BottleneckConv, "bnk+sdconv"},  {Variant::BottleneckGl, "bnk+gl"},
    {Variant::BottleneckGlConv, "bnk+gl+sdconv"},
};

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t parse_size(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size()) {
    throw InputError("config: key '" + std::string(key) + "' expects a non-negative integer, got '" +
                     std::string(value) + "'");
  }
  return out;
}

}  // namespace

std::string_view variant_name(Variant v) {
  for (const auto& e : kVariants) {
    if (e.variant == v) return e.name;
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (const auto& e : kVariants) {
    if (e.name == name) return e.variant;
  }
  throw InputError("unknown variant '" + std::string(name) +
                   "' (expected bert-baseline, bnk, bnk+sdconv, bnk+gl or bnk+gl+sdconv)");
}

bool variant_has_conv(Variant v) { return v == Variant::BottleneckConv || v == Variant::BottleneckGlConv; }

bool variant_has_groups(Variant v) { return v == Variant::BottleneckGl || v == Variant::BottleneckGlConv; }

bool variant_has_bottleneck(Variant v) { return v != Variant::BertBaseline; }

MixedAttentionConfig ModelConfig::attention() const {
  return {.d = d, .heads = heads, .reduction = reduction, .head_dim = head_dim, .kernel = kernel,
          .use_conv = variant_has_conv(variant)};
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (layers == 0 || d == 0 || d_emb == 0 || ffn_inner == 0 || groups == 0 || vocab_size == 0 ||
      max_positions == 0 || type_vocab == 0) {
    fail("all sizes must be positive");
  }
  if (d % groups != 0 || ffn_inner % groups != 0) {
    fail(std::to_string(groups) + " groups must divide d=" + std::to_string(d) + " and ffn_inner=" +
         std::to_string(ffn_inner));
  }
  if (!variant_has_groups(variant) && groups != 1) fail("variant " + std::string(variant_name(variant)) + " uses ungrouped FFN (groups=1)");
  if (!variant_has_bottleneck(variant) && reduction != 1) fail("bert-baseline has no bottleneck (gamma=1)");
  if (variant_has_bottleneck(variant) && reduction < 2) fail("bottleneck variants need gamma >= 2");
  attention().validate();
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "layers = " << layers << '\n'
     << "d = " << d << '\n'
     << "d_emb = " << d_emb << '\n'
     << "ffn_inner = " << ffn_inner << '\n'
     << "groups = " << groups << '\n'
     << "H = " << heads << '\n'
     << "gamma = " << reduction << '\n'
     << "d_head = " << head_dim << '\n'
     << "k = " << kernel << '\n'
     << "vocab_size = " << vocab_size << '\n'
     << "max_positions = " << max_positions << '\n'
     << "variant = " << variant_name(variant) << '\n';
  return os.str();
}

ModelConfig ModelConfig::parse(std::string_view text) {
  ModelConfig cfg;
  std::vector<std::pair<std::string, std::string>> pairs;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto eol = text.find('\n');
    std::string_view line = text.substr(0, eol);
    text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw InputError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    pairs.emplace_back(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
  }
  // A preset, if given, seeds the fields regardless of where it appears.
  Variant variant = Variant::BottleneckConv;
  std::string preset_name;
  for (const auto& [key, value] : pairs) {
    if (key == "variant") variant = parse_variant(value);
    if (key == "preset") preset_name = value;
  }
  if (!preset_name.empty()) cfg = preset(preset_name, variant);
  for (const auto& [key, value] : pairs) {
    if (key == "preset") continue;
    if (key == "variant") cfg.variant = parse_variant(value);
    else if (key == "layers") cfg.layers = parse_size(key, value);
    else if (key == "d") cfg.d = parse_size(key, value);
    else if (key == "d_emb") cfg.d_emb = parse_size(key, value);
    else if (key == "ffn_inner") cfg.ffn_inner = parse_size(key, value);
    else if (key == "groups") cfg.groups = parse_size(key, value);
    else if (key == "H") cfg.heads = parse_size(key, value);
    else if (key == "gamma") cfg.reduction = parse_size(key, value);
    else if (key == "d_head") cfg.head_dim = parse_size(key, value);
    else if (key == "k") cfg.kernel = parse_size(key, value);
    else if (key == "vocab_size") cfg.vocab_size = parse_size(key, value);
    else if (key == "max_positions") cfg.max_positions = parse_size(key, value);
    else throw InputError("config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

ModelConfig ModelConfig::preset(std::string_view name, Variant variant) {
  ModelConfig cfg;
  if (name == "small") {
    cfg.layers = 12, cfg.d = 256, cfg.d_emb = 128, cfg.ffn_inner = 1024, cfg.heads = 4, cfg.head_dim = 64;
  } else if (name == "medium-small") {
    cfg.layers = 12, cfg.d = 384, cfg.d_emb = 128, cfg.ffn_inner = 1536, cfg.heads = 8, cfg.head_dim = 48;
  } else if (name == "base") {
    cfg.layers = 12, cfg.d = 768, cfg.d_emb = 768, cfg.ffn_inner = 3072, cfg.heads = 12, cfg.head_dim = 64;
  } else if (name == "tiny") {
    cfg.layers = 2, cfg.d = 32, cfg.d_emb = 16, cfg.ffn_inner = 64, cfg.heads = 4, cfg.head_dim = 8;
    cfg.kernel = 3, cfg.vocab_size = 64, cfg.max_positions = 64;
  } else {
    throw InputError("unknown preset '" + std::string(name) + "' (expected small, medium-small, base or tiny)");
  }
  if (name != "tiny") cfg.kernel = 9;
  cfg.variant = variant;
  cfg.reduction = variant_has_bottleneck(variant) ? 2 : 1;
  cfg.groups = variant_has_groups(variant) ? 2 : 1;
  cfg.validate();
  return cfg;
}

std::vector<std::string> ModelConfig::preset_names() { return {"small", "medium-small", "base", "tiny"}; }

ModelConfig generator_config(const ModelConfig& main, double multiplier) {
  if (!(multiplier > 0.0 && multiplier <= 1.0)) throw ConfigError("generator multiplier must lie in (0, 1]");
  ModelConfig gen = main;
  const auto scaled = [&](std::size_t v) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(v) * multiplier)));
  };
  std::size_t heads = std::max(main.reduction, scaled(main.heads));
  heads = (heads + main.reduction - 1) / main.reduction * main.reduction;
  const std::size_t head_dim = std::max<std::size_t>(1, scaled(main.d) / heads);
  gen.heads = heads;
  gen.head_dim = head_dim;
  gen.d = heads * head_dim;
  gen.ffn_inner = scaled(main.ffn_inner);
  if (gen.d % gen.groups != 0 || gen.ffn_inner % gen.groups != 0) gen.groups = 1;
  if (gen.groups == 1 && variant_has_groups(gen.variant)) {
    gen.variant = variant_has_conv(gen.variant) ? Variant::BottleneckConv : Variant::Bottleneck;
  }
  gen.validate();
  return gen;
}

double default_generator_multiplier(std::string_view preset) { return preset == "base" ? 1.0 / 3.0 : 0.25; }

double default_learning_rate(std::string_view preset) {
  if (preset == "small") return 3e-4;
  if (preset == "medium-small") return 5e-4;
  if (preset == "base") return 2e-4;
  return 1e-3;
}

}  // namespace convbert
