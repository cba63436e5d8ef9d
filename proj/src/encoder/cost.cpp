#include "convbert/cost.hpp"

#include <charconv>
#include <sstream>

#include "convbert/errors.hpp"

namespace convbert {

std::uint64_t CostNode::total_params() const {
  std::uint64_t t = params;
  for (const CostNode& c : children) t += c.total_params();
  return t;
}

std::uint64_t CostNode::total_madds() const {
  std::uint64_t t = madds;
  for (const CostNode& c : children) t += c.total_madds();
  return t;
}

CostNode& CostNode::child(std::string_view child_name) {
  for (CostNode& c : children) {
    if (c.name == child_name) return c;
  }
  children.push_back(CostNode(std::string(child_name)));
  return children.back();
}

const CostNode& CostReport::at(std::string_view path) const {
  const CostNode* node = &root_;
  std::string_view rest = path;
  while (!rest.empty()) {
    const auto dot = rest.find('.');
    std::string_view part = rest.substr(0, dot);
    rest = dot == std::string_view::npos ? std::string_view{} : rest.substr(dot + 1);
    const CostNode* next = nullptr;
    for (const CostNode& c : node->children) {
      if (c.name == part) next = &c;
    }
    if (next == nullptr) throw InputError("cost report has no component '" + std::string(path) + "'");
    node = next;
  }
  return *node;
}

std::uint64_t CostReport::layer_madds(std::string_view component) const {
  std::uint64_t total = 0;
  for (const CostNode& top : root_.children) {
    if (top.name != "layer") continue;
    for (const CostNode& layer : top.children) {
      total += at("layer." + layer.name + "." + std::string(component)).total_madds();
    }
  }
  return total;
}

namespace {

void text_lines(const CostNode& node, int depth, std::ostringstream& os) {
  os << std::string(2 * depth, ' ') << node.name << "  params=" << node.total_params()
     << "  madds=" << node.total_madds() << '\n';
  for (const CostNode& c : node.children) text_lines(c, depth + 1, os);
}

void csv_lines(const CostNode& node, const std::string& path, std::ostringstream& os) {
  os << path << ',' << node.total_params() << ',' << node.total_madds() << '\n';
  for (const CostNode& c : node.children) csv_lines(c, path + "." + c.name, os);
}

std::uint64_t parse_u64(std::string_view s, std::size_t line) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw InputError("cost CSV line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
  }
  return v;
}

struct Row {
  std::string path;
  std::uint64_t params;
  std::uint64_t madds;
};

void check_sums(const CostNode& node, const std::string& path) {
  if (node.children.empty()) return;
  std::uint64_t p = 0, m = 0;
  for (const CostNode& c : node.children) {
    check_sums(c, path + "." + c.name);
    p += c.params;
    m += c.madds;
  }
  if (p != node.params || m != node.madds) {
    throw InputError("cost CSV: totals of '" + path + "' differ from the sum of its children");
  }
}

// Interior nodes hold the row totals during parsing; strip them afterwards.
void clear_interior(CostNode& node) {
  if (node.children.empty()) return;
  node.params = node.madds = 0;
  for (CostNode& c : node.children) clear_interior(c);
}

}  // namespace

std::string CostReport::to_text() const {
  std::ostringstream os;
  os << "sequence length " << seq_len_ << '\n';
  text_lines(root_, 0, os);
  return os.str();
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "component,params,madds\n";
  csv_lines(root_, root_.name, os);
  return os.str();
}

CostReport CostReport::from_csv(std::string_view csv) {
  std::vector<Row> rows;
  std::size_t line_no = 0;
  while (!csv.empty()) {
    const auto eol = csv.find('\n');
    std::string_view line = csv.substr(0, eol);
    csv = eol == std::string_view::npos ? std::string_view{} : csv.substr(eol + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "component,params,madds") throw InputError("cost CSV: missing header");
      continue;
    }
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 == std::string_view::npos ? c1 : c1 + 1);
    if (c1 == std::string_view::npos || c2 == std::string_view::npos) {
      throw InputError("cost CSV line " + std::to_string(line_no) + ": expected 3 fields");
    }
    rows.push_back({std::string(line.substr(0, c1)), parse_u64(line.substr(c1 + 1, c2 - c1 - 1), line_no),
                    parse_u64(line.substr(c2 + 1), line_no)});
  }
  if (rows.empty()) throw InputError("cost CSV: no rows");
  CostNode root(rows.front().path);
  if (root.name.find('.') != std::string::npos) throw InputError("cost CSV: first row must be the root");
  for (const Row& row : rows) {
    CostNode* node = &root;
    std::string_view path = row.path;
    if (path.substr(0, root.name.size()) != root.name) throw InputError("cost CSV: row outside root: " + row.path);
    path.remove_prefix(root.name.size());
    while (!path.empty()) {
      path.remove_prefix(1);
      const auto dot = path.find('.');
      node = &node->child(path.substr(0, dot));
      path = dot == std::string_view::npos ? std::string_view{} : path.substr(dot);
    }
    node->params = row.params;
    node->madds = row.madds;
  }
  check_sums(root, root.name);
  clear_interior(root);
  return CostReport(std::move(root), 0);
}

namespace {

// Builds the cost tree for one forward pass at length n (n = 0 leaves only
// parameter counts).
class CostBuilder {
 public:
  CostBuilder(const ModelConfig& cfg, std::uint64_t n) : cfg_(cfg), n_(n) {}

  CostNode build() {
    CostNode root("model");
    embeddings(root.child("embeddings"));
    CostNode& layers = root.child("layer");
    for (std::size_t i = 0; i < cfg_.layers; ++i) layer(layers.child(std::to_string(i)));
    return root;
  }

 private:
  static void leaf(CostNode& parent, std::string_view name, std::uint64_t params, std::uint64_t madds) {
    CostNode& c = parent.child(name);
    c.params = params;
    c.madds = madds;
  }

  void linear(CostNode& parent, std::string_view name, std::uint64_t in, std::uint64_t out, std::uint64_t groups = 1) {
    leaf(parent, name, in * out / groups + out, n_ * in * out / groups + n_ * out);
  }

  void embeddings(CostNode& e) {
    const std::uint64_t d = cfg_.d;
    leaf(e, "word", cfg_.vocab_size * cfg_.d_emb, 0);
    if (cfg_.d_emb != cfg_.d) linear(e, "projection", cfg_.d_emb, d);
    leaf(e, "position", cfg_.max_positions * d, 0);
    leaf(e, "segment", cfg_.type_vocab * d, 0);
    leaf(e, "sum", 0, 2 * n_ * d);
    leaf(e, "norm", 2 * d, n_ * d);
  }

  void attention(CostNode& a) {
    const MixedAttentionConfig ac = cfg_.attention();
    const std::uint64_t d = ac.d, db = ac.bottleneck_width(), hc = ac.attention_heads(), k = ac.kernel,
                        dh = ac.head_dim;
    linear(a, "query", d, db);
    linear(a, "key", d, db);
    linear(a, "value", d, db);
    leaf(a, "scores", 0, n_ * n_ * db);
    leaf(a, "softmax", 0, hc * n_ * n_);
    leaf(a, "context", 0, n_ * n_ * db);
    if (ac.use_conv) {
      leaf(a, "input_mask", 0, n_ * d);
      CostNode& sk = a.child("span_key");
      leaf(sk, "depthwise", d * k, n_ * d * k);
      linear(sk, "pointwise", d, db);
      linear(a, "conv_value", d, db);
      leaf(a, "conv_value_mask", 0, n_ * db);
      CostNode& sd = a.child("sdconv");
      leaf(sd, "query_key_product", 0, n_ * db);
      leaf(sd, "kernel_generator", hc * dh * k + hc * k, n_ * db * k + n_ * hc * k);
      leaf(sd, "kernel_softmax", 0, n_ * hc * k);
      leaf(sd, "lconv", 0, n_ * db * k);
      linear(a, "output", 2 * db, d);
    } else {
      linear(a, "output", db, d);
    }
  }

  void layer(CostNode& l) {
    const std::uint64_t d = cfg_.d, f = cfg_.ffn_inner, g = cfg_.groups;
    attention(l.child("attention"));
    leaf(l, "attention_residual", 0, n_ * d);
    leaf(l, "attention_norm", 2 * d, n_ * d);
    CostNode& ffn = l.child("ffn");
    linear(ffn, "inner", d, f, g);
    leaf(ffn, "activation", 0, n_ * f);
    linear(ffn, "outer", f, d, g);
    leaf(l, "ffn_residual", 0, n_ * d);
    leaf(l, "ffn_norm", 2 * d, n_ * d);
  }

  const ModelConfig& cfg_;
  std::uint64_t n_;
};

}  // namespace

CostReport count_params(const ModelConfig& cfg) {
  cfg.validate();
  return CostReport(CostBuilder(cfg, 0).build(), 0);
}

CostReport count_flops(const ModelConfig& cfg, std::size_t n) {
  cfg.validate();
  if (n == 0) throw InputError("count_flops: sequence length must be >= 1");
  return CostReport(CostBuilder(cfg, n).build(), n);
}

}  // namespace convbert
