#include "convbert/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "convbert/checkpoint.hpp"
#include "convbert/cost.hpp"
#include "convbert/errors.hpp"
#include "convbert/model.hpp"
#include "convbert/pretrain.hpp"
#include "convbert/verify.hpp"

namespace convbert {

namespace {

namespace fs = std::filesystem;

std::vector<std::string> variant_names() {
  return {"bert-baseline", "bnk", "bnk+sdconv", "bnk+gl", "bnk+gl+sdconv"};
}

struct CountArgs {
  std::string preset;
  std::string variant = "bnk+sdconv";
  std::string format = "text";
  std::size_t seq_len = 0;
};

struct TrainArgs {
  std::string objective;
  std::string corpus;
  std::size_t steps = 0;
  std::string config;
  std::string out;
  std::uint64_t seed = 1;
  double lr = 0.0;
  double rtd_weight = 50.0;
  std::size_t batch_size = 32;
  double generator_multiplier = 0.0;
  double mask_rate = 0.15;
  bool no_share_embeddings = false;
};

struct DumpArgs {
  std::string checkpoint;
  std::string text;
  std::string out;
  std::string vocab;
};

struct BenchArgs {
  std::string preset;
  std::string variant = "bnk+sdconv";
  std::vector<std::size_t> lens = {32, 64, 128, 256};
  std::size_t repetitions = 7;
};

void print_cost(const CostReport& report, const std::string& format, std::ostream& out) {
  if (format == "csv") {
    out << report.to_csv();
    return;
  }
  out << report.to_text();
  out << "total params " << report.total_params() << '\n';
  if (report.seq_len() > 0) out << "total madds " << report.total_madds() << '\n';
}

int run_grad_check(const std::string& scope_name, std::uint64_t seed, std::ostream& out) {
  const verify::GradScope scope = verify::parse_grad_scope(scope_name);
  const double threshold = verify::grad_threshold(scope);
  bool ok = true;
  out << "check,max_rel_error,coords,status\n";
  for (const verify::GradResult& r : verify::run_grad_suite(scope, seed)) {
    const bool pass = r.max_rel_error < threshold;
    ok = ok && pass;
    out << r.name << ',' << std::setprecision(3) << std::scientific << r.max_rel_error << std::defaultfloat << ','
        << r.coords << ',' << (pass ? "pass" : "FAIL") << '\n';
  }
  out << (ok ? "all checks below " : "some checks at or above ") << threshold << '\n';
  return ok ? kExitOk : kExitVerificationFailure;
}

int run_oracle_check(std::uint64_t seed, std::size_t instances, std::ostream& out) {
  constexpr double kTolerance = 1e-12;
  bool ok = true;
  out << "op,instances,max_abs_error,status\n";
  for (const verify::OracleResult& r : verify::run_oracle_suite(seed, instances)) {
    const bool pass = r.max_error <= kTolerance;
    ok = ok && pass;
    out << r.op << ',' << r.instances << ',' << std::setprecision(3) << std::scientific << r.max_error
        << std::defaultfloat << ',' << (pass ? "pass" : "FAIL") << '\n';
  }
  return ok ? kExitOk : kExitVerificationFailure;
}

int run_train(const TrainArgs& a, std::ostream& out) {
  ModelConfig cfg = ModelConfig::load(a.config);
  const std::vector<std::string> docs = read_corpus(a.corpus);
  if (docs.empty()) throw InputError("corpus " + a.corpus + " holds no documents");
  const Vocab vocab = Vocab::build(docs, cfg.vocab_size);
  cfg.vocab_size = vocab.size();
  cfg.validate();

  std::vector<std::vector<std::int64_t>> corpus;
  for (const std::string& doc : docs) corpus.push_back(vocab.encode(doc, cfg.max_positions));

  const std::optional<std::string> preset = matching_preset(cfg);
  PretrainOptions options;
  options.seed = a.seed;
  options.learning_rate = a.lr > 0.0 ? a.lr : (preset ? default_learning_rate(*preset) : options.learning_rate);
  options.rtd_weight = a.rtd_weight;
  options.batch_size = a.batch_size;
  options.mask_rate = a.mask_rate;
  options.generator_multiplier = a.generator_multiplier > 0.0
                                     ? a.generator_multiplier
                                     : (preset ? default_generator_multiplier(*preset) : options.generator_multiplier);
  options.share_embeddings = !a.no_share_embeddings;

  Pretrainer trainer(cfg, parse_objective(a.objective), options);
  const std::vector<StepMetrics> log = train_loop(trainer, corpus, a.steps);

  fs::create_directories(a.out);
  const fs::path dir(a.out);
  write_metrics_csv((dir / "metrics.csv").string(), log);
  save_checkpoint((dir / "checkpoint.bin").string(), cfg, trainer.parameters());
  vocab.save((dir / "vocab.txt").string());

  out << "steps " << log.size() << ", learning rate " << options.learning_rate << ", vocabulary " << cfg.vocab_size
      << '\n';
  if (!log.empty()) {
    out << "first joint loss " << log.front().joint_loss << ", last joint loss " << log.back().joint_loss << '\n';
  }
  out << "wrote " << (dir / "metrics.csv").string() << ", " << (dir / "checkpoint.bin").string() << ", "
      << (dir / "vocab.txt").string() << '\n';
  return kExitOk;
}

int run_dump_attention(const DumpArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const ConvBertModel model = model_from_checkpoint(ckpt);
  const std::string vocab_path =
      a.vocab.empty() ? (fs::path(a.checkpoint).parent_path() / "vocab.txt").string() : a.vocab;
  const Vocab vocab = Vocab::load(vocab_path);
  const std::vector<std::int64_t> ids = vocab.encode(a.text, model.config().max_positions);
  const std::vector<double> map = average_attention_map(model, ids);
  const std::size_t n = ids.size();

  std::ofstream file(a.out);
  if (!file) throw InputError("cannot write " + a.out);
  file << std::setprecision(17);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) file << (j ? "," : "") << map[i * n + j];
    file << '\n';
  }
  if (!file) throw InputError("failed writing " + a.out);
  out << "wrote " << n << "x" << n << " attention map to " << a.out << '\n';
  return kExitOk;
}

int run_bench_scaling(const BenchArgs& a, std::ostream& out) {
  const ModelConfig cfg = ModelConfig::preset(a.preset, parse_variant(a.variant));
  for (std::size_t n : a.lens) {
    if (n == 0 || n > cfg.max_positions) {
      throw InputError("length " + std::to_string(n) + " outside [1, " + std::to_string(cfg.max_positions) + "]");
    }
  }
  out << "# counted multiply-adds per layer component, summed over layers\n";
  out << "n,component,madds\n";
  for (std::size_t n : a.lens) {
    const CostReport cost = count_flops(cfg, n);
    const CostNode& layer0 = cost.at("layer.0");
    for (const CostNode& part : layer0.children) {
      if (part.children.empty()) {
        out << n << ',' << part.name << ',' << cost.layer_madds(part.name) << '\n';
        continue;
      }
      for (const CostNode& leaf : part.children) {
        const std::string path = part.name + "." + leaf.name;
        out << n << ',' << path << ',' << cost.layer_madds(path) << '\n';
      }
    }
  }

  const std::vector<verify::ScalingPoint> points = verify::measure_scaling(cfg, a.lens, a.repetitions);
  out << "# measured single-operator time, best of " << a.repetitions << "\n";
  out << "n,operator,madds,seconds\n";
  for (const verify::ScalingPoint& p : points) {
    out << p.n << ",self_attention," << p.attention_madds << ',' << std::setprecision(6) << p.attention_seconds << '\n';
    if (p.sdconv_madds > 0) out << p.n << ",sdconv," << p.sdconv_madds << ',' << p.sdconv_seconds << '\n';
  }
  out << "# ratios against the previous length\n";
  out << "n,operator,madds_ratio,time_ratio\n";
  for (std::size_t i = 1; i < points.size(); ++i) {
    const auto& p = points[i];
    const auto& q = points[i - 1];
    out << p.n << ",self_attention," << double(p.attention_madds) / double(q.attention_madds) << ','
        << p.attention_seconds / q.attention_seconds << '\n';
    if (p.sdconv_madds > 0) {
      out << p.n << ",sdconv," << double(p.sdconv_madds) / double(q.sdconv_madds) << ','
          << p.sdconv_seconds / q.sdconv_seconds << '\n';
    }
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"ConvBERT encoder toolkit: cost accounting, verification, training and attention dumps", "convbert"};
  app.require_subcommand(1, 1);
  app.failure_message(CLI::FailureMessage::help);

  const auto presets = ModelConfig::preset_names();
  const auto variants = variant_names();

  CountArgs params_args;
  CLI::App* count_params_cmd = app.add_subcommand("count-params", "Print the parameter breakdown of a preset");
  count_params_cmd->add_option("--preset", params_args.preset, "Model size")->required()->check(CLI::IsMember(presets));
  count_params_cmd->add_option("--variant", params_args.variant, "Architecture variant")
      ->check(CLI::IsMember(variants))
      ->capture_default_str();
  count_params_cmd->add_option("--format", params_args.format, "text or csv")
      ->check(CLI::IsMember({"text", "csv"}))
      ->capture_default_str();

  CountArgs flops_args;
  CLI::App* count_flops_cmd =
      app.add_subcommand("count-flops", "Print multiply-adds of one forward pass at a sequence length");
  count_flops_cmd->add_option("--preset", flops_args.preset, "Model size")->required()->check(CLI::IsMember(presets));
  count_flops_cmd->add_option("--variant", flops_args.variant, "Architecture variant")
      ->check(CLI::IsMember(variants))
      ->capture_default_str();
  count_flops_cmd->add_option("--seq-len", flops_args.seq_len, "Sequence length")
      ->required()
      ->check(CLI::PositiveNumber);
  count_flops_cmd->add_option("--format", flops_args.format, "text or csv")
      ->check(CLI::IsMember({"text", "csv"}))
      ->capture_default_str();

  std::string grad_scope;
  std::uint64_t grad_seed = 1;
  CLI::App* grad_cmd = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  grad_cmd->add_option("--scope", grad_scope, "op, block or model")
      ->required()
      ->check(CLI::IsMember({"op", "block", "model"}));
  grad_cmd->add_option("--seed", grad_seed, "Random seed")->capture_default_str();

  std::uint64_t oracle_seed = 1;
  std::size_t oracle_instances = 50;
  CLI::App* oracle_cmd = app.add_subcommand("oracle-check", "Compare every operator with its naive-loop oracle");
  oracle_cmd->add_option("--seed", oracle_seed, "Random seed")->capture_default_str();
  oracle_cmd->add_option("--instances", oracle_instances, "Random instances per operator")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "Pretrain on a corpus with MLM or replaced-token detection");
  train_cmd->add_option("--objective", train_args.objective, "mlm or rtd")
      ->required()
      ->check(CLI::IsMember({"mlm", "rtd"}));
  train_cmd->add_option("--corpus", train_args.corpus, "One document per line")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--steps", train_args.steps, "Optimizer updates")->required();
  train_cmd->add_option("--config", train_args.config, "key=value model config")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();
  train_cmd->add_option("--seed", train_args.seed, "Random seed")->capture_default_str();
  train_cmd->add_option("--lr", train_args.lr, "Peak learning rate (default: preset value, else 1e-3)");
  train_cmd->add_option("--rtd-weight", train_args.rtd_weight, "Weight of the discriminator loss")
      ->capture_default_str();
  train_cmd->add_option("--batch-size", train_args.batch_size, "Sequences per update")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--mask-rate", train_args.mask_rate, "Fraction of tokens selected for masking")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  train_cmd->add_option("--generator-multiplier", train_args.generator_multiplier,
                        "Generator width relative to the discriminator (default: preset value, else 0.25)");
  train_cmd->add_flag("--no-share-embeddings", train_args.no_share_embeddings,
                      "Give the generator its own word-embedding table");

  DumpArgs dump_args;
  CLI::App* dump_cmd = app.add_subcommand("dump-attention", "Write the averaged self-attention map as CSV");
  dump_cmd->add_option("--checkpoint", dump_args.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  dump_cmd->add_option("--text", dump_args.text, "Input text")->required();
  dump_cmd->add_option("--out", dump_args.out, "Output CSV")->required();
  dump_cmd->add_option("--vocab", dump_args.vocab, "Vocabulary file (default: vocab.txt beside the checkpoint)");

  BenchArgs bench_args;
  CLI::App* bench_cmd = app.add_subcommand("bench-scaling", "Counted and measured cost against sequence length");
  bench_cmd->add_option("--preset", bench_args.preset, "Model size")->required()->check(CLI::IsMember(presets));
  bench_cmd->add_option("--variant", bench_args.variant, "Architecture variant")
      ->check(CLI::IsMember(variants))
      ->capture_default_str();
  bench_cmd->add_option("--lens", bench_args.lens, "Comma-separated sequence lengths")
      ->delimiter(',')
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  bench_cmd->add_option("--repetitions", bench_args.repetitions, "Timed samples per operator")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (count_params_cmd->parsed()) {
      print_cost(count_params(ModelConfig::preset(params_args.preset, parse_variant(params_args.variant))),
                 params_args.format, out);
      return kExitOk;
    }
    if (count_flops_cmd->parsed()) {
      print_cost(count_flops(ModelConfig::preset(flops_args.preset, parse_variant(flops_args.variant)),
                             flops_args.seq_len),
                 flops_args.format, out);
      return kExitOk;
    }
    if (grad_cmd->parsed()) return run_grad_check(grad_scope, grad_seed, out);
    if (oracle_cmd->parsed()) return run_oracle_check(oracle_seed, oracle_instances, out);
    if (train_cmd->parsed()) return run_train(train_args, out);
    if (dump_cmd->parsed()) return run_dump_attention(dump_args, out);
    if (bench_cmd->parsed()) return run_bench_scaling(bench_args, out);
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitVerificationFailure;
  }
  return kExitUsage;
}

}  // namespace convbert
