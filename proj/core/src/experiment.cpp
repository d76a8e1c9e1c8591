#include "advpnml/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <limits>
#include <set>

#include <fmt/format.h>
#include <fmt/ostream.h>
#include <zlib.h>

#include "advpnml/checkpoint.hpp"
#include "advpnml/rng.hpp"

namespace advpnml {
namespace {

using nlohmann::json;

// Reads the keys of one JSON object and rejects any it was not asked about.
class Section {
 public:
  Section(const json& doc, std::string where) : doc_(doc), where_(std::move(where)) {
    if (!doc_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return doc_.contains(key) && !doc_.at(key).is_null();
  }

  template <typename V>
  std::optional<V> get(const std::string& key) {
    if (!has(key)) return std::nullopt;
    try {
      return doc_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(fmt::format("{}.{}: {}", where_, key, e.what()));
    }
  }

  template <typename V>
  V get_or(const std::string& key, V fallback) {
    return get<V>(key).value_or(std::move(fallback));
  }

  template <typename V>
  V require(const std::string& key) {
    auto v = get<V>(key);
    if (!v) throw ConfigError(fmt::format("{}: missing key '{}'", where_, key));
    return *v;
  }

  const json& child(const std::string& key) {
    seen_.insert(key);
    return doc_.at(key);
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& item : doc_.items()) {
      if (!seen_.contains(item.key())) throw ConfigError(fmt::format("{}: unknown key '{}'", where_, item.key()));
    }
  }

 private:
  const json& doc_;
  std::string where_;
  std::set<std::string> seen_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

void require_positive(double v, const std::string& what) {
  if (!(v > 0.0)) throw ConfigError(what + " must be positive");
}

AttackConfig parse_attack_fields(Section& s, const std::string& where) {
  AttackConfig a;
  a.epsilon = s.get_or<double>("epsilon", a.epsilon);
  a.step_size = s.get_or<double>("step_size", a.step_size);
  a.iterations = s.get_or<int>("iterations", a.iterations);
  a.restarts = s.get_or<int>("restarts", a.restarts);
  a.random_start = s.get_or<bool>("random_start", a.random_start);
  if (a.epsilon < 0.0) throw ConfigError(where + ".epsilon must be nonnegative");
  require_positive(a.step_size, where + ".step_size");
  if (a.iterations < 1 || a.restarts < 1) throw ConfigError(where + ": iterations and restarts must be positive");
  return a;
}

EvalAttack parse_eval_attack(const json& doc, std::size_t index) {
  const std::string where = fmt::format("attacks[{}]", index);
  Section s(doc, where);
  EvalAttack a;
  const auto kind = s.require<std::string>("kind");
  a.name = s.get_or<std::string>("name", kind);
  if (kind == "fgsm") {
    a.kind = AttackKind::kFgsm;
  } else if (kind == "pgd") {
    a.kind = AttackKind::kPgd;
  } else if (kind == "adaptive") {
    a.kind = AttackKind::kAdaptive;
  } else if (kind == "hsja") {
    a.kind = AttackKind::kHsja;
  } else {
    throw ConfigError(where + ": unknown attack kind '" + kind + "'");
  }
  a.config = parse_attack_fields(s, where);
  a.hsja.query_budget = s.get_or<std::size_t>("query_budget", a.hsja.query_budget);
  a.hsja.init_evals = s.get_or<std::size_t>("init_evals", a.hsja.init_evals);
  a.hsja.max_evals = s.get_or<std::size_t>("max_evals", a.hsja.max_evals);
  a.hsja.binary_threshold = s.get_or<double>("binary_threshold", a.hsja.binary_threshold);
  if (a.hsja.query_budget == 0) throw ConfigError(where + ".query_budget must be positive");
  s.finish();
  return a;
}

RefineConfig parse_defense(const json& doc, double default_lambda) {
  Section s(doc, "defense");
  RefineConfig r;
  r.strength = s.get_or<double>("lambda", default_lambda);
  r.iterations = s.get_or<int>("iterations", r.iterations);
  r.step = s.get<double>("step");
  r.top_k = s.get<std::size_t>("top_k");
  s.finish();
  try {
    r.validate();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("defense: ") + e.what());
  }
  return r;
}

TrainConfig parse_train(const json& doc) {
  Section s(doc, "train");
  TrainConfig t;
  t.epochs = s.get_or<int>("epochs", t.epochs);
  t.batch_size = s.get_or<std::size_t>("batch_size", t.batch_size);
  if (s.has("lr")) {
    const json& lr = s.child("lr");
    if (lr.is_number()) {
      t.lr = LrSchedule::constant(lr.get<double>());
    } else {
      try {
        t.lr.steps = lr.get<std::vector<std::pair<int, double>>>();
      } catch (const json::exception& e) {
        throw ConfigError(std::string("train.lr: expected a rate or [[epoch, rate], ...]: ") + e.what());
      }
    }
  }
  t.momentum = s.get_or<double>("momentum", t.momentum);
  t.weight_decay = s.get_or<double>("weight_decay", t.weight_decay);
  t.adaptive_switch_epoch = s.get<int>("adaptive_switch_epoch");
  t.epsilon_warmup_epochs = s.get_or<int>("epsilon_warmup_epochs", t.epsilon_warmup_epochs);
  if (s.has("adversary")) {
    Section a(s.child("adversary"), "train.adversary");
    const auto kind = a.require<std::string>("kind");
    if (kind == "none") {
      t.adversary.kind = AdversaryKind::kNone;
    } else if (kind == "pgd") {
      t.adversary.kind = AdversaryKind::kPgd;
    } else if (kind == "adaptive") {
      t.adversary.kind = AdversaryKind::kAdaptive;
    } else {
      throw ConfigError("train.adversary: unknown kind '" + kind + "'");
    }
    t.adversary.attack = parse_attack_fields(a, "train.adversary");
    a.finish();
  }
  s.finish();
  return t;
}

void derive_seeds(ExperimentConfig& cfg) {
  cfg.synthetic.seed = derive_seed(cfg.seed, kDataStream);
  cfg.train.seed = derive_seed(cfg.seed, kTrainStream);
  for (std::size_t i = 0; i < cfg.attacks.size(); ++i) {
    const std::uint64_t s = derive_seed(cfg.seed, kAttackStream + i);
    cfg.attacks[i].config.seed = s;
    cfg.attacks[i].hsja.seed = s;
  }
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path(), ec);
  if (ec) throw IoError(fmt::format("cannot create directory for {}: {}", path.string(), ec.message()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void finish_output(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("error writing " + path.string());
}

std::size_t hypothesis_count(const ModelSpec& spec, const std::optional<RefineConfig>& defense) {
  if (!defense) return 0;
  return std::min(defense->top_k.value_or(spec.n_classes()), spec.n_classes());
}

void prepare(ExperimentConfig& cfg, const CommandOptions& opts) {
  if (opts.seed) apply_seed(cfg, *opts.seed);
  if (opts.out) cfg.output_dir = *opts.out;
}

void log_rows(std::ostream* log, const std::vector<ResultRow>& rows) {
  if (!log) return;
  for (const ResultRow& r : rows) {
    fmt::print(*log, "{:<5} {:<12} eps={:<6} lambda={:<5} k={:<3} natural={:.4f} adv={:.4f} regret={:.4f} ({:.1f}s)\n",
               r.defense, r.attack, r.epsilon, r.lambda, r.hypotheses, r.natural_acc, r.adv_acc, r.regret_mean,
               r.wall_time);
  }
}

}  // namespace

ExperimentConfig parse_config(const json& doc, const std::filesystem::path& base_dir) {
  Section root(doc, "config");
  ExperimentConfig cfg;
  cfg.experiment_id = root.get_or<std::string>("experiment_id", cfg.experiment_id);
  cfg.seed = root.get_or<std::uint64_t>("seed", cfg.seed);

  {
    Section d(root.child("dataset"), "dataset");
    const auto kind = d.require<std::string>("kind");
    if (kind == "synthetic") {
      cfg.dataset = ExperimentConfig::DatasetKind::kSynthetic;
      cfg.synthetic.n_per_class = d.get_or<std::size_t>("n_per_class", cfg.synthetic.n_per_class);
      cfg.synthetic_test_per_class = d.get_or<std::size_t>("test_per_class", cfg.synthetic_test_per_class);
      cfg.synthetic.variance = d.get_or<double>("variance", cfg.synthetic.variance);
      cfg.synthetic.radius = d.get_or<double>("radius", cfg.synthetic.radius);
      require_positive(cfg.synthetic.variance, "dataset.variance");
      require_positive(cfg.synthetic.radius, "dataset.radius");
      if (cfg.synthetic.n_per_class == 0 || cfg.synthetic_test_per_class == 0) {
        throw ConfigError("dataset: class sizes must be positive");
      }
    } else if (kind == "mnist") {
      cfg.dataset = ExperimentConfig::DatasetKind::kMnist;
      cfg.train_images = resolve(base_dir, d.require<std::string>("train_images"));
      cfg.train_labels = resolve(base_dir, d.require<std::string>("train_labels"));
      cfg.test_images = resolve(base_dir, d.require<std::string>("test_images"));
      cfg.test_labels = resolve(base_dir, d.require<std::string>("test_labels"));
      cfg.train_size = d.get<std::size_t>("train_size");
    } else {
      throw ConfigError("dataset: unknown kind '" + kind + "'");
    }
    d.finish();
  }

  const bool mnist = cfg.dataset == ExperimentConfig::DatasetKind::kMnist;
  const auto model = root.get<std::string>("model");
  try {
    cfg.model = model ? ModelSpec::parse(*model) : (mnist ? ModelSpec::mnist_convnet() : cfg.model);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }

  const double default_lambda = mnist ? 0.1 : 0.6;
  if (root.has("defense")) {
    cfg.defense = parse_defense(root.child("defense"), default_lambda);
    cfg.defense->clamp = cfg.input_range();
  }
  if (root.has("train")) cfg.train = parse_train(root.child("train"));
  cfg.train.adversary.attack.clamp = cfg.input_range();
  if (cfg.defense) {
    cfg.train.adversary.refine = *cfg.defense;
  } else {
    cfg.train.adversary.refine.strength = default_lambda;
  }
  cfg.train.adversary.refine.clamp = cfg.input_range();
  try {
    cfg.train.validate();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }

  if (root.has("attacks")) {
    const json& list = root.child("attacks");
    if (!list.is_array()) throw ConfigError("attacks: expected an array");
    std::set<std::string> names;
    for (std::size_t i = 0; i < list.size(); ++i) {
      EvalAttack a = parse_eval_attack(list[i], i);
      a.config.clamp = cfg.input_range();
      a.hsja.clamp = cfg.input_range();
      if (!names.insert(a.name).second || a.name == "natural") {
        throw ConfigError("attacks: duplicate or reserved name '" + a.name + "'");
      }
      cfg.attacks.push_back(std::move(a));
    }
  }

  if (root.has("eval")) {
    Section e(root.child("eval"), "eval");
    cfg.eval_samples = e.get_or<std::size_t>("samples", cfg.eval_samples);
    cfg.eval_chunk = e.get_or<std::size_t>("chunk", cfg.eval_chunk);
    e.finish();
    if (cfg.eval_samples == 0 || cfg.eval_chunk == 0) throw ConfigError("eval: samples and chunk must be positive");
  }

  if (root.has("sweep")) {
    Section s(root.child("sweep"), "sweep");
    cfg.sweep_axis = s.require<std::string>("axis");
    cfg.sweep_values = s.require<std::vector<double>>("values");
    s.finish();
    if (cfg.sweep_axis != "epsilon" && cfg.sweep_axis != "lambda" && cfg.sweep_axis != "hypotheses") {
      throw ConfigError("sweep.axis must be epsilon, lambda or hypotheses");
    }
    if (cfg.sweep_values.empty() || !std::is_sorted(cfg.sweep_values.begin(), cfg.sweep_values.end())) {
      throw ConfigError("sweep.values must be nonempty and sorted");
    }
  }

  if (const auto out = root.get<std::string>("output_dir")) cfg.output_dir = resolve(base_dir, *out);
  if (const auto ckpt = root.get<std::string>("checkpoint")) cfg.checkpoint = resolve(base_dir, *ckpt);
  root.finish();

  derive_seeds(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return parse_config(doc, path.parent_path());
}

void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  derive_seeds(cfg);
}

std::vector<std::uint8_t> read_file_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> buf(1 << 16);
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      int err = 0;
      const std::string msg = gzerror(f, &err);
      gzclose(f);
      throw IoError(fmt::format("error reading {}: {}", path.string(), msg));
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

Datasets load_datasets(const ExperimentConfig& cfg) {
  if (cfg.dataset == ExperimentConfig::DatasetKind::kSynthetic) {
    SyntheticSpec train = cfg.synthetic;
    train.seed = derive_seed(cfg.synthetic.seed, 0);
    SyntheticSpec test = cfg.synthetic;
    test.n_per_class = cfg.synthetic_test_per_class;
    test.seed = derive_seed(cfg.synthetic.seed, 1);
    return {gen_synthetic(train), gen_synthetic(test)};
  }
  Datasets d{parse_mnist_idx(read_file_maybe_gzip(cfg.train_images), read_file_maybe_gzip(cfg.train_labels)),
             parse_mnist_idx(read_file_maybe_gzip(cfg.test_images), read_file_maybe_gzip(cfg.test_labels))};
  if (cfg.train_size) d.train = d.train.head(*cfg.train_size);
  return d;
}

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "schema_version,experiment_id,defense,attack,epsilon,lambda,hypotheses,natural_acc,adv_acc,regret_mean,"
         "best_attack_acc\n";
  for (const ResultRow& r : rows) {
    fmt::print(out, "{},{},{},{},{},{},{},{},{},{},{}\n", kResultSchemaVersion, r.experiment_id, r.defense, r.attack,
               r.epsilon, r.lambda, r.hypotheses, r.natural_acc, r.adv_acc, r.regret_mean, r.best_attack_acc);
  }
}

void write_timings_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "experiment_id,defense,attack,epsilon,lambda,hypotheses,wall_time\n";
  for (const ResultRow& r : rows) {
    fmt::print(out, "{},{},{},{},{},{},{:.3f}\n", r.experiment_id, r.defense, r.attack, r.epsilon, r.lambda,
               r.hypotheses, r.wall_time);
  }
}

std::vector<ResultRow> evaluation_rows(const ExperimentConfig& cfg, const ModelParams<float>& params,
                                       const LabeledSet& test, const std::optional<RefineConfig>& defense, int jobs) {
  const LabeledSet set = test.head(cfg.eval_samples);
  EvalOptions options;
  options.defense = defense;
  options.chunk = cfg.eval_chunk;
  options.jobs = jobs;

  ResultRow base;
  base.experiment_id = cfg.experiment_id;
  base.defense = defense ? "pnml" : "none";
  base.lambda = defense ? defense->strength : 0.0;
  base.hypotheses = hypothesis_count(params.spec, defense);

  auto start = std::chrono::steady_clock::now();
  const EvalRecord natural = evaluate(params, set, {}, options);
  std::vector<ResultRow> rows;
  ResultRow nat = base;
  nat.attack = "natural";
  nat.natural_acc = natural.natural_acc;
  nat.adv_acc = natural.natural_acc;
  nat.regret_mean = natural.natural_regret_mean;
  nat.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rows.push_back(nat);

  double best = natural.natural_acc;
  for (std::size_t i = 0; i < cfg.attacks.size(); ++i) {
    start = std::chrono::steady_clock::now();
    const EvalRecord rec = evaluate(params, set, std::span<const EvalAttack>(&cfg.attacks[i], 1), options);
    ResultRow row = base;
    row.attack = cfg.attacks[i].name;
    row.epsilon = cfg.attacks[i].config.epsilon;
    row.natural_acc = natural.natural_acc;
    row.adv_acc = rec.attacks.front().accuracy;
    row.regret_mean = rec.attacks.front().regret_mean;
    row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    best = i == 0 ? row.adv_acc : std::min(best, row.adv_acc);
    rows.push_back(row);
  }
  for (ResultRow& r : rows) r.best_attack_acc = best;
  return rows;
}

void cmd_gen_data(ExperimentConfig cfg, const CommandOptions& opts) {
  prepare(cfg, opts);
  const Datasets d = load_datasets(cfg);
  json meta = {{"experiment_id", cfg.experiment_id}, {"seed", cfg.seed}, {"train_samples", d.train.size()},
               {"test_samples", d.test.size()}};
  if (cfg.dataset == ExperimentConfig::DatasetKind::kSynthetic) {
    meta["kind"] = "synthetic";
    meta["variance"] = cfg.synthetic.variance;
    meta["radius"] = cfg.synthetic.radius;
    for (const auto& [name, set] : {std::pair{"train.csv", &d.train}, std::pair{"test.csv", &d.test}}) {
      const auto path = cfg.output_dir / name;
      std::ofstream out = open_output(path);
      write_csv(out, *set);
      finish_output(out, path);
    }
  } else {
    meta["kind"] = "mnist";
  }
  const auto path = cfg.output_dir / "dataset.json";
  std::ofstream out = open_output(path);
  out << meta.dump(2) << '\n';
  finish_output(out, path);
  if (opts.log) fmt::print(*opts.log, "wrote {} train / {} test samples to {}\n", d.train.size(), d.test.size(),
                           cfg.output_dir.string());
}

ModelParams<float> cmd_train(ExperimentConfig cfg, const CommandOptions& opts) {
  prepare(cfg, opts);
  const Datasets d = load_datasets(cfg);
  if (d.train.sample_shape() != cfg.model.input_shape()) {
    throw ConfigError("model input shape does not match the dataset");
  }
  if (opts.log) {
    cfg.train.on_epoch = [log = opts.log](const EpochRecord& r) {
      fmt::print(*log, "epoch {:>3}  loss {:.4f}  natural {:.4f}{}  ({:.1f}s)\n", r.epoch, r.train_loss,
                 r.natural_acc, r.adversarial_acc ? fmt::format("  adversarial {:.4f}", *r.adversarial_acc) : "",
                 r.wall_seconds);
      log->flush();
    };
  }
  auto [params, log] = train(cfg.model, d.train, cfg.train);
  std::error_code ec;
  std::filesystem::create_directories(cfg.checkpoint_path().parent_path(), ec);
  if (ec) throw IoError("cannot create directory for " + cfg.checkpoint_path().string());
  save_checkpoint(params, cfg.checkpoint_path(), TrainingMetadata{cfg.train.epochs, cfg.train.seed});
  const auto path = cfg.output_dir / "train_log.csv";
  std::ofstream out = open_output(path);
  write_csv(out, log);
  finish_output(out, path);
  return params;
}

namespace {

ModelParams<float> load_model(const ExperimentConfig& cfg) {
  const auto path = cfg.checkpoint_path();
  if (!std::filesystem::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  return load_checkpoint(path, cfg.model).params;
}

void write_tables(const std::filesystem::path& dir, const std::string& stem, const std::vector<ResultRow>& rows) {
  const auto results = dir / (stem + ".csv");
  std::ofstream out = open_output(results);
  write_results_csv(out, rows);
  finish_output(out, results);
  const auto timings = dir / (stem + "_timings.csv");
  std::ofstream t = open_output(timings);
  write_timings_csv(t, rows);
  finish_output(t, timings);
}

}  // namespace

std::vector<ResultRow> cmd_eval(ExperimentConfig cfg, const CommandOptions& opts) {
  prepare(cfg, opts);
  const ModelParams<float> params = load_model(cfg);
  const Datasets d = load_datasets(cfg);
  std::vector<ResultRow> rows = evaluation_rows(cfg, params, d.test, std::nullopt, opts.jobs);
  log_rows(opts.log, rows);
  if (cfg.defense) {
    auto defended = evaluation_rows(cfg, params, d.test, cfg.defense, opts.jobs);
    log_rows(opts.log, defended);
    rows.insert(rows.end(), defended.begin(), defended.end());
  }
  write_tables(cfg.output_dir, "results", rows);
  return rows;
}

std::vector<ResultRow> cmd_sweep(ExperimentConfig cfg, const CommandOptions& opts) {
  prepare(cfg, opts);
  if (cfg.sweep_axis.empty()) throw ConfigError("sweep: no sweep section in the config");
  const ModelParams<float> params = load_model(cfg);
  const Datasets d = load_datasets(cfg);
  const RefineConfig defense = cfg.defense.value_or(cfg.train.adversary.refine);
  std::vector<ResultRow> rows;
  auto add = [&](std::vector<ResultRow> part) {
    log_rows(opts.log, part);
    rows.insert(rows.end(), part.begin(), part.end());
  };
  for (double v : cfg.sweep_values) {
    ExperimentConfig cell = cfg;
    if (cfg.sweep_axis == "epsilon") {
      if (v < 0.0) throw ConfigError("sweep: epsilon values must be nonnegative");
      for (EvalAttack& a : cell.attacks) a.config.epsilon = v;
      add(evaluation_rows(cell, params, d.test, std::nullopt, opts.jobs));
      if (cfg.defense) add(evaluation_rows(cell, params, d.test, defense, opts.jobs));
    } else if (cfg.sweep_axis == "lambda") {
      RefineConfig r = defense;
      if (r.step && r.strength > 0.0) r.step = *r.step * (v / r.strength);
      r.strength = v;
      try {
        r.validate();
      } catch (const DomainError& e) {
        throw ConfigError(std::string("sweep: ") + e.what());
      }
      add(evaluation_rows(cell, params, d.test, r, opts.jobs));
    } else {
      if (v < 1.0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
        throw ConfigError("sweep: hypothesis counts must be positive integers");
      }
      RefineConfig r = defense;
      r.top_k = static_cast<std::size_t>(v);
      add(evaluation_rows(cell, params, d.test, r, opts.jobs));
    }
  }
  write_tables(cfg.output_dir, "sweep", rows);
  return rows;
}

}  // namespace advpnml
