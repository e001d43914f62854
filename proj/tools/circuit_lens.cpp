#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "circuit_lens/discovery.hpp"
#include "circuit_lens/io.hpp"
#include "circuit_lens/validate.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace circuit_lens;

namespace {

constexpr int kSchemaVersion = 1;
constexpr int kExitUsage = 2;
constexpr int kExitErrorBase = 10;

struct RunConfig {
  std::string checkpoint;
  std::string name_map;
  std::string vocab;
  std::string corpus;
  std::string calibration;
  std::size_t calibration_index = 0;
  std::string calibration_json;
  std::string table;
  std::string deny_list;
  std::optional<Index> anchor_pos;
  std::string anchor_token = " the";
  std::optional<std::string> heads;
  double theta = 5.0;
  Index rank = 20;
  Index width = 50;
  std::string out;
  int workers = 1;
  std::uint64_t seed = 0;
  std::string mode = "corpus";
  std::vector<Index> neurons;
  Index stride = 0;
  std::size_t trials = 10000;
  Index ln_samples = 1;
};

json with_schema(json body) {
  json out;
  out["schema_version"] = kSchemaVersion;
  for (auto& [k, v] : body.items()) out[k] = v;
  return out;
}

void write_json(const fs::path& path, const json& j) { write_atomic(path, j.dump(2) + "\n"); }

std::string format_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(9) << v;
  return ss.str();
}

// Quotes a CSV field when it contains a separator, quote or newline.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

// Lazily loaded inputs shared by the commands.
class Session {
 public:
  explicit Session(const RunConfig& cfg) : cfg_(cfg) {}

  const RunConfig& cfg() const { return cfg_; }

  fs::path out_dir() const {
    if (!cfg_.out.empty()) return cfg_.out;
    if (const char* env = std::getenv("CIRCUIT_LENS_OUT"); env && *env) return env;
    return "circuit_lens_out";
  }

  const NameMap& name_map() {
    if (!name_map_) {
      fs::path p = cfg_.name_map.empty() ? fs::path(CIRCUIT_LENS_DATA_DIR) / "gpt2_name_map.json" : fs::path(cfg_.name_map);
      name_map_ = NameMap::load(p);
    }
    return *name_map_;
  }

  const RawCheckpoint& raw() {
    if (!raw_) {
      require(cfg_.checkpoint, "--checkpoint");
      raw_ = load_checkpoint(cfg_.checkpoint, name_map());
    }
    return *raw_;
  }

  const FoldedModel& model() {
    if (!model_) model_ = fold_model<double>(raw());
    return *model_;
  }

  const KeyGeometry<double>& geometry() {
    if (!geometry_) geometry_ = key_geometry(model());
    return *geometry_;
  }

  const Dims& dims() { return model().dims; }

  const Vocab* vocab() {
    if (cfg_.vocab.empty()) return nullptr;
    if (!vocab_) vocab_ = Vocab::load(cfg_.vocab);
    return &*vocab_;
  }

  const Vocab& require_vocab() {
    require(cfg_.vocab, "--vocab");
    return *vocab();
  }

  std::string checkpoint_digest() {
    if (checkpoint_digest_.empty()) {
      require(cfg_.checkpoint, "--checkpoint");
      checkpoint_digest_ = sha256_path(cfg_.checkpoint);
    }
    return checkpoint_digest_;
  }

  Index anchor_position() {
    const Index n = cfg_.anchor_pos.value_or(dims().n_ctx / 2);
    detail::check_position(n, dims().n_ctx, dims().n_ctx);
    return n;
  }

  TokenId anchor_token() { return resolve_token(cfg_.anchor_token, vocab(), dims().d_voc); }

  HeadSet heads(bool default_all = false) {
    HeadSet set;
    if (cfg_.heads) {
      set = HeadSet::parse(*cfg_.heads);
    } else if (default_all) {
      for (Index h = 0; h < dims().n_heads; ++h) set.heads.push_back(h);
    } else {
      set = HeadSet::gpt2_slow_heads();
    }
    set.validate(dims());
    return set;
  }

  Corpus corpus(Index min_len) {
    require(cfg_.corpus, "--corpus");
    Corpus c = load_corpus(cfg_.corpus, min_len, dims().d_voc);
    for (const auto& w : c.warnings) std::cerr << "warning: " << w << "\n";
    return c;
  }

  static void require(const std::string& value, const std::string& flag) {
    if (value.empty()) fail(ErrorCode::ConfigError, flag + " is required for this command");
  }

 private:
  const RunConfig& cfg_;
  std::optional<NameMap> name_map_;
  std::optional<RawCheckpoint> raw_;
  std::optional<FoldedModel> model_;
  std::optional<KeyGeometry<double>> geometry_;
  std::optional<Vocab> vocab_;
  std::string checkpoint_digest_;
};

json dims_json(const Dims& d) {
  return {{"d_model", d.d_model}, {"d_voc", d.d_voc},   {"n_ctx", d.n_ctx},
          {"n_heads", d.n_heads}, {"d_head", d.d_head}, {"d_mlp", d.d_mlp}};
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

// ---- calibration artifact ----

json calibration_json(const Calibration<double>& cal, const std::string& checkpoint_digest,
                      const std::vector<bool>& outliers) {
  json heads = json::array();
  for (std::size_t k = 0; k < cal.heads.heads.size(); ++k) {
    json h = {{"head", cal.heads.heads[k]}, {"denominator", cal.denominators[k]}};
    if (!outliers.empty()) h["outlier"] = static_cast<bool>(outliers[k]);
    heads.push_back(h);
  }
  json body = {{"digest", cal.digest},
               {"checkpoint_digest", checkpoint_digest},
               {"text_label", cal.text.label},
               {"text_length", cal.text.size()},
               {"anchor_position", cal.position},
               {"anchor_token", cal.token},
               {"heads", heads},
               {"ln_mlp", cal.ln_mlp},
               {"stop_word_density", cal.stop_word_density ? json(*cal.stop_word_density) : json(nullptr)},
               {"median_kernel", to_std(cal.median.weights)}};
  return with_schema(body);
}

Calibration<double> calibration_from_json(const json& j) {
  Calibration<double> cal;
  try {
    cal.digest = j.at("digest").get<std::string>();
    cal.position = j.at("anchor_position").get<Index>();
    cal.token = j.at("anchor_token").get<TokenId>();
    cal.text.label = j.at("text_label").get<std::string>();
    for (const auto& h : j.at("heads")) {
      cal.heads.heads.push_back(h.at("head").get<Index>());
      cal.denominators.push_back(h.at("denominator").get<double>());
    }
    cal.ln_mlp = j.at("ln_mlp").get<double>();
    const auto w = j.at("median_kernel").get<std::vector<double>>();
    cal.median = {-1, cal.position, cal.token, Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Index>(w.size()))};
  } catch (const json::exception& e) {
    fail(ErrorCode::UnreadableContainer, std::string("malformed calibration artifact: ") + e.what());
  }
  if (cal.median.weights.size() != cal.position)
    fail(ErrorCode::UnreadableContainer, "calibration kernel length does not match its anchor");
  return cal;
}

fs::path table_path(Session& s) {
  return s.cfg().table.empty() ? s.out_dir() / "table.bin" : fs::path(s.cfg().table);
}

fs::path calibration_json_path(Session& s) {
  if (!s.cfg().calibration_json.empty()) return s.cfg().calibration_json;
  return table_path(s).parent_path() / "calibration.json";
}

Calibration<double> load_calibration_artifact(Session& s) {
  const fs::path p = calibration_json_path(s);
  json j;
  try {
    j = json::parse(read_file(p));
  } catch (const json::exception& e) {
    fail(ErrorCode::UnreadableContainer, p.string() + ": " + e.what());
  }
  return calibration_from_json(j);
}

// Table and calibration must come from the same run.
ContributionTable load_matching_table(Session& s, const Calibration<double>& cal) {
  const fs::path p = table_path(s);
  const auto header = read_table_header(p);
  if (header.calibration_digest != cal.digest)
    fail(ErrorCode::ArtifactMismatch, p.string() + " was built under calibration " + header.calibration_digest +
                                          ", not " + cal.digest);
  return read_table(p);
}

Calibration<double> build_calibration(Session& s) {
  Session::require(s.cfg().calibration, "--calibration");
  const auto& m = s.model();
  const Index n = s.anchor_position();
  const TokenId t = s.anchor_token();
  const HeadSet heads = s.heads();
  Corpus texts = load_corpus(s.cfg().calibration, n, m.dims.d_voc);
  if (s.cfg().calibration_index >= texts.sequences.size())
    fail(ErrorCode::ConfigError, "--calibration-index " + std::to_string(s.cfg().calibration_index) + " but only " +
                                     std::to_string(texts.sequences.size()) + " usable texts");
  const TokenSeq& y = texts.sequences[s.cfg().calibration_index];
  CalibrationOptions opts;
  opts.ln_mlp_samples = s.cfg().ln_samples;
  Calibration<double> cal = calibrate(m, s.geometry(), heads, y, n, t, opts);
  if (const Vocab* v = s.vocab()) cal.stop_word_density = stop_word_density(*v, StopWords::english(), y.view());

  std::ostringstream key;
  key << "checkpoint=" << s.checkpoint_digest() << "\nname_map=" << s.name_map().to_json() << "\nposition=" << n
      << "\ntoken=" << t << "\nheads=" << heads.to_string() << "\nln_samples=" << opts.ln_mlp_samples
      << "\nln_stride=" << opts.ln_mlp_stride << "\ntext=";
  for (TokenId id : y.ids) key << id << ',';
  cal.digest = sha256_hex(key.str());
  return cal;
}

// Per-head z-scores of log denominators against a reference corpus.
std::vector<bool> denominator_outliers(Session& s, const Calibration<double>& cal, double z_limit = 3.0) {
  const Corpus corpus = s.corpus(cal.position);
  std::vector<bool> flags;
  for (std::size_t k = 0; k < cal.heads.heads.size(); ++k) {
    std::vector<double> logs;
    for (const auto& x : corpus.sequences)
      logs.push_back(denom(s.model(), s.geometry(), cal.heads.heads[k], cal.position, cal.token, x.view()).log_value);
    if (logs.size() < 2) fail(ErrorCode::TooShort, "outlier check needs at least two corpus texts");
    double mean = 0, var = 0;
    for (double v : logs) mean += v;
    mean /= static_cast<double>(logs.size());
    for (double v : logs) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(logs.size() - 1));
    const double z = sd > 0 ? std::abs(std::log(cal.denominators[k]) - mean) / sd : 0.0;
    flags.push_back(z > z_limit);
  }
  return flags;
}

// ---- commands ----

int cmd_inspect(Session& s) {
  const auto& raw = s.raw();
  const auto& m = s.model();
  const auto c = compute_c(m);
  const Eigen::VectorXd token_means = raw.at(tensor_names::kTokenEmbedding).rowwise().mean();
  const Eigen::VectorXd pos_means = raw.at(tensor_names::kPosEmbedding).rowwise().mean();
  const Eigen::VectorXd pos_norms = m.pos_embed.rowwise().norm();
  const Index stride = std::max<Index>(1, m.dims.d_voc / 4096);
  json body = {{"dims", dims_json(m.dims)},
               {"folding",
                {{"max_abs_token_row_mean_removed", token_means.cwiseAbs().maxCoeff()},
                 {"max_abs_pos_row_mean_removed", pos_means.cwiseAbs().maxCoeff()},
                 {"norm_constant", c.value},
                 {"token_norm_min", c.min_norm},
                 {"token_norm_max", c.max_norm},
                 {"pos_norm_min", pos_norms.minCoeff()},
                 {"pos_norm_max", pos_norms.maxCoeff()},
                 {"max_token_pos_cosine", max_embedding_cosine(m, stride)},
                 {"cosine_token_stride", stride}}}};
  const json out = with_schema(body);
  std::cout << out.dump(2) << "\n";
  write_json(s.out_dir() / "inspect.json", out);
  return 0;
}

int cmd_kernels(Session& s) {
  const auto& m = s.model();
  const Index n = s.anchor_position();
  const TokenId t = s.anchor_token();
  const HeadSet heads = s.heads(true);
  json list = json::array();
  std::ostringstream csv;
  csv << "head,position,weight\n";
  for (Index h : heads.heads) {
    const auto k = positional_kernel(m, s.geometry(), h, n, t);
    for (Index i = 0; i < k.weights.size(); ++i) csv << h << ',' << i + 1 << ',' << format_double(k.weights(i)) << '\n';
    json entry = {{"head", h}};
    if (n >= KernelRule{}.min_context) {
      const auto cls = classify_kernel(k);
      entry["class"] = kernel_kind_name(cls.kind);
      entry["participation_ratio"] = cls.participation_ratio;
      entry["tail_mass"] = cls.tail_mass;
    } else {
      entry["class"] = nullptr;
    }
    entry["weights"] = to_std(k.weights);
    list.push_back(entry);
    std::cout << "head " << h << ": " << (entry["class"].is_null() ? "unclassified" : entry["class"].get<std::string>())
              << "\n";
  }
  write_atomic(s.out_dir() / "kernels.csv", csv.str());
  write_json(s.out_dir() / "kernels.json",
             with_schema({{"anchor_position", n}, {"anchor_token", t}, {"kernels", list}}));
  return 0;
}

int cmd_tv(Session& s) {
  const auto& m = s.model();
  const HeadSet heads = s.heads();
  const Corpus corpus = s.corpus(2);
  std::map<Index, std::vector<double>> per_head;
  std::ostringstream csv;
  csv << "label,head,position,tv\n";
  json texts = json::array();
  for (const auto& x : corpus.sequences) {
    const auto entries = tv_report(m, s.geometry(), x.view(), heads);
    std::map<Index, std::vector<double>> local;
    for (const auto& e : entries) {
      csv << csv_field(x.label) << ',' << e.head << ',' << e.position << ',' << format_double(e.tv) << '\n';
      local[e.head].push_back(e.tv);
      per_head[e.head].push_back(e.tv);
    }
    json med;
    for (auto& [h, v] : local) med[std::to_string(h)] = median(v);
    texts.push_back({{"label", x.label}, {"median_tv", med}});
  }
  json summary;
  for (auto& [h, v] : per_head) summary[std::to_string(h)] = median(v);
  write_atomic(s.out_dir() / "tv.csv", csv.str());
  const json out = with_schema({{"heads", heads.heads}, {"median_tv", summary}, {"texts", texts}});
  write_json(s.out_dir() / "tv.json", out);
  std::cout << out["median_tv"].dump(2) << "\n";
  return 0;
}

int cmd_denoms(Session& s) {
  const auto& m = s.model();
  const auto& g = s.geometry();
  const HeadSet heads = s.heads();
  const TokenId t = s.anchor_token();
  const Index n = s.anchor_position();
  const Index stride = s.cfg().stride > 0 ? s.cfg().stride : 8;
  const Corpus corpus = s.corpus(n);

  Index max_len = m.dims.n_ctx;
  for (const auto& x : corpus.sequences) max_len = std::min(max_len, x.size());
  const std::vector<Index> grid = position_grid(max_len, stride, m.dims.n_ctx);

  std::ostringstream series, scatter, bounds;
  series << "label,head,position,denom,normalized\n";
  scatter << "label,head,position,denom,stop_word_density\n";
  bounds << "head,position,deviation,trials,empirical,hoeffding,chebyshev\n";
  json spread;
  const Vocab* vocab = s.vocab();
  std::optional<StopWords> stop;
  if (vocab) stop = StopWords::english();
  const Eigen::VectorXd unigram = unigram_distribution(corpus, m.dims.d_voc);

  std::uint64_t stream = 0;
  for (Index h : heads.heads) {
    const auto norm = denom_normalizer(m, g, h, t, corpus, grid);
    for (const auto& x : corpus.sequences)
      for (std::size_t k = 0; k < grid.size(); ++k) {
        const double v = denom(m, g, h, grid[k], t, x.view()).value;
        series << csv_field(x.label) << ',' << h << ',' << grid[k] << ',' << format_double(v) << ','
               << format_double(v / norm.values[k]) << '\n';
      }
    std::vector<double> at_anchor;
    for (const auto& x : corpus.sequences) {
      const double v = denom(m, g, h, n, t, x.view()).value;
      at_anchor.push_back(v);
      scatter << csv_field(x.label) << ',' << h << ',' << n << ',' << format_double(v) << ',';
      if (vocab) scatter << format_double(stop_word_density(*vocab, *stop, x.view()));
      scatter << '\n';
    }
    if (at_anchor.size() >= 2) spread[std::to_string(h)] = relative_spread(at_anchor);

    // Bounds against a Monte-Carlo draw from the corpus unigram distribution.
    const auto kernel = positional_kernel(m, g, h, n, t);
    const auto stats = content_stats(m, g, h, n, t, unigram);
    const Eigen::VectorXd factors =
        log_content_factors_vocab(m, g, h, n, query(m, h, n, t)).array().exp().matrix();
    MonteCarloCell cell;
    cell.kernel = to_std(kernel.weights);
    for (Index v = 0; v < unigram.size(); ++v)
      if (unigram(v) > 0) {
        cell.values.push_back(factors(v));
        cell.probs.push_back(unigram(v));
      }
    const double total = std::accumulate(cell.probs.begin(), cell.probs.end(), 0.0);
    for (double& p : cell.probs) p /= total;
    const double scale = std::sqrt(kernel_spread(cell.kernel) * stats.variance);
    for (double mult : {1.0, 2.0, 3.0}) {
      cell.deviation = scale > 0 ? mult * scale : mult;
      const auto r = simulate_deviation(cell, s.cfg().trials, s.cfg().seed, stream++);
      bounds << h << ',' << n << ',' << format_double(cell.deviation) << ',' << r.trials << ','
             << format_double(r.empirical) << ',' << format_double(r.hoeffding) << ','
             << format_double(r.chebyshev) << '\n';
    }
  }
  write_atomic(s.out_dir() / "denoms_series.csv", series.str());
  write_atomic(s.out_dir() / "denoms_scatter.csv", scatter.str());
  write_atomic(s.out_dir() / "denoms_bounds.csv", bounds.str());
  const json out = with_schema({{"anchor_position", n}, {"token", t}, {"stride", stride},
                                {"texts", corpus.sequences.size()}, {"relative_spread", spread}});
  write_json(s.out_dir() / "denoms.json", out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_calibrate(Session& s) {
  const auto cal = build_calibration(s);
  std::vector<bool> outliers;
  if (!s.cfg().corpus.empty()) outliers = denominator_outliers(s, cal);
  for (Index h : heads_not_slowly_decaying(s.model(), s.geometry(), cal.heads, cal.position, cal.token))
    std::cerr << "warning: head " << h << " is not slowly decaying at the anchor\n";
  const json out = calibration_json(cal, s.checkpoint_digest(), outliers);
  write_json(s.out_dir() / "calibration.json", out);
  std::cout << out["digest"].get<std::string>() << "\n";
  return 0;
}

int cmd_table(Session& s) {
  const auto cal = build_calibration(s);
  for (Index h : heads_not_slowly_decaying(s.model(), s.geometry(), cal.heads, cal.position, cal.token))
    std::cerr << "warning: head " << h << " is not slowly decaying at the anchor\n";
  const auto table = contribution_table(s.model(), s.geometry(), cal, s.cfg().workers);
  const fs::path out = table_path(s);
  write_table(out, table);
  write_json(out.parent_path() / "calibration.json", calibration_json(cal, s.checkpoint_digest(), {}));
  std::cout << out.string() << "\n";
  return 0;
}

json report_json(const NeuronReport& r) {
  auto list = [](const std::vector<TokenValue>& v) {
    json a = json::array();
    for (const auto& tv : v) a.push_back(json::array({tv.text, tv.value}));
    return a;
  };
  return {{"neuron", r.neuron}, {"top_stat", r.top}, {"top", list(r.most_positive)}, {"bottom", list(r.most_negative)}};
}

DiscoveryConfig discovery_config(const RunConfig& cfg) {
  DiscoveryConfig d{cfg.theta, cfg.rank, cfg.width};
  d.validate();
  return d;
}

int cmd_discover(Session& s) {
  const DiscoveryConfig dc = discovery_config(s.cfg());
  const auto cal = load_calibration_artifact(s);
  const auto table = load_matching_table(s, cal);
  const Vocab* vocab = s.vocab();
  std::set<TokenId> deny;
  if (!s.cfg().deny_list.empty()) deny = load_deny_list(s.cfg().deny_list, vocab, table.vocab());
  const auto selected = select_neurons(table, dc, s.cfg().workers);
  json neurons = json::array();
  for (const auto& sel : selected) neurons.push_back(report_json(neuron_report(table, vocab, sel.neuron, dc, deny)));
  const json out = with_schema({{"calibration_digest", cal.digest},
                                {"theta", dc.theta},
                                {"rank", dc.rank},
                                {"width", dc.width},
                                {"count", selected.size()},
                                {"neurons", neurons}});
  write_json(s.out_dir() / "neurons.json", out);
  std::cout << selected.size() << " neurons with top_stat >= " << dc.theta << "\n";
  return 0;
}

int cmd_report(Session& s) {
  const Vocab& vocab = s.require_vocab();
  if (s.cfg().neurons.size() != 1) fail(ErrorCode::ConfigError, "report needs exactly one --neuron");
  const DiscoveryConfig dc = discovery_config(s.cfg());
  const auto cal = load_calibration_artifact(s);
  const auto table = load_matching_table(s, cal);
  std::set<TokenId> deny;
  if (!s.cfg().deny_list.empty()) deny = load_deny_list(s.cfg().deny_list, &vocab, table.vocab());
  const auto r = neuron_report(table, &vocab, s.cfg().neurons.front(), dc, deny);
  std::cout << "neuron " << r.neuron << "  top_stat " << format_double(r.top) << "\n";
  const std::size_t rows = std::max(r.most_positive.size(), r.most_negative.size());
  std::cout << std::left << std::setw(36) << "most positive" << "most negative\n";
  for (std::size_t k = 0; k < rows; ++k) {
    std::ostringstream left, right;
    if (k < r.most_positive.size())
      left << std::quoted(r.most_positive[k].text) << ' ' << format_double(r.most_positive[k].value);
    if (k < r.most_negative.size())
      right << std::quoted(r.most_negative[k].text) << ' ' << format_double(r.most_negative[k].value);
    std::cout << std::left << std::setw(36) << left.str() << right.str() << "\n";
  }
  return 0;
}

int cmd_score(Session& s) {
  if (s.cfg().neurons.empty()) fail(ErrorCode::ConfigError, "score needs at least one --neuron");
  const auto cal = load_calibration_artifact(s);
  const auto table = load_matching_table(s, cal);
  Session::require(s.cfg().corpus, "--corpus");
  const Corpus corpus = load_corpus(s.cfg().corpus, cal.position, table.vocab());
  for (const auto& w : corpus.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "label,neuron,approx\n";
  for (const auto& x : corpus.sequences)
    for (Index j : s.cfg().neurons)
      std::cout << csv_field(x.label) << ',' << j << ',' << format_double(approx_contribution(table, cal, x.view(), j))
                << '\n';
  return 0;
}

json fit_json(const FitStats& f) {
  return {{"r", f.r_defined ? json(f.r) : json(nullptr)}, {"fvu", f.fvu}, {"bias", f.bias}, {"count", f.count}};
}

int cmd_validate(Session& s) {
  const auto& m = s.model();
  const auto cal = load_calibration_artifact(s);
  const auto table = load_matching_table(s, cal);
  if (table.neurons() != m.dims.d_mlp || table.vocab() != m.dims.d_voc)
    fail(ErrorCode::ArtifactMismatch, "table shape does not match the checkpoint");
  std::vector<Index> neurons = s.cfg().neurons;
  if (neurons.empty())
    for (const auto& sel : select_neurons(table, discovery_config(s.cfg()), s.cfg().workers))
      neurons.push_back(sel.neuron);
  if (neurons.empty()) fail(ErrorCode::ConfigError, "no neurons to validate");

  json per_neuron = json::array();
  std::vector<double> rs, fvus;
  auto record = [&](Index j, const std::string& label, std::span<const double> truth, std::span<const double> approx) {
    json entry = {{"neuron", j}};
    if (!label.empty()) entry["label"] = label;
    try {
      const FitStats f = fit_stats(truth, approx);
      entry["fit"] = fit_json(f);
      if (f.r_defined) rs.push_back(f.r);
      fvus.push_back(f.fvu);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateVariance) throw;
      entry["fit"] = nullptr;
      entry["skipped"] = error_name(e.code());
    }
    per_neuron.push_back(entry);
  };

  if (s.cfg().mode == "corpus") {
    const Corpus corpus = s.corpus(cal.position);
    const CorpusFit fit = corpus_fit(m, table, cal, corpus, neurons, s.cfg().workers);
    std::ostringstream csv;
    csv << "label,neuron,true,approx\n";
    for (std::size_t c = 0; c < neurons.size(); ++c) {
      const auto col = static_cast<Index>(c);
      const Eigen::VectorXd truth = fit.truth.col(col), approx = fit.approx.col(col);
      record(neurons[c], "", to_std(truth), to_std(approx));
      for (Index k = 0; k < truth.size(); ++k)
        csv << csv_field(fit.labels[static_cast<std::size_t>(k)]) << ',' << neurons[c] << ','
            << format_double(truth(k)) << ',' << format_double(approx(k)) << '\n';
    }
    write_atomic(s.out_dir() / "validate_corpus.csv", csv.str());
  } else if (s.cfg().mode == "series") {
    const Corpus corpus = s.corpus(2);
    const Index stride = s.cfg().stride > 0 ? s.cfg().stride : 16;
    std::ostringstream csv;
    csv << "label,neuron,position,true,approx\n";
    for (const auto& x : corpus.sequences) {
      const auto grid = position_grid(x.size(), stride, m.dims.n_ctx);
      if (grid.size() < 2) continue;
      const Mat<double> truth = true_contributions(m, cal.heads, x.view(), grid, cal.token);
      const Mat<double> approx =
          approx_contributions_grid(m, s.geometry(), table, cal.heads, x.view(), grid, cal.token);
      for (Index j : neurons) {
        const Eigen::VectorXd tj = truth.col(j), aj = approx.col(j);
        record(j, x.label, to_std(tj), to_std(aj));
        for (std::size_t k = 0; k < grid.size(); ++k)
          csv << csv_field(x.label) << ',' << j << ',' << grid[k] << ',' << format_double(tj(static_cast<Index>(k)))
              << ',' << format_double(aj(static_cast<Index>(k))) << '\n';
      }
    }
    write_atomic(s.out_dir() / "validate_series.csv", csv.str());
  } else {
    fail(ErrorCode::ConfigError, "--mode must be 'series' or 'corpus'");
  }
  const json out = with_schema({{"mode", s.cfg().mode},
                                {"calibration_digest", cal.digest},
                                {"median_r", rs.empty() ? json(nullptr) : json(median(rs))},
                                {"median_fvu", fvus.empty() ? json(nullptr) : json(median(fvus))},
                                {"fits", per_neuron}});
  write_json(s.out_dir() / "validate.json", out);
  std::cout << "median r " << out["median_r"].dump() << ", median FVU " << out["median_fvu"].dump() << "\n";
  return 0;
}

int exit_code(ErrorCode code) { return kExitErrorBase + static_cast<int>(code); }

void report_error(const std::string& name, const std::string& message, int code) {
  const json rec = with_schema({{"error", name}, {"message", message}, {"exit_code", code}});
  std::cerr << rec.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"First-layer contextual circuit analysis for GPT-2-style checkpoints"};
  app.require_subcommand(1);
  app.fallthrough();
  RunConfig cfg;
  app.add_option("--checkpoint", cfg.checkpoint, "Named-tensor container or tensor directory");
  app.add_option("--name-map", cfg.name_map, "Tensor name map JSON (default: shipped GPT-2 map)");
  app.add_option("--vocab", cfg.vocab, "Vocabulary JSON (token string -> id)");
  app.add_option("--corpus", cfg.corpus, "Token-id JSON lines");
  app.add_option("--calibration", cfg.calibration, "Calibration text, token-id JSON lines");
  app.add_option("--calibration-index", cfg.calibration_index, "Which calibration line to use");
  app.add_option("--calibration-json", cfg.calibration_json, "Calibration artifact (default: next to the table)");
  app.add_option("--table", cfg.table, "Contribution table file (default: <out>/table.bin)");
  app.add_option("--deny-list", cfg.deny_list, "Tokens to leave out of reports, one per line");
  app.add_option("--anchor-pos", cfg.anchor_pos, "Anchor position n, 1-based (default n_ctx/2)");
  app.add_option("--anchor-token", cfg.anchor_token, "Anchor token: decoded text or id:<n>")->capture_default_str();
  app.add_option("--heads", cfg.heads, "Comma-separated head indices");
  app.add_option("--theta", cfg.theta, "Selection threshold")->capture_default_str();
  app.add_option("--rank", cfg.rank, "Order statistic rank")->capture_default_str();
  app.add_option("--width", cfg.width, "Report list length")->capture_default_str();
  app.add_option("--out", cfg.out, "Output directory (default $CIRCUIT_LENS_OUT)");
  app.add_option("--workers", cfg.workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
  app.add_option("--mode", cfg.mode, "Validation mode: series or corpus")->capture_default_str();
  app.add_option("--neuron", cfg.neurons, "Neuron index (repeatable)");
  app.add_option("--stride", cfg.stride, "Position grid stride");
  app.add_option("--trials", cfg.trials, "Monte-Carlo trials per cell")->capture_default_str();
  app.add_option("--ln-samples", cfg.ln_samples, "Anchor positions averaged for the ln_mlp estimate")
      ->capture_default_str();

  using Command = int (*)(Session&);
  const std::vector<std::tuple<const char*, const char*, Command>> commands = {
      {"inspect", "Print dimensions and folding diagnostics", cmd_inspect},
      {"kernels", "Positional kernels and their classes at the anchor", cmd_kernels},
      {"tv", "TV between exact and approximate attention over a corpus", cmd_tv},
      {"denoms", "Denominator series, cross-text scatter and concentration bounds", cmd_denoms},
      {"calibrate", "Sample denominators and ln_mlp from a calibration text", cmd_calibrate},
      {"table", "Build the contribution table", cmd_table},
      {"discover", "Select context-sensitive neurons from a table", cmd_discover},
      {"report", "Print one neuron's token lists", cmd_report},
      {"score", "Stream table-based contributions for a corpus as CSV", cmd_score},
      {"validate", "Compare table-based and exact contributions", cmd_validate},
  };
  std::map<CLI::App*, Command> dispatch;
  for (const auto& [name, help, fn] : commands) dispatch[app.add_subcommand(name, help)] = fn;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc == 0) return 0;
    report_error("ConfigError", e.what(), kExitUsage);
    return kExitUsage;
  }

  try {
    Session session(cfg);
    for (auto* sub : app.get_subcommands()) return dispatch.at(sub)(session);
  } catch (const Error& e) {
    const int rc = exit_code(e.code());
    report_error(std::string(error_name(e.code())), e.what(), rc);
    return rc;
  } catch (const std::exception& e) {
    report_error("Internal", e.what(), 1);
    return 1;
  }
  return 1;
}
