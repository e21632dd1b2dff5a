// Command-line driver for the knowledge-injection pipeline:
//   synth-kg -> ingest -> sample -> mask -> train -> eval / probe, plus gradcheck.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "cocolm/cocolm.hpp"

namespace fs = std::filesystem;
using namespace cocolm;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitStage = 2;

std::ifstream open_input(const std::string& path, const char* what) {
  if (path.empty() || !fs::exists(path)) {
    throw Error(ErrorCode::MissingArtifact, std::string(what) + " not found: '" + path + "'");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingArtifact, std::string("cannot open ") + what + " " + path);
  return in;
}

std::ofstream open_output(const std::string& path) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  return out;
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
  std::ostringstream hex;
  for (unsigned i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

void log(const std::string& msg) { std::cerr << "[cocolm] " << msg << '\n'; }

KnowledgeGraph load_graph_from(const PipelineConfig& cfg) {
  auto nodes = open_input(cfg.path("nodes"), "nodes file");
  auto edges = open_input(cfg.path("edges"), "edges file");
  return load_graph(nodes, edges);
}

ConnectiveLexicon load_lexicon(const PipelineConfig& cfg) {
  const auto path = cfg.path("lexicon");
  if (path.empty()) return ConnectiveLexicon{};
  auto in = open_input(path, "lexicon file");
  try {
    return ConnectiveLexicon::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigParse, std::string("lexicon: ") + e.what());
  }
}

Vocabulary load_vocab(const PipelineConfig& cfg) {
  auto in = open_input(cfg.path("vocab"), "vocab file");
  return Vocabulary::read(in);
}

template <class T, class F>
std::vector<T> read_jsonl(const std::string& path, const char* what, F&& parse) {
  auto in = open_input(path, what);
  std::vector<T> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(parse(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedLine, std::string(what) + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

int run_synth(const PipelineConfig& cfg) {
  const auto spec = cfg.synth();
  const auto kg = generate_synthetic_kg(spec);
  {
    auto out = open_output(cfg.path("nodes"));
    write_nodes(out, kg.graph());
  }
  {
    auto out = open_output(cfg.path("edges"));
    write_edges(out, kg.graph());
  }
  {
    auto out = open_output(cfg.path("answer_key"));
    write_answer_key(out, kg);
  }
  {
    auto out = open_output(cfg.path("choices"));
    for (const auto& t : kg.choices) out << choice_to_json(t).dump() << '\n';
  }
  log("synthetic graph: " + std::to_string(kg.nodes.size()) + " nodes, " + std::to_string(kg.edges.size()) +
      " edges, " + std::to_string(kg.held_out_edges().size()) + " held-out edges, " +
      std::to_string(kg.choices.size()) + " choice tasks");
  return 0;
}

int run_ingest(const PipelineConfig& cfg) {
  const auto g = load_graph_from(cfg);
  const auto walk = cfg.walk();
  nlohmann::ordered_json summary;
  summary["nodes"] = g.num_nodes();
  summary["edges"] = g.num_edges();
  summary["discourse_edges"] = g.num_discourse_edges();
  summary["cooccurrence_edges"] = g.num_cooccurrence_edges();
  summary["frequency_cap"] = g.frequency_percentile(walk.downsample_percentile);
  std::array<std::size_t, kNumRelationTypes> per_relation{};
  for (NodeId n = 0; n < g.num_nodes(); ++n) {
    for (const auto& e : g.neighbors(n, true)) ++per_relation[static_cast<std::size_t>(relation_index(e.relation))];
  }
  for (int r = 0; r < kNumRelationTypes; ++r) summary["relations"][std::string(kRelationNames[r])] = per_relation[r];
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int run_sample(const PipelineConfig& cfg) {
  const auto g = load_graph_from(cfg);
  const auto walk = cfg.walk();
  const auto corpus = sample_corpus(g, walk);
  {
    auto out = open_output(cfg.path("corpus"));
    write_corpus(out, corpus.paths);
  }
  {
    auto out = open_output(cfg.path("histogram"));
    out << corpus.histogram.to_json().dump() << '\n';
  }
  log("sampled " + std::to_string(corpus.paths.size()) + " paths; hop histogram " +
      corpus.histogram.to_json().dump());
  for (std::size_t h = 0; h < corpus.histogram.counts.size(); ++h) {
    const double frac = static_cast<double>(corpus.histogram.counts[h]) / static_cast<double>(corpus.paths.size());
    log("  " + std::to_string(h + 1) + " hop(s) " + std::string(static_cast<std::size_t>(frac * 50), '#') + " " +
        std::to_string(corpus.histogram.counts[h]));
  }
  return 0;
}

int run_mask(const PipelineConfig& cfg) {
  const auto g = load_graph_from(cfg);
  const auto lexicon = load_lexicon(cfg);
  auto corpus_in = open_input(cfg.path("corpus"), "corpus");
  const auto paths = read_corpus(corpus_in);
  const auto vocab = build_vocab(paths, g, lexicon, cfg.min_count());
  const auto mask = cfg.mask();
  Rng rng(cfg.stage_seed(Stage::Mask));
  auto out = open_output(cfg.path("instances"));
  std::size_t with_cooc = 0;
  for (const auto& p : paths) {
    const auto inst = build_instance(verbalize(p, g, lexicon, vocab), p, g, rng, vocab, mask);
    with_cooc += inst.cooc.has_value();
    out << instance_to_json(inst).dump() << '\n';
  }
  auto vocab_out = open_output(cfg.path("vocab"));
  vocab.write(vocab_out);
  log("wrote " + std::to_string(paths.size()) + " instances (" + std::to_string(with_cooc) +
      " with a co-occurrence candidate), vocabulary of " + std::to_string(vocab.size()));
  return 0;
}

int run_train(const PipelineConfig& cfg) {
  auto in = open_input(cfg.path("instances"), "instances");
  const auto instances = read_instances(in);
  const auto vocab = load_vocab(cfg);
  const auto model = cfg.model(static_cast<int>(vocab.size()));
  auto train_cfg = cfg.train();
  train_cfg.checkpoint_path = cfg.path("checkpoint");
  auto trace = open_output(cfg.path("trace"));
  write_trace_header(trace);
  const auto start = std::chrono::steady_clock::now();
  const auto result = train<double>(instances, model, train_cfg, [&](const StepRecord& r) {
    write_trace_row(trace, r);
    if (r.step % 50 == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::ostringstream s;
      s << "step " << r.step << " l_total " << r.loss.l_total << " (" << std::fixed << std::setprecision(1) << secs
        << "s)";
      log(s.str());
    }
  });
  save_checkpoint(cfg.path("checkpoint"), result.params);
  log("trained " + std::to_string(result.trace.size()) + " steps; checkpoint sha256 " +
      sha256_file(cfg.path("checkpoint")));
  return 0;
}

int run_eval(const PipelineConfig& cfg, const std::string& instances_path) {
  const auto params = load_checkpoint<double>(cfg.path("checkpoint"));
  const auto vocab = load_vocab(cfg);
  if (params.config.vocab_size != static_cast<int>(vocab.size())) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint vocabulary size differs from the vocab file");
  }
  const auto g = load_graph_from(cfg);
  const auto lexicon = load_lexicon(cfg);
  nlohmann::ordered_json metrics;

  auto key_in = open_input(cfg.path("answer_key"), "answer key");
  std::vector<Edge> held_out;
  for (const auto& a : read_answer_key(key_in)) {
    if (a.held_out) held_out.push_back(a.edge);
  }
  const auto rel = eval_relation_heldout(params, held_out, g, lexicon, vocab);
  metrics["heldout_edges"] = held_out.size();
  metrics["relation_accuracy"] = rel.accuracy;
  metrics["cloze_accuracy"] = rel.cloze_accuracy;
  for (int r = 0; r < kNumDiscourseRelations; ++r) {
    const auto name = std::string(kRelationNames[r]);
    metrics["per_relation_accuracy"][name] = rel.per_relation_accuracy[static_cast<std::size_t>(r)];
    metrics["support"][name] = rel.support[static_cast<std::size_t>(r)];
    metrics["confusion"][name] = rel.confusion[static_cast<std::size_t>(r)];
  }
  {
    auto out = open_output(cfg.path("predictions"));
    for (const auto& p : rel.predictions) {
      nlohmann::ordered_json j;
      j["head"] = p.edge.head;
      j["tail"] = p.edge.tail;
      j["gold"] = std::string(relation_name(p.edge.relation));
      j["predicted"] = std::string(relation_name(p.predicted));
      j["cloze"] = std::string(relation_name(p.cloze));
      out << j.dump() << '\n';
    }
  }

  const auto choices = read_jsonl<ChoiceTask>(cfg.path("choices"), "choice tasks", choice_from_json);
  std::size_t hits = 0, labeled = 0;
  for (const auto& t : choices) {
    if (!t.gold) continue;
    ++labeled;
    hits += score_choice(params, vocab, t).chosen == *t.gold;
  }
  metrics["choice_tasks"] = labeled;
  metrics["choice_accuracy"] = labeled ? static_cast<double>(hits) / static_cast<double>(labeled) : 0.0;

  if (!instances_path.empty()) {
    auto in = open_input(instances_path, "held-out instances");
    const auto instances = read_instances(in);
    const auto report = evaluate(params, instances);
    metrics["instances"] = {{"count", instances.size()},
                            {"l_mlm", report.mean_loss.l_mlm},
                            {"l_rel", report.mean_loss.l_rel},
                            {"l_occur", report.mean_loss.l_occur},
                            {"l_total", report.mean_loss.l_total},
                            {"relation_accuracy", report.relation_accuracy},
                            {"cooc_accuracy", report.cooc_accuracy},
                            {"mlm_accuracy", report.mlm_accuracy}};
  }
  auto out = open_output(cfg.path("metrics"));
  out << metrics.dump(2) << '\n';
  log("relation accuracy " + std::to_string(rel.accuracy) + ", cloze accuracy " + std::to_string(rel.cloze_accuracy) +
      ", choice accuracy " + metrics["choice_accuracy"].dump());
  return 0;
}

int run_probe(const PipelineConfig& cfg, const std::string& queries, const std::string& choices,
              const std::string& output, bool full_vocab) {
  if (queries.empty() && choices.empty()) {
    throw Error(ErrorCode::MissingArtifact, "probe needs --queries and/or --choices");
  }
  const auto params = load_checkpoint<double>(cfg.path("checkpoint"));
  const auto vocab = load_vocab(cfg);
  const auto lexicon = load_lexicon(cfg);
  std::ofstream file;
  if (!output.empty()) file = open_output(output);
  std::ostream& out = output.empty() ? std::cout : file;
  if (!queries.empty()) {
    const auto qs = read_jsonl<ProbeQuery>(queries, "probe queries", [](const nlohmann::json& j) {
      return ProbeQuery{j.at("left").get<std::string>(), j.at("right").get<std::string>(), j.value("k", 5)};
    });
    for (const auto& q : qs) {
      nlohmann::ordered_json j;
      j["left"] = q.left;
      j["right"] = q.right;
      j["ranking"] = nlohmann::ordered_json::array();
      for (const auto& r : probe_connective(params, vocab, lexicon, q, full_vocab)) {
        j["ranking"].push_back({r.word, r.probability});
      }
      out << j.dump() << '\n';
    }
  }
  if (!choices.empty()) {
    for (const auto& t : read_jsonl<ChoiceTask>(choices, "choice tasks", choice_from_json)) {
      const auto res = score_choice(params, vocab, t);
      auto j = choice_to_json(t);
      j["chosen"] = res.chosen;
      j["scores"] = res.scores;
      out << j.dump() << '\n';
    }
  }
  return 0;
}

int run_gradcheck(const PipelineConfig& cfg, double tolerance) {
  auto fx = make_gradcheck_fixture(cfg.stage_seed(Stage::Check));
  Rng rng(cfg.stage_seed(Stage::Check) + 1);
  const auto batch = make_batch(fx.instances);
  const auto report = gradient_check(fx.params, batch, rng);
  std::cout << "coordinates " << report.entries.size() << ", tensors " << report.groups_covered << "/"
            << report.groups_total << ", max relative error " << report.max_relative_error << '\n';
  const bool ok = report.max_relative_error < tolerance && report.groups_covered == report.groups_total &&
                  report.entries.size() >= 200;
  std::cout << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? 0 : kExitStage;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Eventuality-graph knowledge injection pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "JSON config file");
  app.add_option("-s,--set", overrides, "dotted-key override, e.g. walk.max_hops=3")->allow_extra_args(false);
  unsigned workers = 0;
  app.add_option("-w,--workers", workers, "parallel walk workers (changes the sampled corpus)");

  auto* synth = app.add_subcommand("synth-kg", "generate a synthetic graph with a planted answer key");
  std::size_t num_nodes = 0;
  std::string pattern;
  std::int64_t synth_seed = -1;
  synth->add_option("--num-nodes", num_nodes, "number of eventualities (>= 10)");
  synth->add_option("--pattern", pattern, "relation proportions: uniform or Name=w,Name=w");
  synth->add_option("--seed", synth_seed, "global seed");

  app.add_subcommand("ingest", "validate a graph and print statistics");
  app.add_subcommand("sample", "sample the walk corpus and its hop histogram");
  app.add_subcommand("mask", "build the vocabulary and masked training instances");
  app.add_subcommand("train", "train the encoder and write checkpoint and loss trace");
  auto* eval = app.add_subcommand("eval", "held-out relation, cloze and choice evaluation");
  std::string eval_instances;
  eval->add_option("--instances", eval_instances, "optional held-out instance JSONL");
  auto* probe = app.add_subcommand("probe", "connective cloze probes and choice scoring");
  std::string queries, choices, output;
  bool full_vocab = false;
  probe->add_option("--queries", queries, "probe JSONL {left,right,k}");
  probe->add_option("--choices", choices, "choice JSONL {context,candidates,gold}");
  probe->add_option("-o,--out", output, "output JSONL (default stdout)");
  probe->add_flag("--full-vocab", full_vocab, "rank over the whole vocabulary");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  double tolerance = 1e-4;
  gradcheck->add_option("--tolerance", tolerance, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (synth->parsed()) {
      if (num_nodes) overrides.push_back("synth.num_nodes=" + std::to_string(num_nodes));
      if (!pattern.empty()) overrides.push_back("synth.pattern=" + pattern);
      if (synth_seed >= 0) overrides.push_back("seed=" + std::to_string(synth_seed));
    }
    if (workers) overrides.push_back("workers=" + std::to_string(workers));
    const auto cfg = PipelineConfig::resolve(config_path, overrides);
    const auto* sub = app.get_subcommands().front();
    log("command " + sub->get_name() + ", seed " + std::to_string(cfg.seed()));
    log("config " + cfg.doc.dump());
    const auto& name = sub->get_name();
    if (name == "synth-kg") return run_synth(cfg);
    if (name == "ingest") return run_ingest(cfg);
    if (name == "sample") return run_sample(cfg);
    if (name == "mask") return run_mask(cfg);
    if (name == "train") return run_train(cfg);
    if (name == "eval") return run_eval(cfg, eval_instances);
    if (name == "probe") return run_probe(cfg, queries, choices, output, full_vocab);
    if (name == "gradcheck") return run_gradcheck(cfg, tolerance);
  } catch (const Error& e) {
    log(std::string("error: ") + e.what());
    const bool usage = e.code() == ErrorCode::ConfigParse || e.code() == ErrorCode::InvalidConfig ||
                       e.code() == ErrorCode::InvalidSpec;
    return usage ? kExitUsage : kExitStage;
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return kExitStage;
  }
  return kExitUsage;
}
