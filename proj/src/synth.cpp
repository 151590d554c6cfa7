#include "popcal/synth.hpp"

#include <algorithm>
#include <cmath>

namespace popcal {

using nlohmann::json;

void SynthConfig::validate() const {
  if (n_samples < 100) throw ConfigError("synth: n_samples must be >= 100");
  if (!(overconfidence_bias >= 0.0)) throw ConfigError("synth: overconfidence_bias must be >= 0");
  if (!(noise_sd >= 0.0) || !(verb_noise_sd >= 0.0) || !(self_noise_sd >= 0.0))
    throw ConfigError("synth: noise scales must be >= 0");
  if (consistency_samples < 1) throw ConfigError("synth: consistency_samples must be >= 1");
  for (const auto* d : {&pop_q, &pop_gt, &pop_ge_wrong, &rpop_ge, &rpop_gt_wrong})
    if (!(d->sigma >= 0.0)) throw ConfigError("synth: log-normal sigma must be >= 0");
  if (pop_q_link < -1.0 || pop_q_link > 1.0) throw ConfigError("synth: pop_q_link must be in [-1,1]");
}

namespace {

json lognormal_json(const LogNormal& d) { return {{"mu", d.mu}, {"sigma", d.sigma}}; }

LogNormal lognormal_from(const json& j, const char* key, LogNormal fallback) {
  if (!j.contains(key)) return fallback;
  return {j[key].value("mu", fallback.mu), j[key].value("sigma", fallback.sigma)};
}

double draw_count(const LogNormal& d, double z) {
  return static_cast<double>(std::llround(std::exp(d.mu + d.sigma * z)));
}

// Maps a log-scale value onto 1..10 with Gaussian jitter.
double self_score(double log_value, double lo, double hi, double jitter) {
  const double t = (log_value - lo) / (hi - lo);
  return std::clamp(std::round(1.0 + 9.0 * t + jitter), 1.0, 10.0);
}

}  // namespace

json SynthConfig::to_json() const {
  return {{"n_samples", n_samples},
          {"a", a},
          {"b", b},
          {"overconfidence_bias", overconfidence_bias},
          {"noise_sd", noise_sd},
          {"verb_noise_sd", verb_noise_sd},
          {"seed", seed},
          {"pop_q", lognormal_json(pop_q)},
          {"pop_gt", lognormal_json(pop_gt)},
          {"pop_ge_wrong", lognormal_json(pop_ge_wrong)},
          {"rpop_ge", lognormal_json(rpop_ge)},
          {"rpop_gt_wrong", lognormal_json(rpop_gt_wrong)},
          {"pop_q_link", pop_q_link},
          {"self_noise_sd", self_noise_sd},
          {"consistency_samples", consistency_samples}};
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig c;
  c.n_samples = j.value("n_samples", c.n_samples);
  c.a = j.value("a", c.a);
  c.b = j.value("b", c.b);
  c.overconfidence_bias = j.value("overconfidence_bias", c.overconfidence_bias);
  c.noise_sd = j.value("noise_sd", c.noise_sd);
  c.verb_noise_sd = j.value("verb_noise_sd", c.verb_noise_sd);
  c.seed = j.value("seed", c.seed);
  c.pop_q = lognormal_from(j, "pop_q", c.pop_q);
  c.pop_gt = lognormal_from(j, "pop_gt", c.pop_gt);
  c.pop_ge_wrong = lognormal_from(j, "pop_ge_wrong", c.pop_ge_wrong);
  c.rpop_ge = lognormal_from(j, "rpop_ge", c.rpop_ge);
  c.rpop_gt_wrong = lognormal_from(j, "rpop_gt_wrong", c.rpop_gt_wrong);
  c.pop_q_link = j.value("pop_q_link", c.pop_q_link);
  c.self_noise_sd = j.value("self_noise_sd", c.self_noise_sd);
  c.consistency_samples = j.value("consistency_samples", c.consistency_samples);
  return c;
}

double logistic(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<AnalysisRecord> synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<AnalysisRecord> out;
  out.reserve(cfg.n_samples);
  const double link = cfg.pop_q_link;
  const double link_rest = std::sqrt(1.0 - link * link);

  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    const auto tag = std::to_string(i);
    const double z_r = standard_normal(rng);
    const double rpop_ge = draw_count(cfg.rpop_ge, z_r);
    const double p = logistic(cfg.a * std::log1p(rpop_ge) + cfg.b);
    const bool correct = uniform01(rng) < p;

    const double pop_q = draw_count(cfg.pop_q, link * z_r + link_rest * standard_normal(rng));
    const double pop_gt = draw_count(cfg.pop_gt, standard_normal(rng));
    const double pop_ge_wrong = draw_count(cfg.pop_ge_wrong, standard_normal(rng));
    const double rpop_gt_wrong = draw_count(cfg.rpop_gt_wrong, standard_normal(rng));

    KnowledgeTriple t;
    t.dataset = DatasetId::Custom;
    t.subject = "subject_" + tag;
    t.subject_entity = "S" + tag;
    t.relation = "synthetic";
    t.object = "answer_" + tag;
    t.object_entity = "A" + tag;
    t.question = "What is the synthetic relation of subject_" + tag + "?";

    const double conf_target =
        std::clamp(p + cfg.overconfidence_bias + cfg.noise_sd * standard_normal(rng), 0.01, 1.0);
    // Symmetric jitter keeps the token mean at the target.
    const std::size_t n_tokens = 1 + uniform_index(rng, 4);
    std::vector<double> probs(n_tokens, conf_target);
    const double spread = 0.9 * std::min(conf_target, 1.0 - conf_target);
    for (std::size_t k = 0; k + 1 < n_tokens; k += 2) {
      const double d = spread * uniform01(rng);
      probs[k] = conf_target + d;
      probs[k + 1] = conf_target - d;
    }

    const std::string answer = correct ? t.object : "wrong_" + tag;
    auto generated_entity = correct ? *t.object_entity : "W" + tag;
    AnalysisRecord r;
    r.qa = make_qa_record(std::move(t), answer, std::move(probs), generated_entity);

    r.pop.source = PopularitySource::Corpus;
    r.pop.pop_q = pop_q;
    r.pop.pop_gt = pop_gt;
    r.pop.pop_ge = correct ? pop_gt : pop_ge_wrong;
    r.pop.rpop_ge = rpop_ge;
    r.pop.rpop_gt = correct ? rpop_ge : rpop_gt_wrong;

    const double verb_signal = p + cfg.overconfidence_bias + cfg.verb_noise_sd * standard_normal(rng);
    r.verb = verb_signal > 0.5 ? 1 : 0;
    int agree = 0;
    for (int s = 0; s < cfg.consistency_samples; ++s) agree += uniform01(rng) < p ? 1 : 0;
    r.consis = static_cast<double>(agree) / cfg.consistency_samples;

    PopularityVector self;
    self.source = PopularitySource::SelfEstimated;
    const double j = cfg.self_noise_sd;
    self.pop_q = self_score(std::log1p(pop_q), 0.0, 9.0, j * standard_normal(rng));
    self.pop_ge = self_score(std::log1p(*r.pop.pop_ge), 0.0, 9.0, j * standard_normal(rng));
    self.rpop_ge = self_score(std::log1p(rpop_ge), 0.0, 7.0, j * standard_normal(rng));
    r.self_pop = self;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace popcal
