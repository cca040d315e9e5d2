#include "srnas/controller.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "srnas/errors.hpp"

namespace srnas {

// ---------------------------------------------------------------------------
// RewardPipeline

double RewardPipeline::compute(double raw_metric, double entropy) {
  if (!std::isfinite(raw_metric))
    throw NonFiniteMetric("reward pipeline: raw metric is not finite");
  if (!any_) {
    mn_ = mx_ = raw_metric;
    any_ = true;
  } else {
    if (raw_metric < mn_) mn_ = raw_metric;
    if (raw_metric > mx_) mx_ = raw_metric;
  }
  const double norm = (mx_ == mn_) ? 0.5 : (raw_metric - mn_) / (mx_ - mn_);
  const double advantage = norm - baseline_;
  baseline_ = decay_ * baseline_ + (1.0 - decay_) * norm;
  ++count_;
  return advantage + entropy_coef_ * entropy;
}

double RewardPipeline::compute_failure(double entropy) {
  const double advantage = 0.0 - baseline_;
  baseline_ = decay_ * baseline_;
  ++count_;
  return advantage + entropy_coef_ * entropy;
}

nlohmann::json RewardPipeline::state() const {
  return nlohmann::json{{"entropy_coef", entropy_coef_}, {"decay", decay_},
                        {"any", any_},                   {"min", mn_},
                        {"max", mx_},                    {"baseline", baseline_},
                        {"count", count_}};
}

void RewardPipeline::restore(const nlohmann::json& j) {
  auto field = [&j](const char* key) -> const nlohmann::json& {
    if (!j.contains(key))
      throw ParseError(std::string("reward state: missing field '") + key + "'");
    return j[key];
  };
  try {
    entropy_coef_ = field("entropy_coef").get<double>();
    decay_ = field("decay").get<double>();
    any_ = field("any").get<bool>();
    mn_ = field("min").get<double>();
    mx_ = field("max").get<double>();
    baseline_ = field("baseline").get<double>();
    count_ = field("count").get<long>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("reward state: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Controller

namespace {

Eigen::VectorXd sigmoid_v(const Eigen::VectorXd& z) {
  return z.unaryExpr([](double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
}

}  // namespace

struct Controller::StepTrace {
  Eigen::VectorXd x, h_prev, c_prev;
  Eigen::VectorXd i, f, g, o, c, h, tanh_c;
  Eigen::VectorXd u, p;
  int choice = -1;
};

Controller::Controller(ControllerConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.dims.empty()) throw ConfigError("controller: empty decision dims");
  for (int d : cfg_.dims)
    if (d < 1) throw ConfigError("controller: decision dim must be >= 1");
  L_ = static_cast<int>(cfg_.dims.size());
  const int H = cfg_.hidden, E = cfg_.embed;

  wx_ = DParam(4 * H, E);
  wh_ = DParam(4 * H, H);
  bg_ = DParam(4 * H, 1);
  start_ = DParam(E, 1);

  Rng rng(mix64(cfg_.init_seed, 0x5eedc0de));
  auto fill = [&](Eigen::MatrixXd& m, double std) {
    for (long c = 0; c < m.cols(); ++c)
      for (long r = 0; r < m.rows(); ++r) m(r, c) = rng.normal(0.0, std);
  };
  fill(wx_.value, 0.1);
  fill(wh_.value, 0.1);
  fill(start_.value, 0.1);

  head_w_.reserve(L_);
  head_b_.reserve(L_);
  for (int t = 0; t < L_; ++t) {
    // Zero heads make the fresh policy exactly uniform per position.
    head_w_.emplace_back(cfg_.dims[t], H);
    head_b_.emplace_back(cfg_.dims[t], 1);
  }
  emb_.reserve(L_ > 0 ? L_ - 1 : 0);
  for (int t = 0; t + 1 < L_; ++t) {
    emb_.emplace_back(cfg_.dims[t], E);
    fill(emb_.back().value, 0.1);
  }
}

void Controller::walk(const std::vector<int>* forced, Rng* rng, SampleResult& out,
                      std::vector<StepTrace>* traces) const {
  const int H = cfg_.hidden;
  Eigen::VectorXd h = Eigen::VectorXd::Zero(H), c = Eigen::VectorXd::Zero(H);
  Eigen::VectorXd x = start_.value.col(0);
  out.decisions.clear();
  out.log_prob = 0.0;
  out.entropy = 0.0;
  if (traces) traces->resize(L_);

  for (int t = 0; t < L_; ++t) {
    Eigen::VectorXd z = wx_.value * x + wh_.value * h + bg_.value.col(0);
    Eigen::VectorXd gi = sigmoid_v(z.segment(0, H));
    Eigen::VectorXd gf = sigmoid_v(z.segment(H, H));
    Eigen::VectorXd gg = z.segment(2 * H, H).array().tanh();
    Eigen::VectorXd go = sigmoid_v(z.segment(3 * H, H));
    Eigen::VectorXd c_new = gf.cwiseProduct(c) + gi.cwiseProduct(gg);
    Eigen::VectorXd tanh_c = c_new.array().tanh();
    Eigen::VectorXd h_new = go.cwiseProduct(tanh_c);

    Eigen::VectorXd u = head_w_[t].value * h_new + head_b_[t].value.col(0);
    Eigen::VectorXd logits =
        cfg_.tanh_scale * (u / cfg_.logit_temp).array().tanh();
    Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp();
    p /= p.sum();

    int choice;
    if (forced) {
      choice = (*forced)[t];
      if (choice < 0 || choice >= cfg_.dims[t])
        throw ShapeMismatch("controller: decision " + std::to_string(t) +
                            " out of range for this policy");
    } else {
      double r = rng->uniform(), acc = 0.0;
      choice = cfg_.dims[t] - 1;
      for (int k = 0; k < cfg_.dims[t]; ++k) {
        acc += p[k];
        if (r < acc) {
          choice = k;
          break;
        }
      }
    }
    out.decisions.push_back(choice);
    out.log_prob += std::log(std::max(p[choice], 1e-300));
    for (int k = 0; k < cfg_.dims[t]; ++k)
      if (p[k] > 0) out.entropy -= p[k] * std::log(p[k]);

    if (traces) {
      StepTrace& tr = (*traces)[t];
      tr.x = x;
      tr.h_prev = h;
      tr.c_prev = c;
      tr.i = gi;
      tr.f = gf;
      tr.g = gg;
      tr.o = go;
      tr.c = c_new;
      tr.h = h_new;
      tr.tanh_c = tanh_c;
      tr.u = u;
      tr.p = p;
      tr.choice = choice;
    }

    h = std::move(h_new);
    c = std::move(c_new);
    if (t + 1 < L_) x = emb_[t].value.row(choice).transpose();
  }
}

SampleResult Controller::sample(Rng& rng) const {
  SampleResult out;
  walk(nullptr, &rng, out, nullptr);
  return out;
}

double Controller::log_prob(const std::vector<int>& decisions) const {
  if (static_cast<int>(decisions.size()) != L_)
    throw ShapeMismatch("controller: genome length mismatch");
  SampleResult out;
  walk(&decisions, nullptr, out, nullptr);
  return out.log_prob;
}

double Controller::entropy_of(const std::vector<int>& decisions) const {
  if (static_cast<int>(decisions.size()) != L_)
    throw ShapeMismatch("controller: genome length mismatch");
  SampleResult out;
  walk(&decisions, nullptr, out, nullptr);
  return out.entropy;
}

void Controller::reinforce_update(const std::vector<int>& decisions, double reward) {
  if (static_cast<int>(decisions.size()) != L_)
    throw ShapeMismatch("controller: genome length mismatch");
  if (!std::isfinite(reward)) throw NonFiniteMetric("controller: reward not finite");

  for (auto& [name, p] : named_params()) p->grad.setZero();

  SampleResult out;
  std::vector<StepTrace> tr;
  walk(&decisions, nullptr, out, &tr);

  const int H = cfg_.hidden;
  Eigen::VectorXd dh = Eigen::VectorXd::Zero(H);
  Eigen::VectorXd dc = Eigen::VectorXd::Zero(H);

  for (int t = L_ - 1; t >= 0; --t) {
    const StepTrace& s = tr[t];
    // d(-reward * log p[choice]) / dlogits = -reward * (onehot - p)
    Eigen::VectorXd dlogits = reward * s.p;
    dlogits[s.choice] -= reward;
    // logits = ts * tanh(u / temp)
    Eigen::VectorXd du =
        dlogits.array() * (cfg_.tanh_scale / cfg_.logit_temp) *
        (1.0 - (s.u / cfg_.logit_temp).array().tanh().square());
    head_w_[t].grad.noalias() += du * s.h.transpose();
    head_b_[t].grad.col(0) += du;
    dh.noalias() += head_w_[t].value.transpose() * du;

    Eigen::VectorXd do_ = dh.cwiseProduct(s.tanh_c);
    Eigen::VectorXd dct = dc + dh.cwiseProduct(s.o).cwiseProduct(
                                   (1.0 - s.tanh_c.array().square()).matrix());
    Eigen::VectorXd di = dct.cwiseProduct(s.g);
    Eigen::VectorXd dg = dct.cwiseProduct(s.i);
    Eigen::VectorXd df = dct.cwiseProduct(s.c_prev);
    dc = dct.cwiseProduct(s.f);

    Eigen::VectorXd dz(4 * H);
    dz.segment(0, H) = di.array() * s.i.array() * (1.0 - s.i.array());
    dz.segment(H, H) = df.array() * s.f.array() * (1.0 - s.f.array());
    dz.segment(2 * H, H) = dg.array() * (1.0 - s.g.array().square());
    dz.segment(3 * H, H) = do_.array() * s.o.array() * (1.0 - s.o.array());

    wx_.grad.noalias() += dz * s.x.transpose();
    wh_.grad.noalias() += dz * s.h_prev.transpose();
    bg_.grad.col(0) += dz;

    Eigen::VectorXd dx = wx_.value.transpose() * dz;
    if (t == 0)
      start_.grad.col(0) += dx;
    else
      emb_[t - 1].grad.row(tr[t - 1].choice) += dx.transpose();

    dh = wh_.value.transpose() * dz;
  }

  adam_step();
}

void Controller::adam_step() {
  ++adam_t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, adam_t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, adam_t_);
  for (auto& [name, p] : named_params()) {
    p->m = cfg_.beta1 * p->m + (1.0 - cfg_.beta1) * p->grad;
    p->v = cfg_.beta2 * p->v + (1.0 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= cfg_.lr * (p->m.array() / bc1) /
                        ((p->v.array() / bc2).sqrt() + cfg_.eps);
  }
}

std::vector<std::pair<std::string, Controller::DParam*>> Controller::named_params() {
  std::vector<std::pair<std::string, DParam*>> out;
  out.emplace_back("lstm.wx", &wx_);
  out.emplace_back("lstm.wh", &wh_);
  out.emplace_back("lstm.b", &bg_);
  out.emplace_back("start", &start_);
  char buf[32];
  for (int t = 0; t < L_; ++t) {
    std::snprintf(buf, sizeof(buf), "head%02d.w", t);
    out.emplace_back(buf, &head_w_[t]);
    std::snprintf(buf, sizeof(buf), "head%02d.b", t);
    out.emplace_back(buf, &head_b_[t]);
  }
  for (int t = 0; t + 1 < L_; ++t) {
    std::snprintf(buf, sizeof(buf), "emb%02d", t);
    out.emplace_back(buf, &emb_[t]);
  }
  return out;
}

std::vector<std::pair<std::string, const Controller::DParam*>> Controller::named_params()
    const {
  auto mut = const_cast<Controller*>(this)->named_params();
  std::vector<std::pair<std::string, const DParam*>> out;
  out.reserve(mut.size());
  for (auto& [n, p] : mut) out.emplace_back(n, p);
  return out;
}

Snapshot Controller::to_snapshot() const {
  Snapshot snap;
  snap.meta["kind"] = "controller";
  snap.meta["version"] = 1;
  snap.meta["dims"] = cfg_.dims;
  snap.meta["hidden"] = cfg_.hidden;
  snap.meta["embed"] = cfg_.embed;
  snap.meta["lr"] = cfg_.lr;
  snap.meta["beta1"] = cfg_.beta1;
  snap.meta["beta2"] = cfg_.beta2;
  snap.meta["eps"] = cfg_.eps;
  snap.meta["tanh_scale"] = cfg_.tanh_scale;
  snap.meta["logit_temp"] = cfg_.logit_temp;
  snap.meta["init_seed"] = cfg_.init_seed;
  snap.meta["adam_t"] = adam_t_;
  for (const auto& [name, p] : named_params()) {
    const std::vector<int> shape{static_cast<int>(p->value.rows()),
                                 static_cast<int>(p->value.cols())};
    snap.put_f64(name, shape, p->value.data());
    snap.put_f64("adam_m." + name, shape, p->m.data());
    snap.put_f64("adam_v." + name, shape, p->v.data());
  }
  return snap;
}

Controller Controller::from_snapshot(const Snapshot& snap) {
  if (snap.meta.value("kind", "") != "controller" || snap.meta.value("version", 0) != 1)
    throw IoError("controller checkpoint: wrong kind/version");
  ControllerConfig cfg;
  cfg.dims = snap.meta.at("dims").get<std::vector<int>>();
  cfg.hidden = snap.meta.at("hidden").get<int>();
  cfg.embed = snap.meta.at("embed").get<int>();
  cfg.lr = snap.meta.at("lr").get<double>();
  cfg.beta1 = snap.meta.at("beta1").get<double>();
  cfg.beta2 = snap.meta.at("beta2").get<double>();
  cfg.eps = snap.meta.at("eps").get<double>();
  cfg.tanh_scale = snap.meta.at("tanh_scale").get<double>();
  cfg.logit_temp = snap.meta.at("logit_temp").get<double>();
  cfg.init_seed = snap.meta.at("init_seed").get<std::uint64_t>();
  Controller ctrl(cfg);
  ctrl.adam_t_ = snap.meta.at("adam_t").get<long>();
  for (auto& [name, p] : ctrl.named_params()) {
    auto want = [&](const std::string& n, Eigen::MatrixXd& dst) {
      const auto* e = snap.find(n);
      if (!e) throw IoError("controller checkpoint: missing tensor " + n);
      if (e->dtype != "f64" || e->count() != dst.size())
        throw IoError("controller checkpoint: bad tensor " + n);
      std::memcpy(dst.data(), e->f64(), sizeof(double) * static_cast<std::size_t>(dst.size()));
    };
    want(name, p->value);
    want("adam_m." + name, p->m);
    want("adam_v." + name, p->v);
  }
  return ctrl;
}

}  // namespace srnas
