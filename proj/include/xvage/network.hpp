#pragma once

// QuartzNet-style x-vector embedder, statistics pooling and the front-end
// heads for gender, age group, age regression and speaker identity.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xvage/error.hpp"
#include "xvage/nn.hpp"

namespace xvage {

struct BlockSpec {
  std::string name;
  int kernel = 1;
  int repeats = 1;
  bool residual = false;
  int channels = 512;
};

struct EmbedderConfig {
  int input_dim = 30;
  std::vector<BlockSpec> blocks;
  std::vector<int> dense;  // post-pooling Dense+BN+ReLU sizes; the last is the embedding

  /// The full-size embedder: Input(3,1,res,512), Block_1..3 (k=5,7,9, two
  /// sub-units each, residual, 512), Final(1,1,plain,1500), dense 512, 512.
  static EmbedderConfig standard(int input_dim) { return scaled(input_dim, 512, 1500, 512); }

  /// Same topology with narrower channels.
  static EmbedderConfig scaled(int input_dim, int channels, int final_channels, int embedding) {
    EmbedderConfig c;
    c.input_dim = input_dim;
    c.blocks = {{"input", 3, 1, true, channels},
                {"block1", 5, 2, true, channels},
                {"block2", 7, 2, true, channels},
                {"block3", 9, 2, true, channels},
                {"final", 1, 1, false, final_channels}};
    c.dense = {embedding, embedding};
    return c;
  }

  int pooled_dim() const { return 2 * blocks.back().channels; }
  int embedding_dim() const { return dense.back(); }

  void validate() const {
    if (input_dim <= 0) throw ConfigError("embedder input_dim must be positive");
    if (blocks.empty() || dense.empty()) throw ConfigError("embedder needs blocks and dense layers");
    for (const auto& b : blocks)
      if (b.kernel <= 0 || b.kernel % 2 == 0 || b.repeats <= 0 || b.channels <= 0)
        throw ConfigError("block '" + b.name + "': kernel must be odd and sizes positive");
  }
};

inline void to_json(nlohmann::json& j, const BlockSpec& b) {
  j = {{"name", b.name}, {"kernel", b.kernel}, {"repeats", b.repeats}, {"residual", b.residual}, {"channels", b.channels}};
}
inline void from_json(const nlohmann::json& j, BlockSpec& b) {
  b.name = j.at("name").get<std::string>();
  b.kernel = j.at("kernel").get<int>();
  b.repeats = j.at("repeats").get<int>();
  b.residual = j.at("residual").get<bool>();
  b.channels = j.at("channels").get<int>();
}
inline void to_json(nlohmann::json& j, const EmbedderConfig& c) {
  j = {{"input_dim", c.input_dim}, {"blocks", c.blocks}, {"dense", c.dense}};
}

/// Accepts either an explicit block list or the shorthand
/// {"channels", "final_channels", "embedding_dim"} for the standard topology.
inline void from_json(const nlohmann::json& j, EmbedderConfig& c) {
  const int input_dim = j.value("input_dim", 30);
  if (j.contains("blocks")) {
    c.input_dim = input_dim;
    c.blocks = j.at("blocks").get<std::vector<BlockSpec>>();
    c.dense = j.at("dense").get<std::vector<int>>();
  } else {
    c = EmbedderConfig::scaled(input_dim, j.value("channels", 512), j.value("final_channels", 1500),
                               j.value("embedding_dim", 512));
  }
  c.validate();
}

/// 64-bit FNV-1a of the canonical JSON form, as 16 hex digits.
inline std::string config_hash(const EmbedderConfig& c) {
  const std::string canon = nlohmann::json(c).dump();
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash_name(canon);
  return os.str();
}

enum class HeadKind { kGender, kAgeGroup, kAgeRegressor, kSpeaker };

inline std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::kGender: return "gender";
    case HeadKind::kAgeGroup: return "age_group";
    case HeadKind::kAgeRegressor: return "age_regressor";
    case HeadKind::kSpeaker: return "speaker";
  }
  return "?";
}

inline constexpr int kNumAgeGroups = 8;

struct HeadSet {
  bool gender = false;
  bool age_group = false;
  bool age_regressor = false;
  int speakers = 0;  // > 0 activates the speaker-id head

  static HeadSet age_gender() { return {true, true, true, 0}; }
  static HeadSet speaker(int n) { return {false, false, false, n}; }

  bool has(HeadKind h) const {
    switch (h) {
      case HeadKind::kGender: return gender;
      case HeadKind::kAgeGroup: return age_group;
      case HeadKind::kAgeRegressor: return age_regressor;
      case HeadKind::kSpeaker: return speakers > 0;
    }
    return false;
  }
  bool any_age_gender() const { return gender || age_group || age_regressor; }

  void validate() const {
    if (speakers > 0 && any_age_gender())
      throw ConfigError("speaker-id head cannot be combined with age/gender heads in one stage");
    if (speakers < 0) throw ConfigError("speaker count must be non-negative");
    if (speakers == 0 && !any_age_gender()) throw ConfigError("no head active");
  }
};

// ---------------------------------------------------------------------------

/// Repeated (depthwise conv -> pointwise conv -> BN -> ReLU) sub-units. The
/// last sub-unit's ReLU is applied after the residual add. The skip path is
/// identity when channel counts match, otherwise pointwise conv + BN.
template <class T>
class QuartzBlock {
 public:
  QuartzBlock() = default;
  QuartzBlock(const std::string& prefix, int in_channels, const BlockSpec& spec) : spec_(spec) {
    int c_in = in_channels;
    for (int r = 0; r < spec.repeats; ++r) {
      const std::string p = prefix + ".sub" + std::to_string(r);
      SubUnit u;
      u.dw = DepthwiseConv<T>(p + ".depthwise", c_in, spec.kernel);
      u.pw = Linear<T>(p + ".pointwise", c_in, spec.channels, false);
      u.bn = BatchNorm<T>(p + ".bn", spec.channels);
      units_.push_back(std::move(u));
      c_in = spec.channels;
    }
    if (spec.residual && in_channels != spec.channels) {
      proj_ = Linear<T>(prefix + ".residual.pointwise", in_channels, spec.channels, false);
      proj_bn_ = BatchNorm<T>(prefix + ".residual.bn", spec.channels);
      has_proj_ = true;
    }
  }

  const BlockSpec& spec() const { return spec_; }

  void init(std::uint64_t seed) {
    for (auto& u : units_) {
      u.dw.init(seed);
      u.pw.init(seed);
      u.bn.init();
    }
    if (has_proj_) {
      proj_.init(seed);
      proj_bn_.init();
    }
  }

  Mat<T> forward(const Mat<T>& x, const Offsets& offsets, Mode mode) {
    Mat<T> h = x;
    for (std::size_t i = 0; i < units_.size(); ++i) {
      auto& u = units_[i];
      h = u.bn.forward(u.pw.forward(u.dw.forward(h, offsets)), mode);
      if (i + 1 < units_.size()) h = u.relu.forward(h);
    }
    if (spec_.residual) h += has_proj_ ? proj_bn_.forward(proj_.forward(x), mode) : x;
    return out_relu_.forward(h);
  }

  Mat<T> backward(const Mat<T>& dy) {
    Mat<T> dh = out_relu_.backward(dy);
    Mat<T> dx_skip;
    if (spec_.residual) dx_skip = has_proj_ ? proj_.backward(proj_bn_.backward(dh)) : dh;
    for (std::size_t i = units_.size(); i-- > 0;) {
      auto& u = units_[i];
      if (i + 1 < units_.size()) dh = u.relu.backward(dh);
      dh = u.dw.backward(u.pw.backward(u.bn.backward(dh)));
    }
    if (spec_.residual) dh += dx_skip;
    return dh;
  }

  void collect(ParamRefs<T>& out) {
    for (auto& u : units_) {
      u.dw.collect(out);
      u.pw.collect(out);
      u.bn.collect(out);
    }
    if (has_proj_) {
      proj_.collect(out);
      proj_bn_.collect(out);
    }
  }

 private:
  struct SubUnit {
    DepthwiseConv<T> dw;
    Linear<T> pw;
    BatchNorm<T> bn;
    ReLU<T> relu;
  };
  BlockSpec spec_;
  std::vector<SubUnit> units_;
  bool has_proj_ = false;
  Linear<T> proj_;
  BatchNorm<T> proj_bn_;
  ReLU<T> out_relu_;
};

/// Dense -> BN -> ReLU, as used after pooling.
template <class T>
class DenseBnRelu {
 public:
  DenseBnRelu() = default;
  DenseBnRelu(const std::string& prefix, int in, int out)
      : dense_(prefix + ".dense", in, out, true), bn_(prefix + ".bn", out) {}

  void init(std::uint64_t seed) {
    dense_.init(seed);
    bn_.init();
  }
  Mat<T> forward(const Mat<T>& x, Mode mode) { return relu_.forward(bn_.forward(dense_.forward(x), mode)); }
  Mat<T> backward(const Mat<T>& dy) { return dense_.backward(bn_.backward(relu_.backward(dy))); }
  void collect(ParamRefs<T>& out) {
    dense_.collect(out);
    bn_.collect(out);
  }

 private:
  Linear<T> dense_;
  BatchNorm<T> bn_;
  ReLU<T> relu_;
};

template <class T>
class Embedder {
 public:
  Embedder() = default;
  explicit Embedder(const EmbedderConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    int c = cfg.input_dim;
    for (const auto& spec : cfg.blocks) {
      blocks_.emplace_back("embedder." + spec.name, c, spec);
      c = spec.channels;
    }
    int d = cfg.pooled_dim();
    for (std::size_t i = 0; i < cfg.dense.size(); ++i) {
      dense_.emplace_back("embedder.dense" + std::to_string(i + 1), d, cfg.dense[i]);
      d = cfg.dense[i];
    }
  }

  const EmbedderConfig& config() const { return cfg_; }

  void init(std::uint64_t seed) {
    for (auto& b : blocks_) b.init(seed);
    for (auto& d : dense_) d.init(seed);
  }

  /// Frame-level trunk up to (not including) pooling.
  Mat<T> frames_forward(const Mat<T>& x, const Offsets& offsets, Mode mode) {
    if (x.cols() != cfg_.input_dim)
      throw ShapeError("embedder expects feature dim " + std::to_string(cfg_.input_dim) + ", got " +
                       std::to_string(x.cols()));
    Mat<T> h = x;
    for (auto& b : blocks_) h = b.forward(h, offsets, mode);
    return h;
  }

  Mat<T> forward(const Mat<T>& x, const Offsets& offsets, Mode mode) {
    Mat<T> h = pool_.forward(frames_forward(x, offsets, mode), offsets);
    for (auto& d : dense_) h = d.forward(h, mode);
    return h;
  }

  Mat<T> backward(const Mat<T>& dy) {
    Mat<T> dh = dy;
    for (std::size_t i = dense_.size(); i-- > 0;) dh = dense_[i].backward(dh);
    dh = pool_.backward(dh);
    for (std::size_t i = blocks_.size(); i-- > 0;) dh = blocks_[i].backward(dh);
    return dh;
  }

  void collect(ParamRefs<T>& out) {
    for (auto& b : blocks_) b.collect(out);
    for (auto& d : dense_) d.collect(out);
  }

 private:
  EmbedderConfig cfg_;
  std::vector<QuartzBlock<T>> blocks_;
  StatsPooling<T> pool_;
  std::vector<DenseBnRelu<T>> dense_;
};

/// Front-end network: Dense -> ReLU -> BN -> Dense, or a single Dense for the
/// speaker head. Produces pre-activation outputs (logits, or years for the
/// regressor).
template <class T>
class Head {
 public:
  Head() = default;
  Head(HeadKind kind, int embedding_dim, int outputs) : kind_(kind) {
    const std::string p = "heads." + to_string(kind);
    if (kind != HeadKind::kSpeaker) {
      hidden_ = Linear<T>(p + ".hidden", embedding_dim, embedding_dim, true);
      bn_ = BatchNorm<T>(p + ".bn", embedding_dim);
      has_trunk_ = true;
    }
    out_ = Linear<T>(p + ".out", embedding_dim, outputs, true);
  }

  HeadKind kind() const { return kind_; }
  int outputs() const { return out_.out_dim(); }

  void init(std::uint64_t seed) {
    if (has_trunk_) {
      hidden_.init(seed);
      bn_.init();
    }
    out_.init(seed);
  }

  Mat<T> forward(const Mat<T>& e, Mode mode) {
    if (!has_trunk_) return out_.forward(e);
    return out_.forward(bn_.forward(relu_.forward(hidden_.forward(e)), mode));
  }

  Mat<T> backward(const Mat<T>& dy) {
    Mat<T> d = out_.backward(dy);
    if (!has_trunk_) return d;
    return hidden_.backward(relu_.backward(bn_.backward(d)));
  }

  void collect(ParamRefs<T>& out) {
    if (has_trunk_) {
      hidden_.collect(out);
      bn_.collect(out);
    }
    out_.collect(out);
  }

 private:
  HeadKind kind_ = HeadKind::kGender;
  bool has_trunk_ = false;
  Linear<T> hidden_;
  BatchNorm<T> bn_;
  ReLU<T> relu_;
  Linear<T> out_;
};

/// Raw head outputs for a batch; absent heads leave their matrix empty.
template <class T>
struct HeadOutputs {
  Mat<T> embedding;       // B x D
  Mat<T> gender_logit;    // B x 1
  Mat<T> age_logits;      // B x 8
  Mat<T> age_years;       // B x 1
  Mat<T> speaker_logits;  // B x N
};

/// Packs a batch of (T_b x F) feature matrices row-wise.
template <class T, class Matrices>
std::pair<Mat<T>, Offsets> pack_sequences(const Matrices& seqs) {
  Offsets offsets{0};
  Eigen::Index rows = 0, cols = -1;
  for (const auto& s : seqs) {
    if (cols >= 0 && s.cols() != cols) throw ShapeError("pack_sequences: inconsistent feature dims");
    cols = s.cols();
    rows += s.rows();
    offsets.push_back(rows);
  }
  Mat<T> x(rows, std::max<Eigen::Index>(cols, 0));
  for (std::size_t i = 0; i < seqs.size(); ++i)
    x.middleRows(offsets[i], offsets[i + 1] - offsets[i]) = seqs[i].template cast<T>();
  return {std::move(x), std::move(offsets)};
}

/// Embedder plus the heads of one training stage.
template <class T>
class Model {
 public:
  Model() = default;
  Model(const EmbedderConfig& cfg, const HeadSet& heads) : embedder_(cfg), heads_(heads) {
    heads.validate();
    const int d = cfg.embedding_dim();
    if (heads.gender) gender_ = Head<T>(HeadKind::kGender, d, 1);
    if (heads.age_group) age_group_ = Head<T>(HeadKind::kAgeGroup, d, kNumAgeGroups);
    if (heads.age_regressor) age_reg_ = Head<T>(HeadKind::kAgeRegressor, d, 1);
    if (heads.speakers > 0) speaker_ = Head<T>(HeadKind::kSpeaker, d, heads.speakers);
  }

  const EmbedderConfig& config() const { return embedder_.config(); }
  const HeadSet& heads() const { return heads_; }

  void init(std::uint64_t seed) {
    embedder_.init(seed);
    for (auto* h : active_heads()) h->init(seed);
  }

  HeadOutputs<T> forward(const Mat<T>& x, const Offsets& offsets, Mode mode) {
    HeadOutputs<T> out;
    out.embedding = embedder_.forward(x, offsets, mode);
    if (gender_) out.gender_logit = gender_->forward(out.embedding, mode);
    if (age_group_) out.age_logits = age_group_->forward(out.embedding, mode);
    if (age_reg_) out.age_years = age_reg_->forward(out.embedding, mode);
    if (speaker_) out.speaker_logits = speaker_->forward(out.embedding, mode);
    return out;
  }

  /// Gradients w.r.t. each head's raw output; empty matrices are skipped.
  void backward(const HeadOutputs<T>& grads) {
    Mat<T> de;
    auto add = [&de](Mat<T> g) {
      if (de.size() == 0) de = std::move(g);
      else de += g;
    };
    if (gender_ && grads.gender_logit.size()) add(gender_->backward(grads.gender_logit));
    if (age_group_ && grads.age_logits.size()) add(age_group_->backward(grads.age_logits));
    if (age_reg_ && grads.age_years.size()) add(age_reg_->backward(grads.age_years));
    if (speaker_ && grads.speaker_logits.size()) add(speaker_->backward(grads.speaker_logits));
    if (grads.embedding.size()) add(grads.embedding);
    if (de.size()) embedder_.backward(de);
  }

  Embedder<T>& embedder() { return embedder_; }

  Head<T>* head(HeadKind k) {
    switch (k) {
      case HeadKind::kGender: return gender_ ? &*gender_ : nullptr;
      case HeadKind::kAgeGroup: return age_group_ ? &*age_group_ : nullptr;
      case HeadKind::kAgeRegressor: return age_reg_ ? &*age_reg_ : nullptr;
      case HeadKind::kSpeaker: return speaker_ ? &*speaker_ : nullptr;
    }
    return nullptr;
  }

  std::vector<Head<T>*> active_heads() {
    std::vector<Head<T>*> out;
    for (auto k : {HeadKind::kGender, HeadKind::kAgeGroup, HeadKind::kAgeRegressor, HeadKind::kSpeaker})
      if (auto* h = head(k)) out.push_back(h);
    return out;
  }

  /// Every weight array (learnable and batch-norm statistics) in a fixed order.
  ParamRefs<T> params() {
    ParamRefs<T> out;
    embedder_.collect(out);
    for (auto* h : active_heads()) h->collect(out);
    return out;
  }

  ParamRefs<T> embedder_params() {
    ParamRefs<T> out;
    embedder_.collect(out);
    return out;
  }

  ParamRefs<T> head_params(HeadKind k) {
    ParamRefs<T> out;
    if (auto* h = head(k)) h->collect(out);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

 private:
  Embedder<T> embedder_;
  HeadSet heads_;
  std::optional<Head<T>> gender_, age_group_, age_reg_, speaker_;
};

template <class T>
std::size_t count_learnable(const ParamRefs<T>& ps) {
  std::size_t n = 0;
  for (const auto* p : ps)
    if (p->trainable) n += static_cast<std::size_t>(p->size());
  return n;
}

/// Learnable-scalar count from the layer shapes (batch-norm running
/// statistics excluded).
inline std::size_t count_params(const EmbedderConfig& cfg, const HeadSet& heads = {}) {
  std::size_t n = 0;
  const auto bn = [](std::size_t c) { return 2 * c; };
  std::size_t c = static_cast<std::size_t>(cfg.input_dim);
  for (const auto& b : cfg.blocks) {
    const auto co = static_cast<std::size_t>(b.channels);
    std::size_t ci = c;
    for (int r = 0; r < b.repeats; ++r) {
      n += ci * static_cast<std::size_t>(b.kernel) + ci * co + bn(co);
      ci = co;
    }
    if (b.residual && c != co) n += c * co + bn(co);
    c = co;
  }
  std::size_t d = static_cast<std::size_t>(cfg.pooled_dim());
  for (int width : cfg.dense) {
    const auto w = static_cast<std::size_t>(width);
    n += d * w + w + bn(w);
    d = w;
  }
  const auto trunk = d * d + d + bn(d);
  if (heads.gender) n += trunk + d + 1;
  if (heads.age_group) n += trunk + d * kNumAgeGroups + kNumAgeGroups;
  if (heads.age_regressor) n += trunk + d + 1;
  if (heads.speakers > 0) n += d * static_cast<std::size_t>(heads.speakers) + static_cast<std::size_t>(heads.speakers);
  return n;
}

// ---------------------------------------------------------------------------
// Single-utterance helpers

template <class T>
Vec<T> sigmoid(const Vec<T>& z) {
  return (T(1) + (-z.array()).exp()).inverse().matrix();
}

/// Row-wise softmax with max subtraction.
template <class T>
Mat<T> softmax_rows(const Mat<T>& z) {
  Mat<T> e = (z.colwise() - z.rowwise().maxCoeff()).array().exp().matrix();
  return e.array().colwise() / e.rowwise().sum().array();
}

/// Runs one head on an embedding batch (B x D) in inference mode and applies
/// its output activation: sigmoid (male probability), softmax, or identity.
template <class T>
Mat<T> head_forward(Model<T>& model, const Mat<T>& embedding, HeadKind kind) {
  Head<T>* h = model.head(kind);
  if (!h) throw ValidationError("head '" + to_string(kind) + "' is not active in this model");
  if (embedding.cols() != model.config().embedding_dim())
    throw ShapeError("head_forward: embedding dim mismatch");
  Mat<T> z = h->forward(embedding, Mode::kInfer);
  switch (kind) {
    case HeadKind::kGender: return sigmoid<T>(z.col(0));
    case HeadKind::kAgeGroup:
    case HeadKind::kSpeaker: return softmax_rows<T>(z);
    case HeadKind::kAgeRegressor: return z;
  }
  return z;
}

/// Embedding of one utterance (inference mode).
template <class T>
Vec<T> embed(Model<T>& model, const Eigen::MatrixXd& features) {
  if (features.cols() != model.config().input_dim)
    throw ShapeError("embed: expected feature dim " + std::to_string(model.config().input_dim) + ", got " +
                     std::to_string(features.cols()));
  Offsets offsets{0, features.rows()};
  Mat<T> e = model.embedder().forward(features.cast<T>(), offsets, Mode::kInfer);
  return e.row(0).transpose();
}

}  // namespace xvage
