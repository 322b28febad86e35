#include "pser/encoder.hpp"

#include "pser/rng.hpp"
#include "pser/tensor_file.hpp"

#include <cmath>
#include <fstream>

namespace pser {

namespace {

using ad::NodePtr;

Matrix glorot(RngStream& rng, int rows, int cols) {
  double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(-lim, lim);
  }
  return m;
}

Matrix small_normal(RngStream& rng, int rows, int cols, double sigma) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal(0.0, sigma);
  }
  return m;
}

NodePtr glorot_leaf(std::uint64_t seed, const std::string& name, int rows, int cols) {
  RngStream rng(seed, name);
  return ad::leaf(glorot(rng, rows, cols));
}

NodePtr normal_leaf(std::uint64_t seed, const std::string& name, int rows, int cols,
                    double sigma) {
  RngStream rng(seed, name);
  return ad::leaf(small_normal(rng, rows, cols, sigma));
}

NodePtr zeros_leaf(int rows, int cols) { return ad::leaf(Matrix::Zero(rows, cols)); }
NodePtr ones_leaf(int rows, int cols) { return ad::leaf(Matrix::Ones(rows, cols)); }

constexpr double kBnEps = 1e-5;

NodePtr conv_forward_node(const EncoderModel& model, const NodePtr& input) {
  const EncoderConfig& cfg = model.config;
  NodePtr h = input;
  for (size_t i = 0; i < model.conv_w.size(); ++i) {
    h = ad::im2col(h, cfg.conv_kernels[i], cfg.conv_strides[i]);
    h = ad::add_row_broadcast(ad::matmul(h, model.conv_w[i]), model.conv_b[i]);
    if (cfg.conv_gelu) h = ad::gelu(h);
  }
  return h;
}

NodePtr samples_node(const EncoderConfig& cfg, const Vector& samples) {
  if (samples.size() < cfg.min_input_length()) {
    throw ShapeError("input of " + std::to_string(samples.size()) +
                     " samples is shorter than the minimum of " +
                     std::to_string(cfg.min_input_length()));
  }
  Matrix x(samples.size(), 1);
  x.col(0) = samples;
  return ad::constant(std::move(x));
}

NodePtr transformer_layer(const EncoderModel::Layer& ly, const NodePtr& in, int n_heads) {
  int d = static_cast<int>(in->value.cols());
  int dh = d / n_heads;
  NodePtr u = ad::layer_norm(in, ly.ln1_g, ly.ln1_b);
  NodePtr q = ad::add_row_broadcast(ad::matmul(u, ly.wq), ly.bq);
  NodePtr k = ad::add_row_broadcast(ad::matmul(u, ly.wk), ly.bk);
  NodePtr v = ad::add_row_broadcast(ad::matmul(u, ly.wv), ly.bv);
  std::vector<NodePtr> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    NodePtr qh = ad::slice_cols(q, h * dh, dh);
    NodePtr kh = ad::slice_cols(k, h * dh, dh);
    NodePtr vh = ad::slice_cols(v, h * dh, dh);
    NodePtr scores = ad::scale(ad::matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    heads.push_back(ad::matmul(ad::softmax_rows(scores), vh));
  }
  NodePtr attn = ad::add_row_broadcast(ad::matmul(ad::concat_cols(heads), ly.wo), ly.bo);
  NodePtr mid = ad::add(in, attn);
  NodePtr u2 = ad::layer_norm(mid, ly.ln2_g, ly.ln2_b);
  NodePtr f = ad::gelu(ad::add_row_broadcast(ad::matmul(u2, ly.w1), ly.b1));
  f = ad::add_row_broadcast(ad::matmul(f, ly.w2), ly.b2);
  return ad::add(mid, f);
}

}  // namespace

std::string fusion_name(Fusion f) {
  switch (f) {
    case Fusion::Last: return "last";
    case Fusion::First: return "first";
    case Fusion::Prefix: return "prefix";
    case Fusion::None: return "none";
  }
  throw ValidationError("fusion_name: bad enum value");
}

Fusion fusion_from_name(const std::string& name) {
  if (name == "last") return Fusion::Last;
  if (name == "first") return Fusion::First;
  if (name == "prefix") return Fusion::Prefix;
  if (name == "none") return Fusion::None;
  throw ValidationError("unknown fusion mode: " + name);
}

void EncoderConfig::validate() const {
  if (d_model < 1) throw ConfigError("d_model must be positive");
  if (n_layers < 0) throw ConfigError("n_layers must be non-negative");
  if (n_heads < 1) throw ConfigError("n_heads must be positive");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (conv_channels.empty()) throw ConfigError("at least one conv layer is required");
  if (conv_kernels.size() != conv_channels.size() || conv_strides.size() != conv_channels.size()) {
    throw ConfigError("conv_channels, conv_kernels and conv_strides must have equal length");
  }
  for (size_t i = 0; i < conv_channels.size(); ++i) {
    if (conv_channels[i] < 1 || conv_kernels[i] < 1 || conv_strides[i] < 1) {
      throw ConfigError("conv layer sizes must be positive");
    }
  }
  if (conv_channels.back() != d_model) {
    throw ConfigError("last conv channel count must equal d_model");
  }
  if (n_speakers < 1) throw ConfigError("n_speakers must be positive");
  if (k_pseudo < 2) throw ConfigError("k_pseudo must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (ffn_hidden < 1) throw ConfigError("ffn_hidden must be positive");
  for (int h : interpreter_hidden) {
    if (h < 1) throw ConfigError("interpreter hidden sizes must be positive");
  }
}

int EncoderConfig::frames_for(int t_raw) const {
  int t = t_raw;
  for (size_t i = 0; i < conv_kernels.size(); ++i) {
    if (t < conv_kernels[i]) {
      throw ShapeError("input too short for conv stack: " + std::to_string(t_raw) + " samples");
    }
    t = (t - conv_kernels[i]) / conv_strides[i] + 1;
  }
  return t;
}

int EncoderConfig::min_input_length() const {
  int t = 1;
  for (size_t i = conv_kernels.size(); i-- > 0;) {
    t = (t - 1) * conv_strides[i] + conv_kernels[i];
  }
  return t;
}

nlohmann::json EncoderConfig::to_json() const {
  return nlohmann::json{{"d_model", d_model},
                        {"n_layers", n_layers},
                        {"n_heads", n_heads},
                        {"conv_channels", conv_channels},
                        {"conv_kernels", conv_kernels},
                        {"conv_strides", conv_strides},
                        {"fusion", fusion_name(fusion)},
                        {"n_speakers", n_speakers},
                        {"k_pseudo", k_pseudo},
                        {"dropout", dropout},
                        {"ffn_hidden", ffn_hidden},
                        {"interpreter_hidden", interpreter_hidden},
                        {"conv_gelu", conv_gelu}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.conv_kernels = j.value("conv_kernels", c.conv_kernels);
  c.conv_strides = j.value("conv_strides", c.conv_strides);
  if (j.contains("fusion")) c.fusion = fusion_from_name(j.at("fusion").get<std::string>());
  c.n_speakers = j.value("n_speakers", c.n_speakers);
  c.k_pseudo = j.value("k_pseudo", c.k_pseudo);
  c.dropout = j.value("dropout", c.dropout);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
  c.interpreter_hidden = j.value("interpreter_hidden", c.interpreter_hidden);
  c.conv_gelu = j.value("conv_gelu", c.conv_gelu);
  return c;
}

namespace {

ad::NodePtr clone_node(const ad::NodePtr& p) { return p ? ad::leaf(p->value) : nullptr; }

}  // namespace

EncoderModel::EncoderModel(const EncoderModel& other) { *this = other; }

EncoderModel& EncoderModel::operator=(const EncoderModel& other) {
  if (this == &other) return *this;
  config = other.config;
  speaker_ids = other.speaker_ids;
  speaker_lookup = other.speaker_lookup;
  conv_w = other.conv_w;
  for (auto& w : conv_w) w = clone_node(w);
  conv_b = other.conv_b;
  for (auto& b : conv_b) b = clone_node(b);
  mask_emb = clone_node(other.mask_emb);
  layers = other.layers;
  for (auto& ly : layers) {
    ly.ln1_g = clone_node(ly.ln1_g);
    ly.ln1_b = clone_node(ly.ln1_b);
    ly.wq = clone_node(ly.wq);
    ly.bq = clone_node(ly.bq);
    ly.wk = clone_node(ly.wk);
    ly.bk = clone_node(ly.bk);
    ly.wv = clone_node(ly.wv);
    ly.bv = clone_node(ly.bv);
    ly.wo = clone_node(ly.wo);
    ly.bo = clone_node(ly.bo);
    ly.ln2_g = clone_node(ly.ln2_g);
    ly.ln2_b = clone_node(ly.ln2_b);
    ly.w1 = clone_node(ly.w1);
    ly.b1 = clone_node(ly.b1);
    ly.w2 = clone_node(ly.w2);
    ly.b2 = clone_node(ly.b2);
  }
  lnf_g = clone_node(other.lnf_g);
  lnf_b = clone_node(other.lnf_b);
  speaker_table = clone_node(other.speaker_table);
  pseudo_w = clone_node(other.pseudo_w);
  pseudo_b = clone_node(other.pseudo_b);
  interp = other.interp;
  for (auto& il : interp) {
    il.w = clone_node(il.w);
    il.b = clone_node(il.b);
    il.bn_g = clone_node(il.bn_g);
    il.bn_b = clone_node(il.bn_b);
  }
  out_w = clone_node(other.out_w);
  out_b = clone_node(other.out_b);
  return *this;
}

std::vector<std::pair<std::string, ad::NodePtr>> EncoderModel::named_parameters() const {
  std::vector<std::pair<std::string, ad::NodePtr>> out;
  for (size_t i = 0; i < conv_w.size(); ++i) {
    std::string p = "conv" + std::to_string(i);
    out.emplace_back(p + ".weight", conv_w[i]);
    out.emplace_back(p + ".bias", conv_b[i]);
  }
  out.emplace_back("mask_emb", mask_emb);
  for (size_t i = 0; i < layers.size(); ++i) {
    std::string p = "layer" + std::to_string(i);
    const Layer& ly = layers[i];
    out.emplace_back(p + ".ln1.gamma", ly.ln1_g);
    out.emplace_back(p + ".ln1.beta", ly.ln1_b);
    out.emplace_back(p + ".attn.wq", ly.wq);
    out.emplace_back(p + ".attn.bq", ly.bq);
    out.emplace_back(p + ".attn.wk", ly.wk);
    out.emplace_back(p + ".attn.bk", ly.bk);
    out.emplace_back(p + ".attn.wv", ly.wv);
    out.emplace_back(p + ".attn.bv", ly.bv);
    out.emplace_back(p + ".attn.wo", ly.wo);
    out.emplace_back(p + ".attn.bo", ly.bo);
    out.emplace_back(p + ".ln2.gamma", ly.ln2_g);
    out.emplace_back(p + ".ln2.beta", ly.ln2_b);
    out.emplace_back(p + ".ffn.w1", ly.w1);
    out.emplace_back(p + ".ffn.b1", ly.b1);
    out.emplace_back(p + ".ffn.w2", ly.w2);
    out.emplace_back(p + ".ffn.b2", ly.b2);
  }
  if (config.n_layers > 0) {
    out.emplace_back("final_ln.gamma", lnf_g);
    out.emplace_back("final_ln.beta", lnf_b);
  }
  out.emplace_back("speaker_table", speaker_table);
  out.emplace_back("pseudo_head.weight", pseudo_w);
  out.emplace_back("pseudo_head.bias", pseudo_b);
  for (size_t i = 0; i < interp.size(); ++i) {
    std::string p = "interp" + std::to_string(i);
    out.emplace_back(p + ".weight", interp[i].w);
    out.emplace_back(p + ".bias", interp[i].b);
    out.emplace_back(p + ".bn_gamma", interp[i].bn_g);
    out.emplace_back(p + ".bn_beta", interp[i].bn_b);
  }
  out.emplace_back("head.weight", out_w);
  out.emplace_back("head.bias", out_b);
  return out;
}

int EncoderModel::speaker_ordinal(const std::string& id) const {
  auto it = speaker_lookup.find(id);
  if (it == speaker_lookup.end()) throw LookupError("unknown speaker id: " + id);
  return it->second;
}

EncoderModel init_model(const EncoderConfig& config, std::vector<std::string> speaker_ids,
                        std::uint64_t seed) {
  if (speaker_ids.empty()) throw ConfigError("init_model needs at least one speaker id");
  EncoderModel m;
  m.config = config;
  m.config.n_speakers = static_cast<int>(speaker_ids.size());
  m.config.validate();
  m.speaker_ids = std::move(speaker_ids);
  for (size_t i = 0; i < m.speaker_ids.size(); ++i) {
    if (!m.speaker_lookup.emplace(m.speaker_ids[i], static_cast<int>(i)).second) {
      throw ValidationError("duplicate speaker id: " + m.speaker_ids[i]);
    }
  }

  int c_in = 1;
  for (size_t i = 0; i < config.conv_channels.size(); ++i) {
    std::string p = "conv" + std::to_string(i);
    int rows = config.conv_kernels[i] * c_in;
    int c_out = config.conv_channels[i];
    m.conv_w.push_back(glorot_leaf(seed, p + ".weight", rows, c_out));
    m.conv_b.push_back(zeros_leaf(1, c_out));
    c_in = c_out;
  }
  int d = config.d_model;
  m.mask_emb = normal_leaf(seed, "mask_emb", 1, d, 0.1);
  for (int i = 0; i < config.n_layers; ++i) {
    std::string p = "layer" + std::to_string(i);
    EncoderModel::Layer ly;
    ly.ln1_g = ones_leaf(1, d);
    ly.ln1_b = zeros_leaf(1, d);
    ly.wq = glorot_leaf(seed, p + ".attn.wq", d, d);
    ly.bq = zeros_leaf(1, d);
    ly.wk = glorot_leaf(seed, p + ".attn.wk", d, d);
    ly.bk = zeros_leaf(1, d);
    ly.wv = glorot_leaf(seed, p + ".attn.wv", d, d);
    ly.bv = zeros_leaf(1, d);
    ly.wo = glorot_leaf(seed, p + ".attn.wo", d, d);
    ly.bo = zeros_leaf(1, d);
    ly.ln2_g = ones_leaf(1, d);
    ly.ln2_b = zeros_leaf(1, d);
    ly.w1 = glorot_leaf(seed, p + ".ffn.w1", d, config.ffn_hidden);
    ly.b1 = zeros_leaf(1, config.ffn_hidden);
    ly.w2 = glorot_leaf(seed, p + ".ffn.w2", config.ffn_hidden, d);
    ly.b2 = zeros_leaf(1, d);
    m.layers.push_back(std::move(ly));
  }
  if (config.n_layers > 0) {
    m.lnf_g = ones_leaf(1, d);
    m.lnf_b = zeros_leaf(1, d);
  }
  m.speaker_table = normal_leaf(seed, "speaker_table", m.config.n_speakers, d, 0.1);
  m.pseudo_w = glorot_leaf(seed, "pseudo_head.weight", d, config.k_pseudo);
  m.pseudo_b = zeros_leaf(1, config.k_pseudo);
  int in_dim = d;
  for (size_t i = 0; i < config.interpreter_hidden.size(); ++i) {
    std::string p = "interp" + std::to_string(i);
    int out_dim = config.interpreter_hidden[i];
    EncoderModel::InterpLayer il;
    il.w = glorot_leaf(seed, p + ".weight", in_dim, out_dim);
    il.b = zeros_leaf(1, out_dim);
    il.bn_g = ones_leaf(1, out_dim);
    il.bn_b = zeros_leaf(1, out_dim);
    il.bn_rmean = Matrix::Zero(1, out_dim);
    il.bn_rvar = Matrix::Ones(1, out_dim);
    m.interp.push_back(std::move(il));
    in_dim = out_dim;
  }
  m.out_w = glorot_leaf(seed, "head.weight", in_dim, 1);
  m.out_b = zeros_leaf(1, 1);
  return m;
}

Matrix sinusoidal_positions(int t, int d) {
  Matrix p(t, d);
  for (int pos = 0; pos < t; ++pos) {
    for (int i = 0; i < d; ++i) {
      double omega = std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(d));
      p(pos, i) = (i % 2 == 0) ? std::sin(pos * omega) : std::cos(pos * omega);
    }
  }
  return p;
}

Matrix conv_features(const EncoderModel& model, const Vector& samples) {
  return conv_forward_node(model, samples_node(model.config, samples))->value;
}

ad::NodePtr forward_features_node(const EncoderModel& model, const Vector& samples,
                                  std::optional<int> speaker,
                                  const std::vector<int>& mask_rows) {
  const EncoderConfig& cfg = model.config;
  if (speaker && (*speaker < 0 || *speaker >= cfg.n_speakers)) {
    throw LookupError("speaker ordinal " + std::to_string(*speaker) + " out of range");
  }
  NodePtr h = conv_forward_node(model, samples_node(cfg, samples));
  int t = static_cast<int>(h->value.rows());
  if (!mask_rows.empty()) {
    for (int r : mask_rows) {
      if (r < 0 || r >= t) throw ShapeError("mask row out of range");
    }
    h = ad::replace_rows(h, mask_rows, model.mask_emb);
  }
  h = ad::add(h, ad::constant(sinusoidal_positions(t, cfg.d_model)));

  NodePtr e;
  bool fuse = speaker.has_value() && cfg.fusion != Fusion::None;
  if (fuse) e = ad::slice_rows(model.speaker_table, *speaker, 1);

  if (fuse && cfg.fusion == Fusion::First) h = ad::add_row_broadcast(h, e);
  bool prefixed = fuse && cfg.fusion == Fusion::Prefix;
  if (prefixed) h = ad::concat_rows({e, h});

  for (const auto& ly : model.layers) h = transformer_layer(ly, h, cfg.n_heads);
  if (cfg.n_layers > 0) h = ad::layer_norm(h, model.lnf_g, model.lnf_b);

  if (prefixed) h = ad::slice_rows(h, 1, t);
  if (fuse && cfg.fusion == Fusion::Last) h = ad::add_row_broadcast(h, e);
  return h;
}

Matrix forward_features(const EncoderModel& model, const Vector& samples,
                        std::optional<int> speaker) {
  return forward_features_node(model, samples, speaker)->value;
}

ad::NodePtr pseudo_logits_node(const EncoderModel& model, const ad::NodePtr& features) {
  return ad::add_row_broadcast(ad::matmul(features, model.pseudo_w), model.pseudo_b);
}

Matrix pseudo_logits(const EncoderModel& model, const Matrix& features) {
  if (features.cols() != model.config.d_model) {
    throw ShapeError("pseudo_logits: features must have d_model columns");
  }
  return pseudo_logits_node(model, ad::constant(features))->value;
}

ad::NodePtr interpreter_forward(const EncoderModel& model, const ad::NodePtr& pooled,
                                bool training, RngStream* dropout_rng,
                                std::vector<std::pair<Vector, Vector>>* batch_stats) {
  NodePtr h = pooled;
  for (const auto& il : model.interp) {
    h = ad::add_row_broadcast(ad::matmul(h, il.w), il.b);
    h = ad::relu(h);
    if (training) {
      ad::BatchNormOut bn = ad::batch_norm_train(h, il.bn_g, il.bn_b, kBnEps);
      if (batch_stats) batch_stats->emplace_back(bn.batch_mean, bn.batch_var);
      h = bn.y;
    } else {
      Matrix inv_std = (il.bn_rvar.array() + kBnEps).rsqrt().matrix();
      h = ad::add_row_broadcast(h, ad::constant(-il.bn_rmean));
      h = ad::mul_row_broadcast(h, ad::constant(inv_std));
      h = ad::mul_row_broadcast(h, il.bn_g);
      h = ad::add_row_broadcast(h, il.bn_b);
    }
    if (training && dropout_rng && model.config.dropout > 0.0) {
      double p = model.config.dropout;
      Matrix mask(h->value.rows(), h->value.cols());
      for (Eigen::Index r = 0; r < mask.rows(); ++r) {
        for (Eigen::Index c = 0; c < mask.cols(); ++c) {
          mask(r, c) = dropout_rng->uniform() < p ? 0.0 : 1.0 / (1.0 - p);
        }
      }
      h = ad::mul(h, ad::constant(std::move(mask)));
    }
  }
  return ad::add_row_broadcast(ad::matmul(h, model.out_w), model.out_b);
}

double predict_emotion(const EncoderModel& model, const Vector& samples,
                       std::optional<int> speaker) {
  NodePtr pooled = ad::mean_rows(forward_features_node(model, samples, speaker));
  return interpreter_forward(model, pooled, false)->value(0, 0);
}

namespace {

std::vector<std::pair<std::string, const Matrix*>> checkpoint_tensors(const EncoderModel& m) {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (const auto& [name, node] : m.named_parameters()) out.emplace_back(name, &node->value);
  for (size_t i = 0; i < m.interp.size(); ++i) {
    std::string p = "interp" + std::to_string(i);
    out.emplace_back(p + ".bn_rmean", &m.interp[i].bn_rmean);
    out.emplace_back(p + ".bn_rvar", &m.interp[i].bn_rvar);
  }
  return out;
}

std::vector<std::pair<std::string, Matrix*>> checkpoint_tensors_mut(EncoderModel& m) {
  std::vector<std::pair<std::string, Matrix*>> out;
  for (const auto& [name, node] : m.named_parameters()) out.emplace_back(name, &node->value);
  for (size_t i = 0; i < m.interp.size(); ++i) {
    std::string p = "interp" + std::to_string(i);
    out.emplace_back(p + ".bn_rmean", &m.interp[i].bn_rmean);
    out.emplace_back(p + ".bn_rvar", &m.interp[i].bn_rvar);
  }
  return out;
}

}  // namespace

void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path) {
  auto tensors = checkpoint_tensors(model);
  nlohmann::json header;
  header["format"] = "pser-checkpoint";
  header["version"] = 1;
  header["config"] = model.config.to_json();
  header["speaker_ids"] = model.speaker_ids;
  std::vector<std::string> names;
  names.reserve(tensors.size());
  for (const auto& [name, ptr] : tensors) names.push_back(name);
  header["tensors"] = names;

  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open checkpoint for writing: " + path.string());
  out << header.dump() << "\n";
  for (const auto& [name, ptr] : tensors) write_tensor(out, to_blob(*ptr));
  if (!out) throw ParseError("failed writing checkpoint: " + path.string());
}

EncoderModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("checkpoint missing header line", 1);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad checkpoint header: ") + e.what(), 1);
  }
  if (header.value("format", "") != "pser-checkpoint") {
    throw ParseError("not a checkpoint file: " + path.string(), 1);
  }
  if (header.value("version", 0) != 1) {
    throw ParseError("unsupported checkpoint version", 1);
  }
  EncoderConfig cfg = EncoderConfig::from_json(header.at("config"));
  auto speaker_ids = header.at("speaker_ids").get<std::vector<std::string>>();
  EncoderModel model = init_model(cfg, std::move(speaker_ids), 0);

  auto names = header.at("tensors").get<std::vector<std::string>>();
  auto slots = checkpoint_tensors_mut(model);
  if (names.size() != slots.size()) {
    throw ParseError("checkpoint lists " + std::to_string(names.size()) + " tensors, expected " +
                     std::to_string(slots.size()));
  }
  for (size_t i = 0; i < slots.size(); ++i) {
    if (names[i] != slots[i].first) {
      throw ParseError("checkpoint tensor order mismatch at " + names[i] + ", expected " +
                       slots[i].first);
    }
    Matrix loaded = blob_to_matrix(read_tensor(in));
    Matrix& dst = *slots[i].second;
    if (loaded.rows() != dst.rows() || loaded.cols() != dst.cols()) {
      throw ShapeError("checkpoint tensor " + names[i] + " has wrong shape");
    }
    dst = std::move(loaded);
  }
  return model;
}

}  // namespace pser
