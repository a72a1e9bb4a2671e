// SPDX-License-Identifier: Apache-2.0
#include "mqccaf/model.hpp"

#include "mqccaf/rng.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mqccaf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and cache formats assume a little-endian host");

std::string to_string(ModelVariant v) {
  switch (v) {
  case ModelVariant::CNN:
    return "CNN";
  case ModelVariant::QCNN:
    return "QCNN";
  case ModelVariant::MQCNN:
    return "MQCNN";
  case ModelVariant::MQCNN_CSAFF:
    return "MQCNN+CSAFF";
  }
  return "?";
}

ModelVariant parse_variant(const std::string &s) {
  std::string u;
  for (char c : s)
    u += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (u == "CNN")
    return ModelVariant::CNN;
  if (u == "QCNN")
    return ModelVariant::QCNN;
  if (u == "MQCNN")
    return ModelVariant::MQCNN;
  if (u == "MQCNN+CSAFF" || u == "MQCNN_CSAFF" || u == "MQCCAF")
    return ModelVariant::MQCNN_CSAFF;
  throw std::invalid_argument("unknown model variant '" + s + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string &m) { throw ShapeError("model config: " + m); };
  if (wide_channels == 0 || wide_channels % 4 != 0)
    fail("wide_channels must be a positive multiple of 4");
  if (scales.empty())
    fail("scales must contain at least one kernel size");
  for (auto k : scales)
    if (k == 0)
      fail("scale kernel sizes must be positive");
  if (wide_kernel == 0 || wide_stride == 0)
    fail("wide_kernel and wide_stride must be positive");
  if (input_length < wide_kernel)
    fail("input_length " + std::to_string(input_length) +
         " is shorter than wide_kernel " + std::to_string(wide_kernel));
  if (qcnn_channels == 0 || blocks_per_branch == 0 || bigru_hidden == 0 ||
      attention_dim == 0 || pool_window == 0)
    fail("channel, block, hidden and attention sizes must be positive");
  if (num_classes < 2)
    fail("num_classes must be >= 2");
  std::size_t len = wide_output_length();
  for (std::size_t b = 0; b < blocks_per_branch; ++b) {
    if (len < pool_window)
      fail("input_length too short for " + std::to_string(blocks_per_branch) +
           " pooled blocks");
    len = (len - pool_window) / pool_window + 1;
  }
}

std::vector<std::size_t> ModelConfig::branch_scales() const {
  if (variant == ModelVariant::CNN || variant == ModelVariant::QCNN)
    return {scales.front()};
  return scales;
}

std::size_t ModelConfig::wide_output_length() const {
  return ops::conv_output_length(input_length, wide_kernel, wide_stride,
                                 ops::Padding::Same);
}

std::size_t ModelConfig::sequence_length() const {
  std::size_t len = wide_output_length();
  for (std::size_t b = 0; b < blocks_per_branch; ++b)
    len = (len - pool_window) / pool_window + 1;
  return len;
}

std::size_t ModelConfig::fused_channels() const {
  return 4 * qcnn_channels * branch_scales().size();
}

namespace {

std::string join_sizes(const std::vector<std::size_t> &v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i)
    s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> parse_sizes(const std::string &s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty())
      out.push_back(std::stoul(item));
  return out;
}

} // namespace

std::map<std::string, std::string> ModelConfig::to_kv() const {
  return {{"input_length", std::to_string(input_length)},
          {"wide_kernel", std::to_string(wide_kernel)},
          {"wide_channels", std::to_string(wide_channels)},
          {"wide_stride", std::to_string(wide_stride)},
          {"scales", join_sizes(scales)},
          {"qcnn_channels", std::to_string(qcnn_channels)},
          {"blocks_per_branch", std::to_string(blocks_per_branch)},
          {"bigru_hidden", std::to_string(bigru_hidden)},
          {"attention_dim", std::to_string(attention_dim)},
          {"num_classes", std::to_string(num_classes)},
          {"pool_window", std::to_string(pool_window)},
          {"variant", to_string(variant)}};
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string> &kv) {
  ModelConfig c;
  auto size = [&](const char *key, std::size_t &dst) {
    if (auto it = kv.find(key); it != kv.end())
      dst = std::stoul(it->second);
  };
  size("input_length", c.input_length);
  size("wide_kernel", c.wide_kernel);
  size("wide_channels", c.wide_channels);
  size("wide_stride", c.wide_stride);
  size("qcnn_channels", c.qcnn_channels);
  size("blocks_per_branch", c.blocks_per_branch);
  size("bigru_hidden", c.bigru_hidden);
  size("attention_dim", c.attention_dim);
  size("num_classes", c.num_classes);
  size("pool_window", c.pool_window);
  if (auto it = kv.find("scales"); it != kv.end())
    c.scales = parse_sizes(it->second);
  if (auto it = kv.find("variant"); it != kv.end())
    c.variant = parse_variant(it->second);
  return c;
}

Model::Model(ModelConfig config, std::uint64_t seed)
    : config_((config.validate(), std::move(config))),
      wide_(1, config_.wide_channels, config_.wide_kernel,
            config_.wide_stride),
      bigru_(config_.fused_channels(), config_.bigru_hidden),
      head_(2 * config_.bigru_hidden, config_.num_classes) {
  wide_.init(derive_seed(seed, "wide"));
  const bool real = config_.variant == ModelVariant::CNN;
  const std::size_t q = config_.qcnn_channels;
  const auto scales = config_.branch_scales();
  for (std::size_t s = 0; s < scales.size(); ++s) {
    Branch br;
    for (std::size_t b = 0; b < config_.blocks_per_branch; ++b) {
      const std::string path =
          "branch" + std::to_string(s) + ".block" + std::to_string(b);
      if (real) {
        const std::size_t c_in = b == 0 ? config_.wide_channels : 4 * q;
        br.conv.emplace_back(c_in, 4 * q, scales[s]);
        br.conv.back().init(derive_seed(seed, path));
        br.bn.emplace_back(4 * q);
      } else {
        const std::size_t q_in = b == 0 ? config_.wide_channels / 4 : q;
        br.qconv.emplace_back(q_in, q, scales[s]);
        quat::quaternion_init(br.qconv.back(), derive_seed(seed, path));
        br.qbn.emplace_back(q);
      }
    }
    branches_.push_back(std::move(br));
  }
  if (config_.variant == ModelVariant::MQCNN_CSAFF) {
    csaff_ = std::make_unique<CsaffLayer>(config_.fused_channels(),
                                          config_.attention_dim);
    csaff_->init(derive_seed(seed, "csaff"));
  }
  bigru_.init(derive_seed(seed, "bigru"));
  head_.init(derive_seed(seed, "head"));
}

Tensor Model::wide_conv(const Tensor &input) const {
  Tensor x = input;
  if (x.rank() == 2)
    x = ops::reshape(x, {x.dim(0), 1, x.dim(1)});
  if (x.rank() != 3 || x.dim(1) != 1)
    throw ShapeError("model: input must be [B, T] or [B, 1, T], got " +
                     shape_str(input.shape()));
  if (x.dim(2) != config_.input_length)
    throw ShapeError("model: window length " + std::to_string(x.dim(2)) +
                     " != configured input_length " +
                     std::to_string(config_.input_length));
  return ops::relu(wide_.forward(x, ops::Padding::Same));
}

std::vector<Tensor> Model::multi_scale_extract(const Tensor &fw, Mode mode) {
  std::vector<Tensor> out;
  const std::size_t pool = config_.pool_window;
  for (auto &br : branches_) {
    Tensor h = fw;
    if (!br.conv.empty()) {
      for (std::size_t b = 0; b < br.conv.size(); ++b) {
        h = br.bn[b].forward(br.conv[b].forward(h, ops::Padding::Same), mode);
        h = ops::relu(ops::maxpool1d(h, pool, pool));
      }
    } else {
      for (std::size_t b = 0; b < br.qconv.size(); ++b)
        h = quat::qcnn_block(h, br.qconv[b], br.qbn[b], mode, pool);
    }
    out.push_back(h);
  }
  return out;
}

Tensor Model::fuse(const std::vector<Tensor> &branches,
                   Tensor *attention) const {
  if (csaff_)
    return csaff_->forward(branches, attention);
  return concat_fusion(branches);
}

Tensor Model::bigru(const Tensor &fused) const { return bigru_.forward(fused); }

Tensor Model::classify(const Tensor &pooled) const {
  return ops::softmax(head_.forward(pooled), 1);
}

Tensor Model::forward(const Tensor &input, Mode mode) {
  Tensor fw = wide_conv(input);
  Tensor fused = fuse(multi_scale_extract(fw, mode));
  return classify(gap(bigru(fused)));
}

std::vector<std::size_t> Model::predict(const Tensor &input) {
  NoGradGuard guard;
  Tensor probs = forward(input, Mode::Eval);
  const std::size_t batch = probs.dim(0), c = probs.dim(1);
  std::vector<std::size_t> out(batch);
  auto p = probs.data();
  for (std::size_t b = 0; b < batch; ++b) {
    auto row = p.subspan(b * c, c);
    out[b] = static_cast<std::size_t>(
        std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Parameters Model::parameters() const {
  Parameters p;
  Buffers unused;
  wide_.collect("wide", p);
  for (std::size_t s = 0; s < branches_.size(); ++s) {
    const auto &br = branches_[s];
    const std::size_t blocks =
        br.conv.empty() ? br.qconv.size() : br.conv.size();
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::string path =
          "branch" + std::to_string(s) + ".block" + std::to_string(b);
      if (!br.conv.empty()) {
        br.conv[b].collect(path + ".conv", p);
        br.bn[b].collect(path + ".bn", p, unused);
      } else {
        br.qconv[b].collect(path + ".qconv", p);
        br.qbn[b].collect(path + ".qbn", p, unused);
      }
    }
  }
  if (csaff_)
    csaff_->collect("csaff", p);
  bigru_.collect("bigru", p);
  head_.collect("head", p);
  return p;
}

Buffers Model::buffers() const {
  Parameters unused;
  Buffers buf;
  for (std::size_t s = 0; s < branches_.size(); ++s) {
    const auto &br = branches_[s];
    const std::size_t blocks = br.conv.empty() ? br.qbn.size() : br.bn.size();
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::string path =
          "branch" + std::to_string(s) + ".block" + std::to_string(b);
      if (!br.conv.empty())
        br.bn[b].collect(path + ".bn", unused, buf);
      else
        br.qbn[b].collect(path + ".qbn", unused, buf);
    }
  }
  return buf;
}

std::size_t Model::count_params() const { return count_elements(parameters()); }

namespace {

void copy_into(Tensor &dst, std::span<const double> src,
               const std::string &path) {
  if (dst.size() != src.size())
    throw ShapeError("state: size mismatch for '" + path + "'");
  std::copy(src.begin(), src.end(), dst.mutable_data().begin());
}

} // namespace

void Model::load_state(const Parameters &params, const Buffers &buffers) {
  auto mine = parameters();
  auto bufs = this->buffers();
  if (mine.size() != params.size() || bufs.size() != buffers.size())
    throw ShapeError("state: entry count mismatch");
  for (auto &[path, t] : mine) {
    auto it = params.find(path);
    if (it == params.end())
      throw ShapeError("state: missing parameter '" + path + "'");
    copy_into(t, it->second.data(), path);
  }
  for (auto &[path, t] : bufs) {
    auto it = buffers.find(path);
    if (it == buffers.end())
      throw ShapeError("state: missing buffer '" + path + "'");
    copy_into(t, it->second.data(), path);
  }
}

ModelState capture_state(const Model &model) {
  ModelState s;
  for (const auto &[path, t] : model.parameters())
    s.values[path].assign(t.data().begin(), t.data().end());
  for (const auto &[path, t] : model.buffers())
    s.values["buffer:" + path].assign(t.data().begin(), t.data().end());
  return s;
}

void restore_state(Model &model, const ModelState &state) {
  for (auto &[path, t] : model.parameters())
    copy_into(t, state.values.at(path), path);
  for (auto &[path, t] : model.buffers())
    copy_into(t, state.values.at("buffer:" + path), path);
}

namespace {

constexpr char kMagic[8] = {'M', 'Q', 'C', 'C', 'A', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T> void put(std::ostream &os, T v) {
  os.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <class T> T get(std::istream &is) {
  T v{};
  is.read(reinterpret_cast<char *>(&v), sizeof(T));
  if (!is)
    throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void put_string(std::ostream &os, const std::string &s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream &is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is)
    throw std::runtime_error("checkpoint: truncated string");
  return s;
}

void put_record(std::ostream &os, std::uint8_t kind, const std::string &path,
                const Tensor &t) {
  put<std::uint8_t>(os, kind);
  put_string(os, path);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape())
    put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char *>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
}

} // namespace

void save_checkpoint(const Model &model, const std::filesystem::path &path) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw std::runtime_error("checkpoint: cannot write " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  std::string text;
  for (const auto &[k, v] : model.config().to_kv())
    text += k + "=" + v + "\n";
  put_string(os, text);
  const auto params = model.parameters();
  const auto bufs = model.buffers();
  put<std::uint64_t>(os, params.size() + bufs.size());
  for (const auto &[p, t] : params)
    put_record(os, 0, p, t);
  for (const auto &[p, t] : bufs)
    put_record(os, 1, p, t);
  if (!os)
    throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  if (const auto v = get<std::uint32_t>(is); v != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(v));
  std::map<std::string, std::string> kv;
  {
    std::istringstream text(get_string(is));
    std::string line;
    while (std::getline(text, line)) {
      const auto eq = line.find('=');
      if (eq != std::string::npos)
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  Model model(ModelConfig::from_kv(kv), 0);
  Parameters params;
  Buffers bufs;
  const auto count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto kind = get<std::uint8_t>(is);
    const std::string p = get_string(is);
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto &d : shape)
      d = get<std::uint64_t>(is);
    Buffer values(numel(shape));
    is.read(reinterpret_cast<char *>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is)
      throw std::runtime_error("checkpoint: truncated record '" + p + "'");
    (kind == 0 ? params : bufs)[p] = Tensor::from(shape, std::move(values));
  }
  model.load_state(params, bufs);
  return model;
}

} // namespace mqccaf
