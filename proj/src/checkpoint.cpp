// Binary optimizer checkpoint; see docs/checkpoint_format.md.

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "gradfe/neural_optimizer.hpp"

namespace gradfe {

namespace {

constexpr char kMagic[8] = {'G', 'R', 'D', 'F', 'E', 'O', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw std::runtime_error("checkpoint is truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void put_vector(std::ostream& out, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) put<double>(out, v[i]);
}

void get_vector(std::istream& in, Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = get<double>(in);
}

}  // namespace

void FeatureOptimizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape_.embed));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape_.hidden));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(vocab_.size() - Vocabulary::kReserved));
  for (int id = Vocabulary::kReserved; id < vocab_.size(); ++id) {
    const auto& tok = vocab_.token(id);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tok.size()));
    out.write(tok.data(), static_cast<std::streamsize>(tok.size()));
  }
  put<double>(out, lambda_);
  put<std::int32_t>(out, warmup_target_);
  put<std::int32_t>(out, warmup_done_);
  put<double>(out, warmup_rec_);
  put<double>(out, warmup_pp_);
  put<std::int32_t>(out, epochs_done_);
  put<std::uint64_t>(out, adam_t_);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(params_.size()));
  put_vector(out, params_);
  put_vector(out, adam_m_);
  put_vector(out, adam_v_);
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

FeatureOptimizer FeatureOptimizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("'" + path.string() + "' is not an optimizer checkpoint");
  if (const auto v = get<std::uint32_t>(in); v != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(v));
  OptimizerShape shape;
  shape.embed = static_cast<int>(get<std::uint32_t>(in));
  shape.hidden = static_cast<int>(get<std::uint32_t>(in));
  const auto count = get<std::uint32_t>(in);
  std::vector<std::string> tokens(count);
  for (auto& tok : tokens) {
    tok.resize(get<std::uint32_t>(in));
    if (!in.read(tok.data(), static_cast<std::streamsize>(tok.size()))) throw std::runtime_error("checkpoint is truncated");
  }
  FeatureOptimizer opt(Vocabulary(std::move(tokens)), shape);
  opt.lambda_ = get<double>(in);
  opt.warmup_target_ = get<std::int32_t>(in);
  opt.warmup_done_ = get<std::int32_t>(in);
  opt.warmup_rec_ = get<double>(in);
  opt.warmup_pp_ = get<double>(in);
  opt.epochs_done_ = get<std::int32_t>(in);
  opt.adam_t_ = get<std::uint64_t>(in);
  if (get<std::uint64_t>(in) != static_cast<std::uint64_t>(opt.params_.size()))
    throw std::runtime_error("checkpoint parameter count does not match its shape");
  get_vector(in, opt.params_);
  get_vector(in, opt.adam_m_);
  get_vector(in, opt.adam_v_);
  return opt;
}

}  // namespace gradfe
