#include "metatuner/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include "metatuner/errors.hpp"

namespace metatuner {

namespace {

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  void u64(std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os_.write(b, 8);
  }
  void u32(std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os_.write(b, 4);
  }
  void u8(std::uint8_t v) { os_.put(static_cast<char>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void header(const std::string& kind) {
    os_.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    u32(kCheckpointVersion);
    str(kind);
  }
  void arch(const ArchConfig& a) {
    for (int v : {a.vocab_size, a.context_len, a.d_model, a.n_layers, a.n_heads, a.d_ff}) {
      u64(static_cast<std::uint64_t>(v));
    }
  }
  void tensors(const std::vector<NamedTensor>& ts) {
    u64(ts.size());
    for (const auto& nt : ts) {
      str(nt.name);
      const auto& v = nt.tensor.value();
      u64(static_cast<std::uint64_t>(v.rows()));
      u64(static_cast<std::uint64_t>(v.cols()));
      for (Eigen::Index i = 0; i < v.size(); ++i) f64(v.data()[i]);
    }
  }
  void check() {
    if (!os_) throw std::runtime_error("checkpoint: write failed");
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  std::uint64_t u64() {
    unsigned char b[8];
    read(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    read(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint8_t u8() {
    unsigned char b;
    read(&b, 1);
    return b;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  int small_int() {
    const auto v = u64();
    if (v > (1u << 30)) throw FormatError("checkpoint: implausible size field " + std::to_string(v));
    return static_cast<int>(v);
  }
  std::string str() {
    const auto n = u64();
    if (n > (1u << 20)) throw FormatError("checkpoint: implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  std::string header() {
    char magic[8];
    read(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw FormatError("checkpoint: bad magic");
    const auto version = u32();
    if (version != kCheckpointVersion) {
      throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
    }
    return str();
  }
  ArchConfig arch() {
    ArchConfig a;
    a.vocab_size = small_int();
    a.context_len = small_int();
    a.d_model = small_int();
    a.n_layers = small_int();
    a.n_heads = small_int();
    a.d_ff = small_int();
    try {
      a.validate();
    } catch (const ValueError& e) {
      throw FormatError(std::string("checkpoint: invalid architecture: ") + e.what());
    }
    return a;
  }
  std::map<std::string, Matrixd> tensors() {
    std::map<std::string, Matrixd> out;
    const auto count = u64();
    for (std::uint64_t i = 0; i < count; ++i) {
      auto name = str();
      const int rows = small_int(), cols = small_int();
      Matrixd m(rows, cols);
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = f64();
      if (!out.emplace(std::move(name), std::move(m)).second) throw FormatError("checkpoint: duplicate tensor name");
    }
    return out;
  }

 private:
  void read(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw FormatError("checkpoint: truncated file");
  }
  std::istream& is_;
};

// Copies stored values into `targets`, demanding exact name coverage and shapes.
void fill(const std::vector<NamedTensor>& targets, std::map<std::string, Matrixd>& stored, const std::string& where) {
  for (const auto& nt : targets) {
    auto it = stored.find(nt.name);
    if (it == stored.end()) throw FormatError("checkpoint[" + where + "]: missing tensor " + nt.name);
    if (it->second.rows() != nt.tensor.rows() || it->second.cols() != nt.tensor.cols()) {
      throw FormatError("checkpoint[" + where + "]: tensor " + nt.name + " has shape (" +
                        std::to_string(it->second.rows()) + "x" + std::to_string(it->second.cols()) +
                        ") but the configuration requires " + nt.tensor.shape_string());
    }
    nt.tensor.mutable_value() = std::move(it->second);
    stored.erase(it);
  }
}

void expect_consumed(const std::map<std::string, Matrixd>& stored, const std::string& where) {
  if (!stored.empty()) throw FormatError("checkpoint[" + where + "]: unexpected tensor " + stored.begin()->first);
}

std::vector<NamedTensor> subset(const MicroLMWeights& w, const std::vector<Tensord>& keep) {
  std::vector<NamedTensor> out;
  for (const auto& nt : w.named_parameters()) {
    for (const auto& k : keep) {
      if (k.id() == nt.tensor.id()) {
        out.push_back(nt);
        break;
      }
    }
  }
  return out;
}

void write_pipeline_config(Writer& w, const PipelineConfig& c) {
  w.u64(static_cast<std::uint64_t>(c.split_depth));
  w.u64(static_cast<std::uint64_t>(c.max_prompt_len));
  w.u64(static_cast<std::uint64_t>(c.max_answer_len));
  w.u8(c.snapshot_includes_shared ? 1 : 0);
  w.u8(c.independent_param_encoder ? 1 : 0);
  w.u64(c.initial_prompt.size());
  for (int t : c.initial_prompt) w.u64(static_cast<std::uint64_t>(t));
}

PipelineConfig read_pipeline_config(Reader& r) {
  PipelineConfig c;
  c.split_depth = r.small_int();
  c.max_prompt_len = r.small_int();
  c.max_answer_len = r.small_int();
  c.snapshot_includes_shared = r.u8() != 0;
  c.independent_param_encoder = r.u8() != 0;
  const int n = r.small_int();
  c.initial_prompt.clear();
  for (int i = 0; i < n; ++i) {
    const int t = r.small_int();
    if (t >= vocab::kSize) throw FormatError("checkpoint: initial prompt token out of vocabulary");
    c.initial_prompt.push_back(t);
  }
  return c;
}

void write_lora_config(Writer& w, const LoraConfig& c) {
  w.u64(static_cast<std::uint64_t>(c.rank));
  w.f64(c.lambda);
  w.u64(static_cast<std::uint64_t>(c.d_model));
  w.u64(static_cast<std::uint64_t>(c.n_layers));
  w.u8(c.shared_hypernetwork ? 1 : 0);
}

LoraConfig read_lora_config(Reader& r) {
  LoraConfig c;
  c.rank = r.small_int();
  c.lambda = r.f64();
  c.d_model = r.small_int();
  c.n_layers = r.small_int();
  c.shared_hypernetwork = r.u8() != 0;
  try {
    c.validate();
  } catch (const ValueError& e) {
    throw FormatError(std::string("checkpoint: invalid LoRA config: ") + e.what());
  }
  return c;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw FormatError("cannot read " + p.string());
  return f;
}

MicroLMWeights read_microlm_body(Reader& r, const std::string& where) {
  const ArchConfig arch = r.arch();
  MicroLMWeights w = MicroLMWeights::init(arch, 0);
  auto stored = r.tensors();
  fill(w.named_parameters(), stored, where);
  expect_consumed(stored, where);
  return w;
}

}  // namespace

void write_microlm(std::ostream& os, const MicroLMWeights& w) {
  Writer out(os);
  out.header("microlm");
  out.arch(w.arch);
  out.tensors(w.named_parameters());
  out.check();
}

MicroLMWeights read_microlm(std::istream& is) {
  Reader in(is);
  const auto kind = in.header();
  if (kind != "microlm") throw FormatError("checkpoint: expected a microlm checkpoint, found '" + kind + "'");
  return read_microlm_body(in, "microlm");
}

void write_metatuner(std::ostream& os, const MetaTunerModel& model) {
  Writer out(os);
  out.header("metatuner");
  write_pipeline_config(out, model.config);
  write_lora_config(out, model.lora);
  out.arch(model.generator.arch);
  out.arch(model.actor.arch);
  const bool enc = model.param_encoder.has_value();
  out.u64(enc ? 6 : 5);
  out.str("phi_s");
  out.tensors(subset(model.generator, model.shared_parameters()));
  out.str("phi_p");
  out.tensors(subset(model.generator, model.prompt_private_parameters()));
  out.str("snapshot");
  out.tensors(model.snapshot.named_parameters());
  out.str("phi_q");
  out.tensors(model.phi_q.named_parameters());
  out.str("actor");
  out.tensors(model.actor.named_parameters());
  if (enc) {
    out.str("param_encoder");
    out.tensors(model.param_encoder->named_parameters());
  }
  out.check();
}

MetaTunerModel read_metatuner(std::istream& is) {
  Reader in(is);
  const auto kind = in.header();
  if (kind != "metatuner") throw FormatError("checkpoint: expected a metatuner checkpoint, found '" + kind + "'");
  PipelineConfig pcfg = read_pipeline_config(in);
  LoraConfig lcfg = read_lora_config(in);
  const ArchConfig garch = in.arch();
  const ArchConfig aarch = in.arch();
  if (lcfg.d_model != aarch.d_model || lcfg.n_layers != aarch.n_layers) {
    throw FormatError("checkpoint: LoRA config does not match actor architecture");
  }
  if (pcfg.split_depth < 0 || pcfg.split_depth > garch.n_layers) throw FormatError("checkpoint: bad split depth");

  MetaTunerModel m;
  m.config = pcfg;
  m.lora = lcfg;
  m.generator = MicroLMWeights::init(garch, 0);
  m.snapshot = m.generator.clone(false);
  m.actor = MicroLMWeights::init(aarch, 0).clone(false);
  m.phi_q = init_hypernetwork(lcfg, garch.context_len, garch.d_model, 0);
  if (pcfg.independent_param_encoder) m.param_encoder = MicroLMWeights::init(garch, 0);

  const int sections = in.small_int();
  std::map<std::string, std::map<std::string, Matrixd>> stored;
  for (int i = 0; i < sections; ++i) {
    auto name = in.str();
    stored[name] = in.tensors();
  }
  auto section = [&](const std::string& name) -> std::map<std::string, Matrixd>& {
    auto it = stored.find(name);
    if (it == stored.end()) throw FormatError("checkpoint: missing section " + name);
    return it->second;
  };
  fill(subset(m.generator, m.shared_parameters()), section("phi_s"), "phi_s");
  fill(subset(m.generator, m.prompt_private_parameters()), section("phi_p"), "phi_p");
  fill(m.snapshot.named_parameters(), section("snapshot"), "snapshot");
  fill(m.phi_q.named_parameters(), section("phi_q"), "phi_q");
  fill(m.actor.named_parameters(), section("actor"), "actor");
  if (m.param_encoder) fill(m.param_encoder->named_parameters(), section("param_encoder"), "param_encoder");
  for (const auto& [name, rest] : stored) expect_consumed(rest, name);
  const std::size_t expected_sections = m.param_encoder ? 6 : 5;
  if (stored.size() != expected_sections) throw FormatError("checkpoint: unexpected section count");
  m.validate();
  return m;
}

void write_lora_factors(std::ostream& os, const LoraFactors& factors) {
  Writer out(os);
  out.header("lora");
  out.u64(factors.layers.size());
  std::vector<NamedTensor> ts;
  for (std::size_t i = 0; i < factors.layers.size(); ++i) {
    ts.push_back({"layers." + std::to_string(i) + ".theta_b", factors.layers[i].theta_b});
    ts.push_back({"layers." + std::to_string(i) + ".theta_a", factors.layers[i].theta_a});
  }
  out.tensors(ts);
  out.check();
}

LoraFactors read_lora_factors(std::istream& is) {
  Reader in(is);
  const auto kind = in.header();
  if (kind != "lora") throw FormatError("checkpoint: expected lora factors, found '" + kind + "'");
  const int layers = in.small_int();
  auto stored = in.tensors();
  LoraFactors f;
  for (int i = 0; i < layers; ++i) {
    auto take = [&](const std::string& name) {
      auto it = stored.find(name);
      if (it == stored.end()) throw FormatError("checkpoint[lora]: missing " + name);
      Tensord t = Tensord::constant(std::move(it->second));
      stored.erase(it);
      return t;
    };
    LayerLora l{take("layers." + std::to_string(i) + ".theta_b"), take("layers." + std::to_string(i) + ".theta_a")};
    if (l.theta_b.cols() != l.theta_a.rows() || l.theta_b.rows() != l.theta_a.cols()) {
      throw FormatError("checkpoint[lora]: layer " + std::to_string(i) + " factors have inconsistent shapes " +
                        l.theta_b.shape_string() + " / " + l.theta_a.shape_string());
    }
    f.layers.push_back(std::move(l));
  }
  expect_consumed(stored, "lora");
  return f;
}

void save_microlm(const std::filesystem::path& path, const MicroLMWeights& w) {
  auto f = open_out(path);
  write_microlm(f, w);
}

MicroLMWeights load_microlm(const std::filesystem::path& path) {
  auto f = open_in(path);
  return read_microlm(f);
}

void save_metatuner(const std::filesystem::path& path, const MetaTunerModel& model) {
  auto f = open_out(path);
  write_metatuner(f, model);
}

MetaTunerModel load_metatuner(const std::filesystem::path& path) {
  auto f = open_in(path);
  return read_metatuner(f);
}

std::string checkpoint_kind(const std::filesystem::path& path) {
  auto f = open_in(path);
  Reader in(f);
  return in.header();
}

}  // namespace metatuner
