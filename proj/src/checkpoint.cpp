#include <array>

#include "binary_io.hpp"
#include "uisearch/encoder.hpp"

namespace uisearch::nn {

namespace {

constexpr std::string_view kMagic = "UISCKPT\x01";
constexpr std::uint32_t kVersion = 1;

void write_tensors(io::Writer& w, const EncoderParams& p) {
  std::uint32_t count = 0;
  for_each_tensor(p, [&](const char*, const Mat&) { ++count; });
  w.put<std::uint32_t>(count);
  for_each_tensor(p, [&](const char* name, const Mat& m) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) w.put<float>(static_cast<float>(m(i, j)));
  });
}

// Reads into tensors already shaped by init_model; shapes must agree.
void read_tensors(io::Reader& r, EncoderParams& p) {
  std::uint32_t expected = 0;
  for_each_tensor(p, [&](const char*, const Mat&) { ++expected; });
  if (r.get<std::uint32_t>() != expected) throw CheckpointError("checkpoint: tensor count mismatch");
  for_each_tensor(p, [&](const char* name, Mat& m) {
    if (r.get_string() != name) throw CheckpointError(std::string("checkpoint: expected tensor ") + name);
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (rows != m.rows() || cols != m.cols())
      throw CheckpointError(std::string("checkpoint: shape mismatch for ") + name);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<double>(r.get<float>());
  });
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const EncoderModel& model,
                     const OptimizerState* optimizer) {
  io::Writer w;
  w.put_bytes(kMagic);
  w.put<std::uint32_t>(kVersion);
  const auto& c = model.config;
  for (int v : {c.in_dim, c.hidden, c.heads, c.gcn_out, c.proj_in, c.proj_hidden, c.proj_out})
    w.put<std::int32_t>(v);
  w.put<double>(c.dropout);
  w.put<std::int32_t>(c.num_intents);
  w.put<std::uint64_t>(c.seed);
  for (auto t : model.vocab.slots()) w.put<std::uint8_t>(static_cast<std::uint8_t>(t));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.intent_labels.size()));
  for (const auto& l : model.intent_labels) w.put_string(l);
  write_tensors(w, model.params);
  w.put<std::uint8_t>(optimizer ? 1 : 0);
  if (optimizer) {
    w.put<std::uint64_t>(optimizer->step);
    w.put<std::uint32_t>(optimizer->epoch);
    write_tensors(w, optimizer->m);
    write_tensors(w, optimizer->v);
  }
  w.finish_to_file(path);
}

EncoderModel load_checkpoint(const std::filesystem::path& path,
                             std::optional<OptimizerState>* optimizer) {
  std::string file;
  try {
    file = io::read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  try {
    io::Reader r(io::checked_payload(file));
    if (r.get_bytes(kMagic.size()) != kMagic) throw CheckpointError("checkpoint: bad magic");
    if (const auto v = r.get<std::uint32_t>(); v != kVersion)
      throw CheckpointError("checkpoint: unsupported version " + std::to_string(v));
    EncoderConfig c;
    for (int* f : {&c.in_dim, &c.hidden, &c.heads, &c.gcn_out, &c.proj_in, &c.proj_hidden, &c.proj_out})
      *f = r.get<std::int32_t>();
    c.dropout = r.get<double>();
    c.num_intents = r.get<std::int32_t>();
    c.seed = r.get<std::uint64_t>();
    std::array<graph::ElementType, graph::kOneHotSlots> slots{};
    for (auto& s : slots) {
      const auto code = r.get<std::uint8_t>();
      if (code >= graph::kNumElementTypes) throw CheckpointError("checkpoint: bad element type code");
      s = static_cast<graph::ElementType>(code);
    }
    std::vector<std::string> labels(r.get<std::uint32_t>());
    for (auto& l : labels) l = r.get_string();

    EncoderModel model = init_model(c, graph::TypeVocabulary(slots), labels);
    read_tensors(r, model.params);
    const bool has_opt = r.get<std::uint8_t>() != 0;
    if (has_opt) {
      OptimizerState st;
      st.step = r.get<std::uint64_t>();
      st.epoch = r.get<std::uint32_t>();
      st.m = model.params.zeros_like();
      st.v = model.params.zeros_like();
      read_tensors(r, st.m);
      read_tensors(r, st.v);
      if (optimizer) *optimizer = std::move(st);
    } else if (optimizer) {
      optimizer->reset();
    }
    if (!r.at_end()) throw CheckpointError("checkpoint: trailing bytes");
    return model;
  } catch (const io::FormatError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace uisearch::nn
