#include "ekp/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "ekp/array_io.hpp"
#include "ekp/errors.hpp"

namespace ekp::net {

namespace fs = std::filesystem;

void save_checkpoint(const PrunableNetwork& net, const fs::path& dir) {
  fs::create_directories(dir / "weights");
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw IoError("cannot write manifest in " + dir.string());

  const auto& in = net.input();
  m << "format ekp-checkpoint 1\n";
  m << "input channels=" << in.channels << " height=" << in.height
    << " width=" << in.width << " classes=" << in.num_classes << "\n";
  m << "layers " << net.layers().size() << "\n";
  for (const auto& d : net.layers()) {
    m << "layer kind=" << to_string(d.kind) << " name=" << d.name << " inputs=";
    for (std::size_t i = 0; i < d.inputs.size(); ++i)
      m << (i ? "," : "") << d.inputs[i];
    if (d.inputs.empty()) m << "-";
    if (d.kind == LayerKind::Conv)
      m << " out=" << d.out_channels << " kh=" << d.kh << " kw=" << d.kw
        << " stride=" << d.stride << " pad=" << d.pad << " group=" << d.coupling_group;
    if (d.kind == LayerKind::Dense) m << " features=" << d.out_features;
    m << "\n";
  }
  m << "units " << net.units().size() << "\n";
  for (const auto& u : net.units()) {
    m << "mask " << u.id << " ";
    const auto& mask = net.unit_mask(u.id);
    for (auto b : mask) m << (b ? '1' : '0');
    m << "\n";
  }
  if (!m) throw IoError("short manifest write in " + dir.string());

  for (const auto& [name, tensor] : net.weights())
    io::write_npy(dir / "weights" / (name + ".npy"), tensor);
}

namespace {

std::map<std::string, std::string> parse_kv(std::istringstream& ss) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw IoError("bad manifest token: " + tok);
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

}  // namespace

PrunableNetwork load_checkpoint(const fs::path& dir) {
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw IoError("cannot read manifest in " + dir.string());
  std::string line;
  if (!std::getline(m, line) || line != "format ekp-checkpoint 1")
    throw IoError("unrecognized checkpoint format in " + dir.string());

  InputSpec in;
  std::vector<LayerDesc> descs;
  std::vector<std::pair<int, std::vector<std::uint8_t>>> masks;

  while (std::getline(m, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "input") {
      auto kv = parse_kv(ss);
      in.channels = std::stoi(kv.at("channels"));
      in.height = std::stoi(kv.at("height"));
      in.width = std::stoi(kv.at("width"));
      in.num_classes = std::stoi(kv.at("classes"));
    } else if (tag == "layers" || tag == "units") {
      continue;
    } else if (tag == "layer") {
      auto kv = parse_kv(ss);
      LayerDesc d;
      d.kind = layer_kind_from_string(kv.at("kind"));
      d.name = kv.at("name");
      const std::string& ins = kv.at("inputs");
      if (ins != "-") {
        std::stringstream is(ins);
        std::string item;
        while (std::getline(is, item, ',')) d.inputs.push_back(std::stoi(item));
      }
      if (d.kind == LayerKind::Conv) {
        d.out_channels = std::stoi(kv.at("out"));
        d.kh = std::stoi(kv.at("kh"));
        d.kw = std::stoi(kv.at("kw"));
        d.stride = std::stoi(kv.at("stride"));
        d.pad = std::stoi(kv.at("pad"));
        d.coupling_group = std::stoi(kv.at("group"));
      }
      if (d.kind == LayerKind::Dense) d.out_features = std::stoi(kv.at("features"));
      descs.push_back(std::move(d));
    } else if (tag == "mask") {
      int id = 0;
      std::string bits;
      ss >> id >> bits;
      std::vector<std::uint8_t> mask;
      for (char c : bits) mask.push_back(c == '1' ? 1 : 0);
      masks.emplace_back(id, std::move(mask));
    } else {
      throw IoError("unknown manifest line: " + line);
    }
  }

  WeightStore w;
  for (const auto& entry : fs::directory_iterator(dir / "weights")) {
    const auto name = entry.path().filename().string();
    if (name.size() < 4 || name.substr(name.size() - 4) != ".npy") continue;
    w.emplace(name.substr(0, name.size() - 4), io::read_npy(entry.path()));
  }

  auto net = PrunableNetwork::build_with_weights(std::move(descs), in, std::move(w));
  std::vector<std::vector<std::uint8_t>> unit_masks(net.units().size());
  for (auto& [id, mask] : masks) {
    if (id < 0 || id >= static_cast<int>(unit_masks.size()))
      throw IoError("mask for unknown unit " + std::to_string(id));
    unit_masks[static_cast<std::size_t>(id)] = std::move(mask);
  }
  return net.with_masks(unit_masks);
}

}  // namespace ekp::net
