#pragma once

// Checkpoint files: a text header followed by a raw float64 blob.
//
//   spinlab-checkpoint 1
//   <key> <value>          any number of header fields
//   param <name> <rows> <cols>
//   ...
//   end
//   <binary little-endian doubles, parameters in header order>

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spinlab/autograd.hpp"
#include "spinlab/error.hpp"
#include "spinlab/layers.hpp"
#include "spinlab/random.hpp"

namespace spinlab {

static_assert(std::endian::native == std::endian::little, "checkpoint blob assumes a little-endian host");

struct Checkpoint {
  std::map<std::string, std::string> fields;
  std::vector<ag::Parameter> params;

  const std::string& field(const std::string& key) const {
    const auto it = fields.find(key);
    if (it == fields.end()) throw ParseError(0, "checkpoint lacks field '" + key + "'");
    return it->second;
  }

  int int_field(const std::string& key) const {
    try {
      return std::stoi(field(key));
    } catch (const std::logic_error&) {
      throw ParseError(0, "checkpoint field '" + key + "' is not an integer");
    }
  }
};

inline void write_checkpoint(const std::string& path, const std::map<std::string, std::string>& fields,
                             const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "spinlab-checkpoint 1\n";
  for (const auto& [k, v] : fields) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos || k == "param" ||
        k == "end") {
      throw ConfigError("checkpoint field '" + k + "' cannot be stored");
    }
    out << k << ' ' << v << '\n';
  }
  for (const auto& p : params.all()) out << "param " << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << '\n';
  out << "end\n";
  for (const auto& p : params.all()) {
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * static_cast<Eigen::Index>(sizeof(double))));
  }
  if (!out) throw Error("failed writing " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + path);
  Checkpoint ck;
  std::string line;
  int line_no = 1;
  if (!std::getline(in, line) || line != "spinlab-checkpoint 1") throw ParseError(1, path + ": not a checkpoint");
  bool ended = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "param") {
      std::string name;
      Eigen::Index rows = -1, cols = -1;
      if (!(ls >> name >> rows >> cols) || rows < 0 || cols < 0) throw ParseError(line_no, "bad param line");
      ck.params.push_back({name, ag::Mat(rows, cols), {}});
    } else {
      const auto sp = line.find(' ');
      if (key.empty() || sp == std::string::npos) throw ParseError(line_no, "bad header line");
      ck.fields[key] = line.substr(sp + 1);
    }
  }
  if (!ended) throw ParseError(line_no, path + ": header not terminated");
  for (auto& p : ck.params) {
    in.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(p.value.size() * static_cast<Eigen::Index>(sizeof(double))));
    if (!in) throw ParseError(line_no, path + ": truncated parameter blob at " + p.name);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError(line_no, path + ": trailing bytes");
  return ck;
}

// Copy stored values into a freshly built store of identical layout.
inline void load_params(ParamStore& into, const Checkpoint& ck) {
  if (ck.params.size() != into.all().size()) throw ShapeError("checkpoint parameter count differs from model");
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    auto& p = into.all()[i];
    const auto& q = ck.params[i];
    if (p.name != q.name || p.value.rows() != q.value.rows() || p.value.cols() != q.value.cols()) {
      throw ShapeError("checkpoint parameter " + q.name + " does not match model parameter " + p.name);
    }
    p.value = q.value;
  }
}

inline std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

// Hash over parameter names, shapes and raw values.
inline std::uint64_t params_hash(const ParamStore& params) {
  std::uint64_t h = fnv1a("spinlab-params");
  for (const auto& p : params.all()) {
    h = fnv1a(p.name + ":" + std::to_string(p.value.rows()) + "x" + std::to_string(p.value.cols()), h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(p.value.data()),
                               static_cast<std::size_t>(p.value.size()) * sizeof(double)),
              h);
  }
  return h;
}

inline void require_vocab_hash(const Checkpoint& ck, std::uint64_t expected, const std::string& what) {
  if (ck.field("vocab_hash") != hex64(expected)) {
    throw ConfigError(what + ": checkpoint vocabulary hash " + ck.field("vocab_hash") + " does not match " +
                      hex64(expected));
  }
}

}  // namespace spinlab
