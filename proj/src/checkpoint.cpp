// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#include "familykit/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <vector>

#include "familykit/error.hpp"
#include "familykit/json_io.hpp"

namespace familykit {

static_assert(std::endian::native == std::endian::little, "weights.bin is written in host byte order");

namespace fs = std::filesystem;

namespace {

struct Entry {
  Index rows = 0;
  Index cols = 0;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

json table_row(const std::string& name, const MatrixF& m, std::uint64_t offset) {
  return json{{"name", name},
              {"dtype", "f32"},
              {"shape", {m.rows(), m.cols()}},
              {"offset", offset},
              {"length", static_cast<std::uint64_t>(m.size()) * sizeof(float)}};
}

void append_blob(std::string& bytes, const MatrixF& m) {
  const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(float);
  const std::size_t at = bytes.size();
  bytes.resize(at + n);
  if (n) std::memcpy(bytes.data() + at, m.data(), n);
}

std::map<std::string, Entry> read_table(const json& rows, std::uint64_t file_size, const std::string& what) {
  std::map<std::string, Entry> table;
  for (const auto& r : rows) {
    Entry e;
    std::string name;
    try {
      name = r.at("name").get<std::string>();
      if (r.at("dtype").get<std::string>() != "f32") throw integrity_error(what + " entry " + name + " is not f32");
      auto shape = r.at("shape").get<std::vector<Index>>();
      if (shape.size() != 2) throw integrity_error(what + " entry " + name + " must have a rank-2 shape");
      e.rows = shape[0];
      e.cols = shape[1];
      e.offset = r.at("offset").get<std::uint64_t>();
      e.length = r.at("length").get<std::uint64_t>();
    } catch (const json::exception& ex) {
      throw integrity_error(what + " table: " + ex.what());
    }
    if (e.rows < 0 || e.cols < 0 || e.length != static_cast<std::uint64_t>(e.rows * e.cols) * sizeof(float)) {
      throw integrity_error(what + " entry " + name + " length does not match its shape");
    }
    if (e.offset + e.length > file_size) throw integrity_error(what + " entry " + name + " runs past weights.bin");
    if (!table.emplace(name, e).second) throw integrity_error("duplicate " + what + " entry " + name);
  }
  return table;
}

MatrixF read_blob(const std::string& bytes, const Entry& e) {
  MatrixF m(e.rows, e.cols);
  if (e.length) std::memcpy(m.data(), bytes.data() + e.offset, e.length);
  return m;
}

// Empty model with the container structure implied by the config.
FamilialModel<float> skeleton(const FamilyConfig& c) {
  FamilialModel<float> m;
  m.config = c;
  m.backbone.resize(static_cast<std::size_t>(c.n_layers));
  m.exits.resize(static_cast<std::size_t>(c.exits()));
  for (int k = 0; k < c.exits(); ++k) {
    m.exits[static_cast<std::size_t>(k)].blocks.resize(static_cast<std::size_t>(c.branch_blocks));
    m.exits[static_cast<std::size_t>(k)].expansion.resize(static_cast<std::size_t>(c.expanded(k)));
  }
  return m;
}

// Marks linears stored as {name}.A/{name}.B in the table as factored, so that
// the canonical visit order yields the names present in the file.
void mark_factored(FamilialModel<float>& m, const std::map<std::string, Entry>& table) {
  auto fix = [&](const std::string& name, Linear<float>& l) {
    if (table.contains(name + ".A")) l.a.resize(1, 1);
  };
  auto fix_block = [&](const std::string& prefix, BlockWeights<float>& b) {
    b.for_each_linear([&](std::string_view n, Linear<float>& l) { fix(prefix + "." + std::string(n), l); });
  };
  for (std::size_t i = 0; i < m.backbone.size(); ++i) fix_block("backbone." + std::to_string(i), m.backbone[i]);
  for (std::size_t k = 0; k < m.exits.size(); ++k) {
    const std::string p = "exits." + std::to_string(k);
    for (std::size_t j = 0; j < m.exits[k].blocks.size(); ++j) fix_block(p + ".blocks." + std::to_string(j), m.exits[k].blocks[j]);
    for (std::size_t j = 0; j < m.exits[k].expansion.size(); ++j) fix_block(p + ".expand." + std::to_string(j), m.exits[k].expansion[j]);
    fix(p + ".lm_proj", m.exits[k].lm_proj);
  }
}

}  // namespace

void save_checkpoint(const fs::path& dir, const FamilialModel<float>& model, std::int64_t step,
                     const std::map<std::string, AdamMoments>* moments) {
  fs::create_directories(dir);
  std::string bytes;
  json params = json::array();
  model.for_each_parameter([&](const std::string& name, const MatrixF& p) {
    json row = table_row(name, p, bytes.size());
    row["trainable"] = model.trainable(name);
    params.push_back(std::move(row));
    append_blob(bytes, p);
  });
  json optimizer = json::array();
  if (moments) {
    for (const auto& [name, mom] : *moments) {
      optimizer.push_back(table_row("adam.m." + name, mom.m, bytes.size()));
      append_blob(bytes, mom.m);
      optimizer.push_back(table_row("adam.v." + name, mom.v, bytes.size()));
      append_blob(bytes, mom.v);
    }
  }
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"seed", model.seed},
                {"step", step},
                {"config", model.config},
                {"parameters", std::move(params)},
                {"optimizer", std::move(optimizer)}};
  {
    std::ofstream out(dir / "weights.bin", std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw data_error("cannot write " + (dir / "weights.bin").string());
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw data_error("cannot write " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream min(dir / "manifest.json");
  if (!min) throw config_error("no checkpoint manifest at " + dir.string());
  json manifest;
  try {
    manifest = json::parse(min);
  } catch (const json::exception& e) {
    throw integrity_error("manifest.json: " + std::string(e.what()));
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw integrity_error("checkpoint format_version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointFormatVersion));
  }
  std::ifstream win(dir / "weights.bin", std::ios::binary);
  if (!win) throw integrity_error("missing weights.bin in " + dir.string());
  const std::string bytes((std::istreambuf_iterator<char>(win)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  FamilyConfig config;
  try {
    config = manifest.at("config").get<FamilyConfig>();
    ck.step = manifest.value("step", std::int64_t{0});
  } catch (const json::exception& e) {
    throw integrity_error("manifest config: " + std::string(e.what()));
  }
  config.validate();

  const auto table = read_table(manifest.at("parameters"), bytes.size(), "parameter");
  ck.model = skeleton(config);
  ck.model.seed = manifest.value("seed", std::uint64_t{0});
  mark_factored(ck.model, table);

  std::set<std::string> seen;
  ck.model.for_each_parameter([&](const std::string& name, MatrixF& p) {
    auto it = table.find(name);
    if (it == table.end()) throw integrity_error("checkpoint is missing parameter " + name);
    p = read_blob(bytes, it->second);
    seen.insert(name);
  });
  for (const auto& [name, e] : table) {
    if (!seen.contains(name)) throw integrity_error("checkpoint has unexpected parameter " + name);
  }
  for (const auto& row : manifest.at("parameters")) {
    if (!row.value("trainable", true)) ck.model.frozen.insert(row.at("name").get<std::string>());
  }

  // Shapes against the config.
  const FamilyConfig& c = config;
  auto expect = [&](const MatrixF& m, Index r, Index cc, const std::string& what) {
    if (m.rows() != r || m.cols() != cc) throw integrity_error(what + " has shape " + shape_string(m.rows(), m.cols()));
  };
  expect(ck.model.embedding, c.vocab, c.hidden, "embedding");
  auto check_linear = [&](const Linear<float>& l, Index out, Index in, const std::string& what) {
    if (l.out_features() != out || l.in_features() != in || (l.factored() && l.a.cols() != l.b.rows())) {
      throw integrity_error(what + " does not match the config");
    }
  };
  auto check_block = [&](const BlockWeights<float>& b, const std::string& what) {
    expect(b.attn_norm, 1, c.hidden, what + ".attn_norm");
    expect(b.mlp_norm, 1, c.hidden, what + ".mlp_norm");
    check_linear(b.wq, c.hidden, c.hidden, what + ".wq");
    check_linear(b.wk, c.kv_dim(), c.hidden, what + ".wk");
    check_linear(b.wv, c.kv_dim(), c.hidden, what + ".wv");
    check_linear(b.wo, c.hidden, c.hidden, what + ".wo");
    check_linear(b.w_gate, c.mlp_hidden(), c.hidden, what + ".w_gate");
    check_linear(b.w_up, c.mlp_hidden(), c.hidden, what + ".w_up");
    check_linear(b.w_down, c.hidden, c.mlp_hidden(), what + ".w_down");
  };
  for (std::size_t i = 0; i < ck.model.backbone.size(); ++i) check_block(ck.model.backbone[i], "backbone." + std::to_string(i));
  for (std::size_t k = 0; k < ck.model.exits.size(); ++k) {
    const auto& e = ck.model.exits[k];
    for (const auto& b : e.blocks) check_block(b, "exits." + std::to_string(k) + ".blocks");
    for (const auto& b : e.expansion) check_block(b, "exits." + std::to_string(k) + ".expand");
    expect(e.final_norm, 1, c.hidden, "final_norm");
    check_linear(e.lm_proj, c.vocab, c.hidden, "lm_proj");
  }

  if (manifest.contains("optimizer")) {
    const auto opt = read_table(manifest.at("optimizer"), bytes.size(), "optimizer");
    for (const auto& [name, e] : opt) {
      const bool is_m = name.starts_with("adam.m.");
      if (!is_m && !name.starts_with("adam.v.")) throw integrity_error("unknown optimizer entry " + name);
      const std::string param = name.substr(7);
      if (!seen.contains(param)) throw integrity_error("optimizer state for unknown parameter " + param);
      (is_m ? ck.moments[param].m : ck.moments[param].v) = read_blob(bytes, e);
    }
  }
  return ck;
}

std::string parameter_hash(const FamilialModel<float>& model, const std::string& name_prefix) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  model.for_each_parameter([&](const std::string& name, const MatrixF& m) {
    if (!name.starts_with(name_prefix)) return;
    feed(name.data(), name.size());
    feed(m.data(), static_cast<std::size_t>(m.size()) * sizeof(float));
  });
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace familykit
