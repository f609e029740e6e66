// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#include "familykit/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>

#include "familykit/error.hpp"
#include "familykit/rng.hpp"

namespace familykit {

std::vector<TokenId> ByteTokenizer::encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

std::string ByteTokenizer::decode(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::string ByteTokenizer::token_text(TokenId id) {
  switch (id) {
    case kBos:
      return "<bos>";
    case kEos:
      return "<eos>";
    case kPad:
      return "<pad>";
    default:
      break;
  }
  if (id >= 32 && id < 127) return std::string(1, static_cast<char>(id));
  char buf[8];
  std::snprintf(buf, sizeof buf, "\\x%02x", static_cast<unsigned>(id & 0xff));
  return buf;
}

bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (c < 0x80) {
      extra = 0;
    } else if ((c >> 5) == 0x6) {
      extra = 1;
    } else if ((c >> 4) == 0xe) {
      extra = 2;
    } else if ((c >> 3) == 0x1e) {
      extra = 3;
    } else {
      return false;
    }
    if (extra > 0 && i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    }
    i += extra + 1;
  }
  return true;
}

std::vector<TokenId> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open corpus " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw data_error("corpus " + path.string() + " is empty");
  if (!is_valid_utf8(bytes)) throw data_error("corpus " + path.string() + " is not valid UTF-8");
  return ByteTokenizer::encode(bytes);
}

double unigram_entropy(std::span<const TokenId> tokens) {
  if (tokens.empty()) throw data_error("entropy of an empty token stream");
  std::map<TokenId, std::int64_t> counts;
  for (TokenId t : tokens) ++counts[t];
  const double n = static_cast<double>(tokens.size());
  double h = 0.0;
  for (const auto& [tok, count] : counts) {
    const double p = static_cast<double>(count) / n;
    h -= p * std::log(p);
  }
  return h;
}

std::vector<TokenId> next_token_targets(const TokenBatch& batch, TokenId pad, TokenId ignore_index) {
  std::vector<TokenId> targets(batch.ids.size(), ignore_index);
  for (Index b = 0; b < batch.batch; ++b) {
    for (Index t = 0; t + 1 < batch.seq; ++t) {
      const TokenId next = batch.ids[static_cast<std::size_t>(b * batch.seq + t + 1)];
      if (next != pad) targets[static_cast<std::size_t>(b * batch.seq + t)] = next;
    }
  }
  return targets;
}

WindowSampler::WindowSampler(std::vector<TokenId> tokens, Index seq_len, Index batch, std::uint64_t seed)
    : tokens_(std::move(tokens)), seq_len_(seq_len), batch_(batch), seed_(seed) {
  if (seq_len_ < 2 || batch_ < 1) throw config_error("sampler needs seq_len >= 2 and batch >= 1");
  windows_ = static_cast<Index>(tokens_.size()) / seq_len_;
  if (windows_ < batch_) {
    throw data_error("corpus of " + std::to_string(tokens_.size()) + " tokens is shorter than one batch of " +
                     std::to_string(batch_) + "x" + std::to_string(seq_len_));
  }
}

std::vector<Index> WindowSampler::permutation(std::int64_t epoch) const {
  if (epoch == cached_epoch_) return cached_perm_;
  std::vector<Index> perm(static_cast<std::size_t>(windows_));
  std::iota(perm.begin(), perm.end(), Index{0});
  CounterRng rng = CounterRng(seed_).split("data").split(static_cast<std::uint64_t>(epoch));
  for (std::size_t i = perm.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(perm[i - 1], perm[j]);
  }
  cached_epoch_ = epoch;
  cached_perm_ = perm;
  return perm;
}

TokenBatch WindowSampler::batch_at(std::int64_t step) const {
  TokenBatch out;
  out.batch = batch_;
  out.seq = seq_len_;
  out.ids.reserve(static_cast<std::size_t>(batch_ * seq_len_));
  for (Index b = 0; b < batch_; ++b) {
    const std::int64_t global = step * batch_ + b;
    const std::int64_t epoch = global / windows_;
    const Index slot = static_cast<Index>(global % windows_);
    const Index window = permutation(epoch)[static_cast<std::size_t>(slot)];
    const auto begin = tokens_.begin() + window * seq_len_;
    out.ids.insert(out.ids.end(), begin, begin + seq_len_);
  }
  return out;
}

std::vector<TokenBatch> eval_batches(std::span<const TokenId> tokens, Index window, Index batch) {
  if (window < 2 || batch < 1) throw config_error("eval windows need window >= 2 and batch >= 1");
  std::vector<TokenBatch> out;
  const Index n = static_cast<Index>(tokens.size());
  const Index full = n / window;
  for (Index w = 0; w < full; w += batch) {
    TokenBatch tb;
    tb.seq = window;
    tb.batch = std::min(batch, full - w);
    tb.ids.assign(tokens.begin() + w * window, tokens.begin() + (w + tb.batch) * window);
    out.push_back(std::move(tb));
  }
  const Index tail = n - full * window;
  if (tail >= 2) {
    TokenBatch tb;
    tb.seq = tail;
    tb.batch = 1;
    tb.ids.assign(tokens.begin() + full * window, tokens.end());
    out.push_back(std::move(tb));
  }
  return out;
}

}  // namespace familykit
