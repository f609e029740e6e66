// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_DATA_HPP
#define FAMILYKIT_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "familykit/forward.hpp"
#include "familykit/tensor.hpp"

namespace familykit {

/// Byte-level tokenizer: ids 0..255 are raw bytes, followed by BOS, EOS and PAD.
class ByteTokenizer {
 public:
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kPad = 258;
  static constexpr int kVocab = 259;

  static std::vector<TokenId> encode(std::string_view text);
  /// Special tokens are dropped.
  static std::string decode(std::span<const TokenId> ids);
  /// Printable form of a single token, used in CSV output.
  static std::string token_text(TokenId id);
};

/// Reads a UTF-8 text file as byte tokens. Empty or invalid files are data errors.
std::vector<TokenId> read_corpus(const std::filesystem::path& path);

bool is_valid_utf8(std::string_view bytes);

/// Shannon entropy (nats) of the token frequency distribution.
double unigram_entropy(std::span<const TokenId> tokens);

/// Next-token targets for a batch: position t predicts token t+1 of the same
/// sequence; the final position of every sequence and PAD targets are ignored.
std::vector<TokenId> next_token_targets(const TokenBatch& batch, TokenId pad = ByteTokenizer::kPad,
                                        TokenId ignore_index = -1);

/// Non-overlapping seq_len windows over a token stream, visited in a seeded
/// random order that is reshuffled every epoch. batch_at(step) is a pure
/// function of (tokens, seq_len, batch, seed, step).
class WindowSampler {
 public:
  WindowSampler(std::vector<TokenId> tokens, Index seq_len, Index batch, std::uint64_t seed);

  TokenBatch batch_at(std::int64_t step) const;
  Index windows() const { return windows_; }

 private:
  std::vector<Index> permutation(std::int64_t epoch) const;

  std::vector<TokenId> tokens_;
  Index seq_len_;
  Index batch_;
  std::uint64_t seed_;
  Index windows_;
  mutable std::int64_t cached_epoch_ = -1;
  mutable std::vector<Index> cached_perm_;
};

/// Consecutive evaluation windows of at most `window` tokens, grouped into
/// batches of equal-length windows. Trailing fragments shorter than two tokens
/// are dropped.
std::vector<TokenBatch> eval_batches(std::span<const TokenId> tokens, Index window, Index batch);

}  // namespace familykit

#endif  // FAMILYKIT_DATA_HPP
