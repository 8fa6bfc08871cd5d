#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pcrl {

using TokenSeq = std::vector<int>;

/// Whitespace token inventory. Control tokens occupy the first five ids.
class Vocab {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kPersonaSep = "<psep>";
  static constexpr std::string_view kTurnSep = "<tsep>";
  static constexpr std::string_view kBegin = "<bos>";
  static constexpr std::string_view kEnd = "<eos>";
  static constexpr int kNumControl = 5;

  Vocab() : Vocab(std::vector<std::string>{}) {}
  explicit Vocab(const std::vector<std::string>& content_tokens);

  /// Rebuilds from a full token list (control tokens included), as stored in
  /// checkpoints.
  static Vocab from_tokens(const std::vector<std::string>& all_tokens);

  int pad() const { return 0; }
  int persona_sep() const { return 1; }
  int turn_sep() const { return 2; }
  int begin() const { return 3; }
  int end() const { return 4; }

  std::size_t size() const { return tokens_.size(); }
  bool is_control(int id) const { return id >= 0 && id < kNumControl; }

  /// Throws DataError naming the token when it is not in the vocabulary.
  int id(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenSeq encode(std::string_view text) const;
  /// Content tokens joined by spaces; control tokens are dropped.
  std::string decode(std::span<const int> ids) const;

  std::uint64_t hash() const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace pcrl
