#include "pcrl/vocab.hpp"

#include "pcrl/common.hpp"

namespace pcrl {

Vocab::Vocab(const std::vector<std::string>& content_tokens) {
  tokens_ = {std::string(kPad), std::string(kPersonaSep), std::string(kTurnSep), std::string(kBegin),
             std::string(kEnd)};
  for (const auto& t : content_tokens) {
    if (t.empty() || t.front() == '<') throw DataError("invalid content token '" + t + "'");
    tokens_.push_back(t);
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw DataError("duplicate token '" + tokens_[i] + "'");
  }
}

Vocab Vocab::from_tokens(const std::vector<std::string>& all_tokens) {
  if (all_tokens.size() < kNumControl) throw DataError("token list shorter than the control block");
  Vocab v(std::vector<std::string>(all_tokens.begin() + kNumControl, all_tokens.end()));
  if (v.tokens_ != all_tokens) throw DataError("control tokens do not match");
  return v;
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw DataError("token '" + std::string(token) + "' not in vocabulary");
  return it->second;
}

TokenSeq Vocab::encode(std::string_view text) const {
  TokenSeq out;
  for (const auto& t : split_tokens(text)) out.push_back(id(t));
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::vector<std::string> parts;
  for (int id : ids)
    if (!is_control(id)) parts.push_back(token(id));
  return join(parts, " ");
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = fnv1a("vocab");
  for (const auto& t : tokens_) {
    h = fnv1a(t, h);
    h = fnv1a(std::string_view("\0", 1), h);
  }
  return h;
}

}  // namespace pcrl
