#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "expresscount/autograd.hpp"
#include "expresscount/data.hpp"
#include "expresscount/params.hpp"

namespace expresscount {

inline constexpr const char* kPadToken = "[PAD]";
inline constexpr const char* kUnkToken = "[UNK]";
inline constexpr const char* kLocToken = "[Loc]";
inline constexpr const char* kSepToken = "[sep]";

class Vocabulary {
public:
    // Specials take ids 0..3; words follow in the given order (duplicates dropped).
    static Vocabulary build(const std::vector<std::string>& words);
    static Vocabulary from_json(const nlohmann::json& j);
    static Vocabulary load(const std::filesystem::path& path);

    nlohmann::json to_json() const;
    void save(const std::filesystem::path& path) const;

    int id_of(const std::string& token) const;  // [UNK] when absent
    bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }
    int size() const { return size_; }
    int pad_id() const { return pad_; }
    int unk_id() const { return unk_; }
    int loc_id() const { return loc_; }
    int sep_id() const { return sep_; }
    const std::map<std::string, int>& tokens() const { return token_to_id_; }

private:
    void check() const;

    std::map<std::string, int> token_to_id_;
    int pad_ = 0, unk_ = 1, loc_ = 2, sep_ = 3;
    int size_ = 0;
};

// Words from a corpus plus the expression lexicon, sorted.
Vocabulary build_vocabulary(const std::vector<SceneSample>& corpus);

struct TokenSequence {
    std::vector<int> ids;
    std::vector<std::uint8_t> mask;  // 1 on [Loc], words and [sep]
    int length() const { return static_cast<int>(ids.size()); }
};

// Lowercase, split on whitespace and punctuation.
std::vector<std::string> split_words(const std::string& text);
TokenSequence tokenize(const ExpressionAnnotation& annotation, const Vocabulary& vocab, int max_len);

struct LangEncoderConfig {
    int width = 64;      // D_l
    int n_layers = 2;
    int n_heads = 4;
    int ffn_dim = 128;
    int max_len = 20;    // N_l
    int vocab_size = 0;
    bool freeze = false;

    void validate() const;
};

// Parameters live under "lang.".
void init_lang_encoder(ParamStore& store, const LangEncoderConfig& cfg, Rng& rng);

// Returns token embeddings as [N, D_l] rows (sequence-major), which is what
// the fusion transformer consumes.
ad::Var encode_language_tokens(ad::Tape& tape, const ParamStore& store, const LangEncoderConfig& cfg,
                               const TokenSequence& tokens);
// F_l laid out as [D_l, N_l].
Tensor encode_language(const TokenSequence& tokens, const LangEncoderConfig& cfg, const ParamStore& store);

} // namespace expresscount
