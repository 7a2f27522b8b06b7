#include "expresscount/lang_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "expresscount/errors.hpp"
#include "expresscount/layers.hpp"

namespace expresscount {

using nlohmann::json;

Vocabulary Vocabulary::build(const std::vector<std::string>& words) {
    Vocabulary v;
    v.token_to_id_ = {{kPadToken, 0}, {kUnkToken, 1}, {kLocToken, 2}, {kSepToken, 3}};
    int next = 4;
    for (const auto& w : words)
        if (v.token_to_id_.emplace(w, next).second) ++next;
    v.size_ = next;
    v.check();
    return v;
}

Vocabulary Vocabulary::from_json(const json& j) {
    Vocabulary v;
    try {
        const auto& sp = j.at("specials");
        v.pad_ = sp.at(kPadToken).get<int>();
        v.unk_ = sp.at(kUnkToken).get<int>();
        v.loc_ = sp.at(kLocToken).get<int>();
        v.sep_ = sp.at(kSepToken).get<int>();
        for (const auto& [k, val] : sp.items()) v.token_to_id_[k] = val.get<int>();
        for (const auto& [k, val] : j.at("tokens").items()) v.token_to_id_[k] = val.get<int>();
    } catch (const json::exception& e) {
        throw validation_error(std::string("vocabulary: ") + e.what());
    }
    int mx = -1;
    for (const auto& [_, id] : v.token_to_id_) mx = std::max(mx, id);
    v.size_ = mx + 1;
    v.check();
    return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw load_error("cannot open vocabulary " + path.string());
    try {
        return from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw validation_error("vocabulary " + path.string() + ": " + e.what());
    }
}

json Vocabulary::to_json() const {
    json specials = {{kPadToken, pad_}, {kUnkToken, unk_}, {kLocToken, loc_}, {kSepToken, sep_}};
    json tokens = json::object();
    for (const auto& [k, id] : token_to_id_)
        if (!specials.contains(k)) tokens[k] = id;
    return {{"specials", specials}, {"tokens", tokens}};
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write vocabulary " + path.string());
    out << to_json().dump(2) << '\n';
}

int Vocabulary::id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? unk_ : it->second;
}

void Vocabulary::check() const {
    const std::set<int> specials = {pad_, unk_, loc_, sep_};
    if (specials.size() != 4) throw validation_error("vocabulary: special ids are not distinct");
    std::set<int> seen;
    for (const auto& [tok, id] : token_to_id_) {
        if (id < 0 || id >= size_) throw validation_error("vocabulary: id " + std::to_string(id) + " out of range");
        if (!seen.insert(id).second) throw validation_error("vocabulary: id " + std::to_string(id) + " assigned twice");
    }
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isspace(ch) || std::ispunct(ch)) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

Vocabulary build_vocabulary(const std::vector<SceneSample>& corpus) {
    std::set<std::string> words;
    for (const auto& w : expression_lexicon()) words.insert(w);
    for (const auto& s : corpus)
        for (auto& w : split_words(s.annotation.text)) words.insert(std::move(w));
    return Vocabulary::build({words.begin(), words.end()});
}

TokenSequence tokenize(const ExpressionAnnotation& annotation, const Vocabulary& vocab, int max_len) {
    XC_EXPECT(max_len >= 3, "token length must leave room for [Loc], a word and [sep]");
    const auto words = split_words(annotation.text);
    const std::size_t keep = std::min(words.size(), static_cast<std::size_t>(max_len - 2));
    TokenSequence t;
    t.ids.reserve(static_cast<std::size_t>(max_len));
    t.ids.push_back(vocab.loc_id());
    for (std::size_t i = 0; i < keep; ++i) t.ids.push_back(vocab.id_of(words[i]));
    t.ids.push_back(vocab.sep_id());
    t.mask.assign(t.ids.size(), 1);
    while (t.length() < max_len) {
        t.ids.push_back(vocab.pad_id());
        t.mask.push_back(0);
    }
    return t;
}

void LangEncoderConfig::validate() const {
    if (width <= 0 || n_heads <= 0 || width % n_heads != 0)
        throw config_error("lang: width must be divisible by n_heads");
    if (max_len < 3) throw config_error("lang: max_len must be >= 3");
    if (n_layers < 0 || ffn_dim <= 0) throw config_error("lang: invalid layer configuration");
    if (vocab_size < 4) throw config_error("lang: vocabulary must hold the special tokens");
}

void init_lang_encoder(ParamStore& store, const LangEncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    store.add("lang.tok_embed", init::truncated_normal({cfg.vocab_size, cfg.width}, 0.02, rng));
    store.add("lang.pos_embed", init::truncated_normal({cfg.max_len, cfg.width}, 0.02, rng));
    for (int i = 0; i < cfg.n_layers; ++i)
        layers::init_transformer_layer(store, "lang.layers." + std::to_string(i), cfg.width, cfg.ffn_dim, rng, 0.02);
}

ad::Var encode_language_tokens(ad::Tape& tape, const ParamStore& store, const LangEncoderConfig& cfg,
                               const TokenSequence& tokens) {
    const int n = tokens.length();
    XC_EXPECT(static_cast<int>(tokens.mask.size()) == n, "token ids and mask differ in length");
    const Tensor& pos = store.get("lang.pos_embed");
    XC_EXPECT(n >= 1 && n <= pos.rows(),
              "token sequence of length " + std::to_string(n) + " exceeds the configured " + std::to_string(pos.rows()));
    XC_EXPECT(store.get("lang.tok_embed").cols() == cfg.width, "lang: embedding width differs from config");

    ad::Var x = ad::gather_rows(tape.param(store, "lang.tok_embed"), tokens.ids);
    std::vector<int> positions(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;
    x = ad::add(x, ad::gather_rows(tape.param(store, "lang.pos_embed"), positions));
    for (int i = 0; i < cfg.n_layers; ++i)
        x = layers::transformer_layer(tape, store, "lang.layers." + std::to_string(i), x, cfg.n_heads, tokens.mask);
    return x;
}

Tensor encode_language(const TokenSequence& tokens, const LangEncoderConfig& cfg, const ParamStore& store) {
    XC_EXPECT(tokens.length() == cfg.max_len, "token sequence length " + std::to_string(tokens.length()) +
                                                  " differs from configured N_l " + std::to_string(cfg.max_len));
    ad::Tape tape(false);
    return encode_language_tokens(tape, store, cfg, tokens).value().transposed();
}

} // namespace expresscount
