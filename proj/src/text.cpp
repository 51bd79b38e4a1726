// SPDX-License-Identifier: Apache-2.0
#include "omni/text.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

namespace omni::text {

namespace {

const char* const kLeft = "\xE2\x9F\xA8";   // U+27E8
const char* const kRight = "\xE2\x9F\xA9";  // U+27E9

const std::vector<std::string>& base_words() {
    static const std::vector<std::string> words = {
        "<pad>", "<bos>", "<eos>", "<unk>",
        // caption grammar
        "a", "and", "on", "plain", "background", "stick", "figure", "standing", "walking", "jumping",
        "circle", "rectangle", "triangle",
        "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", "white", "gray", "black",
        // prefix and inversion templates
        "use", "as", "feature", ",", "an", "image", "of",
        // task names
        "depth", "hed", "scribble", "animal_pose",
    };
    return words;
}

std::string lower(std::string s) {
    for (char& c : s)
        if (static_cast<unsigned char>(c) < 0x80) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

}  // namespace

std::string task_token(const std::string& name) { return std::string(kLeft) + name + kRight; }

Vocabulary::Vocabulary() {
    for (const std::string& w : base_words()) add(w);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    v.tokens_.clear();
    v.ids_.clear();
    for (const std::string& t : tokens) {
        if (v.ids_.count(t)) throw ContractError("duplicate vocabulary token: " + t);
        v.add(t);
    }
    return v;
}

int Vocabulary::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw ContractError("token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::add(const std::string& token) {
    if (token.empty()) throw ContractError("empty token");
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    const int id = size();
    tokens_.push_back(token);
    ids_[token] = id;
    return id;
}

void Vocabulary::save(const std::filesystem::path& file) const {
    std::ofstream out(file);
    for (const std::string& t : tokens_) out << t << '\n';
    if (!out) throw std::runtime_error("cannot write " + file.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read " + file.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) tokens.push_back(line);
    return from_tokens(std::move(tokens));
}

std::vector<std::string> split_words(const std::string& prompt) {
    std::vector<std::string> words;
    std::istringstream ss(prompt);
    std::string w;
    while (ss >> w) {
        w = lower(w);
        // Peel trailing commas off so "feature," reads as two tokens.
        int commas = 0;
        while (w.size() > 1 && w.back() == ',') {
            w.pop_back();
            ++commas;
        }
        if (w.size() > 2 && w.front() == '<' && w.back() == '>') w = task_token(w.substr(1, w.size() - 2));
        words.push_back(w);
        for (int i = 0; i < commas; ++i) words.emplace_back(",");
    }
    return words;
}

std::vector<int> tokenize(const Vocabulary& vocab, const std::string& prompt, bool* truncated) {
    const auto words = split_words(prompt);
    std::vector<int> ids;
    ids.reserve(kContext);
    ids.push_back(kBos);
    const std::size_t room = kContext - 2;
    const bool cut = words.size() > room;
    for (std::size_t i = 0; i < words.size() && i < room; ++i) ids.push_back(vocab.id(words[i]));
    ids.push_back(kEos);
    while (ids.size() < static_cast<std::size_t>(kContext)) ids.push_back(kPad);
    if (cut) std::cerr << "warning: prompt truncated to " << room << " words: \"" << prompt << "\"\n";
    if (truncated) *truncated = cut;
    return ids;
}

std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id == kPad || id == kBos || id == kEos) continue;
        const std::string& t = vocab.token(id);
        if (t == "," || out.empty())
            out += t;
        else
            out += " " + t;
    }
    return out;
}

std::string apply_prefix(const Vocabulary& vocab, const std::string& task, const std::string& prompt) {
    const std::string tok = task_token(task);
    if (!vocab.contains(tok)) throw ContractError("task '" + task + "' has no registered token " + tok);
    return "Use " + tok + " as a feature, " + prompt;
}

TextEncoder::TextEncoder(ParamStore& params, Vocabulary& vocab, Rng& rng, const std::string& prefix)
    : params_(&params), vocab_(&vocab), prefix_(prefix) {
    for (int id = 0; id < vocab.size(); ++id)
        params.add(row_name(id), Tensor::randn({kDText}, rng, 0.02));
    for (int b = 0; b < kBlocks; ++b) {
        const std::string n = prefix + ".block" + std::to_string(b);
        Block blk;
        blk.ln1 = LayerNorm::make(params, n + ".ln1", kDText);
        blk.q = Linear::make(params, n + ".q", kDText, kDText, rng, Init::Normal002);
        blk.k = Linear::make(params, n + ".k", kDText, kDText, rng, Init::Normal002);
        blk.v = Linear::make(params, n + ".v", kDText, kDText, rng, Init::Normal002);
        blk.o = Linear::make(params, n + ".o", kDText, kDText, rng, Init::Normal002);
        blk.ln2 = LayerNorm::make(params, n + ".ln2", kDText);
        blk.fc1 = Linear::make(params, n + ".fc1", kDText, 2 * kDText, rng);
        blk.fc2 = Linear::make(params, n + ".fc2", 2 * kDText, kDText, rng, Init::Normal002);
        blocks_.push_back(blk);
    }
    final_ln_ = LayerNorm::make(params, prefix + ".final_ln", kDText);

    std::vector<double> pos(static_cast<std::size_t>(kContext) * kDText);
    for (int p = 0; p < kContext; ++p)
        for (int i = 0; i < kDText / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / kDText);
            pos[p * kDText + 2 * i] = 0.02 * std::sin(p * freq);
            pos[p * kDText + 2 * i + 1] = 0.02 * std::cos(p * freq);
        }
    positions_ = Tensor::from({kContext, kDText}, std::move(pos));
}

int TextEncoder::register_token(const std::string& name, Rng& rng) {
    if (name.empty() || name.find_first_of(" \t\n\r") != std::string::npos)
        throw ContractError("task token name must be non-empty without whitespace: '" + name + "'");
    const std::string tok = task_token(name);
    if (vocab_->contains(tok)) return vocab_->id(tok);
    const int id = vocab_->add(tok);
    params_->add(row_name(id), Tensor::randn({kDText}, rng, 0.02));
    return id;
}

Tensor TextEncoder::row(int id) const {
    if (id < 0 || id >= vocab_->size()) throw ContractError("token id " + std::to_string(id) + " out of range");
    return params_->tensor(row_name(id));
}

TextEmbedding TextEncoder::encode(const std::vector<std::vector<int>>& batch) const {
    if (batch.empty()) throw ContractError("encode: empty batch");
    const int B = static_cast<int>(batch.size());
    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(B) * kContext);
    TextEmbedding out;
    out.mask.assign(static_cast<std::size_t>(B) * kContext, 0);
    std::vector<double> pool_w(static_cast<std::size_t>(B) * kContext, 0.0);
    std::vector<double> pos(static_cast<std::size_t>(B) * kContext * kDText);
    for (int b = 0; b < B; ++b) {
        const auto& ids = batch[static_cast<std::size_t>(b)];
        if (ids.size() != static_cast<std::size_t>(kContext))
            throw ContractError("encode: token list must have length " + std::to_string(kContext));
        int live = 0;
        for (int p = 0; p < kContext; ++p) {
            const int id = ids[static_cast<std::size_t>(p)];
            if (id < 0 || id >= vocab_->size())
                throw ContractError("encode: token id " + std::to_string(id) + " out of range");
            rows.push_back(row(id).reshape({1, kDText}));
            if (id != kPad) {
                out.mask[static_cast<std::size_t>(b) * kContext + p] = 1;
                ++live;
            }
        }
        for (int p = 0; p < kContext; ++p)
            if (out.mask[static_cast<std::size_t>(b) * kContext + p]) pool_w[static_cast<std::size_t>(b) * kContext + p] = 1.0 / live;
        std::copy(positions_.values().begin(), positions_.values().end(),
                  pos.begin() + static_cast<std::ptrdiff_t>(b) * kContext * kDText);
    }
    Tensor x = add(concat(rows, 0).reshape({B, kContext, kDText}), Tensor::from({B, kContext, kDText}, std::move(pos)));
    for (const Block& blk : blocks_) {
        Tensor h = blk.ln1(x);
        Tensor a = attention(blk.q(h), blk.k(h), blk.v(h), kHeads, out.mask);
        x = add(x, blk.o(a));
        h = blk.ln2(x);
        x = add(x, blk.fc2(silu(blk.fc1(h))));
    }
    x = final_ln_(x);
    out.matrix = x;
    out.pooled = channel_dot(x.reshape({B, kContext, kDText, 1}), Tensor::from({B, kContext}, std::move(pool_w)))
                     .reshape({B, kDText});
    return out;
}

TextEmbedding TextEncoder::encode_prompts(const std::vector<std::string>& prompts) const {
    std::vector<std::vector<int>> ids;
    ids.reserve(prompts.size());
    for (const std::string& p : prompts) ids.push_back(tokenize(*vocab_, p));
    return encode(ids);
}

}  // namespace omni::text
