#pragma once

#include <array>
#include <atomic>
#include <cctype>
#include <optional>

#include "lvit/tensor.hpp"

namespace lvit {
namespace text {

// Counts every text-pipeline operation (embedding, similarity, bank use), so
// tests can assert that text-free training never touches this module.
inline std::atomic<std::uint64_t>& ops_count() {
    static std::atomic<std::uint64_t> n{0};
    return n;
}

constexpr int kPadId = 0;
constexpr int kUnkId = 1;

// Closed vocabulary induced by the report grammar.
inline const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> words = {
        "<pad>", "<unk>", "bilateral", "unilateral", "pulmonary", "infection", "one",  "two",  "three",
        "four",  "five",  "six",       "seven",      "eight",     "nine",      "infected", "area", "areas",
        "upper", "middle", "lower",    "all",        "left",      "right",     "lung", "and"};
    return words;
}

inline int vocab_size() { return static_cast<int>(vocabulary().size()); }

inline int word_id(const std::string& w) {
    const auto& v = vocabulary();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == w) return static_cast<int>(i);
    return kUnkId;
}

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& msg, int position)
        : std::runtime_error(msg + " (at token " + std::to_string(position) + ")"), position_(position) {}
    int position() const { return position_; }

private:
    int position_;
};

class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Laterality { Bilateral, Unilateral };
enum class Side { Left, Right };

// Vertical extent as thirds; all three set renders as "all".
struct Location {
    bool upper = false;
    bool middle = false;
    bool lower = false;
    Side side = Side::Left;

    bool is_all() const { return upper && middle && lower; }
    bool operator==(const Location&) const = default;
};

struct StructuredReport {
    std::string raw;
    Laterality laterality = Laterality::Unilateral;
    int lesion_count = 0;
    std::vector<Location> locations;
    std::vector<int> tokens;  // vocabulary ids padded with kPadId

    bool same_content(const StructuredReport& o) const {
        return laterality == o.laterality && lesion_count == o.lesion_count && locations == o.locations;
    }
};

// Lowercased words, punctuation stripped.
inline std::vector<std::string> tokenize(const std::string& raw) {
    std::vector<std::string> out;
    std::string cur;
    for (const char ch : raw) {
        if (std::isalpha(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

namespace detail {

inline const std::array<std::string, 9>& number_words() {
    static const std::array<std::string, 9> w = {"one", "two", "three", "four", "five",
                                                 "six", "seven", "eight", "nine"};
    return w;
}

inline std::optional<int> number_value(const std::string& w) {
    const auto& nw = number_words();
    for (size_t i = 0; i < nw.size(); ++i)
        if (nw[i] == w) return static_cast<int>(i) + 1;
    return std::nullopt;
}

}  // namespace detail

// Grammar: laterality-clause "," count-clause "," location-list "."
//   laterality-clause: (bilateral|unilateral) pulmonary infection
//   count-clause:      <one..nine> infected (area|areas)
//   location-phrase:   ("all" | subset of upper middle lower, in order) (left|right) lung
// Case-insensitive. The lesion count must equal the number of location
// phrases, and the laterality must match the sides covered.
inline StructuredReport parse_report(const std::string& raw, int max_tokens = 16) {
    const auto words = tokenize(raw);
    StructuredReport rep;
    rep.raw = raw;

    size_t pos = 0;
    auto need = [&](const char* what) -> const std::string& {
        if (pos >= words.size()) throw ParseError(std::string("expected ") + what + ", found end of report",
                                                  static_cast<int>(pos));
        return words[pos];
    };

    // laterality clause
    {
        const auto& w = need("laterality");
        if (w == "bilateral") rep.laterality = Laterality::Bilateral;
        else if (w == "unilateral") rep.laterality = Laterality::Unilateral;
        else throw ParseError("expected 'bilateral' or 'unilateral', found '" + w + "'", static_cast<int>(pos));
        ++pos;
        if (need("'pulmonary'") != "pulmonary")
            throw ParseError("expected 'pulmonary', found '" + words[pos] + "'", static_cast<int>(pos));
        ++pos;
        if (need("'infection'") != "infection")
            throw ParseError("expected 'infection', found '" + words[pos] + "'", static_cast<int>(pos));
        ++pos;
    }

    // count clause
    {
        const auto& w = need("lesion count word");
        const auto n = detail::number_value(w);
        if (!n) throw ParseError("expected a number word, found '" + w + "'", static_cast<int>(pos));
        rep.lesion_count = *n;
        ++pos;
        if (need("'infected'") != "infected")
            throw ParseError("expected 'infected', found '" + words[pos] + "'", static_cast<int>(pos));
        ++pos;
        const auto& area = need("'area' or 'areas'");
        const std::string expected = rep.lesion_count == 1 ? "area" : "areas";
        if (area != expected)
            throw ParseError("expected '" + expected + "', found '" + area + "'", static_cast<int>(pos));
        ++pos;
    }

    // location list
    while (true) {
        Location loc;
        const auto& first = need("location phrase");
        if (first == "all") {
            loc.upper = loc.middle = loc.lower = true;
            ++pos;
        } else {
            // ordered subset of upper/middle/lower, at least one word
            bool any = false;
            auto take = [&](const char* word, bool& flag) {
                if (pos < words.size() && words[pos] == word) {
                    flag = true;
                    any = true;
                    ++pos;
                }
            };
            take("upper", loc.upper);
            take("middle", loc.middle);
            take("lower", loc.lower);
            if (!any)
                throw ParseError("expected a vertical word (upper/middle/lower/all), found '" + first + "'",
                                 static_cast<int>(pos));
        }
        const auto& side = need("'left' or 'right'");
        if (side == "left") loc.side = Side::Left;
        else if (side == "right") loc.side = Side::Right;
        else throw ParseError("expected 'left' or 'right', found '" + side + "'", static_cast<int>(pos));
        ++pos;
        if (need("'lung'") != "lung")
            throw ParseError("expected 'lung', found '" + words[pos] + "'", static_cast<int>(pos));
        ++pos;
        rep.locations.push_back(loc);

        if (pos >= words.size()) break;
        if (words[pos] != "and")
            throw ParseError("expected 'and' or end of report, found '" + words[pos] + "'",
                             static_cast<int>(pos));
        ++pos;
    }

    // cross-field validation
    if (rep.lesion_count != static_cast<int>(rep.locations.size()))
        throw ValidationError("lesion count " + std::to_string(rep.lesion_count) + " does not match " +
                              std::to_string(rep.locations.size()) + " location phrases");
    bool left = false, right = false;
    for (const auto& l : rep.locations) (l.side == Side::Left ? left : right) = true;
    const bool bilateral = left && right;
    if (bilateral != (rep.laterality == Laterality::Bilateral))
        throw ValidationError("laterality word does not match the sides covered by the locations");

    // token ids, padded/truncated to max_tokens
    rep.tokens.assign(static_cast<size_t>(max_tokens), kPadId);
    for (size_t i = 0; i < words.size() && i < static_cast<size_t>(max_tokens); ++i) {
        rep.tokens[i] = word_id(words[i]);
    }
    return rep;
}

inline std::string render_report(Laterality lat, const std::vector<Location>& locations) {
    std::ostringstream os;
    os << (lat == Laterality::Bilateral ? "Bilateral" : "Unilateral") << " pulmonary infection, ";
    const int count = static_cast<int>(locations.size());
    if (count < 1 || count > 9) throw std::invalid_argument("render_report: unsupported lesion count");
    os << detail::number_words()[static_cast<size_t>(count - 1)] << " infected "
       << (count == 1 ? "area" : "areas") << ", ";
    for (size_t i = 0; i < locations.size(); ++i) {
        if (i) os << " and ";
        const auto& l = locations[i];
        if (l.is_all()) {
            os << "all";
        } else {
            bool space = false;
            auto emit = [&](bool flag, const char* word) {
                if (!flag) return;
                if (space) os << " ";
                os << word;
                space = true;
            };
            emit(l.upper, "upper");
            emit(l.middle, "middle");
            emit(l.lower, "lower");
        }
        os << (l.side == Side::Left ? " left" : " right") << " lung";
    }
    os << ".";
    return os.str();
}

inline std::string render_report(const StructuredReport& rep) {
    return render_report(rep.laterality, rep.locations);
}

// Embedding rows per token; PAD rows are zero and receive no gradient.
template <typename Real>
Tensor<Real> embed_tokens(const StructuredReport& rep, const Tensor<Real>& table) {
    ops_count()++;
    return reshape(embedding(table, {rep.tokens}, kPadId), {static_cast<int>(rep.tokens.size()), table.dim(1)});
}

// Report embedding for similarity search: mean of the non-PAD token rows.
template <typename Real>
std::vector<Real> report_embedding(const StructuredReport& rep, const Tensor<Real>& table) {
    ops_count()++;
    const int d = table.dim(1);
    std::vector<Real> out(static_cast<size_t>(d), Real(0));
    int n = 0;
    for (const int id : rep.tokens) {
        if (id == kPadId) continue;
        if (id < 0 || id >= table.dim(0)) throw std::invalid_argument("report_embedding: id out of range");
        const Real* row = table.data() + static_cast<size_t>(id) * d;
        for (int c = 0; c < d; ++c) out[static_cast<size_t>(c)] += row[c];
        ++n;
    }
    if (n > 0)
        for (auto& v : out) v /= static_cast<Real>(n);
    return out;
}

// Cosine similarity in [-1, 1]; 0 when either norm is below 1e-12.
template <typename Real>
double text_sim(const std::vector<Real>& a, const std::vector<Real>& b) {
    ops_count()++;
    if (a.size() != b.size())
        throw std::invalid_argument("text_sim: vector lengths differ: " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
        na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
        nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < 1e-12 || nb < 1e-12) return 0.0;
    return dot / (na * nb);
}

// The labeled-set side of the LV loss: report embeddings with their masks,
// built once at training start from a frozen copy of the embedding table.
template <typename Real>
class ContrastiveBank {
public:
    struct Entry {
        std::string case_id;
        std::vector<Real> embedding;
        Tensor<Real> mask;
    };

    ContrastiveBank() = default;

    // Cases must arrive with unique ids; entries are kept sorted by id so the
    // argmax tie-break lands on the lowest id.
    ContrastiveBank(const std::vector<std::pair<std::string, const StructuredReport*>>& reports,
                    const std::vector<Tensor<Real>>& masks, const Tensor<Real>& table) {
        ops_count()++;
        table_ = Tensor<Real>::from(table.shape(), table.values());  // frozen snapshot
        for (size_t i = 0; i < reports.size(); ++i)
            entries_.push_back(Entry{reports[i].first, report_embedding(*reports[i].second, table_), masks[i]});
        std::sort(entries_.begin(), entries_.end(),
                  [](const Entry& a, const Entry& b) { return a.case_id < b.case_id; });
    }

    bool empty() const { return entries_.empty(); }
    size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }

    // Query embeddings use the same frozen table the bank was built with.
    std::vector<Real> embed_query(const StructuredReport& rep) const { return report_embedding(rep, table_); }

private:
    std::vector<Entry> entries_;
    Tensor<Real> table_;
};

// Highest-similarity entry; ties break to the lowest case id.
template <typename Real>
std::pair<Tensor<Real>, double> select_contrastive(const std::vector<Real>& report_vec,
                                                   const ContrastiveBank<Real>& bank) {
    ops_count()++;
    if (bank.empty()) throw std::runtime_error("select_contrastive: empty contrastive bank");
    size_t best = 0;
    double best_sim = -2.0;
    const auto& entries = bank.entries();
    for (size_t i = 0; i < entries.size(); ++i) {
        const double s = text_sim(report_vec, entries[i].embedding);
        if (s > best_sim) {
            best_sim = s;
            best = i;
        }
    }
    return {entries[best].mask, best_sim};
}

}  // namespace text
}  // namespace lvit
