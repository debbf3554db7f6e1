#include <catch2/catch.hpp>

#include "lvit/gradcheck.hpp"
#include "lvit/text.hpp"

using namespace lvit::text;
using lvit::Shape;
using lvit::Tensor;

TEST_CASE("parses the canonical bilateral report", "[text]") {
    const auto rep =
        parse_report("Bilateral pulmonary infection, two infected areas, upper left lung and upper right lung.");
    CHECK(rep.laterality == Laterality::Bilateral);
    CHECK(rep.lesion_count == 2);
    REQUIRE(rep.locations.size() == 2);
    CHECK(rep.locations[0] == Location{true, false, false, Side::Left});
    CHECK(rep.locations[1] == Location{true, false, false, Side::Right});
}

TEST_CASE("parses the unilateral single-lesion report", "[text]") {
    const auto rep = parse_report("Unilateral pulmonary infection, one infected area, middle left lung.");
    CHECK(rep.laterality == Laterality::Unilateral);
    CHECK(rep.lesion_count == 1);
    REQUIRE(rep.locations.size() == 1);
    CHECK(rep.locations[0] == Location{false, true, false, Side::Left});
}

TEST_CASE("parses combined verticals and the all phrase", "[text]") {
    const auto rep = parse_report(
        "Bilateral pulmonary infection, two infected areas, all left lung and middle lower right lung.");
    REQUIRE(rep.locations.size() == 2);
    CHECK(rep.locations[0].is_all());
    CHECK(rep.locations[0].side == Side::Left);
    CHECK(rep.locations[1] == Location{false, true, true, Side::Right});
}

TEST_CASE("malformed input fails with a position", "[text]") {
    try {
        parse_report("lungs broken everywhere");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.position() == 0);
    }
    CHECK_THROWS_AS(parse_report("Bilateral pulmonary infection, two infected areas, purple left lung."),
                    ParseError);
    CHECK_THROWS_AS(parse_report(""), ParseError);
}

TEST_CASE("count and laterality disagreements are validation errors", "[text]") {
    CHECK_THROWS_AS(parse_report("Bilateral pulmonary infection, three infected areas, upper left lung and "
                                 "upper right lung."),
                    ValidationError);
    CHECK_THROWS_AS(
        parse_report("Unilateral pulmonary infection, two infected areas, upper left lung and upper right lung."),
        ValidationError);
}

TEST_CASE("parsing is case-insensitive and round-trips through render", "[text]") {
    const std::string raw = "BILATERAL PULMONARY INFECTION, TWO INFECTED AREAS, UPPER LEFT LUNG and lower right lung.";
    const auto rep = parse_report(raw);
    const auto rendered = render_report(rep);
    const auto rep2 = parse_report(rendered);
    CHECK(rep.same_content(rep2));
    CHECK(render_report(rep2) == rendered);  // idempotent after one render
}

TEST_CASE("token sequence is padded with the pad id", "[text]") {
    const auto rep = parse_report("Unilateral pulmonary infection, one infected area, middle left lung.");
    REQUIRE(rep.tokens.size() == 16);
    // "unilateral pulmonary infection one infected area middle left lung" = 9 words
    CHECK(rep.tokens[0] == word_id("unilateral"));
    CHECK(rep.tokens[8] == word_id("lung"));
    for (size_t i = 9; i < rep.tokens.size(); ++i) CHECK(rep.tokens[i] == kPadId);
}

TEST_CASE("embed_tokens looks up rows, zeroes pads and is trainable", "[text]") {
    const auto rep = parse_report("Unilateral pulmonary infection, one infected area, middle left lung.");
    Tensor<double> table(Shape{vocab_size(), 4});
    lvit::Rng rng(3);
    for (auto& v : table.values()) v = rng.normal();
    table.set_requires_grad(true);

    auto e = embed_tokens(rep, table);
    CHECK(e.shape() == Shape{16, 4});
    for (int c = 0; c < 4; ++c) {
        CHECK(e.data()[0 * 4 + c] == table.data()[word_id("unilateral") * 4 + c]);
        CHECK(e.data()[15 * 4 + c] == 0.0);  // PAD row
    }

    {
        lvit::Tape<double> tape;
        auto e2 = embed_tokens(rep, table);
        tape.backward(lvit::sum_all(e2));
    }
    // every non-pad token contributes a row of ones; "lung" appears once here
    const auto g = table.grad();
    for (int c = 0; c < 4; ++c) {
        CHECK(g.data()[word_id("lung") * 4 + c] == 1.0);
        CHECK(g.data()[kPadId * 4 + c] == 0.0);
    }
}

TEST_CASE("text_sim identities", "[text]") {
    std::vector<double> a = {1, 0};
    std::vector<double> b = {1, 1};
    std::vector<double> orth = {0, 1};
    CHECK(text_sim(a, a) == Approx(1.0));
    CHECK(text_sim(a, orth) == Approx(0.0));
    CHECK(text_sim(a, b) == Approx(0.70710678).epsilon(1e-8));

    // symmetry, positive scale invariance, bounds
    lvit::Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> u(5), v(5);
        for (auto& x : u) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        const double s = text_sim(u, v);
        CHECK(s == Approx(text_sim(v, u)));
        CHECK(s >= -1.0 - 1e-12);
        CHECK(s <= 1.0 + 1e-12);
        std::vector<double> u2 = u;
        for (auto& x : u2) x *= 2.5;
        CHECK(text_sim(u2, v) == Approx(s).margin(1e-12));
    }

    std::vector<double> zero = {0, 0};
    CHECK(text_sim(zero, b) == 0.0);
    CHECK_THROWS_AS(text_sim(a, std::vector<double>{1, 2, 3}), std::invalid_argument);
}

namespace {

ContrastiveBank<double> make_bank(const std::vector<std::string>& ids,
                                  const std::vector<std::string>& raws, const Tensor<double>& table) {
    static std::vector<StructuredReport> keep;  // keep reports alive for the builder
    keep.clear();
    for (const auto& r : raws) keep.push_back(parse_report(r));
    std::vector<std::pair<std::string, const StructuredReport*>> reports;
    std::vector<Tensor<double>> masks;
    for (size_t i = 0; i < ids.size(); ++i) {
        reports.emplace_back(ids[i], &keep[i]);
        Tensor<double> m(Shape{1, 2, 2});
        m.data()[0] = static_cast<double>(i + 1);  // distinguishable masks
        masks.push_back(m);
    }
    return ContrastiveBank<double>(reports, masks, table);
}

}  // namespace

TEST_CASE("select_contrastive picks the argmax with brute-force agreement", "[text]") {
    Tensor<double> table(Shape{vocab_size(), 8});
    lvit::Rng rng(23);
    for (auto& v : table.values()) v = rng.normal();

    const std::vector<std::string> raws = {
        "Unilateral pulmonary infection, one infected area, upper left lung.",
        "Unilateral pulmonary infection, two infected areas, middle right lung and lower right lung.",
        "Bilateral pulmonary infection, two infected areas, upper left lung and upper right lung.",
    };
    auto bank = make_bank({"case_a", "case_b", "case_c"}, raws, table);

    // self-match: the query's own report scores similarity 1 and returns its mask
    for (size_t i = 0; i < raws.size(); ++i) {
        const auto query = bank.embed_query(parse_report(raws[i]));
        const auto [mask, sim] = select_contrastive(query, bank);
        // exhaustive oracle over the bank
        double best = -2;
        size_t best_i = 0;
        for (size_t k = 0; k < bank.entries().size(); ++k) {
            const double s = text_sim(query, bank.entries()[k].embedding);
            if (s > best) {
                best = s;
                best_i = k;
            }
        }
        CHECK(sim == Approx(best));
        CHECK(mask.data()[0] == bank.entries()[best_i].mask.data()[0]);
        if (bank.entries()[best_i].case_id == std::string("case_") + static_cast<char>('a' + i))
            CHECK(sim == Approx(1.0));
    }

    // single-entry bank returns that entry regardless of similarity
    auto solo = make_bank({"only"}, {raws[0]}, table);
    const auto query = solo.embed_query(parse_report(raws[1]));
    const auto [mask, sim] = select_contrastive(query, solo);
    CHECK(mask.data()[0] == 1.0);
    CHECK(sim < 1.0);

    // scale invariance of the argmax
    auto q2 = bank.embed_query(parse_report(raws[2]));
    auto q2_scaled = q2;
    for (auto& v : q2_scaled) v *= 42.0;
    CHECK(select_contrastive(q2, bank).second == Approx(select_contrastive(q2_scaled, bank).second));

    ContrastiveBank<double> empty;
    CHECK_THROWS_AS(select_contrastive(q2, empty), std::runtime_error);
}

TEST_CASE("ties break to the lowest case id", "[text]") {
    Tensor<double> table(Shape{vocab_size(), 8});
    lvit::Rng rng(29);
    for (auto& v : table.values()) v = rng.normal();
    const std::string raw = "Unilateral pulmonary infection, one infected area, upper left lung.";
    // identical reports => identical embeddings => tie; entry ids unsorted on purpose
    auto bank = make_bank({"case_z", "case_a", "case_m"}, {raw, raw, raw}, table);
    const auto query = bank.embed_query(parse_report(raw));
    const auto [mask, sim] = select_contrastive(query, bank);
    CHECK(sim == Approx(1.0));
    // bank sorts by id, so the tie lands on case_a, whose mask marker followed its build position
    size_t expect = 0;
    for (size_t i = 0; i < bank.entries().size(); ++i)
        if (bank.entries()[i].case_id == "case_a") expect = i;
    CHECK(mask.data()[0] == bank.entries()[expect].mask.data()[0]);
    CHECK(bank.entries().front().case_id == "case_a");
}
