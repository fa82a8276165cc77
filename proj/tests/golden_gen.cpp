// Writes the golden files the unit tests compare against. Run it by hand
// (with the output directory as its argument) only after the gradient
// checks pass, and only when a change of numerics is intended.

#include <iostream>

#include "helpers.hpp"
#include "stair/projection.hpp"

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: stair_golden_gen <tests/golden dir>\n";
        return 2;
    }
    using namespace stair;
    const std::filesystem::path dir = argv[1];
    const auto v = testutil::toy_vocab();
    const Model m = Model::initialize(testutil::golden_config(), testutil::kGoldenSeed);
    const auto seq = tokenize(v, testutil::kGoldenText, m.config.max_text_len);
    const auto grid = testutil::golden_grid();

    auto dump = [&](const char* name, std::vector<double> values) {
        testutil::write_golden(dir / name, values);
        std::cout << name << ": " << values.size() << " values\n";
    };
    const Tensor ht = encode_text(m, seq, v.specials().pad);
    const Tensor hi = encode_image(m, grid);
    dump("encoder_text.txt", {ht.data().begin(), ht.data().end()});
    dump("encoder_image.txt", {hi.data().begin(), hi.data().end()});
    dump("embed_text.txt", testutil::flatten(embed_text(m, seq, v.specials().pad)));
    dump("embed_image.txt", testutil::flatten(embed_image(m, grid)));
    dump("train_two_steps.txt", testutil::golden_two_steps());
    return 0;
}
