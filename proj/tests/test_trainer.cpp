#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "stair/datagen.hpp"
#include "stair/errors.hpp"
#include "stair/trainer.hpp"

using namespace stair;

namespace {

struct Fixture {
    Dataset data;
    Vocabulary vocab;
    ModelConfig cfg;
    std::vector<TrainExample> examples;
};

Fixture small_fixture() {
    DatagenConfig dc;
    dc.seed = 17;
    dc.n_train = 24;
    dc.n_val = 4;
    dc.n_test = 4;
    dc.n_labeled = 10;
    Dataset data = generate(dc);
    Vocabulary vocab = default_vocabulary(data.bank);
    ModelConfig cfg = testutil::tiny_config(static_cast<std::uint32_t>(vocab.size()), 8, 1);
    cfg.grid_height = dc.grid_height;
    cfg.grid_width = dc.grid_width;
    cfg.patch_dim = dc.patch_dim;
    cfg.max_text_len = 24;
    auto examples = make_examples(vocab, data.train, cfg.max_text_len);
    return {std::move(data), std::move(vocab), cfg, std::move(examples)};
}

StagePlan three_stage_plan() {
    StagePlan plan = StagePlan::preset("paper-desk");
    plan.batch_size = 4;
    const std::uint32_t steps[] = {4, 4, 8};
    for (std::size_t i = 0; i < 3; ++i) {
        plan.stages[i].steps = steps[i];
        plan.stages[i].warmup_steps = 1;
        plan.stages[i].lambda_warmup_steps = 2;
        plan.stages[i].lambda_image = plan.stages[i].lambda_text = 0.05;
    }
    return plan;
}

std::vector<const TrainExample*> first_batch(const std::vector<TrainExample>& ex, std::size_t n) {
    std::vector<const TrainExample*> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(&ex[i]);
    return out;
}

} // namespace

TEST_CASE("lambda schedule") {
    CHECK(lambda_schedule(0.4, 10, 0) == 0.0);
    CHECK(lambda_schedule(0.4, 10, 10) == 0.4);
    CHECK(lambda_schedule(0.4, 10, 25) == 0.4);
    CHECK(lambda_schedule(0.4, 10, 5) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(lambda_schedule(0.4, 10, 3) == doctest::Approx(0.4 * 0.09).epsilon(1e-15));
    CHECK_THROWS_AS(lambda_schedule(0.4, 0, 1), Error);
}

TEST_CASE("learning-rate schedule") {
    CHECK(lr_schedule(1e-3, 10, 110, 0) == 0.0);
    CHECK(lr_schedule(1e-3, 10, 110, 10) == 1e-3);
    CHECK(lr_schedule(1e-3, 10, 110, 5) == doctest::Approx(5e-4).epsilon(1e-15));
    CHECK(std::abs(lr_schedule(1e-3, 10, 110, 60) - 5e-4) < 1e-12);
    CHECK(lr_schedule(1e-3, 10, 110, 110) == 0.0);
    CHECK_THROWS_AS(lr_schedule(1e-3, 10, 110, 111), Error);
}

TEST_CASE("plan validation") {
    StagePlan plan = StagePlan::preset("paper-desk");
    CHECK_NOTHROW(plan.validate());
    auto broken = [&](auto&& edit) {
        StagePlan p = plan;
        edit(p);
        CHECK_THROWS_AS(p.validate(), Error);
    };
    broken([](StagePlan& p) { p.stages.clear(); });
    broken([](StagePlan& p) { p.stages[1].steps = 0; });
    broken([](StagePlan& p) { p.stages[0].warmup_steps = p.stages[0].steps + 1; });
    broken([](StagePlan& p) { p.stages[2].peak_lr = 0.0; });
    broken([](StagePlan& p) { p.stages[0].lambda_text = -1.0; });
    broken([](StagePlan& p) { p.stages[0].lambda_warmup_steps = 0; });
    broken([](StagePlan& p) { p.batch_size = 1; });
    broken([](StagePlan& p) { p.stages[2].name = p.stages[0].name; });
    CHECK_THROWS_AS(StagePlan::preset("paper"), Error);
}

TEST_CASE("paper-desk preset shape") {
    const StagePlan p = StagePlan::preset("paper-desk");
    REQUIRE(p.stages.size() == 3);
    const auto& s = p.stages;
    CHECK(s[1].steps == s[0].steps);
    CHECK(s[2].steps == 2 * s[0].steps);
    CHECK((s[0].mask_text && !s[0].freeze_image));
    CHECK((!s[1].mask_text && s[1].freeze_image));
    CHECK((!s[2].mask_text && !s[2].freeze_image));
    CHECK(s[2].peak_lr == doctest::Approx(0.1 * s[0].peak_lr).epsilon(1e-15));
    CHECK(s[0].lambda_image == 1e-3);
    CHECK(p.batch_size == 32);

    const StagePlan single = StagePlan::preset("single-stage");
    REQUIRE(single.stages.size() == 1);
    CHECK((!single.stages[0].mask_text && !single.stages[0].freeze_image));

    for (double l : lambda_sweep_values()) {
        const StagePlan sweep = StagePlan::preset(lambda_sweep_preset(l));
        REQUIRE(sweep.stages.size() == 1);
        CHECK(sweep.stages[0].lambda_text == l);
        CHECK(sweep.stages[0].lambda_image == l);
    }
    CHECK(lambda_sweep_values() == std::vector<double>{0.0, 1e-4, 1e-3, 1e-1});
}

TEST_CASE("a masked step keeps text weight inside each caption's tokens") {
    auto fx = small_fixture();
    Model m = Model::initialize(fx.cfg, 3);
    const auto batch = first_batch(fx.examples, 6);

    ad::Tape tape;
    StepFlags flags;
    flags.mask_text = true;
    const auto fwd = forward_loss(fx.cfg, bind_params(tape, m), batch, flags, fx.vocab.specials().pad);
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const Tensor& row = fwd.text_rows[r].value();
        for (std::size_t k = 0; k < row.size(); ++k)
            if (row[k] > 0.0) CHECK(batch[r]->mask.contains(static_cast<TokenId>(k)));
    }

    AdamW opt;
    flags.lr = 1e-2;
    const auto rec = train_step(m, batch, flags, opt, fx.vocab.specials().pad);
    CHECK(rec.masked);
    CHECK(rec.mask_violations == 0);
    CHECK(rec.active_text > 0.0);
}

TEST_CASE("a frozen-image step leaves the image tower bitwise unchanged") {
    auto fx = small_fixture();
    Model m = Model::initialize(fx.cfg, 4);
    const Model before = m;
    AdamW opt;
    StepFlags flags;
    flags.freeze_image = true;
    flags.lr = 5e-2;
    flags.lambda_image = flags.lambda_text = 0.1;
    for (int i = 0; i < 3; ++i) train_step(m, first_batch(fx.examples, 5), flags, opt, fx.vocab.specials().pad);
    CHECK(image_tower_hash(m) == image_tower_hash(before));
    CHECK(m.params.image.patch_proj == before.params.image.patch_proj);
    CHECK(m.params.projection.transform_fc == before.params.projection.transform_fc);
    CHECK(m.params.text.token_embedding == before.params.text.token_embedding);
    CHECK(m.params.text.positional != before.params.text.positional);
    CHECK(m.params.log_temperature != before.params.log_temperature);
}

TEST_CASE("weight decay touches matrices only") {
    auto fx = small_fixture();
    Model m = Model::initialize(fx.cfg, 5);
    const Model before = m;
    std::vector<Tensor> zero_grads;
    for (const auto& t : parameter_tensors(m)) zero_grads.push_back(Tensor::zeros_like(t));
    AdamW opt;
    opt.apply(m, zero_grads, 0.1, {});
    CHECK(m.params.image.patch_proj != before.params.image.patch_proj);
    CHECK(m.params.image.patch_proj[0] == doctest::Approx(before.params.image.patch_proj[0] * (1.0 - 0.1 * 1e-2)));
    CHECK(m.params.projection.logit_bias == before.params.projection.logit_bias);
    CHECK(m.params.text.blocks[0].ln1_gain == before.params.text.blocks[0].ln1_gain);
}

TEST_CASE("two golden steps reproduce bitwise") {
    CHECK(testutil::golden_two_steps() == testutil::read_golden("train_two_steps.txt"));
}

TEST_CASE("run_stages honours the stage contracts and logs the schedules") {
    auto fx = small_fixture();
    const StagePlan plan = three_stage_plan();
    const Model init = Model::initialize(fx.cfg, 6);
    const auto dir = testutil::scratch_dir("run-stages");
    TrainOptions opt;
    opt.seed = 9;
    const auto res = run_stages(init, plan, fx.examples, fx.vocab, dir, opt);

    REQUIRE(res.stages.size() == 3);
    REQUIRE(res.log.size() == 16);
    CHECK(res.stages[0].masked_steps == 4);
    CHECK(res.stages[0].steps_with_violations == 0);
    CHECK(res.stages[1].image_hash_before == res.stages[1].image_hash_after);
    CHECK(res.stages[0].image_hash_before != res.stages[0].image_hash_after);
    CHECK(res.stages[2].peak_lr == doctest::Approx(0.1 * res.stages[0].peak_lr).epsilon(1e-15));
    for (const auto& s : res.stages) CHECK(std::filesystem::exists(s.checkpoint));

    std::uint32_t prev = 0;
    for (const auto& r : res.log) {
        CHECK(r.global_step == prev + 1);
        prev = r.global_step;
        const StageSpec& spec = *std::find_if(plan.stages.begin(), plan.stages.end(),
                                              [&](const StageSpec& s) { return s.name == r.stage; });
        CHECK(r.lambda_text == lambda_schedule(spec.lambda_text, spec.lambda_warmup_steps, r.stage_step));
        CHECK(r.lambda_image == lambda_schedule(spec.lambda_image, spec.lambda_warmup_steps, r.stage_step));
        CHECK(r.lr == lr_schedule(spec.peak_lr, spec.warmup_steps, spec.steps, r.stage_step));
        CHECK(r.masked == spec.mask_text);
        CHECK(r.mask_violations == 0);
    }

    std::ifstream in(dir / "train_log.tsv");
    CHECK(read_train_log(in) == res.log);
    CHECK(Model::load(res.stages[2].checkpoint).serialize() == res.model.serialize());
}

TEST_CASE("runs are deterministic and resuming matches a fresh run") {
    auto fx = small_fixture();
    const StagePlan plan = three_stage_plan();
    const Model init = Model::initialize(fx.cfg, 7);
    TrainOptions opt;
    opt.seed = 11;
    const auto a = run_stages(init, plan, fx.examples, fx.vocab, testutil::scratch_dir("det-a"), opt);
    const auto b = run_stages(init, plan, fx.examples, fx.vocab, testutil::scratch_dir("det-b"), opt);
    CHECK(a.log == b.log);
    CHECK(a.model.serialize() == b.model.serialize());

    // Keep only the first stage's checkpoint, then resume.
    const auto dir = testutil::scratch_dir("resume");
    run_stages(init, plan, fx.examples, fx.vocab, dir, opt);
    std::filesystem::remove(dir / "stage2-frozen-image.ckpt");
    std::filesystem::remove(dir / "stage3-joint.ckpt");
    TrainOptions resume = opt;
    resume.resume = true;
    const auto c = run_stages(init, plan, fx.examples, fx.vocab, dir, resume);
    CHECK(c.stages[0].resumed);
    CHECK(!c.stages[1].resumed);
    CHECK(c.model.serialize() == a.model.serialize());
    CHECK(c.log == a.log);

    opt.seed = 12;
    const auto d = run_stages(init, plan, fx.examples, fx.vocab, testutil::scratch_dir("det-d"), opt);
    CHECK(d.model.serialize() != a.model.serialize());
}

TEST_CASE("training log text round-trips") {
    StepRecord r;
    r.stage = "masked-text";
    r.global_step = 3;
    r.stage_step = 3;
    r.loss = 1.0 / 3.0;
    r.lambda_text = 1e-3 * 0.09;
    r.lr = 2.5e-4;
    r.temperature = 0.0699999;
    r.active_text = 12.125;
    r.masked = true;
    std::vector<StepRecord> log = {r, r};
    log[1].stage = "joint";
    log[1].masked = false;
    log[1].mask_violations = 2;
    std::ostringstream out;
    write_train_log(out, log);
    CHECK(out.str().rfind("stage\tglobal_step", 0) == 0);
    std::istringstream in(out.str());
    CHECK(read_train_log(in) == log);
}
