#include "stair/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "stair/binio.hpp"
#include "stair/errors.hpp"
#include "stair/objective.hpp"
#include "stair/projection.hpp"

namespace stair {

namespace {

constexpr double kPaperDeskLr = 3e-3;
constexpr double kPaperDeskLambda = 1e-3;

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw_format("train log: bad number '" + s + "'");
    return v;
}

StageSpec single_stage(std::uint32_t steps, double lambda) {
    StageSpec s;
    s.name = "joint";
    s.steps = steps;
    s.peak_lr = kPaperDeskLr;
    s.warmup_steps = steps / 10;
    s.lambda_image = lambda;
    s.lambda_text = lambda;
    s.lambda_warmup_steps = steps / 2;
    return s;
}

bool is_frozen(const std::vector<ParamGroup>& frozen, ParamGroup g) {
    return std::find(frozen.begin(), frozen.end(), g) != frozen.end();
}

} // namespace

// ---- plans ------------------------------------------------------------------

void StagePlan::validate() const {
    if (stages.empty()) throw_config("plan: at least one stage is required");
    if (batch_size < 2) throw_config("plan: batch_size must be at least 2");
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const auto& s = stages[i];
        const std::string where = "plan: stage " + std::to_string(i + 1) + " ('" + s.name + "')";
        if (s.name.empty()) throw_config(where + " needs a name");
        if (s.steps == 0) throw_config(where + " has zero steps");
        if (s.warmup_steps > s.steps) throw_config(where + " warmup exceeds its step count");
        if (!(s.peak_lr > 0.0) || !std::isfinite(s.peak_lr)) throw_config(where + " peak_lr must be positive");
        if (!(s.lambda_image >= 0.0) || !(s.lambda_text >= 0.0)) throw_config(where + " lambdas must be >= 0");
        if (s.lambda_warmup_steps == 0) throw_config(where + " lambda_warmup_steps must be >= 1");
        for (std::size_t j = 0; j < i; ++j)
            if (stages[j].name == s.name) throw_config(where + " repeats a stage name");
    }
}

std::vector<double> lambda_sweep_values() { return {0.0, 1e-4, 1e-3, 1e-1}; }

std::string lambda_sweep_preset(double lambda) {
    static const std::pair<double, const char*> names[] = {{0.0, "0"}, {1e-4, "1e-4"}, {1e-3, "1e-3"}, {1e-1, "1e-1"}};
    for (const auto& [v, n] : names)
        if (v == lambda) return std::string("lambda-sweep-") + n;
    return "lambda-sweep-" + format_double(lambda);
}

StagePlan StagePlan::preset(const std::string& name) {
    StagePlan plan;
    plan.batch_size = 32;
    if (name == "paper-desk") {
        StageSpec s1;
        s1.name = "masked-text";
        s1.steps = 600;
        s1.peak_lr = kPaperDeskLr;
        s1.warmup_steps = 60;
        s1.mask_text = true;
        s1.lambda_image = s1.lambda_text = kPaperDeskLambda;
        s1.lambda_warmup_steps = 300;

        StageSpec s2 = s1;
        s2.name = "frozen-image";
        s2.mask_text = false;
        s2.freeze_image = true;

        StageSpec s3 = s1;
        s3.name = "joint";
        s3.steps = 1200;
        s3.warmup_steps = 120;
        s3.mask_text = false;
        s3.peak_lr = 0.1 * kPaperDeskLr;
        s3.lambda_warmup_steps = 600;
        plan.stages = {s1, s2, s3};
        return plan;
    }
    if (name == "single-stage") {
        plan.stages = {single_stage(2400, kPaperDeskLambda)};
        return plan;
    }
    for (double lambda : lambda_sweep_values()) {
        if (name == lambda_sweep_preset(lambda)) {
            plan.stages = {single_stage(800, lambda)};
            return plan;
        }
    }
    throw_config("unknown preset '" + name + "'");
}

std::vector<std::string> StagePlan::preset_names() {
    std::vector<std::string> out = {"paper-desk", "single-stage"};
    for (double l : lambda_sweep_values()) out.push_back(lambda_sweep_preset(l));
    return out;
}

// ---- schedules --------------------------------------------------------------

double lambda_schedule(double target, std::uint32_t warmup, std::uint32_t step) {
    if (warmup == 0) throw_invalid("lambda_schedule: warmup must be >= 1");
    const double r = static_cast<double>(step) / static_cast<double>(warmup);
    return r >= 1.0 ? target : target * r * r;
}

double lr_schedule(double peak, std::uint32_t warmup, std::uint32_t total, std::uint32_t step) {
    if (step > total) {
        throw_invalid("lr_schedule: step " + std::to_string(step) + " beyond total " + std::to_string(total));
    }
    if (warmup > total) throw_invalid("lr_schedule: warmup beyond total");
    if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (total == warmup) return peak;
    return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

// ---- optimizer --------------------------------------------------------------

void AdamW::apply(Model& model, const std::vector<Tensor>& grads, double lr, const std::vector<ParamGroup>& frozen) {
    ++step_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    std::size_t i = 0;
    const bool fresh = first_.empty();
    visit_params(model.params, [&](const std::string& name, Tensor& p, ParamGroup g) {
        const std::size_t idx = i++;
        if (fresh) {
            first_.push_back(Tensor::zeros_like(p));
            second_.push_back(Tensor::zeros_like(p));
        }
        if (is_frozen(frozen, g)) return;
        if (idx >= grads.size() || !grads[idx].same_shape(p)) throw_invalid("AdamW: gradient missing for " + name);
        auto m = first_[idx].data();
        auto v = second_[idx].data();
        auto w = p.data();
        const auto gr = grads[idx].data();
        const double decay = p.rank() == 2 ? lr * weight_decay : 0.0;
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = beta1 * m[k] + (1.0 - beta1) * gr[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * gr[k] * gr[k];
            w[k] -= decay * w[k];
            w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
        }
    });
}

// ---- steps ------------------------------------------------------------------

std::vector<TrainExample> make_examples(const Vocabulary& vocab, std::span<const PairedSample> samples,
                                        std::uint32_t max_text_len) {
    std::vector<TrainExample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        TrainExample e;
        e.image = s.image;
        e.text = tokenize(vocab, s.caption, max_text_len);
        e.mask = build_mask(vocab, e.text);
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<ParamGroup> frozen_groups(bool freeze_image) {
    // The projection head and the tied table are part of the image encoder
    // path, so freezing the image side holds them fixed too.
    if (freeze_image) return {ParamGroup::ImageTower, ParamGroup::Head, ParamGroup::SharedEmbedding};
    return {};
}

ForwardPass forward_loss(const ModelConfig& cfg, const BoundParams& bound, std::span<const TrainExample* const> batch,
                         const StepFlags& flags, TokenId pad_id) {
    using namespace ad;
    if (batch.empty()) throw_invalid("forward_loss: empty batch");
    if (flags.mask_text && cfg.head == HeadKind::Dense) throw_config("forward_loss: text masking needs the sparse head");
    const std::size_t vsize = cfg.vocab_size;
    Tape& tape = *bound.log_temperature.tape;
    ForwardPass out;
    out.image_rows.reserve(batch.size());
    out.text_rows.reserve(batch.size());
    for (const TrainExample* ex : batch) {
        const std::vector<bool> text_valid = text_validity(ex->text, pad_id);
        const std::vector<bool> image_valid(ex->image.cells(), true);
        const Var hi = encode_image(cfg, bound.image, ex->image);
        const Var ht = encode_text(cfg, bound.text, ex->text, pad_id);
        if (cfg.head == HeadKind::Dense) {
            out.image_rows.push_back(mean_rows(head_transform(bound.projection, hi, cfg.ln_eps), image_valid));
            out.text_rows.push_back(mean_rows(head_transform(bound.projection, ht, cfg.ln_eps), text_valid));
            continue;
        }
        const Var li = project_positions(bound.projection, bound.text.token_embedding, hi, cfg.ln_eps);
        const Var lt = project_positions(bound.projection, bound.text.token_embedding, ht, cfg.ln_eps);
        out.image_rows.push_back(pool_log_relu_max(li, image_valid));
        Var text_emb = pool_log_relu_max(lt, text_valid);
        if (flags.mask_text) {
            Tensor mask({1, vsize});
            for (TokenId t : ex->mask.active) mask[t] = 1.0;
            text_emb = mul_const(text_emb, mask);
        }
        out.text_rows.push_back(text_emb);
    }
    const Var img = stack_rows(out.image_rows);
    const Var txt = stack_rows(out.text_rows);
    if (cfg.head == HeadKind::Dense) {
        out.loss.contrastive = contrastive_loss(img, txt, bound.log_temperature, cfg.temperature_floor);
        out.loss.total = out.loss.contrastive;
        out.loss.flops_image = out.loss.flops_text = tape.constant(Tensor({1}));
    } else {
        out.loss = total_loss(img, txt, bound.log_temperature, flags.lambda_image, flags.lambda_text,
                              cfg.temperature_floor);
    }
    return out;
}

StepRecord train_step(Model& model, std::span<const TrainExample* const> batch, const StepFlags& flags, AdamW& opt,
                      TokenId pad_id) {
    using namespace ad;
    if (batch.empty()) throw_invalid("train_step: empty batch");
    const ModelConfig& cfg = model.config;
    const std::vector<ParamGroup> frozen = frozen_groups(flags.freeze_image);
    const std::size_t n = batch.size();
    const std::size_t vsize = cfg.vocab_size;

    Tape tape;
    const BoundParams bound = bind_params(tape, model, frozen);
    ForwardPass fwd;
    try {
        fwd = forward_loss(cfg, bound, batch, flags, pad_id);
        if (!std::isfinite(fwd.loss.total.value()[0])) throw_numeric("loss is not finite");
        tape.backward(fwd.loss.total);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::Numeric) throw;
        std::ostringstream diag;
        diag << "training diverged: " << e.what() << " (batch of " << n << ", lr " << flags.lr << ", lambda "
             << flags.lambda_image << "/" << flags.lambda_text << ", temperature "
             << std::exp(model.params.log_temperature[0]) << ", first caption length " << batch[0]->text.ids.size()
             << ")";
        throw_numeric(diag.str());
    }
    const LossVars& loss = fwd.loss;
    const std::vector<Var>& image_rows = fwd.image_rows;
    const std::vector<Var>& text_rows = fwd.text_rows;

    StepRecord rec;
    rec.loss = loss.total.value()[0];
    rec.contrastive = loss.contrastive.value()[0];
    rec.flops_image = loss.flops_image.value()[0];
    rec.flops_text = loss.flops_text.value()[0];
    rec.lambda_image = flags.lambda_image;
    rec.lambda_text = flags.lambda_text;
    rec.lr = flags.lr;
    rec.masked = flags.mask_text;
    if (cfg.head == HeadKind::Sparse) {
        std::size_t active_i = 0, active_t = 0;
        for (std::size_t r = 0; r < n; ++r) {
            const Tensor& iv = image_rows[r].value();
            const Tensor& tv = text_rows[r].value();
            for (std::size_t k = 0; k < vsize; ++k) {
                active_i += iv[k] > 0.0;
                if (tv[k] > 0.0) {
                    ++active_t;
                    if (flags.mask_text && !batch[r]->mask.contains(static_cast<TokenId>(k))) ++rec.mask_violations;
                }
            }
        }
        rec.active_image = static_cast<double>(active_i) / static_cast<double>(n);
        rec.active_text = static_cast<double>(active_t) / static_cast<double>(n);
    }

    std::vector<Tensor> grads;
    visit_params(bound, [&](const std::string&, const Var& v, ParamGroup g) {
        grads.push_back(is_frozen(frozen, g) ? Tensor() : tape.grad(v));
    });
    for (const auto& g : grads)
        if (!g.empty() && !g.all_finite()) throw_numeric("training diverged: non-finite gradient");
    opt.apply(model, grads, flags.lr, frozen);
    rec.temperature = std::max(std::exp(model.params.log_temperature[0]), cfg.temperature_floor);
    return rec;
}

std::string image_tower_hash(const Model& model) {
    std::ostringstream out;
    visit_params(model.params, [&](const std::string& name, const Tensor& t, ParamGroup g) {
        if (g != ParamGroup::ImageTower) return;
        binio::write_bytes(out, name);
        for (double v : t.data()) binio::write_f64(out, v);
    });
    return binio::sha256_hex(out.str());
}

// ---- runs -------------------------------------------------------------------

TrainResult run_stages(const Model& initial, const StagePlan& plan, std::span<const TrainExample> data,
                       const Vocabulary& vocab, const std::filesystem::path& out_dir, const TrainOptions& options) {
    plan.validate();
    if (data.size() < 2) throw_invalid("run_stages: need at least two training pairs");
    if (initial.config.vocab_size != vocab.size()) throw_config("run_stages: model and vocabulary sizes differ");
    std::filesystem::create_directories(out_dir);

    TrainResult result{initial, {}, {}};
    std::vector<StepRecord> previous_log;
    const auto log_path = out_dir / "train_log.tsv";
    if (options.resume && std::filesystem::exists(log_path)) {
        std::ifstream in(log_path);
        previous_log = read_train_log(in);
    }

    const std::size_t batch_size = std::min<std::size_t>(plan.batch_size, data.size());
    std::uint32_t global = 0;
    for (std::size_t si = 0; si < plan.stages.size(); ++si) {
        const StageSpec& stage = plan.stages[si];
        StageSummary summary;
        summary.name = stage.name;
        summary.peak_lr = stage.peak_lr;
        summary.steps = stage.steps;
        summary.checkpoint = out_dir / ("stage" + std::to_string(si + 1) + "-" + stage.name + ".ckpt");
        summary.image_hash_before = image_tower_hash(result.model);

        if (options.resume && std::filesystem::exists(summary.checkpoint)) {
            try {
                result.model = Model::load(summary.checkpoint);
            } catch (const Error& e) {
                throw Error(e.code(), "stage '" + stage.name + "': " + e.what());
            }
            summary.resumed = true;
            for (const auto& r : previous_log) {
                if (r.stage != stage.name) continue;
                result.log.push_back(r);
                summary.masked_steps += r.masked;
                summary.steps_with_violations += r.mask_violations > 0;
            }
        } else {
            AdamW opt; // moments restart at every stage
            std::mt19937_64 rng(derive_seed(options.seed, 1000 + si));
            std::vector<std::size_t> order(data.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::size_t cursor = order.size();
            std::vector<const TrainExample*> batch(batch_size);
            const TokenId pad = vocab.specials().pad;
            for (std::uint32_t s = 0; s < stage.steps; ++s) {
                for (auto& slot : batch) {
                    if (cursor == order.size()) {
                        std::shuffle(order.begin(), order.end(), rng);
                        cursor = 0;
                    }
                    slot = &data[order[cursor++]];
                }
                StepFlags flags;
                flags.mask_text = stage.mask_text;
                flags.freeze_image = stage.freeze_image;
                flags.lr = lr_schedule(stage.peak_lr, stage.warmup_steps, stage.steps, s + 1);
                flags.lambda_image = lambda_schedule(stage.lambda_image, stage.lambda_warmup_steps, s + 1);
                flags.lambda_text = lambda_schedule(stage.lambda_text, stage.lambda_warmup_steps, s + 1);
                StepRecord rec;
                try {
                    rec = train_step(result.model, batch, flags, opt, pad);
                } catch (const Error& e) {
                    throw Error(e.code(), "stage '" + stage.name + "' step " + std::to_string(s + 1) + ": " + e.what());
                }
                rec.stage = stage.name;
                rec.global_step = ++global;
                rec.stage_step = s + 1;
                summary.masked_steps += rec.masked;
                summary.steps_with_violations += rec.mask_violations > 0;
                if (options.on_step) options.on_step(rec);
                result.log.push_back(std::move(rec));
            }
            try {
                result.model.save(summary.checkpoint);
            } catch (const Error& e) {
                throw Error(e.code(), "stage '" + stage.name + "': " + e.what());
            }
        }
        global = result.log.empty() ? global : result.log.back().global_step;
        summary.image_hash_after = image_tower_hash(result.model);
        result.stages.push_back(std::move(summary));
    }

    std::ostringstream log;
    write_train_log(log, result.log);
    binio::write_file_atomic(log_path, log.str());
    return result;
}

// ---- log files --------------------------------------------------------------

namespace {
const char* const kLogColumns[] = {"stage",       "global_step", "stage_step",   "loss",         "contrastive",
                                   "flops_image", "flops_text",  "lambda_image", "lambda_text",  "lr",
                                   "temperature", "active_image", "active_text", "masked", "mask_violations"};
}

void write_train_log(std::ostream& out, std::span<const StepRecord> log) {
    bool first = true;
    for (const char* c : kLogColumns) {
        out << (first ? "" : "\t") << c;
        first = false;
    }
    out << '\n';
    for (const auto& r : log) {
        out << r.stage << '\t' << r.global_step << '\t' << r.stage_step << '\t' << format_double(r.loss) << '\t'
            << format_double(r.contrastive) << '\t' << format_double(r.flops_image) << '\t'
            << format_double(r.flops_text) << '\t' << format_double(r.lambda_image) << '\t'
            << format_double(r.lambda_text) << '\t' << format_double(r.lr) << '\t' << format_double(r.temperature)
            << '\t' << format_double(r.active_image) << '\t' << format_double(r.active_text) << '\t'
            << (r.masked ? 1 : 0) << '\t' << r.mask_violations << '\n';
    }
}

std::vector<StepRecord> read_train_log(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw_format("train log: missing header");
    std::vector<StepRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, '\t')) f.push_back(cell);
        if (f.size() != std::size(kLogColumns)) throw_format("train log: wrong column count");
        StepRecord r;
        try {
            r.stage = f[0];
            r.global_step = static_cast<std::uint32_t>(std::stoul(f[1]));
            r.stage_step = static_cast<std::uint32_t>(std::stoul(f[2]));
            r.mask_violations = static_cast<std::uint32_t>(std::stoul(f[14]));
        } catch (const std::logic_error&) {
            throw_format("train log: bad integer field");
        }
        r.loss = parse_double(f[3]);
        r.contrastive = parse_double(f[4]);
        r.flops_image = parse_double(f[5]);
        r.flops_text = parse_double(f[6]);
        r.lambda_image = parse_double(f[7]);
        r.lambda_text = parse_double(f[8]);
        r.lr = parse_double(f[9]);
        r.temperature = parse_double(f[10]);
        r.active_image = parse_double(f[11]);
        r.active_text = parse_double(f[12]);
        r.masked = f[13] == "1";
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace stair
