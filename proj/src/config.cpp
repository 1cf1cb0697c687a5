#include "loft/config.hpp"

#include <sstream>

#include "loft/datagen.hpp"
#include "loft/errors.hpp"
#include "loft/io.hpp"

namespace loft::cfg {

diff::DenoiserArch RunConfig::arch() const {
    diff::DenoiserArch a;
    a.image_hw = image_hw;
    a.n_classes = gen::kShapeClassCount;
    a.width = width;
    a.n_hidden = n_hidden;
    a.time_features = time_features;
    a.T = T;
    a.beta_start = beta_start;
    a.beta_end = beta_end;
    return a;
}

diff::TrainBaseConfig RunConfig::pretrain() const {
    diff::TrainBaseConfig c;
    c.steps = pretrain_steps;
    c.batch_size = pretrain_batch;
    c.lr = pretrain_lr;
    c.p_uncond = p_uncond;
    return c;
}

lora::FinetuneConfig RunConfig::finetune() const {
    lora::FinetuneConfig c;
    c.rank = rank;
    c.steps = lora_steps;
    c.lr = lora_lr;
    return c;
}

diff::GuidanceConfig RunConfig::guidance() const {
    diff::GuidanceConfig g;
    g.w = guidance_w;
    g.p_uncond = p_uncond;
    return g;
}

lora::LambdaSampler RunConfig::lambda() const { return parse_lambda(lambda_spec); }

cls::ClassifierConfig RunConfig::classifier() const {
    cls::ClassifierConfig c;
    c.input_dim = image_hw * image_hw;
    c.hidden = cls_hidden;
    c.n_classes = gen::kShapeClassCount;
    c.epochs = cls_epochs;
    c.batch_size = cls_batch;
    c.lr = cls_lr;
    return c;
}

std::string RunConfig::echo() const {
    std::ostringstream os;
    os << "pretrain_per_class = " << pretrain_per_class << "\n"
       << "pool_per_class = " << pool_per_class << "\n"
       << "test_per_class = " << test_per_class << "\n"
       << "oracle_per_class = " << oracle_per_class << "\n"
       << "image_hw = " << image_hw << "\n"
       << "width = " << width << "\n"
       << "n_hidden = " << n_hidden << "\n"
       << "time_features = " << time_features << "\n"
       << "T = " << T << "\n"
       << "beta_start = " << io::fmt_g9(beta_start) << "\n"
       << "beta_end = " << io::fmt_g9(beta_end) << "\n"
       << "pretrain_steps = " << pretrain_steps << "\n"
       << "pretrain_batch = " << pretrain_batch << "\n"
       << "pretrain_lr = " << io::fmt_g9(pretrain_lr) << "\n"
       << "p_uncond = " << io::fmt_g9(p_uncond) << "\n"
       << "rank = " << rank << "\n"
       << "lora_steps = " << lora_steps << "\n"
       << "lora_lr = " << io::fmt_g9(lora_lr) << "\n"
       << "guidance_w = " << io::fmt_g9(guidance_w) << "\n"
       << "lambda = " << lambda_spec << "\n"
       << "s_per_class = " << s_per_class << "\n"
       << "k_shots = " << k_shots << "\n"
       << "cls_epochs = " << cls_epochs << "\n"
       << "cls_batch = " << cls_batch << "\n"
       << "cls_lr = " << io::fmt_g9(cls_lr) << "\n"
       << "cls_hidden = " << cls_hidden << "\n";
    os << "seeds = [";
    for (size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
    os << "]\n";
    os << "out_root = " << out_root << "\n";
    return os.str();
}

RunConfig from_echo(const std::string& text) {
    RunConfig rc;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("bad echo line '" + line + "'");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "pretrain_per_class") rc.pretrain_per_class = std::stoi(val);
            else if (key == "pool_per_class") rc.pool_per_class = std::stoi(val);
            else if (key == "test_per_class") rc.test_per_class = std::stoi(val);
            else if (key == "oracle_per_class") rc.oracle_per_class = std::stoi(val);
            else if (key == "image_hw") rc.image_hw = std::stoi(val);
            else if (key == "width") rc.width = std::stoi(val);
            else if (key == "n_hidden") rc.n_hidden = std::stoi(val);
            else if (key == "time_features") rc.time_features = std::stoi(val);
            else if (key == "T") rc.T = std::stoi(val);
            else if (key == "beta_start") rc.beta_start = std::stod(val);
            else if (key == "beta_end") rc.beta_end = std::stod(val);
            else if (key == "pretrain_steps") rc.pretrain_steps = std::stol(val);
            else if (key == "pretrain_batch") rc.pretrain_batch = std::stoi(val);
            else if (key == "pretrain_lr") rc.pretrain_lr = std::stod(val);
            else if (key == "p_uncond") rc.p_uncond = std::stod(val);
            else if (key == "rank") rc.rank = std::stoi(val);
            else if (key == "lora_steps") rc.lora_steps = std::stol(val);
            else if (key == "lora_lr") rc.lora_lr = std::stod(val);
            else if (key == "guidance_w") rc.guidance_w = std::stod(val);
            else if (key == "lambda") rc.lambda_spec = val;
            else if (key == "s_per_class") rc.s_per_class = std::stoi(val);
            else if (key == "k_shots") rc.k_shots = std::stoi(val);
            else if (key == "cls_epochs") rc.cls_epochs = std::stol(val);
            else if (key == "cls_batch") rc.cls_batch = std::stoi(val);
            else if (key == "cls_lr") rc.cls_lr = std::stod(val);
            else if (key == "cls_hidden") rc.cls_hidden = std::stoi(val);
            else if (key == "out_root") rc.out_root = val;
            else if (key == "seeds") {
                if (val.size() < 2 || val.front() != '[' || val.back() != ']')
                    throw ConfigError("bad seed list '" + val + "'");
                rc.seeds.clear();
                std::string part;
                std::istringstream is(val.substr(1, val.size() - 2));
                while (std::getline(is, part, ',')) rc.seeds.push_back(std::stoull(trim(part)));
            } else {
                throw ConfigError("unknown configuration key '" + key + "'");
            }
        } catch (const std::invalid_argument&) {
            throw ConfigError("bad value for '" + key + "': '" + val + "'");
        } catch (const std::out_of_range&) {
            throw ConfigError("bad value for '" + key + "': '" + val + "'");
        }
    }
    return rc;
}

lora::LambdaSampler parse_lambda(const std::string& spec) {
    lora::LambdaSampler s;
    const auto colon = spec.find(':');
    const std::string head = spec.substr(0, colon);
    const std::string rest = colon == std::string::npos ? "" : spec.substr(colon + 1);
    try {
        if (head == "fixed") {
            s.kind = lora::LambdaSampler::Kind::Fixed;
            s.lambda = std::stod(rest);
        } else if (head == "beta") {
            s.kind = lora::LambdaSampler::Kind::Beta;
            s.alpha = std::stod(rest);
        } else if (head == "vec") {
            s.kind = lora::LambdaSampler::Kind::Explicit;
            s.vec.clear();
            std::string part;
            std::istringstream is(rest);
            while (std::getline(is, part, ',')) s.vec.push_back(std::stod(part));
        } else {
            throw ConfigError("unknown lambda sampler '" + head +
                              "' (expected fixed:L, beta:A, or vec:w1,w2,...)");
        }
    } catch (const std::invalid_argument&) {
        throw ConfigError("bad number in lambda spec '" + spec + "'");
    } catch (const std::out_of_range&) {
        throw ConfigError("bad number in lambda spec '" + spec + "'");
    }
    s.validate();
    return s;
}

}  // namespace loft::cfg
