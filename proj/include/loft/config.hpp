#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loft/diffusion.hpp"
#include "loft/downstream.hpp"
#include "loft/lora.hpp"

namespace loft::cfg {

// Every knob of the pipeline in one flat record. Defaults are the paper-style
// settings used throughout: rank 2, lr 1e-3 with cosine decay, guidance 2.0,
// equal-weight fusion (lambda 0.5), 16 shots as the headline few-shot size.
struct RunConfig {
    // Shape corpus sizes (per class).
    int pretrain_per_class = 400;
    int pool_per_class = 200;    // downstream few-shot pool
    int test_per_class = 200;    // held-out downstream test split
    int oracle_per_class = 500;  // judge training set

    // Denoiser architecture + schedule.
    int image_hw = 16;
    int width = 256;
    int n_hidden = 3;
    int time_features = 32;
    int T = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    // Base-model training.
    long pretrain_steps = 3000;
    int pretrain_batch = 32;
    double pretrain_lr = 1e-3;
    double p_uncond = 0.1;

    // Adapter fine-tuning.
    int rank = 2;
    long lora_steps = 300;
    double lora_lr = 1e-3;

    // Generation.
    double guidance_w = 2.0;
    std::string lambda_spec = "fixed:0.5";
    int s_per_class = 50;
    int k_shots = 16;

    // Downstream classifier.
    long cls_epochs = 40;
    int cls_batch = 64;
    double cls_lr = 1e-3;
    int cls_hidden = 128;

    std::vector<uint64_t> seeds = {1, 2, 3};
    std::string out_root = "runs";

    // Derived component configs.
    diff::DenoiserArch arch() const;
    diff::TrainBaseConfig pretrain() const;
    lora::FinetuneConfig finetune() const;
    diff::GuidanceConfig guidance() const;
    lora::LambdaSampler lambda() const;
    cls::ClassifierConfig classifier() const;

    // Deterministic key=value echo, one field per line; the configuration
    // block of every run manifest, and the input to stage cache keys.
    std::string echo() const;
};

// "fixed:0.5" | "beta:5" | "vec:0.5,0.25,0.25"
lora::LambdaSampler parse_lambda(const std::string& spec);

// Inverse of RunConfig::echo(): rebuild a configuration from its echo text.
// Unknown keys are an error, so the echo and this parser cannot drift apart
// silently. Used to re-open an experiment directory with the exact settings
// that produced its cache.
RunConfig from_echo(const std::string& text);

}  // namespace loft::cfg
