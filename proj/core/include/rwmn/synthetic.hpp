#pragma once

// Synthetic story-QA tasks.
//
// needle:          one step reads "<entity> holds <attr>", all others are
//                  filler; "what does <entity> hold" asks for the attribute.
// chunk:           k consecutive steps "<entity> enters" inside filler;
//                  "who entered first" asks for the first of the window.
//                  Every candidate but one appears in exactly one window
//                  step, so no single step decides the answer.
// query_sensitive: one step reads "<entity> at <x> with <y>" inside filler;
//                  "where is <entity>" asks for x and "what has <entity>"
//                  for y. Both questions are asked about the same story and
//                  both facts are always among the candidates.
//
// Every step also carries a pseudo-visual vector: a shared offset plus one
// fixed random vector per token, so multimodal and text-only runs differ.

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "rwmn/data.hpp"

namespace rwmn {

enum class SyntheticTask : std::uint8_t { kNeedle, kChunk, kQuerySensitive };

std::string_view to_string(SyntheticTask task);
SyntheticTask parse_synthetic_task(std::string_view name);

struct SyntheticTaskConfig {
  SyntheticTask task = SyntheticTask::kNeedle;
  std::size_t min_steps = 16;
  std::size_t max_steps = 32;
  // Entities and attributes each get vocab_size / 2 tokens.
  std::size_t vocab_size = 64;
  std::size_t chunk_width = 4;
  // Filler steps draw two tokens from this many filler words.
  std::size_t filler_tokens = 1;
  // Entities that can be the subject of a needle or query_sensitive story.
  std::size_t subject_entities = 1;
  std::size_t feature_dim = 64;
  std::size_t train_count = 1000;
  std::size_t val_count = 200;
  std::size_t test_count = 200;
  std::uint64_t seed = 1;

  void validate() const;
};

// The fixed token inventory of a task config (function words, fillers,
// entities, attributes).
Vocabulary synthetic_vocabulary(const SyntheticTaskConfig& config);

// Pseudo-visual vector of one step.
std::vector<float> synthetic_visual(std::span<const std::string> tokens, std::size_t dim, std::uint64_t seed);

// Splits use disjoint story ids ("train-", "val-", "test-" prefixes).
Corpus generate_synthetic(const SyntheticTaskConfig& config);

}  // namespace rwmn
