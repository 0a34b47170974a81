#pragma once

#include <string>
#include <vector>

#include "dvfa/codec.hpp"

namespace dvfa::srt {

struct Cue {
    int index = 0;
    double start_ms = 0;
    double end_ms = 0;  // exclusive
    std::string text;
};

std::string format_timestamp(double ms);  // HH:MM:SS,mmm
double parse_timestamp(const std::string& text);

// One cue per aligned word, sequential 1-based indices; absent words are
// skipped and flags are appended in brackets after the word.
std::vector<Cue> cues_from_alignment(const codec::AlignmentOutput& alignment);

std::string write_srt(const std::vector<Cue>& cues);
std::vector<Cue> parse_srt(const std::string& text);

}  // namespace dvfa::srt
