#include "dvfa/srt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace dvfa::srt {

std::string format_timestamp(double ms) {
    if (ms < 0) throw DataError("srt: negative timestamp");
    const long long total = static_cast<long long>(std::llround(ms));
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%02lld:%02lld:%02lld,%03lld", total / 3600000,
                  (total / 60000) % 60, (total / 1000) % 60, total % 1000);
    return buf;
}

double parse_timestamp(const std::string& text) {
    int h = 0, m = 0, s = 0, ms = 0;
    if (std::sscanf(text.c_str(), "%d:%d:%d,%d", &h, &m, &s, &ms) != 4)
        throw DataError("srt: bad timestamp '" + text + "'");
    if (h < 0 || m < 0 || m > 59 || s < 0 || s > 59 || ms < 0 || ms > 999)
        throw DataError("srt: timestamp out of range '" + text + "'");
    return ((h * 60.0 + m) * 60.0 + s) * 1000.0 + ms;
}

std::vector<Cue> cues_from_alignment(const codec::AlignmentOutput& alignment) {
    std::vector<Cue> cues;
    int index = 1;
    for (const auto& w : alignment.words) {
        if (std::find(w.flags.begin(), w.flags.end(), "absent") != w.flags.end()) continue;
        Cue c;
        c.index = index++;
        c.start_ms = w.start_ms;
        c.end_ms = w.end_ms;
        c.text = w.word;
        for (const auto& f : w.flags) c.text += " [" + f + "]";
        cues.push_back(std::move(c));
    }
    return cues;
}

std::string write_srt(const std::vector<Cue>& cues) {
    std::ostringstream out;
    for (std::size_t i = 0; i < cues.size(); ++i) {
        const auto& c = cues[i];
        out << (i + 1) << '\n'
            << format_timestamp(c.start_ms) << " --> " << format_timestamp(c.end_ms) << '\n'
            << c.text << '\n'
            << '\n';
    }
    return out.str();
}

std::vector<Cue> parse_srt(const std::string& text) {
    std::vector<Cue> cues;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) continue;
        Cue c;
        try {
            c.index = std::stoi(line);
        } catch (const std::exception&) {
            throw DataError("srt: expected cue index, got '" + line + "'");
        }
        if (!std::getline(in, line)) throw DataError("srt: truncated cue");
        while (!line.empty() && line.back() == '\r') line.pop_back();
        const auto arrow = line.find(" --> ");
        if (arrow == std::string::npos) throw DataError("srt: missing timing line");
        c.start_ms = parse_timestamp(line.substr(0, arrow));
        c.end_ms = parse_timestamp(line.substr(arrow + 5));
        if (c.end_ms <= c.start_ms) throw DataError("srt: cue ends before it starts");
        std::string cue_text;
        while (std::getline(in, line)) {
            while (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) break;
            if (!cue_text.empty()) cue_text += '\n';
            cue_text += line;
        }
        if (cue_text.empty()) throw DataError("srt: cue without text");
        c.text = std::move(cue_text);
        cues.push_back(std::move(c));
    }
    return cues;
}

}  // namespace dvfa::srt
