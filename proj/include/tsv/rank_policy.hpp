#pragma once

#include <cstdint>
#include <string>

namespace tsv {

/// How many singular components to keep for a d×m layer.
///
///   Fraction(f)  k = max(1, floor(f · min(d, m))),  0 < f <= 1
///   PerTask(T)   same with f = 1/T
///   Explicit(k)  fixed k, must satisfy 1 <= k <= min(d, m)
///   Full         k = min(d, m)
struct RankPolicy {
    enum class Kind { Fraction, PerTask, Explicit, Full };

    Kind kind = Kind::Full;
    double fraction = 1.0;
    int tasks = 1;
    std::int64_t rank = 0;

    static RankPolicy Fraction(double f);
    static RankPolicy PerTask(int tasks);
    static RankPolicy Explicit(std::int64_t k);
    static RankPolicy FullRank();

    /// Throws InvalidArgument when the policy cannot produce a valid rank.
    std::int64_t rank_for(std::int64_t d, std::int64_t m) const;

    /// "fraction:0.1", "per-task:8", "rank:16" or "full"; parse() inverts it.
    std::string to_string() const;
    static RankPolicy parse(const std::string& text);

    bool operator==(const RankPolicy&) const = default;
};

}  // namespace tsv
