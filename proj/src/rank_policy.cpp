#include "tsv/rank_policy.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tsv/errors.hpp"

namespace tsv {

RankPolicy RankPolicy::Fraction(double f) {
    if (!(f > 0.0 && f <= 1.0)) throw InvalidArgument("rank fraction must lie in (0, 1], got " + std::to_string(f));
    RankPolicy p;
    p.kind = Kind::Fraction;
    p.fraction = f;
    return p;
}

RankPolicy RankPolicy::PerTask(int tasks) {
    if (tasks < 1) throw InvalidArgument("per-task rank policy needs T >= 1, got " + std::to_string(tasks));
    RankPolicy p;
    p.kind = Kind::PerTask;
    p.tasks = tasks;
    return p;
}

RankPolicy RankPolicy::Explicit(std::int64_t k) {
    if (k < 1) throw InvalidArgument("explicit rank must be >= 1, got " + std::to_string(k));
    RankPolicy p;
    p.kind = Kind::Explicit;
    p.rank = k;
    return p;
}

RankPolicy RankPolicy::FullRank() {
    return RankPolicy{};
}

std::int64_t RankPolicy::rank_for(std::int64_t d, std::int64_t m) const {
    const std::int64_t full = std::min(d, m);
    if (full < 1) throw InvalidArgument("rank policy applied to an empty layer");
    switch (kind) {
    case Kind::Full:
        return full;
    case Kind::Fraction:
        // the small slack keeps e.g. 0.29 * 100 from flooring to 28
        return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(fraction * full + 1e-9)));
    case Kind::PerTask:
        return std::max<std::int64_t>(1, full / tasks);
    case Kind::Explicit:
        if (rank > full) {
            throw InvalidArgument("rank " + std::to_string(rank) + " exceeds min(d, m) = " + std::to_string(full));
        }
        return rank;
    }
    return full;
}

std::string RankPolicy::to_string() const {
    std::ostringstream os;
    switch (kind) {
    case Kind::Full: os << "full"; break;
    case Kind::Fraction: os << "fraction:" << fraction; break;
    case Kind::PerTask: os << "per-task:" << tasks; break;
    case Kind::Explicit: os << "rank:" << rank; break;
    }
    return os.str();
}

RankPolicy RankPolicy::parse(const std::string& text) {
    if (text == "full") return FullRank();
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw InvalidArgument("cannot parse rank policy '" + text + "'");
    const std::string kind = text.substr(0, colon);
    const std::string value = text.substr(colon + 1);
    try {
        if (kind == "fraction") return Fraction(std::stod(value));
        if (kind == "per-task") return PerTask(std::stoi(value));
        if (kind == "rank") return Explicit(std::stoll(value));
    } catch (const std::logic_error&) {
        throw InvalidArgument("cannot parse rank policy '" + text + "'");
    }
    throw InvalidArgument("cannot parse rank policy '" + text + "'");
}

}  // namespace tsv
