#pragma once

#include <array>
#include <cstddef>
#include <string_view>

namespace prime {

/// Fixed order I, R, T everywhere, including fused-sequence concatenation.
enum class Modality : std::size_t { Image = 0, Rna = 1, Text = 2 };

inline constexpr std::size_t kNumModalities = 3;
inline constexpr std::array<Modality, kNumModalities> kModalities{Modality::Image, Modality::Rna,
                                                                  Modality::Text};

constexpr std::size_t index(Modality m) noexcept { return static_cast<std::size_t>(m); }

constexpr char letter(Modality m) noexcept {
    constexpr char letters[] = {'I', 'R', 'T'};
    return letters[index(m)];
}

constexpr std::string_view name(Modality m) noexcept {
    constexpr std::string_view names[] = {"image", "rna", "text"};
    return names[index(m)];
}

/// Per-modality availability flags a_{i,m}.
using Availability = std::array<bool, kNumModalities>;

inline constexpr Availability kAllAvailable{true, true, true};

constexpr std::size_t count(const Availability& a) noexcept {
    return static_cast<std::size_t>(a[0]) + a[1] + a[2];
}

constexpr Availability intersect(const Availability& a, const Availability& b) noexcept {
    return {a[0] && b[0], a[1] && b[1], a[2] && b[2]};
}

} // namespace prime
