#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvseq {

// Reserved token ids, shared by every module.
constexpr int32_t kPadId = 0;
constexpr int32_t kBosId = 1;
constexpr int32_t kEosId = 2;
constexpr int32_t kFirstContentId = 3;

// Row-major matrix of token ids.
struct IdMatrix {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<int32_t> v;

    IdMatrix() = default;
    IdMatrix(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c), kPadId) {}

    int32_t& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
    int32_t at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
    int64_t numel() const { return rows * cols; }
};

inline void check_ids_below(const IdMatrix& m, int32_t vocab, const std::string& what) {
    for (int64_t i = 0; i < m.numel(); ++i) {
        if (m.v[static_cast<size_t>(i)] < 0 || m.v[static_cast<size_t>(i)] >= vocab)
            throw std::out_of_range(what + ": token id " + std::to_string(m.v[static_cast<size_t>(i)]) +
                                    " outside vocabulary of size " + std::to_string(vocab));
    }
}

}  // namespace mvseq
