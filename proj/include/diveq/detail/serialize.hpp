// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary I/O helpers shared by the file formats.

#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

#include "diveq/errors.hpp"

namespace diveq::detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw io_error(std::string(what) + ": truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& is, const char* what) {
    const std::uint64_t bits = get_u64(is, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace diveq::detail
