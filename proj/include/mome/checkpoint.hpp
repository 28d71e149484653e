#pragma once

#include <string>

#include "mome/binio.hpp"
#include "mome/model.hpp"

namespace mome {

// Sectioned binary container: magic "MOME", u16 version, serialized config,
// then named parameter blobs (name, frozen flag byte, rank, u32 dims, f64
// payload), all little-endian.
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ModelState& state) {
    auto out = open_output(path);
    ByteWriter w(out);
    w.bytes("MOME", 4);
    w.u16(kCheckpointVersion);
    state.config().serialize(w);
    w.u32(static_cast<std::uint32_t>(state.params().size()));
    for (const Param& p : state.params()) {
        w.str(p.name);
        w.u8(p.frozen ? 1 : 0);
        w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
        for (std::size_t d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (double v : p.tensor.values()) w.f64(v);
    }
    if (!out) throw DataError("write failed: " + path);
}

inline ModelState load_checkpoint(const std::string& path) {
    auto in = open_input(path);
    ByteReader r(in, path);
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::string(magic, 4) != "MOME") r.fail("bad magic, expected MOME");
    const std::uint16_t version = r.u16("version");
    if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    MomeConfig cfg = MomeConfig::deserialize(r);
    cfg.validate();
    ModelState state(cfg);
    const std::uint32_t count = r.u32("parameter count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str("parameter name");
        const bool frozen = r.u8("frozen flag") != 0;
        const std::uint32_t rank = r.u32("parameter rank");
        if (rank > 8) r.fail("implausible rank for " + name);
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = r.u32("parameter dim");
            n *= d;
        }
        if (n > (1u << 28)) r.fail("implausible parameter size for " + name);
        std::vector<double> data(n);
        for (double& v : data) v = r.f64("parameter data");
        state.add(name, Tensor(std::move(shape), std::move(data)), frozen);
    }
    r.expect_eof();
    return state;
}

}  // namespace mome
