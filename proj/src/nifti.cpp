// NIfTI-1 single-file reader/writer (.nii, .nii.gz).
#include "aegan/error.hpp"
#include "aegan/volume.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

namespace aegan {

namespace fs = std::filesystem;

namespace {

constexpr int kHeaderSize = 348;
constexpr int kDataOffset = 352;

enum NiftiType : std::int16_t {
    kUint8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
    kUint16 = 512,
};

template <typename T>
T read_at(const std::vector<unsigned char>& buf, std::size_t offset) {
    T v;
    std::memcpy(&v, buf.data() + offset, sizeof(T));
    return v;
}

template <typename T>
void write_at(std::vector<unsigned char>& buf, std::size_t offset, T v) {
    std::memcpy(buf.data() + offset, &v, sizeof(T));
}

std::vector<unsigned char> read_all(const fs::path& path) {
    // gzread passes uncompressed files through unchanged.
    std::unique_ptr<gzFile_s, decltype(&gzclose)> f(gzopen(path.c_str(), "rb"), &gzclose);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<unsigned char> out;
    unsigned char chunk[1 << 16];
    for (;;) {
        const int n = gzread(f.get(), chunk, sizeof(chunk));
        if (n < 0) throw IoError("decompression failed for " + path.string());
        if (n == 0) break;
        out.insert(out.end(), chunk, chunk + n);
    }
    return out;
}

// "drf=<int>;id=<text>"
void parse_description(const std::string& text, Volume& v) {
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find(';', pos);
        if (end == std::string::npos) end = text.size();
        const std::string field = text.substr(pos, end - pos);
        if (field.rfind("drf=", 0) == 0) {
            try {
                v.drf = DoseLevel(std::stoi(field.substr(4)));
            } catch (const std::logic_error&) {
                throw IoError("bad drf field in NIfTI description: " + field);
            }
        } else if (field.rfind("id=", 0) == 0) {
            v.id = field.substr(3);
        }
        pos = end + 1;
    }
}

} // namespace

Volume load_nifti(const fs::path& path) {
    const auto buf = read_all(path);
    if (buf.size() < kHeaderSize) throw IoError("truncated NIfTI header in " + path.string());
    if (read_at<std::int32_t>(buf, 0) != kHeaderSize)
        throw IoError("unsupported NIfTI header (byte-swapped or not NIfTI-1): " + path.string());
    if (std::memcmp(buf.data() + 344, "n+1", 4) != 0) throw IoError("not a single-file NIfTI-1: " + path.string());

    const auto ndim = read_at<std::int16_t>(buf, 40);
    if (ndim < 1 || ndim > 7) throw IoError("bad NIfTI dimension count in " + path.string());
    Index dims[3] = {1, 1, 1};
    for (int d = 0; d < std::min<int>(ndim, 3); ++d) dims[d] = read_at<std::int16_t>(buf, 42 + 2 * d);
    for (int d = 3; d < ndim; ++d)
        if (read_at<std::int16_t>(buf, 42 + 2 * d) > 1) throw IoError("only 3-D NIfTI volumes are supported");

    const auto datatype = read_at<std::int16_t>(buf, 70);
    const auto vox_offset = static_cast<std::size_t>(read_at<float>(buf, 108));
    float slope = read_at<float>(buf, 112);
    const float inter = read_at<float>(buf, 116);
    if (slope == 0.0f) slope = 1.0f;

    Volume v;
    v.shape = Extent3{dims[0], dims[1], dims[2]};
    if (v.shape.x < 1 || v.shape.y < 1 || v.shape.z < 1) throw ValidationError("empty shape in " + path.string());
    for (int d = 0; d < 3; ++d) {
        const float p = read_at<float>(buf, 80 + 4 * d);
        v.spacing[d] = d < ndim ? static_cast<double>(p) : 1.0;
    }
    char descrip[81] = {};
    std::memcpy(descrip, buf.data() + 148, 80);
    parse_description(descrip, v);

    const Index n = v.shape.volume();
    v.voxels.resize(n);
    auto convert = [&]<typename T>(T) {
        if (vox_offset + n * sizeof(T) > buf.size()) throw IoError("truncated NIfTI payload in " + path.string());
        for (Index i = 0; i < n; ++i) {
            const double raw = static_cast<double>(read_at<T>(buf, vox_offset + i * sizeof(T)));
            v.voxels[i] = static_cast<float>(raw * slope + inter);
        }
    };
    switch (datatype) {
    case kUint8: convert(std::uint8_t{}); break;
    case kInt16: convert(std::int16_t{}); break;
    case kInt32: convert(std::int32_t{}); break;
    case kUint16: convert(std::uint16_t{}); break;
    case kFloat64: convert(double{}); break;
    case kFloat32:
        if (slope == 1.0f && inter == 0.0f) {
            if (vox_offset + n * sizeof(float) > buf.size()) throw IoError("truncated NIfTI payload in " + path.string());
            std::memcpy(v.voxels.data(), buf.data() + vox_offset, n * sizeof(float));
        } else {
            convert(float{});
        }
        break;
    default: throw IoError("unsupported NIfTI datatype " + std::to_string(datatype) + " in " + path.string());
    }
    v.validate();
    return v;
}

void save_nifti(const Volume& v, const fs::path& path) {
    if (v.shape.x > 32767 || v.shape.y > 32767 || v.shape.z > 32767)
        throw IoError("volume too large for NIfTI-1 dimensions");
    const std::size_t payload = static_cast<std::size_t>(v.voxels.size()) * sizeof(float);
    std::vector<unsigned char> buf(kDataOffset + payload, 0);

    write_at<std::int32_t>(buf, 0, kHeaderSize);
    buf[38] = 'r'; // regular
    write_at<std::int16_t>(buf, 40, 3);
    write_at<std::int16_t>(buf, 42, static_cast<std::int16_t>(v.shape.x));
    write_at<std::int16_t>(buf, 44, static_cast<std::int16_t>(v.shape.y));
    write_at<std::int16_t>(buf, 46, static_cast<std::int16_t>(v.shape.z));
    for (int d = 3; d < 7; ++d) write_at<std::int16_t>(buf, 42 + 2 * d, 1);
    write_at<std::int16_t>(buf, 70, kFloat32);
    write_at<std::int16_t>(buf, 72, 32);
    write_at<float>(buf, 76, 1.0f); // qfac
    for (int d = 0; d < 3; ++d) write_at<float>(buf, 80 + 4 * d, static_cast<float>(v.spacing[d]));
    write_at<float>(buf, 108, static_cast<float>(kDataOffset));
    write_at<float>(buf, 112, 1.0f);
    buf[123] = 10; // xyzt_units: mm, s

    std::string descrip = "drf=" + std::to_string(v.drf.value()) + ";id=" + v.id;
    if (descrip.size() > 79) descrip.resize(79);
    std::memcpy(buf.data() + 148, descrip.data(), descrip.size());

    // sform: scaled identity, so pixdim and the affine agree.
    write_at<std::int16_t>(buf, 254, 1);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            write_at<float>(buf, 280 + 16 * r + 4 * c, r == c ? static_cast<float>(v.spacing[r]) : 0.0f);
    std::memcpy(buf.data() + 344, "n+1", 4);
    std::memcpy(buf.data() + kDataOffset, v.voxels.data(), payload);

    if (format_from_path(path) == VolumeFormat::NiftiGz) {
        std::unique_ptr<gzFile_s, decltype(&gzclose)> f(gzopen(path.c_str(), "wb"), &gzclose);
        if (!f) throw IoError("cannot write " + path.string());
        std::size_t done = 0;
        while (done < buf.size()) {
            const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(buf.size() - done, 1u << 30));
            if (gzwrite(f.get(), buf.data() + done, chunk) != static_cast<int>(chunk))
                throw IoError("compression failed for " + path.string());
            done += chunk;
        }
        if (gzclose(f.release()) != Z_OK) throw IoError("write failed for " + path.string());
    } else {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("write failed for " + path.string());
    }
}

} // namespace aegan
