#include "cryobsn/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cryobsn {

void Volume::validate(const std::string& context) const {
    if (d <= 0 || h <= 0 || w <= 0)
        throw std::runtime_error(context + ": non-positive dimensions");
    if (spacing <= 0.0f)
        throw std::runtime_error(context + ": spacing must be > 0");
    if (data.size() != static_cast<size_t>(numel()))
        throw std::runtime_error(context + ": data length does not match dims");
    for (size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
            std::ostringstream os;
            os << context << ": non-finite value at flat index " << i;
            throw std::runtime_error(os.str());
        }
    }
}

// ---- little-endian primitives -------------------------------------------

namespace {

void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

uint32_t get_u32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

float get_f32(const unsigned char* p) {
    uint32_t bits = get_u32(p);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

std::vector<unsigned char> read_file_bytes(const std::string& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(std::string(what) + ": cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::streamoff len = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(static_cast<size_t>(len));
    if (len > 0) in.read(reinterpret_cast<char*>(bytes.data()), len);
    if (!in) throw std::runtime_error(std::string(what) + ": short read on " + path);
    return bytes;
}

} // namespace

// ---- CVOL ----------------------------------------------------------------

static constexpr char kCvolMagic[4] = {'C', 'V', 'O', 'L'};
static constexpr size_t kCvolHeader = 4 + 4 + 4 + 4 + 4 + 4;

Volume read_cvol(const std::string& path) {
    const auto bytes = read_file_bytes(path, "read_cvol");
    if (bytes.size() < kCvolHeader || std::memcmp(bytes.data(), kCvolMagic, 4) != 0)
        throw std::runtime_error("read_cvol: bad magic in " + path);
    const uint32_t version = get_u32(bytes.data() + 4);
    if (version != 1)
        throw std::runtime_error("read_cvol: unsupported version " + std::to_string(version));
    const uint32_t d = get_u32(bytes.data() + 8);
    const uint32_t h = get_u32(bytes.data() + 12);
    const uint32_t w = get_u32(bytes.data() + 16);
    const float spacing = get_f32(bytes.data() + 20);
    if (d == 0 || h == 0 || w == 0)
        throw std::runtime_error("read_cvol: zero dimension in header");
    const uint64_t n = static_cast<uint64_t>(d) * h * w;
    if (bytes.size() != kCvolHeader + n * 4) {
        std::ostringstream os;
        os << "read_cvol: truncated body in " << path << " (expected " << n
           << " values, file holds " << (bytes.size() - kCvolHeader) / 4 << ")";
        throw std::runtime_error(os.str());
    }
    Volume v(static_cast<int>(d), static_cast<int>(h), static_cast<int>(w), spacing);
    for (uint64_t i = 0; i < n; ++i)
        v.data[i] = get_f32(bytes.data() + kCvolHeader + i * 4);
    v.validate("read_cvol");
    return v;
}

void write_cvol(const Volume& v, const std::string& path) {
    v.validate("write_cvol");
    std::string out;
    out.reserve(kCvolHeader + static_cast<size_t>(v.numel()) * 4);
    out.append(kCvolMagic, 4);
    put_u32(out, 1);
    put_u32(out, static_cast<uint32_t>(v.d));
    put_u32(out, static_cast<uint32_t>(v.h));
    put_u32(out, static_cast<uint32_t>(v.w));
    put_f32(out, v.spacing);
    for (float f : v.data) put_f32(out, f);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write_cvol: cannot open " + path);
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw std::runtime_error("write_cvol: short write on " + path);
}

// ---- MRC -----------------------------------------------------------------

Volume read_mrc(const std::string& path) {
    const auto bytes = read_file_bytes(path, "read_mrc");
    if (bytes.size() < 1024)
        throw std::runtime_error("read_mrc: file shorter than the 1024-byte header");
    // MACHST (word 54, byte 212): 0x11 first byte means big-endian data.
    const unsigned char machst0 = bytes[212];
    if (machst0 == 0x11)
        throw std::runtime_error("read_mrc: big-endian MRC files are not supported");
    const uint32_t nx = get_u32(bytes.data() + 0);
    const uint32_t ny = get_u32(bytes.data() + 4);
    const uint32_t nz = get_u32(bytes.data() + 8);
    const uint32_t mode = get_u32(bytes.data() + 12);
    if (mode != 2) {
        std::ostringstream os;
        os << "read_mrc: unsupported mode " << mode << " (only mode 2 / 32-bit float)";
        throw std::runtime_error(os.str());
    }
    if (nx == 0 || ny == 0 || nz == 0 || nx > (1u << 24) || ny > (1u << 24) || nz > (1u << 24))
        throw std::runtime_error("read_mrc: implausible dimensions in header");
    const float xlen = get_f32(bytes.data() + 40); // CELLA.x
    float spacing = 1.0f;
    if (std::isfinite(xlen) && xlen > 0.0f) spacing = xlen / static_cast<float>(nx);
    const uint32_t nsymbt = get_u32(bytes.data() + 92); // extended header size
    const uint64_t n = static_cast<uint64_t>(nx) * ny * nz;
    const uint64_t body_at = 1024ull + nsymbt;
    if (bytes.size() < body_at + n * 4)
        throw std::runtime_error("read_mrc: truncated body in " + path);
    // MRC body: x fastest, then y, sections (z) slowest -> matches (d,h,w)
    Volume v(static_cast<int>(nz), static_cast<int>(ny), static_cast<int>(nx), spacing);
    for (uint64_t i = 0; i < n; ++i)
        v.data[i] = get_f32(bytes.data() + body_at + i * 4);
    v.validate("read_mrc");
    return v;
}

// ---- normalization --------------------------------------------------------

namespace {

// percentile by linear interpolation on sorted order statistics
double percentile_sorted(const std::vector<float>& sorted, double q) {
    const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return (1.0 - frac) * sorted[lo] + frac * sorted[hi];
}

} // namespace

Volume normalize(const Volume& v, NormMethod method, NormalizationRecord& rec) {
    v.validate("normalize");
    Volume out(v.d, v.h, v.w, v.spacing);
    if (method == NormMethod::percentile) {
        std::vector<float> sorted = v.data;
        std::sort(sorted.begin(), sorted.end());
        const double lo = percentile_sorted(sorted, 0.5);
        const double hi = percentile_sorted(sorted, 99.5);
        if (!(hi > lo))
            throw std::runtime_error("normalize: degenerate input (p99.5 <= p0.5)");
        rec = {NormMethod::percentile, lo, hi - lo};
        for (size_t i = 0; i < v.data.size(); ++i) {
            double x = (v.data[i] - lo) / (hi - lo);
            out.data[i] = static_cast<float>(std::clamp(x, 0.0, 1.0));
        }
    } else {
        double sum = 0.0;
        for (float f : v.data) sum += f;
        const double mean = sum / static_cast<double>(v.numel());
        double var = 0.0;
        for (float f : v.data) var += (f - mean) * (f - mean);
        var /= static_cast<double>(v.numel());
        const double sd = std::sqrt(var);
        if (!(sd > 1e-12))
            throw std::runtime_error("normalize: degenerate input (zero standard deviation)");
        rec = {NormMethod::zscore, mean, sd};
        for (size_t i = 0; i < v.data.size(); ++i)
            out.data[i] = static_cast<float>((v.data[i] - mean) / sd);
    }
    return out;
}

Volume denormalize(const Volume& v, const NormalizationRecord& rec) {
    Volume out(v.d, v.h, v.w, v.spacing);
    for (size_t i = 0; i < v.data.size(); ++i)
        out.data[i] = static_cast<float>(v.data[i] * rec.scale + rec.offset);
    return out;
}

// ---- patches ---------------------------------------------------------------

namespace {

std::vector<int> axis_origins(int dim, int patch, int stride) {
    std::vector<int> origins;
    for (int o = 0; o + patch < dim; o += stride) origins.push_back(o);
    const int last = dim - patch;
    if (origins.empty() || origins.back() != last) origins.push_back(last);
    return origins;
}

} // namespace

PatchGrid plan_patches(int d, int h, int w, int patch_size, int stride) {
    if (patch_size <= 0 || stride <= 0)
        throw std::runtime_error("plan_patches: patch_size and stride must be positive");
    if (patch_size > d || patch_size > h || patch_size > w)
        throw std::runtime_error("plan_patches: patch_size exceeds a volume dimension");
    PatchGrid grid;
    grid.patch_size = patch_size;
    grid.stride = stride;
    grid.dims[0] = d;
    grid.dims[1] = h;
    grid.dims[2] = w;
    const auto od = axis_origins(d, patch_size, stride);
    const auto oh = axis_origins(h, patch_size, stride);
    const auto ow = axis_origins(w, patch_size, stride);
    for (int z : od)
        for (int y : oh)
            for (int x : ow) grid.origins.push_back({z, y, x});
    // separable raised-cosine (Hann) taper, strictly positive inside the patch
    std::vector<double> taper(static_cast<size_t>(patch_size));
    for (int i = 0; i < patch_size; ++i) {
        const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(patch_size);
        taper[static_cast<size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * 3.141592653589793 * t);
    }
    grid.blend_weights.resize(static_cast<size_t>(patch_size) * patch_size * patch_size);
    size_t k = 0;
    for (int z = 0; z < patch_size; ++z)
        for (int y = 0; y < patch_size; ++y)
            for (int x = 0; x < patch_size; ++x)
                grid.blend_weights[k++] = taper[z] * taper[y] * taper[x];
    return grid;
}

Tensor extract_patch(const Volume& v, const std::array<int, 3>& origin, int patch_size) {
    const int P = patch_size;
    if (origin[0] < 0 || origin[1] < 0 || origin[2] < 0 || origin[0] + P > v.d ||
        origin[1] + P > v.h || origin[2] + P > v.w)
        throw std::runtime_error("extract_patch: origin out of range");
    Tensor t({1, 1, P, P, P});
    size_t k = 0;
    for (int z = 0; z < P; ++z)
        for (int y = 0; y < P; ++y)
            for (int x = 0; x < P; ++x)
                t.v[k++] = v.at(origin[0] + z, origin[1] + y, origin[2] + x);
    return t;
}

std::vector<Tensor> extract_patches(const Volume& v, const PatchGrid& grid) {
    std::vector<Tensor> out;
    out.reserve(grid.origins.size());
    for (const auto& o : grid.origins) out.push_back(extract_patch(v, o, grid.patch_size));
    return out;
}

Volume stitch_patches(const std::vector<Tensor>& patches, const PatchGrid& grid) {
    if (patches.size() != grid.origins.size())
        throw std::runtime_error("stitch_patches: patch count does not match grid");
    const int P = grid.patch_size;
    for (const auto& p : patches)
        if (!(p.shape == Shape5{1, 1, P, P, P}))
            throw std::runtime_error("stitch_patches: patch shape does not match grid (" +
                                     p.shape.str() + ")");
    Volume out(grid.dims[0], grid.dims[1], grid.dims[2]);
    std::vector<double> acc(static_cast<size_t>(out.numel()), 0.0);
    std::vector<double> wsum(static_cast<size_t>(out.numel()), 0.0);
    for (size_t pi = 0; pi < patches.size(); ++pi) {
        const auto& o = grid.origins[pi];
        const Tensor& t = patches[pi];
        size_t k = 0;
        for (int z = 0; z < P; ++z)
            for (int y = 0; y < P; ++y)
                for (int x = 0; x < P; ++x, ++k) {
                    const size_t vi = static_cast<size_t>(out.idx(o[0] + z, o[1] + y, o[2] + x));
                    acc[vi] += grid.blend_weights[k] * t.v[k];
                    wsum[vi] += grid.blend_weights[k];
                }
    }
    for (size_t i = 0; i < acc.size(); ++i) {
        if (!(wsum[i] > 0.0))
            throw std::runtime_error("stitch_patches: uncovered voxel (grid does not cover volume)");
        out.data[i] = static_cast<float>(acc[i] / wsum[i]);
    }
    return out;
}

} // namespace cryobsn
