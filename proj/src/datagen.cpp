#include "loft/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "loft/errors.hpp"
#include "loft/io.hpp"
#include "loft/par.hpp"

namespace loft::data {

// ===========================================================================
// Dataset container
// ===========================================================================

void Dataset::validate() const {
    if (H <= 0 || W <= 0) throw ShapeError("dataset has non-positive image size");
    const size_t n = static_cast<size_t>(H) * static_cast<size_t>(W);
    std::unordered_set<uint64_t> ids;
    ids.reserve(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        if (it.pixels.size() != n) {
            throw ShapeError("dataset item " + std::to_string(i) + " has " +
                             std::to_string(it.pixels.size()) + " pixels, expected " +
                             std::to_string(n));
        }
        for (float v : it.pixels) {
            if (!(v >= 0.0f && v <= 1.0f)) {
                throw ShapeError("dataset item " + std::to_string(i) +
                                 " has pixel values outside [0,1]");
            }
        }
        if (!ids.insert(it.id).second) {
            throw ShapeError("duplicate image id " + std::to_string(it.id));
        }
    }
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
    io::BinWriter bw;
    bw.magic("LFDS");
    bw.u32(1);
    bw.u32(static_cast<uint32_t>(ds.items.size()));
    bw.u32(static_cast<uint32_t>(ds.H));
    bw.u32(static_cast<uint32_t>(ds.W));
    for (const auto& it : ds.items) {
        bw.u64(it.id);
        bw.u32(it.label);
        bw.f32_array(it.pixels);
    }
    bw.save(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
    io::BinReader br = io::BinReader::open(path);
    br.expect_magic("LFDS");
    const uint32_t version = br.u32();
    if (version != 1) {
        throw FormatError(path.string() + ": unsupported dataset version " +
                          std::to_string(version));
    }
    Dataset ds;
    const uint32_t count = br.u32();
    ds.H = static_cast<int>(br.u32());
    ds.W = static_cast<int>(br.u32());
    if (ds.H <= 0 || ds.W <= 0 || ds.H > 4096 || ds.W > 4096) {
        throw FormatError(path.string() + ": implausible image size");
    }
    const size_t npix = static_cast<size_t>(ds.H) * static_cast<size_t>(ds.W);
    ds.items.resize(count);
    for (auto& it : ds.items) {
        it.id = br.u64();
        it.label = br.u32();
        it.pixels.resize(npix);
        br.f32_array(it.pixels);
    }
    br.expect_end();
    return ds;
}

void save_pgm_grid(const std::filesystem::path& path, const Dataset& ds, int columns) {
    if (columns < 1) throw ConfigError("grid needs at least one column");
    if (ds.items.empty()) throw ConfigError("cannot export an empty dataset");
    const int n = static_cast<int>(ds.items.size());
    const int rows = (n + columns - 1) / columns;
    const int W = columns * ds.W + (columns - 1);
    const int H = rows * ds.H + (rows - 1);
    std::vector<uint8_t> canvas(static_cast<size_t>(W) * static_cast<size_t>(H), 255);
    for (int i = 0; i < n; ++i) {
        const int r = i / columns;
        const int c = i % columns;
        const int y0 = r * (ds.H + 1);
        const int x0 = c * (ds.W + 1);
        const auto& px = ds.items[static_cast<size_t>(i)].pixels;
        for (int y = 0; y < ds.H; ++y) {
            for (int x = 0; x < ds.W; ++x) {
                const float v = std::clamp(px[static_cast<size_t>(y * ds.W + x)], 0.0f, 1.0f);
                canvas[static_cast<size_t>(y0 + y) * static_cast<size_t>(W) +
                       static_cast<size_t>(x0 + x)] =
                    static_cast<uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    std::string header = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    std::vector<uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), canvas.begin(), canvas.end());
    io::write_file(path, bytes);
}

}  // namespace loft::data

namespace loft::gen {

// ===========================================================================
// Renderers
// ===========================================================================

const char* shape_name(int cls) {
    static const char* names[kShapeClassCount] = {"disk",     "square", "cross",
                                                  "ring",     "triangle", "stripes"};
    if (cls < 0 || cls >= kShapeClassCount) throw ShapeError("shape class out of range");
    return names[cls];
}

namespace {

struct Geometry {
    double cx, cy, size;
};

// Coverage test for one supersample point, per shape kind.
bool covered(int cls, const Geometry& g, double px, double py) {
    const double dx = px - g.cx;
    const double dy = py - g.cy;
    switch (cls) {
        case 0: {  // disk
            return dx * dx + dy * dy <= g.size * g.size;
        }
        case 1: {  // square (axis-aligned, half-side 0.8*size)
            const double h = 0.8 * g.size;
            return std::abs(dx) <= h && std::abs(dy) <= h;
        }
        case 2: {  // cross (two bars)
            const double th = 0.35 * g.size;
            return (std::abs(dx) <= th && std::abs(dy) <= g.size) ||
                   (std::abs(dy) <= th && std::abs(dx) <= g.size);
        }
        case 3: {  // ring
            const double r2 = dx * dx + dy * dy;
            const double inner = 0.55 * g.size;
            return r2 <= g.size * g.size && r2 >= inner * inner;
        }
        case 4: {  // triangle (apex up, inscribed in the size circle)
            const double ax = g.cx, ay = g.cy - g.size;
            const double bx = g.cx - 0.866025403784 * g.size, by = g.cy + 0.5 * g.size;
            const double ccx = g.cx + 0.866025403784 * g.size, ccy = g.cy + 0.5 * g.size;
            const double s1 = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
            const double s2 = (ccx - bx) * (py - by) - (ccy - by) * (px - bx);
            const double s3 = (ax - ccx) * (py - ccy) - (ay - ccy) * (px - ccx);
            return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
        }
        case 5: {  // stripes (horizontal bands inside the size circle)
            if (dx * dx + dy * dy > g.size * g.size) return false;
            const long band = static_cast<long>(std::floor(dy / 1.1));
            return (band % 2 + 2) % 2 == 0;
        }
        default:
            throw ShapeError("shape class out of range");
    }
}

}  // namespace

Tensor render_shape(int cls, const ShapeParams& p, RngKey noise_key, int hw) {
    if (cls < 0 || cls >= kShapeClassCount) throw ShapeError("shape class out of range");
    if (!(p.size > 0.0)) throw ConfigError("shape size must be positive");
    if (!(p.intensity >= 0.0 && p.intensity <= 1.0)) {
        throw ConfigError("shape intensity must lie in [0,1]");
    }
    if (!(p.sigma >= 0.0)) throw ConfigError("noise sigma must be non-negative");

    const Geometry g{hw / 2.0 + p.cx, hw / 2.0 + p.cy, p.size};
    constexpr int kSS = 4;  // supersamples per axis
    Tensor img({hw, hw});
    RngStream noise(noise_key);
    for (int y = 0; y < hw; ++y) {
        for (int x = 0; x < hw; ++x) {
            int hits = 0;
            for (int sy = 0; sy < kSS; ++sy) {
                for (int sx = 0; sx < kSS; ++sx) {
                    const double px = x + (sx + 0.5) / kSS;
                    const double py = y + (sy + 0.5) / kSS;
                    if (covered(cls, g, px, py)) ++hits;
                }
            }
            double v = p.intensity * hits / (kSS * kSS);
            if (p.sigma > 0.0) v += p.sigma * noise.normal();
            img.data[static_cast<size_t>(y * hw + x)] =
                static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return img;
}

// ===========================================================================
// Regimes
// ===========================================================================

void RegimeConfig::check(int cls, const ShapeParams& p) const {
    if (cls < 0 || cls >= n_classes()) throw ShapeError("class out of range for regime");
    const auto& r = per_class[static_cast<size_t>(cls)];
    auto fail = [&](const char* what) {
        throw ConfigError(std::string(what) + " out of " + tag + " range for class " +
                          std::to_string(cls) + " (" + shape_name(cls) + ")");
    };
    if (!r.cx.contains(p.cx)) fail("center x offset");
    if (!r.cy.contains(p.cy)) fail("center y offset");
    if (!r.size.contains(p.size)) fail("size");
    if (!r.intensity.contains(p.intensity)) fail("intensity");
    if (!r.sigma.contains(p.sigma)) fail("noise sigma");
}

ShapeParams RegimeConfig::draw(int cls, RngStream& st) const {
    if (cls < 0 || cls >= n_classes()) throw ShapeError("class out of range for regime");
    const auto& r = per_class[static_cast<size_t>(cls)];
    auto u = [&](const Range& rr) { return rr.lo + st.uniform() * (rr.hi - rr.lo); };
    ShapeParams p;
    p.cx = u(r.cx);
    p.cy = u(r.cy);
    p.size = u(r.size);
    p.intensity = u(r.intensity);
    p.sigma = u(r.sigma);
    return p;
}

RegimeConfig RegimeConfig::pretrain() {
    RegimeConfig rc;
    rc.tag = "PRETRAIN";
    ClassRanges broad;
    broad.cx = {-3.0, 3.0};
    broad.cy = {-3.0, 3.0};
    broad.size = {2.5, 5.5};
    broad.intensity = {0.55, 1.0};
    broad.sigma = {0.02, 0.10};
    rc.per_class.assign(kShapeClassCount, broad);
    return rc;
}

RegimeConfig RegimeConfig::downstream() {
    RegimeConfig rc;
    rc.tag = "DOWNSTREAM";
    // Each class lives in its own quadrant (or edge midpoint), larger and
    // brighter than the broad-regime average, with little background noise.
    // Every range sits strictly inside the broad regime's.
    auto cell = [](double cx_lo, double cx_hi, double cy_lo, double cy_hi) {
        ClassRanges r;
        r.cx = {cx_lo, cx_hi};
        r.cy = {cy_lo, cy_hi};
        r.size = {3.5, 4.5};
        r.intensity = {0.85, 0.98};
        r.sigma = {0.025, 0.05};
        return r;
    };
    rc.per_class = {
        cell(-2.5, -1.0, -2.5, -1.0),  // disk: upper-left
        cell(1.0, 2.5, -2.5, -1.0),    // square: upper-right
        cell(-2.5, -1.0, 1.0, 2.5),    // cross: lower-left
        cell(1.0, 2.5, 1.0, 2.5),      // ring: lower-right
        cell(-0.75, 0.75, -2.5, -1.0), // triangle: top-center
        cell(-0.75, 0.75, 1.0, 2.5),   // stripes: bottom-center
    };
    return rc;
}

bool regime_strict_subset(const RegimeConfig& inner, const RegimeConfig& outer) {
    if (inner.n_classes() != outer.n_classes()) return false;
    for (int c = 0; c < inner.n_classes(); ++c) {
        const auto& i = inner.per_class[static_cast<size_t>(c)];
        const auto& o = outer.per_class[static_cast<size_t>(c)];
        if (!i.cx.strictly_inside(o.cx) || !i.cy.strictly_inside(o.cy) ||
            !i.size.strictly_inside(o.size) || !i.intensity.strictly_inside(o.intensity) ||
            !i.sigma.strictly_inside(o.sigma)) {
            return false;
        }
    }
    return true;
}

// ===========================================================================
// Dataset builders
// ===========================================================================

data::Dataset make_dataset(const RegimeConfig& regime, int n_per_class, uint64_t seed,
                           const std::string& ns, int hw) {
    if (n_per_class < 1) throw ConfigError("need at least one image per class");
    const int C = regime.n_classes();
    data::Dataset ds;
    ds.H = hw;
    ds.W = hw;
    ds.items.resize(static_cast<size_t>(C) * static_cast<size_t>(n_per_class));
    const RngKey root = RngKey::root(seed).child("shapes").child(ns).child(regime.tag);
    par::parallel_for(C * n_per_class, [&](int j) {
        const int cls = j / n_per_class;
        const int idx = j % n_per_class;
        const RngKey k = root.child(static_cast<uint64_t>(cls)).child(static_cast<uint64_t>(idx));
        RngStream ps(k.child("params"));
        const ShapeParams p = regime.draw(cls, ps);
        regime.check(cls, p);
        Tensor img = render_shape(cls, p, k.child("noise"), hw);
        auto& item = ds.items[static_cast<size_t>(j)];
        item.id = k.child("id").state;
        item.label = static_cast<uint32_t>(cls);
        item.pixels = std::move(img.data);
    });
    ds.validate();
    return ds;
}

data::Dataset make_fewshot(const data::Dataset& pool, int k, uint64_t seed) {
    if (k < 1) throw ConfigError("few-shot size must be at least 1");
    pool.validate();
    int max_label = -1;
    for (const auto& it : pool.items) max_label = std::max(max_label, static_cast<int>(it.label));
    const int C = max_label + 1;
    std::vector<std::vector<size_t>> by_class(static_cast<size_t>(C));
    for (size_t i = 0; i < pool.items.size(); ++i) {
        by_class[pool.items[i].label].push_back(i);
    }
    for (int c = 0; c < C; ++c) {
        if (static_cast<int>(by_class[static_cast<size_t>(c)].size()) < k) {
            throw ConfigError("class " + std::to_string(c) + " has only " +
                              std::to_string(by_class[static_cast<size_t>(c)].size()) +
                              " images, need " + std::to_string(k));
        }
    }
    data::Dataset out;
    out.H = pool.H;
    out.W = pool.W;
    const RngKey root = RngKey::root(seed).child("fewshot");
    for (int c = 0; c < C; ++c) {
        auto& idx = by_class[static_cast<size_t>(c)];
        RngStream st(root.child(static_cast<uint64_t>(c)));
        // Partial Fisher-Yates: the first k slots end up a uniform sample
        // without replacement.
        for (int i = 0; i < k; ++i) {
            const size_t j =
                static_cast<size_t>(i) + st.uniform_below(idx.size() - static_cast<size_t>(i));
            std::swap(idx[static_cast<size_t>(i)], idx[j]);
            out.items.push_back(pool.items[idx[static_cast<size_t>(i)]]);
        }
    }
    return out;
}

}  // namespace loft::gen
