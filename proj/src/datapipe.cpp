#include "arns/datapipe.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace arns {

namespace {

int next_pnm_token(std::istream& in, const std::filesystem::path& path) {
    // Skips whitespace and '#' comments, returns the next integer token.
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) {
        throw std::runtime_error("malformed PNM header in " + path.string());
    }
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = in.get();
    }
    return value;
}

double clamp255(double v) { return v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v); }

}  // namespace

RasterImage read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image file " + path.string());
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    int channels = 0;
    if (m0 == 'P' && m1 == '6') {
        channels = 3;
    } else if (m0 == 'P' && m1 == '5') {
        channels = 1;
    } else {
        throw std::runtime_error("unsupported image format in " + path.string() + " (expected binary PPM/PGM)");
    }
    const int width = next_pnm_token(in, path);
    const int height = next_pnm_token(in, path);
    const int maxval = next_pnm_token(in, path);
    if (width < 1 || height < 1) throw std::runtime_error("bad image dimensions in " + path.string());
    if (maxval != 255) throw std::runtime_error("unsupported maxval " + std::to_string(maxval) + " in " + path.string());

    RasterImage img(width, height, channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw std::runtime_error("truncated pixel data in " + path.string());
    }
    return img;
}

void write_pnm(const std::filesystem::path& path, const RasterImage& image) {
    if (image.channels != 1 && image.channels != 3) {
        throw std::invalid_argument("write_pnm: channels must be 1 or 3");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << (image.channels == 3 ? "P6" : "P5") << "\n" << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor<double> image_to_tensor(const RasterImage& image) {
    Tensor<double> t(Shape{image.channels, image.height, image.width});
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < image.channels; ++c) {
                t(c, y, x) = static_cast<double>(image.at(y, x, c));
            }
        }
    }
    return t;
}

Tensor<double> resize_bilinear(const Tensor<double>& chw, int target_size) {
    if (chw.rank() != 3) throw std::invalid_argument("resize_bilinear: expected rank-3 tensor");
    const int C = chw.extent(0), H = chw.extent(1), W = chw.extent(2);
    if (H == target_size && W == target_size) return chw;
    Tensor<double> out(Shape{C, target_size, target_size});
    const double sy = static_cast<double>(H) / target_size;
    const double sx = static_cast<double>(W) / target_size;
    for (int y = 0; y < target_size; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        if (fy < 0) fy = 0;
        if (fy > H - 1) fy = H - 1;
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, H - 1);
        const double dy = fy - y0;
        for (int x = 0; x < target_size; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            if (fx < 0) fx = 0;
            if (fx > W - 1) fx = W - 1;
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, W - 1);
            const double dx = fx - x0;
            for (int c = 0; c < C; ++c) {
                const double top = (1.0 - dx) * chw(c, y0, x0) + dx * chw(c, y0, x1);
                const double bot = (1.0 - dx) * chw(c, y1, x0) + dx * chw(c, y1, x1);
                out(c, y, x) = (1.0 - dy) * top + dy * bot;
            }
        }
    }
    return out;
}

RasterImage resize_nearest(const RasterImage& image, int target_size) {
    if (image.height == target_size && image.width == target_size) return image;
    RasterImage out(target_size, target_size, image.channels);
    for (int y = 0; y < target_size; ++y) {
        const int sy = std::min(image.height - 1,
                                static_cast<int>((y + 0.5) * image.height / target_size));
        for (int x = 0; x < target_size; ++x) {
            const int sx = std::min(image.width - 1,
                                    static_cast<int>((x + 0.5) * image.width / target_size));
            for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
        }
    }
    return out;
}

DatasetManifest load_manifest(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open manifest " + file.string());
    DatasetManifest m;
    m.dir = file.parent_path();
    std::string line;
    bool have_means = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ls(line);
            std::string tag;
            ls >> tag;
            if (tag == "#means") {
                if (!(ls >> m.channel_means[0] >> m.channel_means[1] >> m.channel_means[2])) {
                    throw std::runtime_error("malformed #means line in " + file.string());
                }
                have_means = true;
            }
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw std::runtime_error("manifest line missing tab separator in " + file.string() + ": " + line);
        }
        m.entries.push_back(ManifestEntry{line.substr(0, tab), line.substr(tab + 1)});
    }
    if (m.entries.empty()) throw std::runtime_error("manifest " + file.string() + " lists no samples");
    if (!have_means) throw std::runtime_error("manifest " + file.string() + " is missing the #means header");
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        if (!std::filesystem::exists(m.image_path(i))) {
            throw std::runtime_error("manifest entry missing on disk: " + m.image_path(i).string());
        }
        if (!std::filesystem::exists(m.mask_path(i))) {
            throw std::runtime_error("manifest entry missing on disk: " + m.mask_path(i).string());
        }
    }
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + file.string() + " for writing");
    char buf[128];
    std::snprintf(buf, sizeof(buf), "#means %.17g %.17g %.17g\n", manifest.channel_means[0],
                  manifest.channel_means[1], manifest.channel_means[2]);
    out << buf;
    for (const ManifestEntry& e : manifest.entries) out << e.image << '\t' << e.mask << '\n';
    if (!out) throw std::runtime_error("failed writing " + file.string());
}

namespace {

struct ShapeSpec {
    SynthShape type;
    // ellipse: center + radii; rectangle: origin + extents; triangle: vertices
    double a0, a1, b0, b1, c0, c1;
    std::array<std::uint8_t, 3> color;

    bool contains(double px, double py) const {
        switch (type) {
            case SynthShape::ellipse: {
                const double u = (px - a0) / b0, v = (py - a1) / b1;
                return u * u + v * v <= 1.0;
            }
            case SynthShape::rectangle:
                return px >= a0 && px < a0 + b0 && py >= a1 && py < a1 + b1;
            case SynthShape::triangle: {
                auto cross = [](double ox, double oy, double x1, double y1, double x2, double y2) {
                    return (x1 - ox) * (y2 - oy) - (y1 - oy) * (x2 - ox);
                };
                const double d1 = cross(a0, a1, b0, b1, px, py);
                const double d2 = cross(b0, b1, c0, c1, px, py);
                const double d3 = cross(c0, c1, a0, a1, px, py);
                const bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
                const bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
                return !(has_neg && has_pos);
            }
        }
        return false;
    }
};

ShapeSpec draw_shape(std::mt19937_64& rng, int size, const std::array<double, 3>& bg_base) {
    std::uniform_int_distribution<int> type_dist(0, 2);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double s = static_cast<double>(size);

    ShapeSpec spec{};
    spec.type = static_cast<SynthShape>(type_dist(rng));
    switch (spec.type) {
        case SynthShape::ellipse: {
            spec.a0 = (0.25 + 0.5 * unit(rng)) * s;
            spec.a1 = (0.25 + 0.5 * unit(rng)) * s;
            spec.b0 = (0.10 + 0.20 * unit(rng)) * s;
            spec.b1 = (0.10 + 0.20 * unit(rng)) * s;
            break;
        }
        case SynthShape::rectangle: {
            const double w = (0.18 + 0.27 * unit(rng)) * s;
            const double h = (0.18 + 0.27 * unit(rng)) * s;
            spec.a0 = 0.03 * s + unit(rng) * (0.94 * s - w);
            spec.a1 = 0.03 * s + unit(rng) * (0.94 * s - h);
            spec.b0 = w;
            spec.b1 = h;
            break;
        }
        case SynthShape::triangle: {
            const double cx = (0.25 + 0.5 * unit(rng)) * s;
            const double cy = (0.25 + 0.5 * unit(rng)) * s;
            const double r = (0.16 + 0.22 * unit(rng)) * s;
            const double theta = unit(rng) * 2.0 * 3.14159265358979323846;
            const double j1 = (unit(rng) - 0.5);
            const double j2 = (unit(rng) - 0.5);
            const double t1 = theta + 2.0943951023931953 + j1;  // 2π/3 apart, jittered
            const double t2 = theta + 4.1887902047863905 + j2;
            spec.a0 = cx + r * std::cos(theta);
            spec.a1 = cy + r * std::sin(theta);
            spec.b0 = cx + r * std::cos(t1);
            spec.b1 = cy + r * std::sin(t1);
            spec.c0 = cx + r * std::cos(t2);
            spec.c1 = cy + r * std::sin(t2);
            break;
        }
    }
    // High-contrast fill: pushed at least 80 intensity levels away from the
    // background base, per channel.
    for (int c = 0; c < 3; ++c) {
        const double base = bg_base[static_cast<std::size_t>(c)];
        double lo, hi;
        if (base < 128.0) {
            lo = base + 80.0;
            hi = 255.0;
        } else {
            lo = 0.0;
            hi = base - 80.0;
        }
        spec.color[static_cast<std::size_t>(c)] =
            static_cast<std::uint8_t>(std::lround(lo + unit(rng) * (hi - lo)));
    }
    return spec;
}

}  // namespace

SynthSample synth_sample(std::mt19937_64& rng, int size) {
    if (size < 16) throw std::invalid_argument("synth_sample: size must be >= 16");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> count_dist(1, 3);

    for (int attempt = 0; attempt < 1000; ++attempt) {
        // Value-noise background: a coarse random lattice of per-channel
        // offsets, bilinearly interpolated across the image.
        std::array<double, 3> bg_base{};
        for (double& b : bg_base) b = 45.0 + unit(rng) * 165.0;
        const int cells = std::max(2, size / 16);
        std::vector<std::array<double, 3>> lattice(static_cast<std::size_t>((cells + 1) * (cells + 1)));
        for (auto& node : lattice) {
            for (double& v : node) v = (unit(rng) - 0.5) * 50.0;
        }

        const int k = count_dist(rng);
        std::vector<ShapeSpec> shapes;
        shapes.reserve(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) shapes.push_back(draw_shape(rng, size, bg_base));

        SynthSample out;
        out.image = RasterImage(size, size, 3);
        out.mask = RasterImage(size, size, 1);
        std::int64_t fg_count = 0;
        for (int y = 0; y < size; ++y) {
            const double fy = static_cast<double>(y) * cells / size;
            const int gy = std::min(cells - 1, static_cast<int>(fy));
            const double dy = fy - gy;
            for (int x = 0; x < size; ++x) {
                const double fx = static_cast<double>(x) * cells / size;
                const int gx = std::min(cells - 1, static_cast<int>(fx));
                const double dx = fx - gx;
                const ShapeSpec* hit = nullptr;
                const double px = x + 0.5, py = y + 0.5;
                for (const ShapeSpec& sp : shapes) {
                    if (sp.contains(px, py)) hit = &sp;  // later shapes draw on top
                }
                if (hit != nullptr) {
                    ++fg_count;
                    out.mask.at(y, x, 0) = 255;
                    for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = hit->color[static_cast<std::size_t>(c)];
                } else {
                    for (int c = 0; c < 3; ++c) {
                        const auto node = [&](int iy, int ix) {
                            return lattice[static_cast<std::size_t>(iy * (cells + 1) + ix)]
                                          [static_cast<std::size_t>(c)];
                        };
                        const double noise = (1.0 - dy) * ((1.0 - dx) * node(gy, gx) + dx * node(gy, gx + 1)) +
                                             dy * ((1.0 - dx) * node(gy + 1, gx) + dx * node(gy + 1, gx + 1));
                        out.image.at(y, x, c) = static_cast<std::uint8_t>(
                            std::lround(clamp255(bg_base[static_cast<std::size_t>(c)] + noise)));
                    }
                }
            }
        }
        out.foreground_fraction = static_cast<double>(fg_count) / (static_cast<double>(size) * size);
        if (out.foreground_fraction >= 0.05 && out.foreground_fraction <= 0.60) {
            for (const ShapeSpec& sp : shapes) out.shapes.push_back(sp.type);
            return out;
        }
    }
    throw std::runtime_error("synth_sample: could not produce a scene within foreground bounds");
}

DatasetManifest synth_generate(int count, int size, std::uint64_t seed, const std::filesystem::path& out_dir) {
    if (count < 1) throw std::invalid_argument("synth_generate: count must be >= 1");
    if (size < 16) throw std::invalid_argument("synth_generate: size must be >= 16");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + out_dir.string() + ": " + ec.message());

    std::mt19937_64 rng(seed);
    DatasetManifest manifest;
    manifest.dir = out_dir;
    std::array<std::int64_t, 3> sums{0, 0, 0};
    for (int i = 0; i < count; ++i) {
        SynthSample s = synth_sample(rng, size);
        char img_name[32], mask_name[32];
        std::snprintf(img_name, sizeof(img_name), "sample_%04d.ppm", i);
        std::snprintf(mask_name, sizeof(mask_name), "sample_%04d_mask.pgm", i);
        write_pnm(out_dir / img_name, s.image);
        write_pnm(out_dir / mask_name, s.mask);
        manifest.entries.push_back(ManifestEntry{img_name, mask_name});
        for (std::size_t p = 0; p < s.image.pixels.size(); p += 3) {
            sums[0] += s.image.pixels[p];
            sums[1] += s.image.pixels[p + 1];
            sums[2] += s.image.pixels[p + 2];
        }
    }
    const double denom = static_cast<double>(count) * size * size;
    for (int c = 0; c < 3; ++c) {
        manifest.channel_means[static_cast<std::size_t>(c)] = static_cast<double>(sums[static_cast<std::size_t>(c)]) / denom;
    }
    save_manifest(manifest, out_dir / "manifest.txt");
    return manifest;
}

Sample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                   int target_size) {
    if (target_size < 1) throw std::invalid_argument("load_sample: target_size must be >= 1");
    RasterImage img = read_pnm(image_path);
    if (img.channels != 3) {
        throw std::runtime_error("expected RGB image in " + image_path.string() + ", got " +
                                 std::to_string(img.channels) + " channel(s)");
    }
    RasterImage msk = read_pnm(mask_path);
    if (msk.channels != 1) {
        throw std::runtime_error("expected grayscale mask in " + mask_path.string() + ", got " +
                                 std::to_string(msk.channels) + " channel(s)");
    }
    if (img.width != msk.width || img.height != msk.height) {
        throw std::runtime_error("image/mask size mismatch: " + image_path.string() + " is " +
                                 std::to_string(img.width) + "x" + std::to_string(img.height) + ", " +
                                 mask_path.string() + " is " + std::to_string(msk.width) + "x" +
                                 std::to_string(msk.height));
    }

    Sample s;
    s.id = image_path.stem().string();
    s.image = resize_bilinear(image_to_tensor(img), target_size);
    RasterImage msmall = resize_nearest(msk, target_size);
    s.mask = Tensor<double>(Shape{1, target_size, target_size});
    for (int y = 0; y < target_size; ++y) {
        for (int x = 0; x < target_size; ++x) {
            s.mask(0, y, x) = msmall.at(y, x, 0) >= 128 ? 1.0 : 0.0;
        }
    }
    return s;
}

Tensor<double> load_image(const std::filesystem::path& image_path, int target_size) {
    RasterImage img = read_pnm(image_path);
    if (img.channels != 3) {
        throw std::runtime_error("expected RGB image in " + image_path.string() + ", got " +
                                 std::to_string(img.channels) + " channel(s)");
    }
    return resize_bilinear(image_to_tensor(img), target_size);
}

Sample hflip(const Sample& s) {
    Sample out;
    out.id = s.id;
    out.image = flip_horizontal(s.image);
    out.mask = flip_horizontal(s.mask);
    return out;
}

}  // namespace arns
