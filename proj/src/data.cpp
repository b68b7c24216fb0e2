#include "unlearn/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "unlearn/checkpoint.hpp"
#include "unlearn/errors.hpp"

namespace unlearn {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<std::string> Taxonomy::vocab() const {
    std::vector<std::string> v;
    for (int c = 0; c < n_superclasses; ++c) v.push_back("sup" + std::to_string(c));
    for (int s = 0; s < n_subgroups(); ++s) {
        v.push_back("sup" + std::to_string(superclass_of(s)) + "-sub" +
                    std::to_string(s % subgroups_per_superclass));
    }
    return v;
}

uint64_t Dataset::fingerprint() const {
    uint64_t h = fnv1a64_str("dataset");
    int meta[4] = {taxonomy.n_superclasses, taxonomy.subgroups_per_superclass, channels,
                   image_size};
    h = fnv1a64(meta, sizeof(meta), h);
    for (const auto& ex : items) {
        int lab[5] = {ex.superclass, ex.subgroup, ex.style, ex.id, ex.prompt_id};
        h = fnv1a64(lab, sizeof(lab), h);
        h = fnv1a64(ex.image.data(), ex.image.size() * sizeof(real), h);
    }
    return h;
}

void TaxonomySpec::validate() const {
    if (n_superclasses <= 0 || subgroups_per_superclass <= 0 || images_per_subgroup <= 0) {
        throw ConfigError("taxonomy counts must be positive");
    }
    if (overlap < 0.0 || overlap > 1.0) throw ConfigError("overlap must be in [0,1]");
    if (image_size < 4 || channels != 3) throw ConfigError("unsupported image geometry");
    if (texture_family != 0 && texture_family != 1) throw ConfigError("unknown texture family");
}

// ----------------------------- generation ----------------------------------

namespace {

struct Rgb {
    real r, g, b;
};

Rgb hsv_to_rgb(real h, real s, real v) {
    h = h - std::floor(h);
    const real c = v * s;
    const real hp = h * 6.0;
    const real x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    real r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    const real m = v - c;
    return {r + m, g + m, b + m};
}

struct BlobSet {
    // Up to 3 blobs: center (cy, cx) in unit coordinates, width, amplitude.
    real cy[3], cx[3], sigma[3], amp[3];
};

BlobSet draw_blobs(Rng& rng) {
    BlobSet s{};
    for (int k = 0; k < 3; ++k) {
        s.cy[k] = rng.uniform(0.15, 0.85);
        s.cx[k] = rng.uniform(0.15, 0.85);
        s.sigma[k] = rng.uniform(0.10, 0.20);
        s.amp[k] = rng.uniform(0.75, 1.0);
    }
    return s;
}

struct Grating {
    real fy, fx, phase;
};

Grating draw_grating(Rng& rng) {
    Grating g{};
    g.fy = rng.uniform(1.0, 3.5);
    g.fx = rng.uniform(1.0, 3.5);
    g.phase = rng.uniform(0.0, 6.28318530717958647692);
    return g;
}

Tensor render_blobs(const BlobSet& s, int size) {
    Tensor f({size, size});
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const real uy = (y + 0.5) / size;
            const real ux = (x + 0.5) / size;
            real v = 0.0;
            for (int k = 0; k < 3; ++k) {
                const real dy = uy - s.cy[k];
                const real dx = ux - s.cx[k];
                v += s.amp[k] * std::exp(-(dy * dy + dx * dx) / (2.0 * s.sigma[k] * s.sigma[k]));
            }
            f[static_cast<size_t>(y) * size + x] = std::min(v, 1.0);
        }
    }
    return f;
}

Tensor render_grating(const Grating& g, int size) {
    Tensor f({size, size});
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const real uy = (y + 0.5) / size;
            const real ux = (x + 0.5) / size;
            f[static_cast<size_t>(y) * size + x] =
                0.5 + 0.5 * std::sin(6.28318530717958647692 * (g.fy * uy + g.fx * ux) + g.phase);
        }
    }
    return f;
}

// Per-superclass appearance: a base color and a soft directional mask.
struct SuperFactors {
    Rgb color;
    real mask_theta;
    BlobSet shared_blobs;
    Grating shared_grating;
};

struct SubFactors {
    Rgb tint;
    BlobSet blobs;
    Grating grating;
};

SuperFactors super_factors(const TaxonomySpec& spec, int c) {
    Rng rng(derive_seed(spec.seed, "factors.super", static_cast<uint64_t>(c)));
    SuperFactors f{};
    const real hue = (c + 0.15 + 0.2 * rng.uniform()) / spec.n_superclasses;
    f.color = hsv_to_rgb(hue, 0.75, 0.95);
    f.mask_theta = 6.28318530717958647692 * (c + rng.uniform() * 0.3) / spec.n_superclasses;
    f.shared_blobs = draw_blobs(rng);
    f.shared_grating = draw_grating(rng);
    return f;
}

SubFactors sub_factors(const TaxonomySpec& spec, int c, int local) {
    Rng rng(derive_seed(spec.seed, "factors.sub",
                        static_cast<uint64_t>(c) * 1000 + static_cast<uint64_t>(local)));
    SubFactors f{};
    const real base_hue = (c + 0.15) / spec.n_superclasses;
    const real hue = base_hue + (local + 1.0 + 0.3 * rng.uniform()) /
                                    (2.0 * spec.subgroups_per_superclass);
    f.tint = hsv_to_rgb(hue, 0.85, 1.0);
    f.blobs = draw_blobs(rng);
    f.grating = draw_grating(rng);
    return f;
}

Tensor superclass_mask(const SuperFactors& f, int size) {
    Tensor m({size, size});
    const real ct = std::cos(f.mask_theta), st = std::sin(f.mask_theta);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const real uy = (y + 0.5) / size - 0.5;
            const real ux = (x + 0.5) / size - 0.5;
            const real t = 4.0 * (ct * uy + st * ux);
            m[static_cast<size_t>(y) * size + x] = 1.0 / (1.0 + std::exp(-t));
        }
    }
    return m;
}

Tensor bilinear_resize(const Tensor& img, int out_size) {
    const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor out({C, out_size, out_size});
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < out_size; ++y) {
            for (int x = 0; x < out_size; ++x) {
                const real sy = (y + 0.5) * H / out_size - 0.5;
                const real sx = (x + 0.5) * W / out_size - 0.5;
                const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, H - 1);
                const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, W - 1);
                const int y1 = std::min(y0 + 1, H - 1);
                const int x1 = std::min(x0 + 1, W - 1);
                const real fy = std::clamp(sy - y0, 0.0, 1.0);
                const real fx = std::clamp(sx - x0, 0.0, 1.0);
                const auto at = [&](int yy, int xx) {
                    return img[(static_cast<size_t>(c) * H + yy) * W + xx];
                };
                out[(static_cast<size_t>(c) * out_size + y) * out_size + x] =
                    (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                    fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    }
    return out;
}

Tensor blend_fields(const Tensor& own, const Tensor& shared, real overlap) {
    Tensor out(own.shape());
    for (size_t i = 0; i < own.size(); ++i) {
        out[i] = (1.0 - overlap) * own[i] + overlap * shared[i];
    }
    return out;
}

}  // namespace

Tensor subgroup_texture_field(const TaxonomySpec& spec, int superclass, int local_subgroup) {
    spec.validate();
    const int size = spec.render_size > 0 ? spec.render_size : spec.image_size;
    const SuperFactors sf = super_factors(spec, superclass);
    const SubFactors gf = sub_factors(spec, superclass, local_subgroup);
    Tensor own = spec.texture_family == 0 ? render_blobs(gf.blobs, size)
                                          : render_grating(gf.grating, size);
    Tensor shared = spec.texture_family == 0 ? render_blobs(sf.shared_blobs, size)
                                             : render_grating(sf.shared_grating, size);
    return blend_fields(own, shared, spec.overlap);
}

real subgroup_shared_weight(const TaxonomySpec& spec) { return spec.overlap; }

Dataset generate_synthetic(const TaxonomySpec& spec) {
    spec.validate();
    Dataset d;
    d.taxonomy.n_superclasses = spec.n_superclasses;
    d.taxonomy.subgroups_per_superclass = spec.subgroups_per_superclass;
    d.channels = spec.channels;
    d.image_size = spec.image_size;

    const int size = spec.render_size > 0 ? spec.render_size : spec.image_size;
    int next_id = 0;
    for (int c = 0; c < spec.n_superclasses; ++c) {
        const SuperFactors sf = super_factors(spec, c);
        const Tensor mask = superclass_mask(sf, size);
        const real base_rgb[3] = {sf.color.r, sf.color.g, sf.color.b};
        for (int local = 0; local < spec.subgroups_per_superclass; ++local) {
            const SubFactors gf = sub_factors(spec, c, local);
            const real tint_rgb[3] = {gf.tint.r, gf.tint.g, gf.tint.b};
            const int sub = c * spec.subgroups_per_superclass + local;
            for (int i = 0; i < spec.images_per_subgroup; ++i) {
                Rng rng(derive_seed(spec.seed, "ex",
                                    (static_cast<uint64_t>(spec.example_stream) << 40) +
                                        static_cast<uint64_t>(next_id)));
                // Per-example jitter of the subgroup texture.
                Tensor field;
                if (spec.texture_family == 0) {
                    BlobSet jb = gf.blobs;
                    for (int k = 0; k < 3; ++k) {
                        jb.cy[k] = std::clamp(jb.cy[k] + 0.03 * rng.normal(), 0.05, 0.95);
                        jb.cx[k] = std::clamp(jb.cx[k] + 0.03 * rng.normal(), 0.05, 0.95);
                        jb.amp[k] = std::clamp(jb.amp[k] + 0.06 * rng.normal(), 0.4, 1.0);
                    }
                    field = blend_fields(render_blobs(jb, size),
                                         render_blobs(sf.shared_blobs, size), spec.overlap);
                } else {
                    Grating jg = gf.grating;
                    jg.phase += 0.25 * rng.normal();
                    field = blend_fields(render_grating(jg, size),
                                         render_grating(sf.shared_grating, size), spec.overlap);
                }

                Tensor img({spec.channels, size, size});
                for (int ch = 0; ch < spec.channels; ++ch) {
                    for (int y = 0; y < size; ++y) {
                        for (int x = 0; x < size; ++x) {
                            const size_t pi = static_cast<size_t>(y) * size + x;
                            real v = 0.45 * base_rgb[ch] * mask[pi] +
                                     0.85 * tint_rgb[ch] * field[pi] +
                                     spec.noise_scale * rng.normal();
                            v = (v - 0.5) * spec.contrast + 0.5 + spec.brightness;
                            img[(static_cast<size_t>(ch) * size + y) * size + x] =
                                std::clamp(v, 0.0, 1.0);
                        }
                    }
                }
                LabeledExample ex;
                ex.image = (size == spec.image_size) ? std::move(img)
                                                     : bilinear_resize(img, spec.image_size);
                ex.superclass = c;
                ex.subgroup = sub;
                ex.style = 0;
                ex.id = next_id++;
                ex.prompt_id = d.taxonomy.fine_prompt_id(sub);
                d.items.push_back(std::move(ex));
            }
        }
    }
    return d;
}

// ------------------------------- styles -------------------------------------

Tensor styled_image(const Tensor& image, int style_id) {
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (C != 3) throw ConfigError("style transforms expect 3-channel images");
    Tensor out(image.shape());
    auto gray_at = [&](int y, int x) {
        const size_t p = static_cast<size_t>(y) * W + x;
        return 0.25 * image[p] + 0.5 * image[static_cast<size_t>(H) * W + p] +
               0.25 * image[2 * static_cast<size_t>(H) * W + p];
    };
    switch (style_id) {
        case 1: {  // edge-sketch: Sobel magnitude of the luma
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    auto g = [&](int yy, int xx) {
                        return gray_at(std::clamp(yy, 0, H - 1), std::clamp(xx, 0, W - 1));
                    };
                    const real gx = (g(y - 1, x + 1) + 2 * g(y, x + 1) + g(y + 1, x + 1)) -
                                    (g(y - 1, x - 1) + 2 * g(y, x - 1) + g(y + 1, x - 1));
                    const real gy = (g(y + 1, x - 1) + 2 * g(y + 1, x) + g(y + 1, x + 1)) -
                                    (g(y - 1, x - 1) + 2 * g(y - 1, x) + g(y - 1, x + 1));
                    const real mag = std::clamp(std::sqrt(gx * gx + gy * gy) / 4.0, 0.0, 1.0);
                    for (int c = 0; c < 3; ++c) {
                        out[(static_cast<size_t>(c) * H + y) * W + x] = mag;
                    }
                }
            }
            break;
        }
        case 2: {  // posterize to 4 levels; exact for dyadic levels
            for (size_t i = 0; i < image.size(); ++i) {
                out[i] = std::floor(image[i] * 4.0) / 4.0;
                if (out[i] > 1.0) out[i] = 1.0;
            }
            break;
        }
        case 3: {  // grayscale with dyadic weights so it is exactly idempotent
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    const real v = gray_at(y, x);
                    for (int c = 0; c < 3; ++c) {
                        out[(static_cast<size_t>(c) * H + y) * W + x] = v;
                    }
                }
            }
            break;
        }
        default:
            throw ConfigError("unknown style id " + std::to_string(style_id));
    }
    return out;
}

Dataset apply_style(const Dataset& d, int style_id) {
    Dataset out = d;
    for (auto& ex : out.items) {
        ex.image = styled_image(ex.image, style_id);
        ex.style = style_id;
    }
    return out;
}

// ----------------------------- task splitting -------------------------------

void SplitFractions::validate() const {
    if (forget < 0.0 || forget > 1.0) throw ConfigError("forget fraction must be in [0,1]");
    if (retain_ft < 0.0 || calibration < 0.0) throw ConfigError("fractions must be non-negative");
    if (retain_ft + calibration > 1.0) {
        throw ConfigError("retain_ft + calibration fractions exceed 1");
    }
}

namespace {

Dataset subset(const Dataset& d, const std::vector<int>& idx) {
    Dataset out;
    out.taxonomy = d.taxonomy;
    out.channels = d.channels;
    out.image_size = d.image_size;
    for (int i : idx) out.items.push_back(d.items[static_cast<size_t>(i)]);
    return out;
}

EvalSuite make_fine_suite(std::string name, Direction dir, Dataset data, int superclass) {
    EvalSuite s;
    s.name = std::move(name);
    s.direction = dir;
    const Taxonomy& tax = data.taxonomy;
    for (int local = 0; local < tax.subgroups_per_superclass; ++local) {
        s.class_prompt_ids.push_back(
            tax.fine_prompt_id(superclass * tax.subgroups_per_superclass + local));
    }
    for (const auto& ex : data.items) {
        s.targets.push_back(ex.subgroup % tax.subgroups_per_superclass);
    }
    s.data = std::move(data);
    return s;
}

EvalSuite make_coarse_suite(std::string name, Direction dir, Dataset data) {
    EvalSuite s;
    s.name = std::move(name);
    s.direction = dir;
    const Taxonomy& tax = data.taxonomy;
    for (int c = 0; c < tax.n_superclasses; ++c) s.class_prompt_ids.push_back(tax.coarse_prompt_id(c));
    for (const auto& ex : data.items) s.targets.push_back(ex.superclass);
    s.data = std::move(data);
    return s;
}

}  // namespace

UnlearnTask split_unlearn_task(const Dataset& dataset, const TaxonomySpec& spec,
                               int target_subgroup, const SplitFractions& fractions,
                               uint64_t seed) {
    fractions.validate();
    const Taxonomy& tax = dataset.taxonomy;
    if (target_subgroup < 0 || target_subgroup >= tax.n_subgroups()) {
        throw ConfigError("target subgroup out of range");
    }
    const int target_sup = tax.superclass_of(target_subgroup);

    std::vector<int> target_pool, sibling_pool, others;
    for (size_t i = 0; i < dataset.items.size(); ++i) {
        const auto& ex = dataset.items[i];
        if (ex.subgroup == target_subgroup) {
            target_pool.push_back(static_cast<int>(i));
        } else if (ex.superclass == target_sup) {
            sibling_pool.push_back(static_cast<int>(i));
        } else {
            others.push_back(static_cast<int>(i));
        }
    }
    if (target_pool.empty()) throw ConfigError("target subgroup has no examples");
    if (sibling_pool.empty()) throw ConfigError("target superclass has no sibling subgroups");

    Rng rng_f(derive_seed(seed, "split.forget"));
    Rng rng_r(derive_seed(seed, "split.retain"));
    rng_f.shuffle(target_pool);
    rng_r.shuffle(sibling_pool);

    const size_t n_forget =
        static_cast<size_t>(fractions.forget * static_cast<real>(target_pool.size()));
    const size_t n_ft =
        static_cast<size_t>(fractions.retain_ft * static_cast<real>(sibling_pool.size()));
    const size_t n_cal =
        static_cast<size_t>(fractions.calibration * static_cast<real>(sibling_pool.size()));
    if (n_forget == 0) throw ConfigError("forget fraction leaves no forgetting examples");
    if (n_ft == 0) throw ConfigError("retain_ft fraction leaves no reminding examples");
    if (n_cal == 0) throw ConfigError("calibration fraction leaves no calibration examples");
    if (n_ft + n_cal >= sibling_pool.size()) {
        throw ConfigError("fractions leave no retain evaluation examples");
    }

    UnlearnTask task;
    task.target_superclass = target_sup;
    task.target_subgroup = target_subgroup;
    task.split_seed = seed;
    {
        json sj;
        sj["n_superclasses"] = spec.n_superclasses;
        sj["subgroups_per_superclass"] = spec.subgroups_per_superclass;
        sj["images_per_subgroup"] = spec.images_per_subgroup;
        sj["overlap"] = spec.overlap;
        sj["image_size"] = spec.image_size;
        sj["seed"] = spec.seed;
        sj["texture_family"] = spec.texture_family;
        sj["noise_scale"] = spec.noise_scale;
        task.source_spec_json = sj.dump();
    }

    std::vector<int> forget_idx(target_pool.begin(), target_pool.begin() + static_cast<long>(n_forget));
    std::vector<int> target_eval_idx(target_pool.begin() + static_cast<long>(n_forget),
                                     target_pool.end());
    if (target_eval_idx.empty()) target_eval_idx = forget_idx;  // forget fraction 1.0

    std::vector<int> ft_idx(sibling_pool.begin(), sibling_pool.begin() + static_cast<long>(n_ft));
    std::vector<int> cal_idx(sibling_pool.begin() + static_cast<long>(n_ft),
                             sibling_pool.begin() + static_cast<long>(n_ft + n_cal));
    std::vector<int> retain_eval_idx(sibling_pool.begin() + static_cast<long>(n_ft + n_cal),
                                     sibling_pool.end());

    task.forget = subset(dataset, forget_idx);
    // Coarse-label constraint: the forgetting examples carry the superclass prompt.
    for (auto& ex : task.forget.items) ex.prompt_id = tax.coarse_prompt_id(target_sup);
    task.retain_ft = subset(dataset, ft_idx);
    task.calibration = subset(dataset, cal_idx);

    task.suites.emplace("target", make_fine_suite("target", Direction::Forget,
                                                  subset(dataset, target_eval_idx), target_sup));
    task.suites.emplace("retain", make_fine_suite("retain", Direction::Retain,
                                                  subset(dataset, retain_eval_idx), target_sup));

    // "all": everything not consumed by training or calibration, coarse labels.
    {
        std::vector<int> all_idx = others;
        all_idx.insert(all_idx.end(), target_eval_idx.begin(), target_eval_idx.end());
        all_idx.insert(all_idx.end(), retain_eval_idx.begin(), retain_eval_idx.end());
        std::sort(all_idx.begin(), all_idx.end());
        all_idx.erase(std::unique(all_idx.begin(), all_idx.end()), all_idx.end());
        task.suites.emplace("all",
                            make_coarse_suite("all", Direction::Retain, subset(dataset, all_idx)));
    }

    // Out-of-domain suites: same generative factors, shifted render profiles.
    {
        TaxonomySpec shifted = spec;
        shifted.images_per_subgroup = std::max(10, spec.images_per_subgroup / 8);
        shifted.render_size = spec.image_size + 4;
        shifted.noise_scale = spec.noise_scale * 1.5;
        shifted.contrast = 0.85;
        shifted.brightness = 0.05;
        shifted.example_stream = 1;
        task.suites.emplace(
            "unseen_shift",
            make_coarse_suite("unseen_shift", Direction::Retain, generate_synthetic(shifted)));

        TaxonomySpec textured = spec;
        textured.images_per_subgroup = std::max(10, spec.images_per_subgroup / 8);
        textured.texture_family = spec.texture_family == 0 ? 1 : 0;
        textured.example_stream = 2;
        task.suites.emplace(
            "unseen_texture",
            make_coarse_suite("unseen_texture", Direction::Retain, generate_synthetic(textured)));

        // Style suite: grayscale rendering of the shifted variant.
        task.suites.emplace("unseen_gray",
                            make_coarse_suite("unseen_gray", Direction::Retain,
                                              apply_style(task.suites.at("unseen_shift").data, 3)));
    }
    return task;
}

Tensor stack_images(const Dataset& d, const std::vector<int>& idx) {
    if (idx.empty()) throw ConfigError("cannot stack an empty batch");
    const int C = d.channels, H = d.image_size, W = d.image_size;
    Tensor out({static_cast<int>(idx.size()), C, H, W});
    const size_t plane = static_cast<size_t>(C) * H * W;
    for (size_t i = 0; i < idx.size(); ++i) {
        const Tensor& img = d.items[static_cast<size_t>(idx[i])].image;
        std::copy(img.data(), img.data() + plane, out.data() + i * plane);
    }
    return out;
}

std::vector<int> prompt_ids_of(const Dataset& d, const std::vector<int>& idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(d.items[static_cast<size_t>(i)].prompt_id);
    return out;
}

// ------------------------------- archive ------------------------------------

namespace {

ParameterSet dataset_to_records(const Dataset& d) {
    ParameterSet ps;
    const int n = static_cast<int>(d.items.size());
    Tensor images({n, d.channels, d.image_size, d.image_size});
    Tensor sup({n}), sub({n}), style({n}), id({n}), prompt({n});
    const size_t plane = static_cast<size_t>(d.channels) * d.image_size * d.image_size;
    for (int i = 0; i < n; ++i) {
        const auto& ex = d.items[static_cast<size_t>(i)];
        std::copy(ex.image.data(), ex.image.data() + plane,
                  images.data() + static_cast<size_t>(i) * plane);
        sup[static_cast<size_t>(i)] = ex.superclass;
        sub[static_cast<size_t>(i)] = ex.subgroup;
        style[static_cast<size_t>(i)] = ex.style;
        id[static_cast<size_t>(i)] = ex.id;
        prompt[static_cast<size_t>(i)] = ex.prompt_id;
    }
    ps.put("images", std::move(images));
    ps.put("superclass", std::move(sup));
    ps.put("subgroup", std::move(sub));
    ps.put("style", std::move(style));
    ps.put("id", std::move(id));
    ps.put("prompt_id", std::move(prompt));
    ps.meta().provenance = "dataset";
    json j;
    j["n_superclasses"] = d.taxonomy.n_superclasses;
    j["subgroups_per_superclass"] = d.taxonomy.subgroups_per_superclass;
    ps.meta().spec_json = j.dump();
    return ps;
}

Dataset dataset_from_records(const ParameterSet& ps) {
    Dataset d;
    json j = json::parse(ps.meta().spec_json);
    d.taxonomy.n_superclasses = j.at("n_superclasses").get<int>();
    d.taxonomy.subgroups_per_superclass = j.at("subgroups_per_superclass").get<int>();
    const Tensor& images = ps.at("images");
    d.channels = images.dim(1);
    d.image_size = images.dim(2);
    const int n = images.dim(0);
    const size_t plane = static_cast<size_t>(d.channels) * d.image_size * d.image_size;
    for (int i = 0; i < n; ++i) {
        LabeledExample ex;
        ex.image = Tensor({d.channels, d.image_size, d.image_size});
        std::copy(images.data() + static_cast<size_t>(i) * plane,
                  images.data() + static_cast<size_t>(i + 1) * plane, ex.image.data());
        ex.superclass = static_cast<int>(ps.at("superclass")[static_cast<size_t>(i)]);
        ex.subgroup = static_cast<int>(ps.at("subgroup")[static_cast<size_t>(i)]);
        ex.style = static_cast<int>(ps.at("style")[static_cast<size_t>(i)]);
        ex.id = static_cast<int>(ps.at("id")[static_cast<size_t>(i)]);
        ex.prompt_id = static_cast<int>(ps.at("prompt_id")[static_cast<size_t>(i)]);
        d.items.push_back(std::move(ex));
    }
    return d;
}

json suite_manifest(const EvalSuite& s, const std::string& file) {
    json j;
    j["name"] = s.name;
    j["direction"] = s.direction == Direction::Forget ? "forget" : "retain";
    j["class_prompt_ids"] = s.class_prompt_ids;
    j["targets"] = s.targets;
    j["file"] = file;
    return j;
}

std::vector<int> member_ids(const Dataset& d) {
    std::vector<int> ids;
    for (const auto& ex : d.items) ids.push_back(ex.id);
    return ids;
}

}  // namespace

void save_task(const UnlearnTask& task, const std::string& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["target_superclass"] = task.target_superclass;
    manifest["target_subgroup"] = task.target_subgroup;
    manifest["split_seed"] = task.split_seed;
    if (!task.source_spec_json.empty()) {
        manifest["source_spec"] = json::parse(task.source_spec_json);
    }

    auto save_split = [&](const std::string& name, const Dataset& d) {
        const std::string file = name + ".bin";
        save_checkpoint(dataset_to_records(d), dir + "/" + file);
        manifest["splits"][name] = {{"file", file}, {"count", d.items.size()},
                                    {"ids", member_ids(d)}};
    };
    save_split("forget", task.forget);
    save_split("retain_ft", task.retain_ft);
    save_split("calibration", task.calibration);

    manifest["suites"] = json::array();
    for (const auto& [name, suite] : task.suites) {
        const std::string file = "suite_" + name + ".bin";
        save_checkpoint(dataset_to_records(suite.data), dir + "/" + file);
        manifest["suites"].push_back(suite_manifest(suite, file));
    }

    const std::string tmp = dir + "/manifest.json.tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw ConfigError("cannot write task manifest to '" + dir + "'");
        f << manifest.dump(2) << "\n";
    }
    fs::rename(tmp, dir + "/manifest.json");
}

UnlearnTask load_task(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw ConfigError("cannot open task manifest in '" + dir + "'");
    json manifest = json::parse(f);

    UnlearnTask task;
    task.target_superclass = manifest.at("target_superclass").get<int>();
    task.target_subgroup = manifest.at("target_subgroup").get<int>();
    task.split_seed = manifest.value("split_seed", uint64_t{0});
    if (manifest.contains("source_spec")) {
        task.source_spec_json = manifest.at("source_spec").dump();
    }
    auto load_split = [&](const std::string& name) {
        const std::string file = manifest.at("splits").at(name).at("file").get<std::string>();
        return dataset_from_records(load_checkpoint(dir + "/" + file));
    };
    task.forget = load_split("forget");
    task.retain_ft = load_split("retain_ft");
    task.calibration = load_split("calibration");
    for (const auto& sj : manifest.at("suites")) {
        EvalSuite s;
        s.name = sj.at("name").get<std::string>();
        s.direction = sj.at("direction").get<std::string>() == "forget" ? Direction::Forget
                                                                        : Direction::Retain;
        s.class_prompt_ids = sj.at("class_prompt_ids").get<std::vector<int>>();
        s.targets = sj.at("targets").get<std::vector<int>>();
        s.data = dataset_from_records(load_checkpoint(dir + "/" + sj.at("file").get<std::string>()));
        task.suites.emplace(s.name, std::move(s));
    }
    return task;
}

}  // namespace unlearn
