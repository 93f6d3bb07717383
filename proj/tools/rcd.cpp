// Copyright 2026 The RCD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// rcd: train, denoise, edit, eval, export and serve.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 bad input (config, file, shape,
// format), 3 training diverged, 4 infeasible component step.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcd/control.hpp"
#include "rcd/error.hpp"
#include "rcd/inference.hpp"
#include "rcd/io/bundle.hpp"
#include "rcd/io/checkpoint.hpp"
#include "rcd/io/config.hpp"
#include "rcd/io/image_io.hpp"
#include "rcd/service.hpp"
#include "rcd/training.hpp"

namespace {

constexpr int kExitInternal = 1;
constexpr int kExitBadInput = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitInfeasible = 4;

using nlohmann::json;

std::string format_db(double v) {
    if (std::isinf(v)) return "inf";
    std::ostringstream os;
    os.precision(4);
    os << std::fixed << v;
    return os.str();
}

std::string format_vector(std::span<const double> v) {
    std::ostringstream os;
    os.precision(9);
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<double> parse_vector(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
        if (item.empty() || used != item.size() || !std::isfinite(v))
            throw rcd::ConfigurationError("cannot parse control vector entry '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw rcd::ConfigurationError("control vector is empty");
    return out;
}

// ---------------------------------------------------------------------------

int run_train(const std::string& config_path) {
    std::string text;
    try {
        text = rcd::io::read_file(config_path);
    } catch (const rcd::Error& e) {
        std::cerr << "rcd train: " << e.what() << '\n';
        return kExitBadInput;
    }
    rcd::io::RunConfig rc;
    try {
        rc = rcd::io::parse_run_config(text);
        rcd::io::apply_seed_override(rc, std::getenv("RCD_SEED"));
    } catch (const rcd::ConfigurationError& e) {
        std::cerr << "rcd train: bad config " << config_path << ": " << e.what() << '\n';
        return kExitBadInput;
    }

    std::ofstream log(rc.log);
    if (!log) {
        std::cerr << "rcd train: cannot write log " << rc.log << '\n';
        return kExitBadInput;
    }
    const auto write = [&log](const json& j) { log << j.dump() << '\n' << std::flush; };

    rcd::TrainResult result;
    try {
        result = rcd::train(rc.train, {}, [&](const rcd::TrainLogRecord& r) {
            write({{"step", r.step},
                   {"total_loss", r.total_loss},
                   {"level_loss", r.level_loss},
                   {"collapse", r.collapse},
                   {"collapse_before_nd", r.collapse_before_nd},
                   {"calibration_error", r.calibration_error},
                   {"seconds", r.wall_seconds}});
        });
    } catch (const rcd::DivergenceError& e) {
        write({{"diverged", true}, {"step", e.step()}, {"message", e.what()}});
        std::cerr << "rcd train: " << e.what() << '\n';
        return kExitDiverged;
    }

    const rcd::TrainConfig& t = rc.train;
    const rcd::io::Checkpoint ck{result.backbone,
                                 rcd::io::ModelSection{result.head, t.schedule, t.iterations, t.noise_decorrelation}};
    rcd::io::save_checkpoint(rc.checkpoint, ck);

    // Held-out evaluation of the checkpoint exactly as it will be loaded.
    const rcd::io::Checkpoint saved = rcd::io::quantized(ck);
    const auto popt = saved.pipeline();
    for (std::size_t i = 0; i < t.schedule.size(); ++i) {
        const auto [edited, noisy] = rcd::evaluate_one_hot(saved.backbone, t.schedule, popt, i, rc.eval.count,
                                                           t.patch, t.channels, rc.eval.seed);
        write({{"one_hot_level_255", t.schedule.level_255(i)}, {"edited_psnr", edited}, {"noisy_psnr", noisy}});
    }
    const rcd::EvalReport ev = rcd::evaluate_autotune(saved.backbone, saved.model->head, t.schedule, popt,
                                                      rc.eval.sigma, rc.eval.count, t.patch, t.channels, rc.eval.seed);
    write({{"sigma_255", rc.eval.sigma * 255.0},
           {"noisy_psnr", ev.noisy_psnr},
           {"autotune_psnr", ev.autotune_psnr},
           {"autotune_intensity_255", ev.autotune_intensity * 255.0}});
    std::cout << "checkpoint " << rc.checkpoint << "\nheld-out sigma " << format_db(rc.eval.sigma * 255.0)
              << ": noisy " << format_db(ev.noisy_psnr) << " dB, autotune " << format_db(ev.autotune_psnr) << " dB\n";
    return 0;
}

int run_denoise(const std::string& checkpoint, const std::string& input, const std::string& output,
                const std::string& gt_path) {
    const rcd::io::Checkpoint ck = rcd::io::load_checkpoint(checkpoint);
    const rcd::ImageTensor noisy = rcd::io::load_image(input);
    std::optional<rcd::ImageTensor> gt;
    if (!gt_path.empty()) {
        gt = rcd::io::load_image(gt_path);
        rcd::require_same_shape(noisy, *gt, "ground truth");
    }
    rcd::Diagnostics diag;
    const rcd::io::EditBundle bundle = rcd::denoise_to_bundle(ck, noisy, gt, &diag);
    rcd::io::save_bundle(output, bundle);
    for (const auto& w : diag.warnings) std::cerr << "warning: " << w << '\n';
    const auto cbar = bundle.autotune_vector();
    std::cout << "autotune intensity " << format_db(rcd::intensity(cbar, bundle.level_schedule()) * 255.0)
              << "\nc " << format_vector(cbar.coeffs) << '\n';
    return 0;
}

struct EditRequest {
    std::string c;
    double intensity = std::numeric_limits<double>::quiet_NaN();
    std::string component;
};

rcd::ControlVector resolve_control(const rcd::io::EditBundle& b, const EditRequest& req) {
    const rcd::LevelSchedule schedule = b.level_schedule();
    const rcd::ControlVector cbar = b.autotune_vector();
    if (!req.c.empty()) {
        rcd::ControlVector c{parse_vector(req.c), rcd::ControlSource::user};
        if (c.size() != b.levels())
            throw rcd::ConfigurationError("control vector has length " + std::to_string(c.size()) + ", expected " +
                                          std::to_string(b.levels()));
        return c;
    }
    if (!std::isnan(req.intensity)) return rcd::rescale_to_intensity(cbar, schedule, req.intensity / 255.0);
    if (!req.component.empty()) {
        // i:delta[:j], 1-based indices.
        std::vector<std::string> parts;
        std::stringstream ss(req.component);
        for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
        if (parts.size() < 2 || parts.size() > 3) throw rcd::ConfigurationError("--component expects i:delta[:j]");
        std::size_t i = 0, j = 0;
        double delta = 0.0;
        try {
            i = std::stoul(parts[0]);
            delta = std::stod(parts[1]);
            if (parts.size() == 3) j = std::stoul(parts[2]);
        } catch (const std::exception&) {
            throw rcd::ConfigurationError("cannot parse --component " + req.component);
        }
        if (i < 1 || i > b.levels() || (parts.size() == 3 && (j < 1 || j > b.levels() || j == i)))
            throw rcd::ConfigurationError("component indices must be distinct and in 1.." + std::to_string(b.levels()));
        const std::size_t comp = parts.size() == 3 ? j - 1 : rcd::default_compensator(cbar, i - 1);
        return rcd::component_step(cbar, schedule, i - 1, comp, delta);
    }
    return cbar;
}

int run_edit(const std::string& bundle_path, const EditRequest& req, const std::string& output) {
    const rcd::io::EditBundle b = rcd::io::load_bundle(bundle_path);
    rcd::ControlVector c;
    try {
        c = resolve_control(b, req);
    } catch (const rcd::BoundaryError& e) {
        std::cerr << "rcd edit: " << e.what() << "\nmax feasible delta " << e.max_feasible_delta() << '\n';
        return kExitInfeasible;
    }
    rcd::io::save_image(output, rcd::io::edit_bundle(b, c.coeffs));
    std::cout << "c " << format_vector(c.coeffs) << "\nintensity "
              << format_db(rcd::intensity(c, b.level_schedule()) * 255.0) << '\n';
    return 0;
}

int run_eval(const std::string& bundle_path, const std::string& c_text) {
    const rcd::io::EditBundle b = rcd::io::load_bundle(bundle_path);
    const auto gt = b.ground_truth_image();
    if (!gt) {
        std::cerr << "rcd eval: bundle carries no ground truth\n";
        return kExitBadInput;
    }
    const rcd::ControlVector c = resolve_control(b, EditRequest{c_text, std::numeric_limits<double>::quiet_NaN(), {}});
    const double edited = rcd::psnr(rcd::io::edit_bundle(b, c.coeffs), *gt);
    const double noisy = rcd::psnr(b.base_image(), *gt);
    std::cout << "edited psnr " << format_db(edited) << "\nnoisy psnr " << format_db(noisy) << '\n';
    return 0;
}

int run_export(const std::string& bundle_path, const std::string& dir) {
    const rcd::io::EditBundle b = rcd::io::load_bundle(bundle_path);
    std::filesystem::create_directories(dir);
    const auto path = [&dir](const std::string& name) { return (std::filesystem::path(dir) / name).string(); };
    const std::string ext = b.channels == 3 ? ".ppm" : ".pgm";
    const rcd::ImageTensor base = b.base_image();
    rcd::io::save_image(path("base.pfm"), base);
    rcd::io::save_image(path("base" + ext), base);
    const rcd::ImageTensor tuned = rcd::io::edit_bundle(b, b.autotune_vector().coeffs);
    rcd::io::save_image(path("autotune.pfm"), tuned);
    rcd::io::save_image(path("autotune" + ext), tuned);
    const rcd::NoiseMapStack stack = b.stack();
    for (std::size_t i = 0; i < stack.levels(); ++i)
        rcd::io::save_image(path("map" + std::to_string(i + 1) + ".pfm"), stack.maps[i]);
    if (const auto gt = b.ground_truth_image()) rcd::io::save_image(path("ground_truth.pfm"), *gt);
    std::cout << "wrote " << 4 + stack.levels() + (b.ground_truth ? 1 : 0) << " files to " << dir << '\n';
    return 0;
}

int run_serve(const std::string& checkpoint, const std::string& address, std::size_t capacity,
              std::size_t workers) {
    const auto colon = address.rfind(':');
    if (colon == std::string::npos) throw rcd::ConfigurationError("--address expects host:port");
    const std::string host = address.substr(0, colon);
    int port = 0;
    try {
        port = std::stoi(address.substr(colon + 1));
    } catch (const std::exception&) {
        throw rcd::ConfigurationError("bad port in --address " + address);
    }
    rcd::service::Service svc(rcd::io::load_checkpoint(checkpoint), {capacity, workers});
    httplib::Server server;
    svc.mount(server);
    const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) {
        std::cerr << "rcd serve: cannot bind " << address << '\n';
        return kExitBadInput;
    }
    std::cout << "listening on " << host << ':' << bound << std::endl;
    return server.listen_after_bind() ? 0 : kExitInternal;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Controllable residual denoising: train, infer once, edit offline"};
    app.require_subcommand(1);

    std::string config;
    auto* train = app.add_subcommand("train", "Train backbone and AutoTune head from a JSON config");
    train->add_option("--config", config, "JSON run configuration")->required();

    std::string checkpoint, input, output, gt;
    auto* denoise = app.add_subcommand("denoise", "Run the network once and write an edit bundle");
    denoise->add_option("--checkpoint", checkpoint)->required();
    denoise->add_option("--input", input, "PGM/PPM/PFM noisy image")->required();
    denoise->add_option("--output", output, "RCDB bundle path")->required();
    denoise->add_option("--gt", gt, "optional ground truth stored in the bundle");

    std::string bundle;
    EditRequest req;
    auto* edit = app.add_subcommand("edit", "Interpolate an image from a bundle; no model involved");
    edit->add_option("--bundle", bundle)->required();
    auto* c_opt = edit->add_option("--c", req.c, "comma-separated control vector");
    auto* i_opt = edit->add_option("--intensity", req.intensity, "rescale c_bar to this intensity ([0,255] scale)");
    auto* k_opt = edit->add_option("--component", req.component, "i:delta[:j], 1-based; step c_i, compensate with c_j");
    c_opt->excludes(i_opt)->excludes(k_opt);
    i_opt->excludes(k_opt);
    edit->add_option("--output", output, ".pfm keeps 32-bit values, anything else writes 8-bit PNM")->required();

    std::string eval_c;
    auto* eval = app.add_subcommand("eval", "PSNR of an edit against the bundle's ground truth");
    eval->add_option("--bundle", bundle)->required();
    eval->add_option("--c", eval_c, "control vector; defaults to c_bar");

    std::string dir;
    auto* exp = app.add_subcommand("export", "Write base, maps, AutoTune edit and ground truth as images");
    exp->add_option("--bundle", bundle)->required();
    exp->add_option("--dir", dir)->required();

    std::string address = "127.0.0.1:8080";
    std::size_t capacity = 64, workers = 2;
    auto* serve = app.add_subcommand("serve", "HTTP service over one checkpoint");
    serve->add_option("--checkpoint", checkpoint)->required();
    serve->add_option("--address", address, "host:port; port 0 picks a free port")->capture_default_str();
    serve->add_option("--capacity", capacity, "bundles kept in the LRU store")->capture_default_str();
    serve->add_option("--workers", workers, "concurrent denoise requests")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitBadInput;
    }

    try {
        if (*train) return run_train(config);
        if (*denoise) return run_denoise(checkpoint, input, output, gt);
        if (*edit) return run_edit(bundle, req, output);
        if (*eval) return run_eval(bundle, eval_c);
        if (*exp) return run_export(bundle, dir);
        if (*serve) return run_serve(checkpoint, address, capacity, workers);
    } catch (const rcd::ConfigurationError& e) {
        std::cerr << "rcd: " << e.what() << '\n';
        return kExitBadInput;
    } catch (const rcd::FormatError& e) {
        std::cerr << "rcd: " << e.what() << '\n';
        return kExitBadInput;
    } catch (const rcd::UnderdeterminedError& e) {
        std::cerr << "rcd: " << e.what() << '\n';
        return kExitBadInput;
    } catch (const std::exception& e) {
        std::cerr << "rcd: " << e.what() << '\n';
        return kExitInternal;
    }
    return kExitInternal;
}
