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


#pragma once

// HTTP front end for single-shot inference and network-free editing.
//
//   POST /denoise           image body (PGM/PPM/PFM) -> JSON {id, c, schedule, ...}
//   GET  /bundle/{id}       RCDB v1 payload
//   POST /edit              JSON {id, c} -> PFM (default) or ?format=pnm
//   GET  /autotune/{id}     JSON {id, c, intensity}
//
// Handlers return plain `Reply` values so they can be exercised without a
// socket; `mount` wires them into an httplib server.

#include <cstddef>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <random>
#include <semaphore>
#include <string>
#include <string_view>
#include <unordered_map>

#include <json.hpp>

#include "rcd/control.hpp"
#include "rcd/error.hpp"
#include "rcd/inference.hpp"
#include "rcd/io/bundle.hpp"
#include "rcd/io/checkpoint.hpp"
#include "rcd/io/image_io.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a `_res` macro that
// collides with Eigen parameter names.
#include <httplib.h>

namespace rcd::service {

using json = nlohmann::json;

struct Options {
    std::size_t capacity = 64;
    std::size_t workers = 2;
};

struct Reply {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

inline Reply json_reply(int status, const json& j) { return {status, "application/json", j.dump()}; }

inline Reply error_reply(int status, const std::string& message, json extra = json::object()) {
    extra["error"] = message;
    return json_reply(status, extra);
}

/// A bundle plus its wire encoding, both frozen at insertion.
struct StoredBundle {
    io::EditBundle bundle;
    std::string encoded;
};

/// In-memory LRU store. Entries are immutable and handed out as shared
/// pointers, so a reader keeps its bundle alive even if it is evicted.
class BundleStore {
public:
    explicit BundleStore(std::size_t capacity) : capacity_(capacity), ids_(std::random_device{}()) {
        if (capacity_ == 0) throw ConfigurationError("bundle store capacity must be >= 1");
    }

    std::string insert(io::EditBundle bundle) {
        std::string encoded = io::encode_bundle(bundle);
        auto entry = std::make_shared<const StoredBundle>(StoredBundle{std::move(bundle), std::move(encoded)});
        std::lock_guard lock(mutex_);
        std::string id = fresh_id();
        order_.push_front(id);
        index_.emplace(id, Slot{std::move(entry), order_.begin()});
        while (index_.size() > capacity_) {
            index_.erase(order_.back());
            order_.pop_back();
        }
        return id;
    }

    std::shared_ptr<const StoredBundle> find(const std::string& id) {
        std::lock_guard lock(mutex_);
        const auto it = index_.find(id);
        if (it == index_.end()) return nullptr;
        order_.splice(order_.begin(), order_, it->second.position);
        return it->second.entry;
    }

    std::size_t size() const {
        std::lock_guard lock(mutex_);
        return index_.size();
    }

    std::size_t capacity() const { return capacity_; }

private:
    struct Slot {
        std::shared_ptr<const StoredBundle> entry;
        std::list<std::string>::iterator position;
    };

    // 128 random bits, hex encoded. Caller holds the lock.
    std::string fresh_id() {
        static constexpr char hex[] = "0123456789abcdef";
        for (;;) {
            std::string id;
            for (int word = 0; word < 2; ++word) {
                std::uint64_t v = ids_();
                for (int k = 0; k < 16; ++k, v >>= 4) id.push_back(hex[v & 0xf]);
            }
            if (!index_.contains(id)) return id;
        }
    }

    std::size_t capacity_;
    mutable std::mutex mutex_;
    std::mt19937_64 ids_;
    std::list<std::string> order_;
    std::unordered_map<std::string, Slot> index_;
};

inline json schedule_json(const io::EditBundle& b) {
    json levels = json::array();
    for (float l : b.schedule) levels.push_back(static_cast<double>(l));
    return levels;
}

inline json coeffs_json(std::span<const float> c) {
    json out = json::array();
    for (float v : c) out.push_back(static_cast<double>(v));
    return out;
}

class Service {
public:
    Service(io::Checkpoint checkpoint, Options opt = {})
        : checkpoint_(std::move(checkpoint)),
          store_(opt.capacity),
          workers_(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(opt.workers, 1, kMaxWorkers))) {
        require_model(checkpoint_);
    }

    Reply denoise(std::string_view image_bytes) {
        ImageTensor image(1, 1, 1);
        try {
            image = io::decode_image(image_bytes);
        } catch (const FormatError& e) {
            return error_reply(400, std::string("cannot decode image: ") + e.what());
        }
        io::EditBundle bundle;
        try {
            Permit permit(workers_);
            Diagnostics diag;
            bundle = denoise_to_bundle(checkpoint_, image, std::nullopt, &diag);
        } catch (const ConfigurationError& e) {
            return error_reply(400, e.what());
        } catch (const Error& e) {
            return error_reply(500, e.what());
        }
        const double level = intensity(bundle.autotune_vector(), bundle.level_schedule());
        json j{{"c", coeffs_json(bundle.autotune)},
               {"schedule", schedule_json(bundle)},
               {"intensity", level},
               {"intensity_255", level * 255.0},
               {"height", bundle.height},
               {"width", bundle.width},
               {"channels", bundle.channels},
               {"levels", bundle.levels()}};
        j["id"] = store_.insert(std::move(bundle));
        return json_reply(200, j);
    }

    Reply bundle(const std::string& id) {
        const auto entry = store_.find(id);
        if (!entry) return error_reply(404, "unknown bundle id");
        return {200, "application/octet-stream", entry->encoded};
    }

    Reply autotune(const std::string& id) {
        const auto entry = store_.find(id);
        if (!entry) return error_reply(404, "unknown bundle id");
        const auto& b = entry->bundle;
        const double level = intensity(b.autotune_vector(), b.level_schedule());
        return json_reply(200, {{"id", id}, {"c", coeffs_json(b.autotune)}, {"intensity", level},
                                {"intensity_255", level * 255.0}});
    }

    /// Pure interpolation over the stored bundle; never touches the model.
    Reply edit(std::string_view body, std::string_view format = "pfm") {
        if (format != "pfm" && format != "pnm") return error_reply(400, "format must be pfm or pnm");
        const json req = json::parse(body, nullptr, false);
        if (req.is_discarded() || !req.is_object()) return error_reply(400, "request body must be a JSON object");
        if (!req.contains("id") || !req["id"].is_string()) return error_reply(400, "missing string field 'id'");
        const auto entry = store_.find(req["id"].get<std::string>());
        if (!entry) return error_reply(404, "unknown bundle id");
        const auto& b = entry->bundle;

        const json expected{{"expected_length", b.levels()}};
        if (!req.contains("c") || !req["c"].is_array())
            return error_reply(400, "field 'c' must be an array of " + std::to_string(b.levels()) + " numbers",
                               expected);
        const json& cj = req["c"];
        if (cj.size() != b.levels())
            return error_reply(400, "control vector has length " + std::to_string(cj.size()) + ", expected " +
                                        std::to_string(b.levels()), expected);
        std::vector<double> c;
        for (const auto& v : cj) {
            if (!v.is_number() || !std::isfinite(v.get<double>()))
                return error_reply(400, "control vector entries must be finite numbers", expected);
            c.push_back(v.get<double>());
        }
        const ImageTensor out = io::edit_bundle(b, c);
        if (format == "pnm") return {200, b.channels == 3 ? "image/x-portable-pixmap" : "image/x-portable-graymap",
                                     io::encode_pnm(out)};
        return {200, "image/x-portable-floatmap", io::encode_pfm(out)};
    }

    BundleStore& store() { return store_; }

    void mount(httplib::Server& server) {
        const auto send = [](httplib::Response& res, const Reply& r) {
            res.status = r.status;
            res.set_content(r.body, r.content_type);
        };
        server.Post("/denoise", [this, send](const httplib::Request& req, httplib::Response& res) {
            send(res, denoise(req.body));
        });
        server.Get("/bundle/:id", [this, send](const httplib::Request& req, httplib::Response& res) {
            send(res, bundle(req.path_params.at("id")));
        });
        server.Get("/autotune/:id", [this, send](const httplib::Request& req, httplib::Response& res) {
            send(res, autotune(req.path_params.at("id")));
        });
        server.Post("/edit", [this, send](const httplib::Request& req, httplib::Response& res) {
            const std::string format = req.has_param("format") ? req.get_param_value("format") : "pfm";
            send(res, edit(req.body, format));
        });
    }

private:
    static constexpr std::size_t kMaxWorkers = 256;
    using Semaphore = std::counting_semaphore<kMaxWorkers>;

    struct Permit {
        explicit Permit(Semaphore& s) : sem(s) { sem.acquire(); }
        ~Permit() { sem.release(); }
        Semaphore& sem;
    };

    const io::Checkpoint checkpoint_;
    BundleStore store_;
    Semaphore workers_;
};

}  // namespace rcd::service
