#pragma once

// Seam for a pretrained latent-diffusion backend. The heavy model runs out of
// process (weights, UNet, encoders); this adapter speaks a small JSON/HTTP
// protocol and exposes the result behind the Denoiser interface, including
// the latent codec so rendered images can be mapped into the backend's
// latent space. Construction requires an explicit opt-in through the
// SCOREDIST_ADAPTER_URL environment variable; a missing or unreachable
// service raises BackendUnavailable rather than falling back silently.
//
// Protocol:
//   GET  /capabilities -> {latent_shape, horizon, supports_visual_condition,
//                          supports_perturbed_attention, concurrent_queries}
//   GET  /schedule     -> {beta: [...], alpha_bar: [...]}
//   POST /predict      -> {eps: [...]} for {x, shape, t, text, visual, tau,
//                          perturb, model_id}
//   POST /encode       -> {latent, shape} for {image, shape}
//   POST /decode       -> {image, shape} for {latent, shape}
//   POST /generate     -> {image, shape} for {prompt, steps, seed}   (optional)

#include <httplib.h>
#include <json.hpp>

#include <cstdlib>
#include <memory>
#include <stdexcept>
#include <string>

#include "scoredist/denoiser.hpp"
#include "scoredist/schedule.hpp"
#include "scoredist/tensor.hpp"

namespace scoredist {

struct BackendUnavailable : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline const char* kAdapterUrlEnv = "SCOREDIST_ADAPTER_URL";

class ExternalAdapter : public Denoiser {
public:
    using json = nlohmann::json;

    ExternalAdapter(std::string base_url, std::string model_id, std::string device)
        : base_url_(std::move(base_url)), model_id_(std::move(model_id)),
          device_(std::move(device)), client_(base_url_) {
        client_.set_connection_timeout(5);
        client_.set_read_timeout(120);
        auto res = client_.Get("/capabilities");
        if (!res || res->status != 200) {
            throw BackendUnavailable("external adapter at " + base_url_ +
                                     " is not reachable; start the model service or unset " +
                                     std::string(kAdapterUrlEnv));
        }
        const json j = json::parse(res->body);
        caps_.latent_shape = j.at("latent_shape").get<std::vector<std::size_t>>();
        caps_.horizon = j.at("horizon").get<int>();
        caps_.supports_visual_condition = j.at("supports_visual_condition").get<bool>();
        caps_.supports_perturbed_attention = j.at("supports_perturbed_attention").get<bool>();
        caps_.concurrent_queries = j.value("concurrent_queries", false);
    }

    Tensor predict(const DenoiserQuery& query) const override {
        json req;
        req["x"] = query.x.raw();
        req["shape"] = query.x.shape();
        req["t"] = query.t;
        req["model_id"] = model_id_;
        req["device"] = device_;
        req["tau"] = query.conditions.fusion_scale;
        req["perturb"] = query.perturb_attention;
        if (query.conditions.text) {
            req["text"] = *query.conditions.text;
        } else {
            req["text"] = nullptr;
        }
        if (query.conditions.visual) {
            req["visual"] = {{"shape", query.conditions.visual->shape()},
                             {"data", query.conditions.visual->raw()}};
        } else {
            req["visual"] = nullptr;
        }
        const json resp = post_("/predict", req);
        Tensor out(query.x.shape(), resp.at("eps").get<std::vector<double>>());
        return out;
    }

    DenoiserCapabilities capabilities() const override { return caps_; }

    std::string id() const override { return "adapter:" + model_id_; }

    // The backend's own schedule arrays, used as an oracle against
    // make_schedule.
    DiffusionSchedule schedule() const {
        auto res = client_.Get("/schedule");
        if (!res || res->status != 200) {
            throw BackendUnavailable("external adapter: /schedule failed");
        }
        const json j = json::parse(res->body);
        return DiffusionSchedule(j.at("beta").get<std::vector<double>>());
    }

    Tensor encode(const Tensor& image) const {
        json req{{"image", image.raw()}, {"shape", image.shape()}};
        const json resp = post_("/encode", req);
        return Tensor(resp.at("shape").get<std::vector<std::size_t>>(),
                      resp.at("latent").get<std::vector<double>>());
    }

    Tensor decode(const Tensor& latent) const {
        json req{{"latent", latent.raw()}, {"shape", latent.shape()}};
        const json resp = post_("/decode", req);
        return Tensor(resp.at("shape").get<std::vector<std::size_t>>(),
                      resp.at("image").get<std::vector<double>>());
    }

    // Text-to-image sample used as a self-guidance visual prompt.
    Tensor generate(const std::string& prompt, int steps, uint64_t seed) const {
        json req{{"prompt", prompt}, {"steps", steps}, {"seed", seed}};
        const json resp = post_("/generate", req);
        return Tensor(resp.at("shape").get<std::vector<std::size_t>>(),
                      resp.at("image").get<std::vector<double>>());
    }

    // The backend-side image encoder + projector; returns the token sequence.
    Tensor embed_visual(const Tensor& image) const {
        json req{{"image", image.raw()}, {"shape", image.shape()}};
        const json resp = post_("/embed_visual", req);
        return Tensor(resp.at("shape").get<std::vector<std::size_t>>(),
                      resp.at("tokens").get<std::vector<double>>());
    }

private:
    json post_(const std::string& path, const json& req) const {
        auto res = client_.Post(path, req.dump(), "application/json");
        if (!res) {
            throw BackendUnavailable("external adapter: request to " + path + " failed");
        }
        if (res->status != 200) {
            throw std::runtime_error("external adapter: " + path + " returned status " +
                                     std::to_string(res->status) + ": " + res->body);
        }
        return json::parse(res->body);
    }

    std::string base_url_, model_id_, device_;
    mutable httplib::Client client_;
    DenoiserCapabilities caps_;
};

// Entry point guarded by the environment opt-in.
inline std::unique_ptr<ExternalAdapter> external_adapter(const std::string& model_id,
                                                         const std::string& device) {
    const char* url = std::getenv(kAdapterUrlEnv);
    if (url == nullptr || *url == '\0') {
        throw BackendUnavailable(std::string("external adapter not configured: set ") +
                                 kAdapterUrlEnv + " to the model service endpoint");
    }
    return std::make_unique<ExternalAdapter>(url, model_id, device);
}

}  // namespace scoredist
