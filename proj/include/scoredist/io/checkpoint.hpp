#pragma once

// Scene checkpoints: the flat parameter vector together with its named
// layout and the renderer identifier, as one JSON document. Also the on-disk
// form of multi-view reference grids (meta.json plus one PNG per view).

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "scoredist/io/png.hpp"
#include "scoredist/scene.hpp"
#include "scoredist/sgc.hpp"

namespace scoredist {

inline void save_scene_checkpoint(const SceneParameters& scene, const std::string& renderer_id,
                                  const std::string& path) {
    scene.validate();
    nlohmann::json j;
    j["renderer"] = renderer_id;
    j["layout"] = nlohmann::json::array();
    for (const auto& s : scene.layout.slices) {
        j["layout"].push_back({{"name", s.name}, {"offset", s.offset}, {"size", s.size}});
    }
    j["values"] = scene.values.raw();
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write scene checkpoint " + path);
    os << j.dump() << "\n";
}

inline std::pair<SceneParameters, std::string> load_scene_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open scene checkpoint " + path);
    nlohmann::json j;
    is >> j;
    SceneParameters scene;
    scene.values = Tensor({j.at("values").size()}, j.at("values").get<std::vector<double>>());
    for (const auto& s : j.at("layout")) {
        scene.layout.slices.push_back({s.at("name").get<std::string>(),
                                       s.at("offset").get<std::size_t>(),
                                       s.at("size").get<std::size_t>()});
    }
    scene.validate();
    return {std::move(scene), j.at("renderer").get<std::string>()};
}

inline void save_reference(const MultiViewReference& reference, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["provenance"] = reference.provenance;
    meta["views"] = nlohmann::json::array();
    for (std::size_t v = 0; v < 4; ++v) {
        const std::string name = std::string(to_string(ViewGrid::order[v])) + ".png";
        save_png(reference.views[v], (fs::path(dir) / name).string());
        meta["views"].push_back(name);
    }
    std::ofstream os(fs::path(dir) / "meta.json");
    if (!os) throw std::runtime_error("cannot write reference meta in " + dir);
    os << meta.dump(2) << "\n";
}

inline MultiViewReference load_reference(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream is(fs::path(dir) / "meta.json");
    if (!is) throw std::runtime_error("no reference meta.json in " + dir);
    nlohmann::json meta;
    is >> meta;
    MultiViewReference ref;
    ref.provenance = meta.at("provenance").get<std::string>();
    const auto views = meta.at("views").get<std::vector<std::string>>();
    if (views.size() != 4) throw std::runtime_error("reference must carry four views");
    for (std::size_t v = 0; v < 4; ++v) {
        ref.views[v] = load_png((fs::path(dir) / views[v]).string());
    }
    return ref;
}

}  // namespace scoredist
