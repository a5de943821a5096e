// SPDX-License-Identifier: Apache-2.0
#include "qposer/service.hpp"

#include <algorithm>
#include <charconv>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "qposer/json_io.hpp"

namespace qposer {

ReferenceStore::ReferenceStore(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) fail(ErrorKind::invalid_argument, "reference store capacity must be positive");
}

void ReferenceStore::put(const std::string& name, Pose pose) {
    std::lock_guard lock(mutex_);
    std::erase_if(entries_, [&](const auto& e) { return e.first == name; });
    entries_.emplace_front(name, std::move(pose));
    while (entries_.size() > capacity_) entries_.pop_back();
}

Pose ReferenceStore::get(const std::string& name) {
    std::lock_guard lock(mutex_);
    const auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
    if (it == entries_.end()) fail(ErrorKind::not_found, "unknown reference '" + name + "'");
    entries_.splice(entries_.begin(), entries_, it);
    return entries_.front().second;
}

std::vector<std::string> ReferenceStore::names() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.first);
    return out;
}

std::size_t ReferenceStore::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

int http_status(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::not_found: return 404;
        case ErrorKind::mismatch: return 409;
        default: return 400;
    }
}

namespace {

const nlohmann::json& field(const nlohmann::json& j, const char* name) {
    if (!j.contains(name)) fail(ErrorKind::invalid_argument, std::string("request lacks \"") + name + "\"");
    return j.at(name);
}

std::string string_field(const nlohmann::json& j, const char* name) {
    const auto& v = field(j, name);
    if (!v.is_string()) fail(ErrorKind::invalid_argument, std::string("\"") + name + "\" must be a string");
    return v.get<std::string>();
}

nlohmann::json error_body(ErrorKind kind, const std::string& message) { return {{"error", message}, {"kind", to_string(kind)}}; }

ServiceResponse error_response(int status, ErrorKind kind, const std::string& message) {
    return {status, json_text(error_body(kind, message))};
}

}  // namespace

PoseService::PoseService(QPoserModel model, ServiceOptions options)
    : model_(std::move(model)), options_(std::move(options)), references_(options_.reference_capacity) {}

nlohmann::json PoseService::model_info() const {
    nlohmann::json sizes = nlohmann::json::object();
    for (const auto& cb : model_.layout.codebooks) sizes[cb.id] = cb.size;
    return {{"fingerprint", fingerprint_hex(model_.fingerprint)},
            {"layout", model_.layout.to_json()},
            {"skeleton", model_.skeleton.to_json()},
            {"codebook_sizes", sizes},
            {"slot_count", model_.slot_count()}};
}

ServiceResponse PoseService::handle(const std::string& method, const std::string& path, const std::string& body,
                                    const std::string& content_type) {
    try {
        if (method == "GET" && path == "/model/info") return {200, json_text(model_info())};
        if (method == "GET" && path == "/reference") return {200, json_text({{"references", references_.names()}})};
        if (method != "POST") return error_response(404, ErrorKind::not_found, "no endpoint " + method + " " + path);
        if (path != "/encode" && path != "/decode" && path != "/modify" && path != "/interpolate" && path != "/sample" &&
            path != "/reference")
            return error_response(404, ErrorKind::not_found, "no endpoint POST " + path);
        if (body.size() > options_.max_payload_bytes)
            return error_response(413, ErrorKind::invalid_argument, "payload exceeds " + std::to_string(options_.max_payload_bytes) + " bytes");
        if (content_type.rfind("application/json", 0) != 0)
            return error_response(400, ErrorKind::invalid_argument, "content type must be application/json");
        nlohmann::json request;
        try {
            request = body.empty() ? nlohmann::json::object() : nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::invalid_argument, std::string("malformed JSON: ") + e.what());
        }
        if (!request.is_object()) fail(ErrorKind::invalid_argument, "request body must be a JSON object");
        return {200, json_text(post(path, request))};
    } catch (const Error& e) {
        return error_response(http_status(e.kind()), e.kind(), e.what());
    } catch (const nlohmann::json::exception& e) {
        return error_response(400, ErrorKind::invalid_argument, e.what());
    } catch (const std::exception& e) {
        spdlog::error("{} {}: {}", method, path, e.what());
        return error_response(500, ErrorKind::numeric, e.what());
    }
}

nlohmann::json PoseService::post(const std::string& path, const nlohmann::json& request) {
    const Skeleton& s = model_.skeleton;
    if (path == "/encode") {
        const Pose p = pose_from_json(field(request, "pose"), s);
        const Encoding e = encode(model_, p);
        nlohmann::json out = {{"latent", latent_to_json(model_, e.code)}};
        if (request.value("continuous", false)) {
            if (!options_.expose_continuous) fail(ErrorKind::invalid_argument, "continuous encodings are disabled on this server");
            nlohmann::json rows = nlohmann::json::array();
            for (Eigen::Index r = 0; r < e.continuous.slots.rows(); ++r) {
                nlohmann::json row = nlohmann::json::array();
                for (Eigen::Index c = 0; c < e.continuous.slots.cols(); ++c) row.push_back(e.continuous.slots(r, c));
                rows.push_back(std::move(row));
            }
            out["continuous"] = std::move(rows);
        }
        return out;
    }
    if (path == "/decode") {
        const LatentCode c = latent_from_json(model_, field(request, "latent"));
        return decoded_to_json(decode_quantized(model_, c), s);
    }
    if (path == "/modify") {
        const LatentCode base = latent_from_json(model_, field(request, "base"));
        const std::string part = string_field(request, "part");
        LatentCode source;
        if (request.contains("source")) {
            source = latent_from_json(model_, request.at("source"));
        } else if (request.contains("reference_name")) {
            source = encode_code(model_, references_.get(string_field(request, "reference_name")));
        } else {
            fail(ErrorKind::invalid_argument, "request needs \"source\" or \"reference_name\"");
        }
        const LatentCode out = modify_part(model_, base, part, source);
        nlohmann::json j = decoded_to_json(decode_quantized(model_, out), s);
        j["latent"] = latent_to_json(model_, out);
        return j;
    }
    if (path == "/interpolate") {
        const Pose a = pose_from_json(field(request, "from_pose"), s);
        const Pose b = pose_from_json(field(request, "to_pose"), s);
        const auto& steps_field = field(request, "steps");
        if (!steps_field.is_number_integer()) fail(ErrorKind::invalid_argument, "\"steps\" must be an integer");
        const auto steps = steps_field.get<std::int64_t>();
        if (steps < 2 || steps > 1000) fail(ErrorKind::invalid_argument, "\"steps\" must be in [2, 1000]");
        nlohmann::json frames = nlohmann::json::array();
        for (const auto& f : interpolate(model_, a, b, static_cast<int>(steps))) frames.push_back(decoded_to_json(f, s));
        return {{"frames", std::move(frames)}};
    }
    if (path == "/sample") {
        std::uint64_t seed = 0;
        if (request.contains("seed")) {
            const auto& v = request.at("seed");
            if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
                fail(ErrorKind::invalid_argument, "\"seed\" must be a non-negative integer");
            seed = v.get<std::uint64_t>();
        }
        Rng rng(seed);
        const Sample smp = sample(model_, rng);
        nlohmann::json j = decoded_to_json(smp.pose, s);
        j["latent"] = latent_to_json(model_, smp.code);
        return j;
    }
    // /reference
    const std::string name = string_field(request, "name");
    if (name.empty()) fail(ErrorKind::invalid_argument, "reference name must be non-empty");
    references_.put(name, pose_from_json(field(request, "pose"), s));
    return {{"stored", name}, {"count", references_.size()}};
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
    PoseService& service;
    httplib::Server server;
    explicit Impl(PoseService& s) : service(s) {}
};

HttpServer::HttpServer(PoseService& service) : impl_(std::make_unique<Impl>(service)) {
    auto& srv = impl_->server;
    PoseService& svc = service;
    srv.set_payload_max_length(svc.options().max_payload_bytes);
    if (svc.options().static_dir) {
        if (!srv.set_mount_point("/", svc.options().static_dir->string()))
            fail(ErrorKind::not_found, "static directory " + svc.options().static_dir->string() + " does not exist");
    }
    const auto forward = [&svc](const httplib::Request& req, httplib::Response& res) {
        const auto r = svc.handle(req.method, req.path, req.body, req.get_header_value("Content-Type"));
        res.status = r.status;
        res.set_content(r.body, "application/json");
    };
    for (const char* p : {"/model/info", "/reference"}) srv.Get(p, forward);
    for (const char* p : {"/encode", "/decode", "/modify", "/interpolate", "/sample", "/reference"}) srv.Post(p, forward);
    srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (!res.body.empty()) return;
        const ErrorKind kind = res.status == 404 ? ErrorKind::not_found : ErrorKind::invalid_argument;
        res.set_content(json_text(error_body(kind, "HTTP " + std::to_string(res.status) + " for " + req.method + " " + req.path)),
                        "application/json");
    });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    auto& srv = impl_->server;
    const int bound = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
    if (bound < 0) fail(ErrorKind::invalid_argument, "cannot listen on " + host + ":" + std::to_string(port));
    return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_) impl_->server.stop();
}

std::pair<std::string, int> parse_listen_address(const std::string& address) {
    const auto colon = address.rfind(':');
    if (colon == std::string::npos) fail(ErrorKind::invalid_argument, "listen address must be host:port, got '" + address + "'");
    std::string host = address.substr(0, colon);
    if (host.empty()) host = "127.0.0.1";
    const std::string port_text = address.substr(colon + 1);
    int port = -1;
    const auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
    if (ec != std::errc{} || ptr != port_text.data() + port_text.size() || port < 0 || port > 65535)
        fail(ErrorKind::invalid_argument, "invalid port in listen address '" + address + "'");
    return {host, port};
}

}  // namespace qposer
