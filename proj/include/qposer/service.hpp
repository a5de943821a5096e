// SPDX-License-Identifier: Apache-2.0
//
// JSON-over-HTTP facade over one loaded model.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qposer/error.hpp"
#include "qposer/model.hpp"

namespace qposer {

struct ServiceOptions {
    std::size_t max_payload_bytes = 1 << 20;
    std::size_t reference_capacity = 64;
    bool expose_continuous = false;                 // allow {"continuous": true} on /encode
    std::optional<std::filesystem::path> static_dir;  // served at "/" when set
};

/// Named reference poses, least recently used evicted first. Thread safe.
class ReferenceStore {
public:
    explicit ReferenceStore(std::size_t capacity);

    void put(const std::string& name, Pose pose);
    /// Counts as a use. Throws not_found.
    Pose get(const std::string& name);
    /// Most recently used first.
    std::vector<std::string> names() const;
    std::size_t size() const;

private:
    std::size_t capacity_;
    mutable std::mutex mutex_;
    std::list<std::pair<std::string, Pose>> entries_;
};

struct ServiceResponse {
    int status = 200;
    std::string body;
};

/// Transport-independent request handling; the HTTP server only forwards.
class PoseService {
public:
    explicit PoseService(QPoserModel model, ServiceOptions options = {});

    ServiceResponse handle(const std::string& method, const std::string& path, const std::string& body,
                           const std::string& content_type = "application/json");

    const QPoserModel& model() const { return model_; }
    const ServiceOptions& options() const { return options_; }

    nlohmann::json model_info() const;

private:
    nlohmann::json post(const std::string& path, const nlohmann::json& request);

    const QPoserModel model_;
    const ServiceOptions options_;
    ReferenceStore references_;
};

/// HTTP status for an error kind.
int http_status(ErrorKind kind);

class HttpServer {
public:
    explicit HttpServer(PoseService& service);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    /// Binds host:port (port 0 picks a free one) and returns the bound port.
    int bind(const std::string& host, int port);
    /// Serves until stop(). Blocks.
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// "host:port" or ":port" split into parts. Throws invalid_argument.
std::pair<std::string, int> parse_listen_address(const std::string& address);

}  // namespace qposer
