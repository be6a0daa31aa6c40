#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mplex/common.hpp"

namespace mplex {

class IoError : public Error {
public:
    using Error::Error;
};

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open '" + path + "' for reading");
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Outputs of one command, held in memory until commit(). Each file is written
// to a sibling temporary and renamed into place; if any write fails the
// temporaries are removed and no target is touched.
class ArtifactSet {
public:
    void add(std::string path, std::string content) {
        for (const auto& [p, c] : files_) {
            if (p == path) {
                throw InvariantError("artifact '" + path + "' added twice");
            }
        }
        files_.emplace_back(std::move(path), std::move(content));
    }

    const std::vector<std::pair<std::string, std::string>>& files() const { return files_; }

    const std::string& content(const std::string& path) const {
        for (const auto& [p, c] : files_) {
            if (p == path) {
                return c;
            }
        }
        throw InvariantError("no artifact named '" + path + "'");
    }

    void commit() const {
        namespace fs = std::filesystem;
        std::vector<std::string> temps;
        auto cleanup = [&] {
            std::error_code ec;
            for (const auto& t : temps) {
                fs::remove(t, ec);
            }
        };
        try {
            for (const auto& [path, content] : files_) {
                const fs::path target(path);
                if (target.has_parent_path()) {
                    fs::create_directories(target.parent_path());
                }
                const std::string tmp = path + ".tmp";
                temps.push_back(tmp);
                std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
                if (!f) {
                    throw IoError("cannot open '" + tmp + "' for writing");
                }
                f.write(content.data(), static_cast<std::streamsize>(content.size()));
                f.close();
                if (!f) {
                    throw IoError("failed writing '" + tmp + "'");
                }
            }
            for (std::size_t i = 0; i < files_.size(); ++i) {
                fs::rename(temps[i], files_[i].first);
            }
        } catch (const fs::filesystem_error& e) {
            cleanup();
            throw IoError(e.what());
        } catch (...) {
            cleanup();
            throw;
        }
    }

private:
    std::vector<std::pair<std::string, std::string>> files_;
};

}  // namespace mplex
