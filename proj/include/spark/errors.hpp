#pragma once

#include <stdexcept>
#include <string>

namespace spark {

// A referenced file or artifact does not exist. Kept distinct from other
// runtime errors so the CLI can map it to its own exit code.
struct MissingArtifactError : std::runtime_error {
    explicit MissingArtifactError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace spark
