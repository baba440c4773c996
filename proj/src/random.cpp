#include "dagforge/random.hpp"

#include <sstream>
#include <stdexcept>

namespace dagforge {

std::string Rng::serialize() const {
    std::ostringstream os;
    os << engine_ << ' ' << normal_;
    return os.str();
}

void Rng::deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> engine_ >> normal_;
    if (!is) throw std::invalid_argument("Rng::deserialize: malformed state");
}

}  // namespace dagforge
