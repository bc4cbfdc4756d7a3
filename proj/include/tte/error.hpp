#ifndef TTE_ERROR_HPP
#define TTE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace tte {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace tte

#endif
