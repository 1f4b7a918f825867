#pragma once

#include <stdexcept>

namespace memt {

// A sentence whose centered embedding has (near-)zero norm cannot be placed
// on the unit sphere; callers either fail or exclude the sentence.
struct DegenerateEmbeddingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace memt
