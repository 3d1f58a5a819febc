// Per-image token matrix: row 0 is the class token, rows 1..L are patch
// tokens in raster order.

#ifndef BATRFST_TOKENS_HPP_
#define BATRFST_TOKENS_HPP_

#include <cstddef>

#include "batrfst/tensor.hpp"

namespace batr {

template <typename S>
struct token_set {
  tensor<S> tokens;  // (L+1) x D
  std::size_t image_id = 0;
  std::size_t view_id = 0;

  std::size_t patch_count() const { return tokens.dim(0) - 1; }
  std::size_t embed_dim() const { return tokens.dim(1); }
};

}  // namespace batr

#endif  // BATRFST_TOKENS_HPP_
