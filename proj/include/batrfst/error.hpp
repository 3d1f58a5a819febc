// Error taxonomy shared by all modules. Each kind maps to a CLI exit code.

#ifndef BATRFST_ERROR_HPP_
#define BATRFST_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace batr {

enum class errc {
  dimension,   // shape mismatch between operands
  parameter,   // invalid argument value (rate, temperature, ...)
  usage,       // API misuse (backward on non-scalar, missing grad, ...)
  dataset,     // dataset file or split problems
  checkpoint,  // checkpoint file problems
  config,      // config file problems
  io,          // filesystem problems
  internal     // broken invariant (a bug)
};

class error : public std::runtime_error {
 public:
  error(errc kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  errc kind() const { return kind_; }

 private:
  errc kind_;
};

inline error dimension_error(const std::string& msg) { return error(errc::dimension, msg); }
inline error parameter_error(const std::string& msg) { return error(errc::parameter, msg); }
inline error usage_error(const std::string& msg) { return error(errc::usage, msg); }
inline error dataset_error(const std::string& msg) { return error(errc::dataset, msg); }
inline error checkpoint_error(const std::string& msg) { return error(errc::checkpoint, msg); }
inline error config_error(const std::string& msg) { return error(errc::config, msg); }
inline error io_error(const std::string& msg) { return error(errc::io, msg); }
inline error internal_error(const std::string& msg) { return error(errc::internal, msg); }

}  // namespace batr

#endif  // BATRFST_ERROR_HPP_
