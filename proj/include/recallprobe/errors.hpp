#pragma once

#include <stdexcept>
#include <string>

namespace rp {

// Error categories. The command line tool maps these onto process exit codes,
// so library code should pick the most specific one that applies.
enum class errc {
  validation,       // bad arguments, malformed records, violated preconditions
  bad_magic,        // weight container does not start with the expected tag
  bad_version,      // container version not understood
  bad_shape,        // tensor missing, duplicated, or with unexpected dimensions
  truncated,        // file ends before the declared payload
  io,               // filesystem failures
  fully_masked_row, // softmax over a row whose entries are all -inf
};

class Error : public std::runtime_error {
 public:
  Error(errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  errc code() const noexcept { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& msg) { throw Error(code, msg); }

}  // namespace rp
