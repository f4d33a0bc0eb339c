#pragma once

#include <stdexcept>
#include <string>

namespace owclip {

// Base for every error raised by the library. `kind()` is the stable name
// reported through the HTTP API and the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define OWCLIP_DEFINE_ERROR(Name)                                    \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(#Name, what) {}   \
  };

OWCLIP_DEFINE_ERROR(DimensionError)
OWCLIP_DEFINE_ERROR(ConfigError)
OWCLIP_DEFINE_ERROR(InputError)
OWCLIP_DEFINE_ERROR(FormatError)
OWCLIP_DEFINE_ERROR(GuardError)
OWCLIP_DEFINE_ERROR(StateError)
OWCLIP_DEFINE_ERROR(NumericsError)
OWCLIP_DEFINE_ERROR(RangeError)
OWCLIP_DEFINE_ERROR(ParseError)
OWCLIP_DEFINE_ERROR(NoPhrasesError)
OWCLIP_DEFINE_ERROR(IngestError)
OWCLIP_DEFINE_ERROR(ConflictError)
OWCLIP_DEFINE_ERROR(StartupError)
OWCLIP_DEFINE_ERROR(NotFoundError)
OWCLIP_DEFINE_ERROR(BusyError)
OWCLIP_DEFINE_ERROR(ProviderError)

#undef OWCLIP_DEFINE_ERROR

}  // namespace owclip
