#pragma once

#include <ostream>

namespace expresscount {

// Exit codes: 0 success, 1 user error, 2 internal error. Errors print one
// line "error[E_CODE]: message" on `err`.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace expresscount
