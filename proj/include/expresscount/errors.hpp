#pragma once

#include <stdexcept>
#include <string>

namespace expresscount {

// Every error carries a short machine-greppable code. The CLI maps user-facing
// codes to exit status 1 and everything else to 2.
class error : public std::runtime_error {
public:
    error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }
    virtual bool is_user_error() const noexcept { return false; }

private:
    std::string code_;
};

class user_error : public error {
public:
    using error::error;
    bool is_user_error() const noexcept override { return true; }
};

struct load_error : user_error {
    explicit load_error(const std::string& m) : user_error("E_LOAD", m) {}
};
struct validation_error : user_error {
    explicit validation_error(const std::string& m) : user_error("E_VALIDATION", m) {}
};
struct config_error : user_error {
    explicit config_error(const std::string& m) : user_error("E_CONFIG", m) {}
};
struct generation_error : user_error {
    explicit generation_error(const std::string& m) : user_error("E_GENERATION", m) {}
};
struct annotation_error : user_error {
    annotation_error(const std::string& m, std::string last_response = {})
        : user_error("E_ANNOTATION", m), last_response(std::move(last_response)) {}
    std::string last_response;
};
struct io_error : error {
    explicit io_error(const std::string& m) : error("E_IO", m) {}
};
struct contract_error : error {
    explicit contract_error(const std::string& m) : error("E_CONTRACT", m) {}
};
struct numerical_error : error {
    explicit numerical_error(const std::string& m) : error("E_NUMERICAL", m) {}
};

#define XC_EXPECT(cond, msg)                                     \
    do {                                                         \
        if (!(cond)) throw ::expresscount::contract_error(msg);  \
    } while (0)

} // namespace expresscount
