#include "expresscount/params.hpp"

#include <cmath>

#include "expresscount/errors.hpp"

namespace expresscount {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
    XC_EXPECT(!contains(name), "duplicate parameter name " + name);
    return values_.emplace(name, std::move(value)).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = values_.find(name);
    XC_EXPECT(it != values_.end(), "unknown parameter " + name);
    return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = values_.find(name);
    XC_EXPECT(it != values_.end(), "unknown parameter " + name);
    return it->second;
}

std::size_t ParamStore::total_size() const {
    std::size_t n = 0;
    for (const auto& [_, t] : values_) n += t.size();
    return n;
}

bool ParamStore::is_frozen(const std::string& name) const {
    for (const auto& p : frozen_prefixes_)
        if (name.compare(0, p.size(), p) == 0) return true;
    return false;
}

std::vector<std::string> ParamStore::load_from(const std::map<std::string, Tensor>& archive) {
    std::vector<std::string> unknown;
    for (const auto& [name, t] : archive) {
        auto it = values_.find(name);
        if (it == values_.end()) {
            unknown.push_back(name);
            continue;
        }
        if (it->second.shape != t.shape)
            throw validation_error("weight archive entry " + name + " has shape " + shape_str(t.shape) +
                                   ", expected " + shape_str(it->second.shape));
        it->second.data = t.data;
    }
    return unknown;
}

namespace init {

Tensor truncated_normal(std::vector<int> shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.truncated_normal(stddev);
    return t;
}

Tensor kaiming_conv(int out, int in, int k, Rng& rng) {
    Tensor t({out, in, k, k});
    const double stddev = std::sqrt(2.0 / (in * k * k));
    for (auto& v : t.data) v = rng.normal() * stddev;
    return t;
}

} // namespace init
} // namespace expresscount
