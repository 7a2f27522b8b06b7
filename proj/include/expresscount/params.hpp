#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "expresscount/rng.hpp"
#include "expresscount/tensor.hpp"

namespace expresscount {

// Named parameter collection shared by every module. Names are canonical
// dotted paths ("lang.layers.0.attn.wq"); iteration order is lexicographic.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor value);
    bool contains(const std::string& name) const { return values_.count(name) != 0; }
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    const std::map<std::string, Tensor>& all() const { return values_; }
    std::map<std::string, Tensor>& all() { return values_; }
    std::size_t total_size() const;

    // A parameter is frozen when its name starts with any frozen prefix.
    void freeze_prefix(const std::string& prefix) { frozen_prefixes_.insert(prefix); }
    void unfreeze_all() { frozen_prefixes_.clear(); }
    bool is_frozen(const std::string& name) const;

    // Weight-loading seam: copies every matching name from an archive map.
    // Shapes must agree; unknown names are reported back, not applied.
    std::vector<std::string> load_from(const std::map<std::string, Tensor>& archive);

private:
    std::map<std::string, Tensor> values_;
    std::set<std::string> frozen_prefixes_;
};

using GradStore = std::map<std::string, Tensor>;

namespace init {
Tensor truncated_normal(std::vector<int> shape, double stddev, Rng& rng);
// He-normal for convolution kernels shaped [out, in, k, k].
Tensor kaiming_conv(int out, int in, int k, Rng& rng);
} // namespace init

} // namespace expresscount
