#include "expresscount/tensor.hpp"

#include <cmath>
#include <sstream>

#include "expresscount/errors.hpp"

namespace expresscount {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        XC_EXPECT(d >= 0, "negative dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<int> shape_, double fill) : shape(std::move(shape_)) {
    data.assign(shape_numel(shape), fill);
}

Tensor::Tensor(std::vector<int> shape_, std::vector<double> values)
    : shape(std::move(shape_)), data(values.begin(), values.end()) {
    XC_EXPECT(data.size() == shape_numel(shape),
              "tensor data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
}

Tensor::Tensor(std::vector<int> shape_, Storage values) : shape(std::move(shape_)), data(std::move(values)) {
    XC_EXPECT(data.size() == shape_numel(shape),
              "tensor data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor Tensor::transposed() const {
    XC_EXPECT(rank() == 2, "transpose needs a 2-D tensor, got " + shape_str(shape));
    Tensor out({shape[1], shape[0]});
    for (int r = 0; r < shape[0]; ++r)
        for (int c = 0; c < shape[1]; ++c) out.at(c, r) = at(r, c);
    return out;
}

} // namespace expresscount
