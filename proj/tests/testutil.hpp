// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "saelab/tensor.hpp"

namespace saelab::testutil {

inline double rel_err(double analytic, double numeric) {
    double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
    return std::fabs(analytic - numeric) / denom;
}

/// Central finite-difference gradient check. loss_fn must rebuild the graph
/// from the current parameter values on every call and return a scalar.
/// Returns the worst relative error over all entries of all params.
inline double finite_diff_check(const std::vector<Tensor>& params,
                                const std::function<Tensor()>& loss_fn, double step = 1e-5) {
    Tensor loss = loss_fn();
    for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
    backward(loss);

    std::vector<std::vector<double>> analytic;
    for (const Tensor& p : params) analytic.push_back(p.grad());

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        for (size_t i = 0; i < p.numel(); ++i) {
            double saved = p.at(i);
            p.mut(i) = saved + step;
            double lp = loss_fn().value();
            p.mut(i) = saved - step;
            double lm = loss_fn().value();
            p.mut(i) = saved;
            double numeric = (lp - lm) / (2.0 * step);
            worst = std::max(worst, rel_err(analytic[pi][i], numeric));
        }
    }
    return worst;
}

/// Unique scratch directory under the system temp root, removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("saelab_test_" + tag + "_" + std::to_string(counter()++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::filesystem::path path_;
};

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

}  // namespace saelab::testutil
