// 2-D DFT built from matrix products with cached cosine/sine matrices, so
// gradients flow through the ordinary matmul tape. Spectra are (re, im)
// tensor pairs. Sizes are arbitrary; cost is the usual row-column O(HW(H+W))
// per channel, plenty at the feature-map sizes this project touches.

#pragma once

#include <unordered_map>

#include "priordet/ops.hpp"

namespace priordet {

template <typename S>
struct ComplexPair {
    Tensor<S> re;
    Tensor<S> im;
};

namespace detail {

template <typename S>
const std::pair<Tensor<S>, Tensor<S>>& dft_matrices(std::int64_t n) {
    thread_local std::unordered_map<std::int64_t, std::pair<Tensor<S>, Tensor<S>>> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    std::vector<S> c(static_cast<std::size_t>(n * n)), s(static_cast<std::size_t>(n * n));
    for (std::int64_t u = 0; u < n; ++u)
        for (std::int64_t v = 0; v < n; ++v) {
            const double ang = 2.0 * M_PI * static_cast<double>((u * v) % n) / static_cast<double>(n);
            c[u * n + v] = static_cast<S>(std::cos(ang));
            s[u * n + v] = static_cast<S>(std::sin(ang));
        }
    auto r = cache.emplace(n, std::make_pair(Tensor<S>::from({n, n}, std::move(c)),
                                             Tensor<S>::from({n, n}, std::move(s))));
    return r.first->second;
}

}  // namespace detail

// Forward 2-D DFT of a real NCHW tensor: X[u,v] = sum x[h,w] e^{-2pi i(uh/H + vw/W)}.
template <typename S>
ComplexPair<S> fft2(const Tensor<S>& x) {
    if (x.rank() != 4) fail_shape("fft2: input must be NCHW, got " + dims_str(x.shape()));
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto& [ch, sh] = detail::dft_matrices<S>(H);
    const auto& [cw, sw] = detail::dft_matrices<S>(W);
    auto xb = reshape(x, {N * C, H, W});
    // F_H x = A - iB with A = C_H x, B = S_H x
    auto A = matmul(ch, xb);
    auto B = matmul(sh, xb);
    // (A - iB)(C_W - i S_W); cos/sin matrices are symmetric
    auto re = sub(matmul(A, cw), matmul(B, sw));
    auto im = neg(add(matmul(A, sw), matmul(B, cw)));
    return {reshape(re, {N, C, H, W}), reshape(im, {N, C, H, W})};
}

// Inverse 2-D DFT; returns both parts so callers can check the imaginary residue.
template <typename S>
ComplexPair<S> ifft2(const ComplexPair<S>& spec) {
    const auto& shp = spec.re.shape();
    if (spec.re.rank() != 4 || spec.im.shape() != shp)
        fail_shape("ifft2: spectrum parts must be matching NCHW tensors");
    const std::int64_t N = shp[0], C = shp[1], H = shp[2], W = shp[3];
    const auto& [ch, sh] = detail::dft_matrices<S>(H);
    const auto& [cw, sw] = detail::dft_matrices<S>(W);
    auto R = reshape(spec.re, {N * C, H, W});
    auto I = reshape(spec.im, {N * C, H, W});
    // conj(F_H) (R + iI) conj(F_W) / (HW), conj(F) = C + iS
    auto P = sub(matmul(ch, R), matmul(sh, I));
    auto Q = add(matmul(ch, I), matmul(sh, R));
    const S scale = S(1) / static_cast<S>(H * W);
    auto re = mul_scalar(sub(matmul(P, cw), matmul(Q, sw)), scale);
    auto im = mul_scalar(add(matmul(P, sw), matmul(Q, cw)), scale);
    return {reshape(re, {N, C, H, W}), reshape(im, {N, C, H, W})};
}

// |X| with a tiny floor inside the square root so zero bins stay finite.
template <typename S>
Tensor<S> amplitude(const ComplexPair<S>& spec, double eps = 1e-24) {
    auto mag2 = add(mul(spec.re, spec.re), mul(spec.im, spec.im));
    return sqrt(add_scalar(mag2, static_cast<S>(eps)));
}

}  // namespace priordet
