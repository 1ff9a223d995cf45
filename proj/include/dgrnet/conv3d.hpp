#pragma once

// 3-D cross-correlation with zero padding. The stride-1 path is written as
// shift-and-accumulate over contiguous rows so the inner loops vectorize;
// stride 2 (used by the encoder's downsampling stages) takes a plain path.
// OpenMP splits work across output (or input) channels, so every element is
// written by exactly one thread and results do not depend on thread count.

#include "dgrnet/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dgrnet {

struct Conv3dDims {
    int Ci, D, H, W;
    int Co, K;
    int pad, stride;
    int Do, Ho, Wo;
};

inline Conv3dDims conv3d_dims(const Shape& in, const Shape& kernel, int padding, int stride) {
    check(in.size() == 4, "conv3d: input must be [C,D,H,W], got " + shape_str(in));
    check(kernel.size() == 5, "conv3d: kernel must be [Co,Ci,k,k,k], got " + shape_str(kernel));
    Conv3dDims d;
    d.Ci = in[0];
    d.D = in[1];
    d.H = in[2];
    d.W = in[3];
    d.Co = kernel[0];
    d.K = kernel[2];
    check(kernel[2] == kernel[3] && kernel[3] == kernel[4], "conv3d: kernel must be cubic, got " + shape_str(kernel));
    check(d.K % 2 == 1, "conv3d: kernel size must be odd, got " + std::to_string(d.K));
    check(kernel[1] == d.Ci, "conv3d: kernel expects " + std::to_string(kernel[1]) +
                                 " input channels (kernel " + shape_str(kernel) + ") but input has " +
                                 std::to_string(d.Ci) + " (input " + shape_str(in) + ")");
    check(padding == 0 || padding == (d.K - 1) / 2,
          "conv3d: padding must be 0 or (k-1)/2, got " + std::to_string(padding));
    check(stride == 1 || stride == 2, "conv3d: stride must be 1 or 2, got " + std::to_string(stride));
    d.pad = padding;
    d.stride = stride;
    d.Do = (d.D + 2 * padding - d.K) / stride + 1;
    d.Ho = (d.H + 2 * padding - d.K) / stride + 1;
    d.Wo = (d.W + 2 * padding - d.K) / stride + 1;
    check(d.Do > 0 && d.Ho > 0 && d.Wo > 0, "conv3d: kernel larger than padded input");
    return d;
}

namespace detail {

template <class Real>
void conv3d_forward(const Real* in, const Real* w, const Real* b, Real* out, const Conv3dDims& d) {
    const std::size_t out_slice = static_cast<std::size_t>(d.Do) * d.Ho * d.Wo;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int co = 0; co < d.Co; ++co) {
        Real* oc = out + co * out_slice;
        std::fill(oc, oc + out_slice, b ? b[co] : Real(0));
        for (int ci = 0; ci < d.Ci; ++ci) {
            const Real* ic = in + static_cast<std::size_t>(ci) * d.D * d.H * d.W;
            for (int kz = 0; kz < d.K; ++kz)
                for (int ky = 0; ky < d.K; ++ky)
                    for (int kx = 0; kx < d.K; ++kx) {
                        const Real wv =
                            w[(((static_cast<std::size_t>(co) * d.Ci + ci) * d.K + kz) * d.K + ky) * d.K + kx];
                        if (wv == Real(0)) continue;
                        const int dz = kz - d.pad, dy = ky - d.pad, dx = kx - d.pad;
                        if (d.stride == 1) {
                            const int z0 = std::max(0, -dz), z1 = std::min(d.Do, d.D - dz);
                            const int y0 = std::max(0, -dy), y1 = std::min(d.Ho, d.H - dy);
                            const int x0 = std::max(0, -dx), x1 = std::min(d.Wo, d.W - dx);
                            for (int zo = z0; zo < z1; ++zo)
                                for (int yo = y0; yo < y1; ++yo) {
                                    const Real* irow =
                                        ic + (static_cast<std::size_t>(zo + dz) * d.H + (yo + dy)) * d.W + dx;
                                    Real* orow = oc + (static_cast<std::size_t>(zo) * d.Ho + yo) * d.Wo;
                                    for (int xo = x0; xo < x1; ++xo) orow[xo] += wv * irow[xo];
                                }
                        } else {
                            for (int zo = 0; zo < d.Do; ++zo) {
                                const int zi = zo * d.stride + dz;
                                if (zi < 0 || zi >= d.D) continue;
                                for (int yo = 0; yo < d.Ho; ++yo) {
                                    const int yi = yo * d.stride + dy;
                                    if (yi < 0 || yi >= d.H) continue;
                                    const Real* irow = ic + (static_cast<std::size_t>(zi) * d.H + yi) * d.W;
                                    Real* orow = oc + (static_cast<std::size_t>(zo) * d.Ho + yo) * d.Wo;
                                    for (int xo = 0; xo < d.Wo; ++xo) {
                                        const int xi = xo * d.stride + dx;
                                        if (xi >= 0 && xi < d.W) orow[xo] += wv * irow[xi];
                                    }
                                }
                            }
                        }
                    }
        }
    }
}

template <class Real>
void conv3d_backward_input(const Real* w, const Real* gout, Real* gin, const Conv3dDims& d) {
    const std::size_t in_slice = static_cast<std::size_t>(d.D) * d.H * d.W;
    const std::size_t out_slice = static_cast<std::size_t>(d.Do) * d.Ho * d.Wo;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int ci = 0; ci < d.Ci; ++ci) {
        Real* gc = gin + ci * in_slice;
        for (int co = 0; co < d.Co; ++co) {
            const Real* goc = gout + co * out_slice;
            for (int kz = 0; kz < d.K; ++kz)
                for (int ky = 0; ky < d.K; ++ky)
                    for (int kx = 0; kx < d.K; ++kx) {
                        const Real wv =
                            w[(((static_cast<std::size_t>(co) * d.Ci + ci) * d.K + kz) * d.K + ky) * d.K + kx];
                        if (wv == Real(0)) continue;
                        const int dz = kz - d.pad, dy = ky - d.pad, dx = kx - d.pad;
                        if (d.stride == 1) {
                            // zi = zo + dz  =>  zi in [max(0,dz), min(D, Do+dz))
                            const int z0 = std::max(0, dz), z1 = std::min(d.D, d.Do + dz);
                            const int y0 = std::max(0, dy), y1 = std::min(d.H, d.Ho + dy);
                            const int x0 = std::max(0, dx), x1 = std::min(d.W, d.Wo + dx);
                            for (int zi = z0; zi < z1; ++zi)
                                for (int yi = y0; yi < y1; ++yi) {
                                    Real* grow = gc + (static_cast<std::size_t>(zi) * d.H + yi) * d.W;
                                    const Real* gorow =
                                        goc + (static_cast<std::size_t>(zi - dz) * d.Ho + (yi - dy)) * d.Wo - dx;
                                    for (int xi = x0; xi < x1; ++xi) grow[xi] += wv * gorow[xi];
                                }
                        } else {
                            for (int zo = 0; zo < d.Do; ++zo) {
                                const int zi = zo * d.stride + dz;
                                if (zi < 0 || zi >= d.D) continue;
                                for (int yo = 0; yo < d.Ho; ++yo) {
                                    const int yi = yo * d.stride + dy;
                                    if (yi < 0 || yi >= d.H) continue;
                                    Real* grow = gc + (static_cast<std::size_t>(zi) * d.H + yi) * d.W;
                                    const Real* gorow = goc + (static_cast<std::size_t>(zo) * d.Ho + yo) * d.Wo;
                                    for (int xo = 0; xo < d.Wo; ++xo) {
                                        const int xi = xo * d.stride + dx;
                                        if (xi >= 0 && xi < d.W) grow[xi] += wv * gorow[xo];
                                    }
                                }
                            }
                        }
                    }
        }
    }
}

template <class Real>
void conv3d_backward_kernel(const Real* in, const Real* gout, Real* gw, Real* gb, const Conv3dDims& d) {
    const std::size_t out_slice = static_cast<std::size_t>(d.Do) * d.Ho * d.Wo;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int co = 0; co < d.Co; ++co) {
        const Real* goc = gout + co * out_slice;
        if (gb) {
            Real s = 0;
            for (std::size_t i = 0; i < out_slice; ++i) s += goc[i];
            gb[co] += s;
        }
        for (int ci = 0; ci < d.Ci; ++ci) {
            const Real* ic = in + static_cast<std::size_t>(ci) * d.D * d.H * d.W;
            for (int kz = 0; kz < d.K; ++kz)
                for (int ky = 0; ky < d.K; ++ky)
                    for (int kx = 0; kx < d.K; ++kx) {
                        const int dz = kz - d.pad, dy = ky - d.pad, dx = kx - d.pad;
                        Real acc = 0;
                        if (d.stride == 1) {
                            const int z0 = std::max(0, -dz), z1 = std::min(d.Do, d.D - dz);
                            const int y0 = std::max(0, -dy), y1 = std::min(d.Ho, d.H - dy);
                            const int x0 = std::max(0, -dx), x1 = std::min(d.Wo, d.W - dx);
                            for (int zo = z0; zo < z1; ++zo)
                                for (int yo = y0; yo < y1; ++yo) {
                                    const Real* irow =
                                        ic + (static_cast<std::size_t>(zo + dz) * d.H + (yo + dy)) * d.W + dx;
                                    const Real* gorow = goc + (static_cast<std::size_t>(zo) * d.Ho + yo) * d.Wo;
                                    for (int xo = x0; xo < x1; ++xo) acc += irow[xo] * gorow[xo];
                                }
                        } else {
                            for (int zo = 0; zo < d.Do; ++zo) {
                                const int zi = zo * d.stride + dz;
                                if (zi < 0 || zi >= d.D) continue;
                                for (int yo = 0; yo < d.Ho; ++yo) {
                                    const int yi = yo * d.stride + dy;
                                    if (yi < 0 || yi >= d.H) continue;
                                    const Real* irow = ic + (static_cast<std::size_t>(zi) * d.H + yi) * d.W;
                                    const Real* gorow = goc + (static_cast<std::size_t>(zo) * d.Ho + yo) * d.Wo;
                                    for (int xo = 0; xo < d.Wo; ++xo) {
                                        const int xi = xo * d.stride + dx;
                                        if (xi >= 0 && xi < d.W) acc += irow[xi] * gorow[xo];
                                    }
                                }
                            }
                        }
                        gw[(((static_cast<std::size_t>(co) * d.Ci + ci) * d.K + kz) * d.K + ky) * d.K + kx] += acc;
                    }
        }
    }
}

}  // namespace detail

template <class Real>
Tensor<Real> conv3d(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& bias,
                    int padding, int stride = 1) {
    const Conv3dDims d = conv3d_dims(input.shape(), kernel.shape(), padding, stride);
    check(bias.shape() == Shape{d.Co},
          "conv3d: bias " + shape_str(bias.shape()) + " must be [" + std::to_string(d.Co) + "]");
    Tensor<Real> out({d.Co, d.Do, d.Ho, d.Wo});
    detail::conv3d_forward(input.values().data(), kernel.values().data(), bias.values().data(),
                           out.values().data(), d);
    if (any_tracked<Real>({&input, &kernel, &bias})) {
        auto ni = input.node(), nk = kernel.node(), nb = bias.node();
        auto id = input.data_ptr(), kd = kernel.data_ptr();
        attach_node(out, {&input, &kernel, &bias}, [ni, nk, nb, id, kd, d](const std::vector<Real>& g) {
            if (ni && node_wants_grad(ni.get()))
                detail::conv3d_backward_input(kd->data(), g.data(), ni->grad_buf().data(), d);
            const bool want_k = nk && node_wants_grad(nk.get());
            const bool want_b = nb && node_wants_grad(nb.get());
            if (want_k || want_b) {
                // dW and dB share a pass over the output gradient.
                std::vector<Real> scratch;
                Real* gw = nullptr;
                if (want_k) {
                    gw = nk->grad_buf().data();
                } else {
                    scratch.assign(static_cast<std::size_t>(d.Co) * d.Ci * d.K * d.K * d.K, Real(0));
                    gw = scratch.data();
                }
                detail::conv3d_backward_kernel(id->data(), g.data(), gw,
                                               want_b ? nb->grad_buf().data() : nullptr, d);
            }
        });
    }
    return out;
}

}  // namespace dgrnet
