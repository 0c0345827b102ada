//! INT8 linear layer: asymmetric UINT8 activations × symmetric INT8 weights
//! with INT32 accumulation.
//!
//! `y[i][j] = s_a·s_w·(Σ_k qa[i][k]·qw[j][k] − zp_a·Σ_k qw[j][k]) + bias[j]`
//!
//! The inner products run on AVX-512 VNNI (`vpdpbusd`, u8×i8 → i32) when the
//! CPU has it and on a portable loop otherwise; both produce identical
//! integers. The SIMD path keeps 16 output channels per register so no
//! horizontal reductions are needed.

use super::{quantize_activation, LayerQuant};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Reduction dimension is zero-padded to a multiple of this.
const K_ALIGN: usize = 64;

#[derive(Debug, Clone)]
pub struct QuantizedLinear {
    out_dim: usize,
    in_dim: usize,
    k_pad: usize,
    /// `out_dim × k_pad`, zero-padded.
    weights: Vec<i8>,
    /// The same weights in the SIMD kernel's panel layout, when it runs.
    panels: Option<Vec<i8>>,
    weight_sums: Vec<i32>,
    pub params: LayerQuant,
}

impl QuantizedLinear {
    /// `weights` is `out_dim × in_dim` row-major.
    pub fn new(weights: Vec<i8>, out_dim: usize, in_dim: usize, params: LayerQuant) -> Result<Self> {
        if weights.len() != out_dim * in_dim {
            return Err(Error::Model(format!(
                "INT8 weight has {} values, expected {out_dim}×{in_dim}",
                weights.len()
            )));
        }
        if !(params.w_scale > 0.0 && params.a_scale > 0.0) || !(0..=255).contains(&params.a_zp) {
            return Err(Error::Model(format!("invalid quantization parameters {params:?}")));
        }
        let k_pad = in_dim.div_ceil(K_ALIGN) * K_ALIGN;
        let mut padded = vec![0i8; out_dim * k_pad];
        let mut weight_sums = Vec::with_capacity(out_dim);
        for j in 0..out_dim {
            let src = &weights[j * in_dim..(j + 1) * in_dim];
            padded[j * k_pad..j * k_pad + in_dim].copy_from_slice(src);
            weight_sums.push(src.iter().map(|w| *w as i32).sum());
        }
        #[cfg(target_arch = "x86_64")]
        let panels = vnni::available().then(|| vnni::pack(&padded, out_dim, k_pad));
        #[cfg(not(target_arch = "x86_64"))]
        let panels = None;
        Ok(Self {
            out_dim,
            in_dim,
            k_pad,
            weights: padded,
            panels,
            weight_sums,
            params,
        })
    }

    pub fn weights_i8(&self) -> Vec<i8> {
        (0..self.out_dim)
            .flat_map(|j| self.weights[j * self.k_pad..j * self.k_pad + self.in_dim].iter().copied())
            .collect()
    }

    /// Quantizes rows of `x` into a `rows × k_pad` UINT8 buffer.
    pub fn quantize_input(&self, x: &Matrix) -> Vec<u8> {
        assert_eq!(x.cols, self.in_dim, "input width mismatch");
        let (scale, zp) = (self.params.a_scale, self.params.a_zp as f32);
        let mut q = vec![0u8; x.rows * self.k_pad];
        for i in 0..x.rows {
            let dst = &mut q[i * self.k_pad..i * self.k_pad + self.in_dim];
            let src = x.row(i);
            // Fast pass on the f32 quotient. A quotient landing exactly on a
            // half-integer may hide a true value just off the tie, so such
            // rows are redone with the exact rule.
            let mut ties = 0u32;
            for (d, v) in dst.iter_mut().zip(src) {
                let y = *v / scale;
                ties += ((y - y.trunc()).abs() == 0.5) as u32;
                *d = (y.round_ties_even() + zp).max(0.0).min(255.0) as i32 as u8;
            }
            if ties > 0 {
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = quantize_activation(*v, scale, self.params.a_zp);
                }
            }
        }
        q
    }

    pub fn forward(&self, x: &Matrix, bias: &[f32]) -> Matrix {
        let qa = self.quantize_input(x);
        let acc = self.int_matmul(&qa, x.rows);
        let scale = self.params.a_scale * self.params.w_scale;
        let zp = self.params.a_zp;
        let mut out = Matrix::zeros(x.rows, self.out_dim);
        for i in 0..x.rows {
            let row = out.row_mut(i);
            let acc_row = &acc[i * self.out_dim..(i + 1) * self.out_dim];
            for j in 0..self.out_dim {
                let centered = acc_row[j] - zp * self.weight_sums[j];
                row[j] = centered as f32 * scale + bias[j];
            }
        }
        out
    }

    /// Raw `Σ_k qa·qw` accumulators, `rows × out_dim`.
    pub fn int_matmul(&self, qa: &[u8], rows: usize) -> Vec<i32> {
        #[cfg(target_arch = "x86_64")]
        {
            if let Some(panels) = &self.panels {
                // SAFETY: panels exist only when the CPU has the features.
                return unsafe { vnni::matmul(qa, rows, panels, self.out_dim, self.k_pad) };
            }
        }
        portable_matmul(qa, rows, &self.weights, self.out_dim, self.k_pad)
    }

    #[cfg(test)]
    fn int_matmul_portable(&self, qa: &[u8], rows: usize) -> Vec<i32> {
        portable_matmul(qa, rows, &self.weights, self.out_dim, self.k_pad)
    }
}

fn portable_matmul(qa: &[u8], rows: usize, w: &[i8], out_dim: usize, k: usize) -> Vec<i32> {
    let mut acc = vec![0i32; rows * out_dim];
    for i in 0..rows {
        let a = &qa[i * k..(i + 1) * k];
        for j in 0..out_dim {
            let b = &w[j * k..(j + 1) * k];
            acc[i * out_dim + j] = a.iter().zip(b).map(|(x, y)| *x as i32 * *y as i32).sum();
        }
    }
    acc
}

#[cfg(target_arch = "x86_64")]
mod vnni {
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    pub fn available() -> bool {
        static HAS: OnceLock<bool> = OnceLock::new();
        *HAS.get_or_init(|| {
            is_x86_feature_detected!("avx512f")
                && is_x86_feature_detected!("avx512bw")
                && is_x86_feature_detected!("avx512vnni")
        })
    }

    /// Output channels per panel, one per 32-bit lane.
    const LANES: usize = 16;

    /// Panel layout: for each group of 16 outputs and each 4-byte slice of
    /// the reduction, the 16 outputs' 4 weights back to back (64 bytes).
    /// Missing outputs of the last group are zero.
    pub fn pack(w: &[i8], out_dim: usize, k: usize) -> Vec<i8> {
        let groups = out_dim.div_ceil(LANES);
        let mut p = vec![0i8; groups * LANES * k];
        for g in 0..groups {
            for k4 in 0..k / 4 {
                for l in 0..LANES {
                    let j = g * LANES + l;
                    if j < out_dim {
                        let dst = (g * (k / 4) + k4) * 64 + l * 4;
                        p[dst..dst + 4].copy_from_slice(&w[j * k + k4 * 4..j * k + k4 * 4 + 4]);
                    }
                }
            }
        }
        p
    }

    /// `R` rows × `G` panels accumulated in registers over the whole
    /// reduction; results go to `acc` with row stride `groups · 16`.
    #[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
    unsafe fn tile<const R: usize, const G: usize>(
        qa: *const u8,
        k: usize,
        panels: *const i8,
        g0: usize,
        acc: *mut i32,
        stride: usize,
    ) {
        let mut c = [[_mm512_setzero_si512(); G]; R];
        let steps = k / 4;
        for s in 0..steps {
            let mut w = [_mm512_setzero_si512(); G];
            for (g, wg) in w.iter_mut().enumerate() {
                *wg = _mm512_loadu_si512(panels.add(((g0 + g) * steps + s) * 64) as *const _);
            }
            for (r, cr) in c.iter_mut().enumerate() {
                let a = _mm512_set1_epi32((qa.add(r * k + s * 4) as *const i32).read_unaligned());
                for g in 0..G {
                    cr[g] = _mm512_dpbusd_epi32(cr[g], a, w[g]);
                }
            }
        }
        for (r, cr) in c.iter().enumerate() {
            for (g, v) in cr.iter().enumerate() {
                _mm512_storeu_si512(acc.add(r * stride + (g0 + g) * LANES) as *mut _, *v);
            }
        }
    }

    /// `k` is a multiple of 4; `panels` comes from [`pack`].
    #[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
    pub unsafe fn matmul(qa: &[u8], rows: usize, panels: &[i8], out_dim: usize, k: usize) -> Vec<i32> {
        debug_assert_eq!(k % 4, 0);
        let groups = out_dim.div_ceil(LANES);
        debug_assert!(qa.len() >= rows * k && panels.len() >= groups * LANES * k);
        let stride = groups * LANES;
        let mut wide = vec![0i32; rows * stride];
        let (ap, wp, cp) = (qa.as_ptr(), panels.as_ptr(), wide.as_mut_ptr());
        let mut i = 0;
        while i < rows {
            let (a, c) = (ap.add(i * k), cp.add(i * stride));
            let mut g = 0;
            if rows - i >= 4 {
                while g + 2 <= groups {
                    tile::<4, 2>(a, k, wp, g, c, stride);
                    g += 2;
                }
                if g < groups {
                    tile::<4, 1>(a, k, wp, g, c, stride);
                }
                i += 4;
            } else {
                while g + 2 <= groups {
                    tile::<1, 2>(a, k, wp, g, c, stride);
                    g += 2;
                }
                if g < groups {
                    tile::<1, 1>(a, k, wp, g, c, stride);
                }
                i += 1;
            }
        }
        if stride == out_dim {
            return wide;
        }
        let mut acc = Vec::with_capacity(rows * out_dim);
        for r in 0..rows {
            acc.extend_from_slice(&wide[r * stride..r * stride + out_dim]);
        }
        acc
    }
}
