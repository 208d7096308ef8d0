//! Deterministic dense matrix multiply.
//!
//! `C[i,j] = fold over ascending k of fma(A[i,k], B[k,j], acc)`, one fused
//! multiply-add chain per output element. The SIMD kernels vectorize across
//! output columns, never across k, and `mul_add` is correctly rounded in the
//! portable path, so every code path produces bit-identical results. That
//! fixed reduction order is what lets the convolution oracle demand exact
//! equality.

use crate::numerics::scalar::Scalar;

const MR: usize = 6;

/// Strided read-only matrix view: element (i, j) is `data[i*rs + j*cs]`.
#[derive(Clone, Copy)]
pub struct MatRef<'a, S> {
    pub data: &'a [S],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S: Scalar> MatRef<'a, S> {
    pub fn row_major(data: &'a [S], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// The same buffer viewed transposed (rows r, cols = original rows).
    pub fn transposed(data: &'a [S], orig_cols: usize) -> Self {
        MatRef { data, rs: 1, cs: orig_cols }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.rs + j * self.cs]
    }
}

/// Panel width in output columns; one SIMD strip per microkernel call.
fn nr<S: Scalar>() -> usize {
    match S::DTYPE {
        crate::numerics::scalar::DType::F32 => 16,
        crate::numerics::scalar::DType::F64 => 8,
    }
}

/// A matrix packed into MR-row strips, each strip laid out `[k][MR]` so the
/// microkernel broadcasts from sequential memory. Reusable across calls that
/// share the left operand (convolution weights against many images).
pub struct PackedA<S: Scalar> {
    data: Vec<S>,
    m: usize,
    k: usize,
}

pub fn pack_a<S: Scalar>(m: usize, k: usize, a: MatRef<S>) -> PackedA<S> {
    let m_strips = m.div_ceil(MR).max(1);
    let mut data = vec![S::zero(); m_strips * k * MR];
    for s in 0..m_strips {
        let base = s * k * MR;
        for r in 0..MR {
            let row = s * MR + r;
            if row >= m {
                continue;
            }
            for kk in 0..k {
                data[base + kk * MR + r] = a.get(row, kk);
            }
        }
    }
    PackedA { data, m, k }
}

/// Reusable B-panel and output-tile buffers.
#[derive(Default)]
pub struct GemmScratch<S> {
    b_pack: Vec<S>,
    tile: Vec<S>,
}

impl<S: Scalar> GemmScratch<S> {
    pub fn new() -> Self {
        GemmScratch { b_pack: Vec::new(), tile: Vec::new() }
    }
}

/// C (row-major, leading dimension `ldc`) gets `A*B` written (or added when
/// `accumulate`). Shapes: A is m x k, B is k x n.
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<S>,
    b: MatRef<S>,
    c: &mut [S],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let pa = pack_a(m, k, a);
    let mut scratch = GemmScratch::new();
    gemm_prepacked(&pa, n, b, c, ldc, accumulate, &mut scratch);
}

pub fn gemm_prepacked<S: Scalar>(
    pa: &PackedA<S>,
    n: usize,
    b: MatRef<S>,
    c: &mut [S],
    ldc: usize,
    accumulate: bool,
    scratch: &mut GemmScratch<S>,
) {
    let (m, k) = (pa.m, pa.k);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for v in &mut c[i * ldc..i * ldc + n] {
                    *v = S::zero();
                }
            }
        }
        return;
    }

    let nr = nr::<S>();
    let m_strips = m.div_ceil(MR);
    let n_strips = n.div_ceil(nr);

    // Pack B into per-strip [k][nr] layout, zero padded.
    scratch.b_pack.clear();
    scratch.b_pack.resize(n_strips * k * nr, S::zero());
    let b_pack = &mut scratch.b_pack;
    for s in 0..n_strips {
        let base = s * k * nr;
        let cols = nr.min(n - s * nr);
        for kk in 0..k {
            let row_off = base + kk * nr;
            for j in 0..cols {
                b_pack[row_off + j] = b.get(kk, s * nr + j);
            }
        }
    }

    scratch.tile.resize(MR * nr, S::zero());
    let tile = &mut scratch.tile;
    for ms in 0..m_strips {
        let ap = &pa.data[ms * k * MR..(ms + 1) * k * MR];
        for ns in 0..n_strips {
            let bp = &b_pack[ns * k * nr..(ns + 1) * k * nr];
            S::microkernel(k, ap, bp, tile);
            let rows = MR.min(m - ms * MR);
            let cols = nr.min(n - ns * nr);
            for r in 0..rows {
                let c_off = (ms * MR + r) * ldc + ns * nr;
                let t_off = r * nr;
                if accumulate {
                    for j in 0..cols {
                        c[c_off + j] = c[c_off + j] + tile[t_off + j];
                    }
                } else {
                    c[c_off..c_off + cols].copy_from_slice(&tile[t_off..t_off + cols]);
                }
            }
        }
    }
}

fn microkernel_portable<S: Scalar>(k: usize, ap: &[S], bp: &[S], out: &mut [S], nr: usize) {
    for r in 0..MR {
        for j in 0..nr {
            let mut acc = S::zero();
            for kk in 0..k {
                acc = ap[kk * MR + r].mul_add(bp[kk * nr + j], acc);
            }
            out[r * nr + j] = acc;
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::MR;

    #[derive(Clone, Copy, PartialEq)]
    pub enum Isa {
        Avx512,
        Avx2,
        Portable,
    }

    pub fn detect() -> Isa {
        static ISA: std::sync::OnceLock<Isa> = std::sync::OnceLock::new();
        *ISA.get_or_init(|| {
            if is_x86_feature_detected!("avx512f") {
                Isa::Avx512
            } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                Isa::Avx2
            } else {
                Isa::Portable
            }
        })
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn micro_f32_avx2(k: usize, ap: *const f32, bp: *const f32, out: *mut f32) {
        use core::arch::x86_64::*;
        let mut acc = [[_mm256_setzero_ps(); 2]; MR];
        for kk in 0..k {
            let b0 = _mm256_loadu_ps(bp.add(kk * 16));
            let b1 = _mm256_loadu_ps(bp.add(kk * 16 + 8));
            let a_col = ap.add(kk * MR);
            for r in 0..MR {
                let a = _mm256_set1_ps(*a_col.add(r));
                acc[r][0] = _mm256_fmadd_ps(a, b0, acc[r][0]);
                acc[r][1] = _mm256_fmadd_ps(a, b1, acc[r][1]);
            }
        }
        for r in 0..MR {
            _mm256_storeu_ps(out.add(r * 16), acc[r][0]);
            _mm256_storeu_ps(out.add(r * 16 + 8), acc[r][1]);
        }
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn micro_f32_avx512(k: usize, ap: *const f32, bp: *const f32, out: *mut f32) {
        use core::arch::x86_64::*;
        let mut acc = [_mm512_setzero_ps(); MR];
        for kk in 0..k {
            let b0 = _mm512_loadu_ps(bp.add(kk * 16));
            let a_col = ap.add(kk * MR);
            for r in 0..MR {
                let a = _mm512_set1_ps(*a_col.add(r));
                acc[r] = _mm512_fmadd_ps(a, b0, acc[r]);
            }
        }
        for r in 0..MR {
            _mm512_storeu_ps(out.add(r * 16), acc[r]);
        }
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn micro_f64_avx2(k: usize, ap: *const f64, bp: *const f64, out: *mut f64) {
        use core::arch::x86_64::*;
        let mut acc = [[_mm256_setzero_pd(); 2]; MR];
        for kk in 0..k {
            let b0 = _mm256_loadu_pd(bp.add(kk * 8));
            let b1 = _mm256_loadu_pd(bp.add(kk * 8 + 4));
            let a_col = ap.add(kk * MR);
            for r in 0..MR {
                let a = _mm256_set1_pd(*a_col.add(r));
                acc[r][0] = _mm256_fmadd_pd(a, b0, acc[r][0]);
                acc[r][1] = _mm256_fmadd_pd(a, b1, acc[r][1]);
            }
        }
        for r in 0..MR {
            _mm256_storeu_pd(out.add(r * 8), acc[r][0]);
            _mm256_storeu_pd(out.add(r * 8 + 4), acc[r][1]);
        }
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn micro_f64_avx512(k: usize, ap: *const f64, bp: *const f64, out: *mut f64) {
        use core::arch::x86_64::*;
        let mut acc = [_mm512_setzero_pd(); MR];
        for kk in 0..k {
            let b0 = _mm512_loadu_pd(bp.add(kk * 8));
            let a_col = ap.add(kk * MR);
            for r in 0..MR {
                let a = _mm512_set1_pd(*a_col.add(r));
                acc[r] = _mm512_fmadd_pd(a, b0, acc[r]);
            }
        }
        for r in 0..MR {
            _mm512_storeu_pd(out.add(r * 8), acc[r]);
        }
    }
}

/// Contract: `out[r*16 + j] = sum over ascending kk of
/// fma(ap[kk*MR + r], bp[kk*16 + j])`, starting from zero.
pub(crate) fn microkernel_f32(k: usize, ap: &[f32], bp: &[f32], out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        match x86::detect() {
            x86::Isa::Avx512 => {
                return unsafe {
                    x86::micro_f32_avx512(k, ap.as_ptr(), bp.as_ptr(), out.as_mut_ptr())
                };
            }
            x86::Isa::Avx2 => {
                return unsafe {
                    x86::micro_f32_avx2(k, ap.as_ptr(), bp.as_ptr(), out.as_mut_ptr())
                };
            }
            x86::Isa::Portable => {}
        }
    }
    microkernel_portable(k, ap, bp, out, 16);
}

pub(crate) fn microkernel_f64(k: usize, ap: &[f64], bp: &[f64], out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        match x86::detect() {
            x86::Isa::Avx512 => {
                return unsafe {
                    x86::micro_f64_avx512(k, ap.as_ptr(), bp.as_ptr(), out.as_mut_ptr())
                };
            }
            x86::Isa::Avx2 => {
                return unsafe {
                    x86::micro_f64_avx2(k, ap.as_ptr(), bp.as_ptr(), out.as_mut_ptr())
                };
            }
            x86::Isa::Portable => {}
        }
    }
    microkernel_portable(k, ap, bp, out, 8);
}
