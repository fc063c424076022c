//! Small blocked single-precision matrix multiply used by the convolution
//! kernels. Row-major throughout, single-threaded, deterministic.

/// Microkernel tile sizes. The accumulator block is `MR x NR` f32 values,
/// sized so the compiler can keep it in vector registers.
const MR: usize = 8;
const NR: usize = 32;

/// Cache blocking. KC*NR and KC*MR panels stay L1/L2 resident.
const KC: usize = 256;
const MC: usize = 128;
const NC: usize = 512;

/// C(m x n) += A(m x k) * B(k x n), all row-major, contiguous.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }

    let mut pack_a = vec![0.0f32; MC * KC];
    let mut pack_b = vec![0.0f32; KC * NC];

    let mut jc = 0;
    while jc < n {
        let nc = NC.min(n - jc);
        let mut pc = 0;
        while pc < k {
            let kc = KC.min(k - pc);
            pack_b_block(b, n, pc, kc, jc, nc, &mut pack_b);
            let mut ic = 0;
            while ic < m {
                let mc = MC.min(m - ic);
                pack_a_block(a, k, ic, mc, pc, kc, &mut pack_a);
                macro_block(ic, mc, jc, nc, kc, &pack_a, &pack_b, c, n);
                ic += mc;
            }
            pc += kc;
        }
        jc += nc;
    }
}

/// Pack a `kc x nc` block of B into NR-wide column panels, zero-padding the
/// rightmost panel. Layout: panel-major, then row, then column-in-panel.
fn pack_b_block(b: &[f32], n: usize, pc: usize, kc: usize, jc: usize, nc: usize, out: &mut [f32]) {
    let panels = nc.div_ceil(NR);
    for jp in 0..panels {
        let j0 = jp * NR;
        let cols = NR.min(nc - j0);
        let dst_panel = &mut out[jp * kc * NR..(jp + 1) * kc * NR];
        for p in 0..kc {
            let src = &b[(pc + p) * n + jc + j0..];
            let dst = &mut dst_panel[p * NR..p * NR + NR];
            dst[..cols].copy_from_slice(&src[..cols]);
            for d in dst[cols..].iter_mut() {
                *d = 0.0;
            }
        }
    }
}

/// Pack an `mc x kc` block of A into MR-tall row panels, zero-padding the
/// bottom panel. Layout: panel-major, then k, then row-in-panel.
fn pack_a_block(a: &[f32], k: usize, ic: usize, mc: usize, pc: usize, kc: usize, out: &mut [f32]) {
    let panels = mc.div_ceil(MR);
    for ip in 0..panels {
        let i0 = ip * MR;
        let rows = MR.min(mc - i0);
        let dst_panel = &mut out[ip * kc * MR..(ip + 1) * kc * MR];
        for p in 0..kc {
            let dst = &mut dst_panel[p * MR..p * MR + MR];
            for r in 0..rows {
                dst[r] = a[(ic + i0 + r) * k + pc + p];
            }
            for d in dst[rows..].iter_mut() {
                *d = 0.0;
            }
        }
    }
}

fn macro_block(
    ic: usize,
    mc: usize,
    jc: usize,
    nc: usize,
    kc: usize,
    pack_a: &[f32],
    pack_b: &[f32],
    c: &mut [f32],
    n: usize,
) {
    let row_panels = mc.div_ceil(MR);
    let col_panels = nc.div_ceil(NR);
    let use_avx512 = avx512_available();
    for jp in 0..col_panels {
        let j0 = jp * NR;
        let cols = NR.min(nc - j0);
        let b_panel = &pack_b[jp * kc * NR..(jp + 1) * kc * NR];
        for ip in 0..row_panels {
            let i0 = ip * MR;
            let rows = MR.min(mc - i0);
            let a_panel = &pack_a[ip * kc * MR..(ip + 1) * kc * MR];
            let mut acc = [[0.0f32; NR]; MR];
            #[cfg(target_arch = "x86_64")]
            if use_avx512 {
                // Safety: gated on runtime AVX-512F detection; panel
                // slices are kc*MR and kc*NR long by construction.
                unsafe { avx512::microkernel(kc, a_panel, b_panel, &mut acc) };
            } else {
                microkernel(kc, a_panel, b_panel, &mut acc);
            }
            #[cfg(not(target_arch = "x86_64"))]
            {
                let _ = use_avx512;
                microkernel(kc, a_panel, b_panel, &mut acc);
            }
            for r in 0..rows {
                let dst = &mut c[(ic + i0 + r) * n + jc + j0..];
                for (d, &v) in dst[..cols].iter_mut().zip(acc[r].iter()) {
                    *d += v;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn avx512_available() -> bool {
    std::arch::is_x86_feature_detected!("avx512f")
}

#[cfg(not(target_arch = "x86_64"))]
fn avx512_available() -> bool {
    false
}

/// Portable register-blocked inner loop: a full KC sweep over one
/// MR x NR tile. `mul_add` keeps it bit-identical to the AVX-512 path,
/// which applies the same fused operations in the same order.
fn microkernel(kc: usize, a_panel: &[f32], b_panel: &[f32], acc: &mut [[f32; NR]; MR]) {
    for p in 0..kc {
        let bv: &[f32; NR] = b_panel[p * NR..p * NR + NR].try_into().unwrap();
        let av: &[f32; MR] = a_panel[p * MR..p * MR + MR].try_into().unwrap();
        for r in 0..MR {
            let ar = av[r];
            let accr = &mut acc[r];
            for j in 0..NR {
                accr[j] = ar.mul_add(bv[j], accr[j]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    //! 512-bit microkernel. The compiler keeps to 256-bit vectors on
    //! this CPU family when left to itself, which makes the MR x NR
    //! accumulator spill; spelling out the zmm tile fixes that.

    use super::{MR, NR};
    use std::arch::x86_64::*;

    const _: () = assert!(NR == 32, "kernel is written for two zmm per row");

    /// # Safety
    ///
    /// Requires AVX-512F at runtime. `a_panel` must hold at least
    /// `kc * MR` values and `b_panel` at least `kc * NR`.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn microkernel(
        kc: usize,
        a_panel: &[f32],
        b_panel: &[f32],
        acc: &mut [[f32; NR]; MR],
    ) {
        debug_assert!(a_panel.len() >= kc * MR);
        debug_assert!(b_panel.len() >= kc * NR);
        let a = a_panel.as_ptr();
        let b = b_panel.as_ptr();
        let mut cc = [[_mm512_setzero_ps(); 2]; MR];
        for p in 0..kc {
            let b0 = _mm512_loadu_ps(b.add(p * NR));
            let b1 = _mm512_loadu_ps(b.add(p * NR + 16));
            for (r, row) in cc.iter_mut().enumerate() {
                let av = _mm512_set1_ps(*a.add(p * MR + r));
                row[0] = _mm512_fmadd_ps(av, b0, row[0]);
                row[1] = _mm512_fmadd_ps(av, b1, row[1]);
            }
        }
        for (r, row) in cc.iter().enumerate() {
            _mm512_storeu_ps(acc[r].as_mut_ptr(), row[0]);
            _mm512_storeu_ps(acc[r].as_mut_ptr().add(16), row[1]);
        }
    }
}

/// Plain transpose: `src` is rows x cols row-major, `dst` becomes cols x rows.
pub fn transpose(rows: usize, cols: usize, src: &[f32], dst: &mut [f32]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    const TILE: usize = 32;
    let mut i0 = 0;
    while i0 < rows {
        let i1 = (i0 + TILE).min(rows);
        let mut j0 = 0;
        while j0 < cols {
            let j1 = (j0 + TILE).min(cols);
            for i in i0..i1 {
                for j in j0..j1 {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
            j0 = j1;
        }
        i0 = i1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_ref(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    c[i * n + j] += av * b[p * n + j];
                }
            }
        }
    }

    fn fill(seed: u32, len: usize) -> Vec<f32> {
        let mut state = seed;
        (0..len)
            .map(|_| {
                state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                (state >> 8) as f32 / (1u32 << 24) as f32 - 0.5
            })
            .collect()
    }

    #[test]
    fn matches_reference_on_assorted_shapes() {
        for &(m, k, n) in &[
            (1, 1, 1),
            (3, 5, 7),
            (8, 32, 32),
            (9, 33, 65),
            (17, 300, 41),
            (150, 270, 530),
            (256, 144, 100),
        ] {
            let a = fill(1 + m as u32, m * k);
            let b = fill(2 + n as u32, k * n);
            let mut c = fill(3 + k as u32, m * n);
            let mut c_ref = c.clone();
            gemm_nn(m, k, n, &a, &b, &mut c);
            gemm_ref(m, k, n, &a, &b, &mut c_ref);
            for (x, y) in c.iter().zip(c_ref.iter()) {
                assert!((x - y).abs() <= 1e-4 * y.abs().max(1.0), "{m}x{k}x{n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let src = fill(9, 13 * 37);
        let mut t = vec![0.0; src.len()];
        let mut back = vec![0.0; src.len()];
        transpose(13, 37, &src, &mut t);
        transpose(37, 13, &t, &mut back);
        assert_eq!(src, back);
    }
}
