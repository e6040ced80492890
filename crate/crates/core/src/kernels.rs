//! Slice-level numeric kernels shared by the autograd ops and the
//! graph-free inference/benchmark paths.

use crate::tensor::Real;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out += a · b`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], row);
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            axpy(av, brow, &mut out[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

#[inline]
pub fn elu_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Symmetric (edge-including) reflection of an out-of-range index.
#[inline]
pub fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Geometry of a mirror-padded, stride-1, same-size 2-D convolution on
/// channel-last images `[batch × h × w × c_in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn pixels(&self) -> usize {
        self.batch * self.h * self.w
    }
}

/// Gather mirror-padded neighborhoods; column order is (c_in, ky, kx) to
/// match a `[c_out × c_in × k × k]` weight layout.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let r = (g.k / 2) as isize;
    let mut cols = vec![T::zero(); g.pixels() * plen];
    for b in 0..g.batch {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = ((b * g.h + y) * g.w + xx) * plen;
                for ky in 0..g.k {
                    let sy = mirror(y as isize + ky as isize - r, g.h);
                    for kx in 0..g.k {
                        let sx = mirror(xx as isize + kx as isize - r, g.w);
                        let src = ((b * g.h + sy) * g.w + sx) * g.c_in;
                        for ci in 0..g.c_in {
                            cols[row + ci * g.k * g.k + ky * g.k + kx] = x[src + ci];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im_acc<T: Real>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let plen = g.patch_len();
    let r = (g.k / 2) as isize;
    for b in 0..g.batch {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = ((b * g.h + y) * g.w + xx) * plen;
                for ky in 0..g.k {
                    let sy = mirror(y as isize + ky as isize - r, g.h);
                    for kx in 0..g.k {
                        let sx = mirror(xx as isize + kx as isize - r, g.w);
                        let dst = ((b * g.h + sy) * g.w + sx) * g.c_in;
                        for ci in 0..g.c_in {
                            gx[dst + ci] += cols[row + ci * g.k * g.k + ky * g.k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Saved state of one LA₃ head, enough to run the backward pass.
#[derive(Clone, Debug)]
pub struct La3Head<T> {
    pub phi_q: Vec<T>,
    pub phi_k: Vec<T>,
    pub kv: Vec<T>,
    pub ksum: Vec<T>,
    pub den: Vec<T>,
    pub ratio: Vec<T>,
    pub out: Vec<T>,
}

/// Linear attention for one head, `q, k, v: [n × d]`:
/// `clamp(φ(q)(φ(k)ᵀv) / (φ(q)(φ(k)ᵀ1) + eps))` with `φ = elu + 1`.
pub fn la3_head<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, d: usize, eps: T, bound: T) -> La3Head<T> {
    let phi = |x: &T| elu(*x) + T::one();
    let phi_q: Vec<T> = q.iter().map(phi).collect();
    let phi_k: Vec<T> = k.iter().map(phi).collect();
    // d×d key-value summary: O(n·d²)
    let mut kv = vec![T::zero(); d * d];
    matmul_tn_acc(&phi_k, v, &mut kv, n, d, d);
    let mut ksum = vec![T::zero(); d];
    for j in 0..n {
        for a in 0..d {
            ksum[a] += phi_k[j * d + a];
        }
    }
    let num = matmul(&phi_q, &kv, n, d, d);
    let mut den = vec![T::zero(); n];
    let mut ratio = vec![T::zero(); n * d];
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        den[i] = dot(&phi_q[i * d..(i + 1) * d], &ksum) + eps;
        for c in 0..d {
            let r = num[i * d + c] / den[i];
            ratio[i * d + c] = r;
            out[i * d + c] = r.max(-bound).min(bound);
        }
    }
    La3Head {
        phi_q,
        phi_k,
        kv,
        ksum,
        den,
        ratio,
        out,
    }
}

/// Gradients `(gq, gk, gv)` of one LA₃ head.
pub fn la3_head_backward<T: Real>(
    s: &La3Head<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    g_out: &[T],
    n: usize,
    d: usize,
    bound: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    // gradient w.r.t. the unclamped numerator and the denominator
    let mut g_num = vec![T::zero(); n * d];
    let mut g_den = vec![T::zero(); n];
    for i in 0..n {
        let inv = T::one() / s.den[i];
        let mut acc = T::zero();
        for c in 0..d {
            let r = s.ratio[i * d + c];
            let gr = if r.abs() <= bound { g_out[i * d + c] } else { T::zero() };
            g_num[i * d + c] = gr * inv;
            acc += gr * r;
        }
        g_den[i] = -acc * inv;
    }
    // num = φq · kv ; den = φq · ksum
    let mut g_phi_q = vec![T::zero(); n * d];
    matmul_nt_acc(&g_num, &s.kv, &mut g_phi_q, n, d, d);
    for i in 0..n {
        axpy(g_den[i], &s.ksum, &mut g_phi_q[i * d..(i + 1) * d]);
    }
    let mut g_kv = vec![T::zero(); d * d];
    matmul_tn_acc(&s.phi_q, &g_num, &mut g_kv, n, d, d);
    let mut g_ksum = vec![T::zero(); d];
    for i in 0..n {
        axpy(g_den[i], &s.phi_q[i * d..(i + 1) * d], &mut g_ksum);
    }
    // kv = φkᵀ v ; ksum = φkᵀ 1
    let mut g_phi_k = vec![T::zero(); n * d];
    matmul_nt_acc(v, &g_kv, &mut g_phi_k, n, d, d);
    for j in 0..n {
        for a in 0..d {
            g_phi_k[j * d + a] += g_ksum[a];
        }
    }
    let mut gv = vec![T::zero(); n * d];
    matmul_acc(&s.phi_k, &g_kv, &mut gv, n, d, d);
    let gq = g_phi_q.iter().zip(q).map(|(&g, &x)| g * elu_grad(x)).collect();
    let gk = g_phi_k.iter().zip(k).map(|(&g, &x)| g * elu_grad(x)).collect();
    (gq, gk, gv)
}

/// Explicit O(n²) evaluation of the same kernel attention, row by row:
/// `out_i = Σ_j w_ij v_j` with `w_ij ∝ φ(q_i)·φ(k_j)`. Benchmark baseline.
pub fn quadratic_kernel_head<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, d: usize, eps: T, bound: T) -> Vec<T> {
    let phi = |x: &T| elu(*x) + T::one();
    let phi_q: Vec<T> = q.iter().map(phi).collect();
    let phi_k: Vec<T> = k.iter().map(phi).collect();
    let mut out = vec![T::zero(); n * d];
    let mut w = vec![T::zero(); n];
    for i in 0..n {
        let qi = &phi_q[i * d..(i + 1) * d];
        let mut total = T::zero();
        for j in 0..n {
            w[j] = dot(qi, &phi_k[j * d..(j + 1) * d]);
            total += w[j];
        }
        let row = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            axpy(w[j], &v[j * d..(j + 1) * d], row);
        }
        let den = total + eps;
        for c in row.iter_mut() {
            *c = (*c / den).max(-bound).min(bound);
        }
    }
    out
}

/// Softmax attention for one head; returns `(out, attention weights)`.
pub fn softmax_head<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut a = vec![T::zero(); n * n];
    matmul_nt_acc(q, k, &mut a, n, d, n);
    for i in 0..n {
        let row = &mut a[i * n..(i + 1) * n];
        let mut mx = T::neg_infinity();
        for x in row.iter_mut() {
            *x *= scale;
            mx = mx.max(*x);
        }
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    let out = matmul(&a, v, n, n, d);
    (out, a)
}

pub fn softmax_head_backward<T: Real>(
    a: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    g_out: &[T],
    n: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut gv = vec![T::zero(); n * d];
    matmul_tn_acc(a, g_out, &mut gv, n, n, d);
    let mut ga = vec![T::zero(); n * n];
    matmul_nt_acc(g_out, v, &mut ga, n, d, n);
    for i in 0..n {
        let arow = &a[i * n..(i + 1) * n];
        let grow = &mut ga[i * n..(i + 1) * n];
        let s = dot(arow, grow);
        for j in 0..n {
            grow[j] = arow[j] * (grow[j] - s) * scale;
        }
    }
    let gq = matmul(&ga, k, n, n, d);
    let mut gk = vec![T::zero(); n * d];
    matmul_tn_acc(&ga, q, &mut gk, n, n, d);
    (gq, gk, gv)
}
