//! Value-level array math shared by the forward ops and their adjoints.
//!
//! All buffers are dense row-major `Vec<S>`. Functions here know nothing about
//! the graph; they compute plain arrays and report dimension problems as
//! `String` messages that the op layer wraps into typed errors.

use super::Scalar;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Strides of `shape` viewed through `out_shape`, with 0 where `shape`
/// broadcasts (dim of 1 or missing on the left).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - shape.len();
    let st = strides(shape);
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..out_shape.len() {
        if i >= pad && shape[i - pad] != 1 {
            out[i] = st[i - pad];
        }
    }
    out
}

/// Elementwise binary op with broadcasting. Shapes must already be compatible.
pub fn binary_broadcast<S: Scalar>(
    a: &[S],
    ashape: &[usize],
    b: &[S],
    bshape: &[usize],
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    if ashape == bshape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n = numel(out_shape);
    let sa = broadcast_strides(ashape, out_shape);
    let sb = broadcast_strides(bshape, out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[oa], b[ob]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `g` (shaped `gshape`) down to `target` by collapsing broadcast dims.
pub fn reduce_to_shape<S: Scalar>(g: &[S], gshape: &[usize], target: &[usize]) -> Vec<S> {
    if gshape == target {
        return g.to_vec();
    }
    let mut out = vec![S::zero(); numel(target)];
    let st = broadcast_strides(target, gshape);
    let mut idx = vec![0usize; gshape.len()];
    let mut ot = 0usize;
    for &gv in g {
        out[ot] += gv;
        for d in (0..gshape.len()).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < gshape[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * gshape[d];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

/// One dense 2-D operand view: base offset plus row/col extents and strides.
#[derive(Clone, Copy)]
struct MatView {
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl MatView {
    fn new(rows: usize, cols: usize, transposed: bool) -> MatView {
        if transposed {
            MatView { rows: cols, cols: rows, rs: 1, cs: cols }
        } else {
            MatView { rows, cols, rs: cols, cs: 1 }
        }
    }
}

const GEMM_MIN_WORK: usize = 32 * 1024;

/// `C = A(·ᵀ) @ B(·ᵀ)` over broadcast batch dims.
///
/// The trailing two dims of each operand are the matrix; leading dims are
/// batch and broadcast right-aligned. Returns the output buffer and shape.
pub fn matmul<S: Scalar>(
    a: &[S],
    ashape: &[usize],
    ta: bool,
    b: &[S],
    bshape: &[usize],
    tb: bool,
) -> Result<(Vec<S>, Vec<usize>), String> {
    if ashape.len() < 2 || bshape.len() < 2 {
        return Err(format!(
            "matmul needs rank >= 2 operands, got {ashape:?} and {bshape:?}"
        ));
    }
    let (abatch, am) = ashape.split_at(ashape.len() - 2);
    let (bbatch, bm) = bshape.split_at(bshape.len() - 2);
    let va = MatView::new(am[0], am[1], ta);
    let vb = MatView::new(bm[0], bm[1], tb);
    let (m, k) = (va.rows, va.cols);
    let (k2, n) = (vb.rows, vb.cols);
    if k != k2 {
        return Err(format!(
            "matmul inner dims disagree: {ashape:?}{} x {bshape:?}{}",
            if ta { " (transposed)" } else { "" },
            if tb { " (transposed)" } else { "" },
        ));
    }
    let batch = broadcast_shapes(abatch, bbatch)
        .ok_or_else(|| format!("matmul batch dims incompatible: {abatch:?} vs {bbatch:?}"))?;
    let nb = numel(&batch);
    let ablock = am[0] * am[1];
    let bblock = bm[0] * bm[1];
    let outblock = m * n;
    let mut out = vec![S::zero(); nb * outblock];

    // Odometer over batch dims tracking both operands' block offsets.
    let sa: Vec<usize> = broadcast_strides(abatch, &batch);
    let sb: Vec<usize> = broadcast_strides(bbatch, &batch);
    let mut idx = vec![0usize; batch.len()];
    let (mut ba, mut bb) = (0usize, 0usize);
    for bi in 0..nb {
        let asl = &a[ba * ablock..ba * ablock + ablock];
        let bsl = &b[bb * bblock..bb * bblock + bblock];
        let csl = &mut out[bi * outblock..(bi + 1) * outblock];
        matmul_2d(asl, va, bsl, vb, csl, n);
        for d in (0..batch.len()).rev() {
            idx[d] += 1;
            ba += sa[d];
            bb += sb[d];
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
            ba -= sa[d] * batch[d];
            bb -= sb[d] * batch[d];
        }
    }
    let mut oshape = batch;
    oshape.push(m);
    oshape.push(n);
    Ok((out, oshape))
}

fn matmul_2d<S: Scalar>(a: &[S], va: MatView, b: &[S], vb: MatView, c: &mut [S], n: usize) {
    let (m, k) = (va.rows, va.cols);
    if m * k * n >= GEMM_MIN_WORK && m.min(k).min(n) >= 8 {
        unsafe {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                a.as_ptr(),
                va.rs as isize,
                va.cs as isize,
                b.as_ptr(),
                vb.rs as isize,
                vb.cs as isize,
                S::zero(),
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    // Small problems: pick a loop order that keeps the inner stride at 1.
    if vb.cs == 1 {
        // Accumulate scaled rows of B; inner loop contiguous over n.
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * va.rs + p * va.cs];
                if av == S::zero() {
                    continue;
                }
                let brow = &b[p * vb.rs..p * vb.rs + n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    } else {
        // B transposed: dot contiguous rows of the original buffer.
        for i in 0..m {
            for j in 0..n {
                let mut acc = S::zero();
                let bcol = &b[j * vb.cs..j * vb.cs + k];
                if va.cs == 1 {
                    let arow = &a[i * va.rs..i * va.rs + k];
                    for (&av, &bv) in arow.iter().zip(bcol) {
                        acc += av * bv;
                    }
                } else {
                    for p in 0..k {
                        acc += a[i + p * va.cs] * bcol[p];
                    }
                }
                c[i * n + j] += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

/// Cumulative sum along `axis`.
pub fn cumsum<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let st = strides(shape);
    let inner = st[axis];
    let len = shape[axis];
    let outer = numel(shape) / (inner * len);
    let mut out = x.to_vec();
    for o in 0..outer {
        let base = o * len * inner;
        for l in 1..len {
            let (prev, cur) = out[base + (l - 1) * inner..].split_at_mut(inner);
            for (c, p) in cur[..inner].iter_mut().zip(prev[..inner].iter()) {
                *c += *p;
            }
        }
    }
    out
}

/// Adjoint of cumsum: reverse cumulative sum along `axis`.
pub fn cumsum_reverse<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let st = strides(shape);
    let inner = st[axis];
    let len = shape[axis];
    let outer = numel(shape) / (inner * len);
    let mut out = x.to_vec();
    for o in 0..outer {
        let base = o * len * inner;
        for l in (0..len.saturating_sub(1)).rev() {
            let (cur, next) = out[base + l * inner..].split_at_mut(inner);
            for (c, nx) in cur[..inner].iter_mut().zip(next[..inner].iter()) {
                *c += *nx;
            }
        }
    }
    out
}

/// Permute axes; returns the new buffer and shape.
pub fn permute<S: Scalar>(x: &[S], shape: &[usize], axes: &[usize]) -> (Vec<S>, Vec<usize>) {
    let oshape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let sx = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; oshape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x[off]);
        for d in (0..oshape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < oshape[d] {
                break;
            }
            idx[d] = 0;
            off -= src_strides[d] * oshape[d];
        }
    }
    (out, oshape)
}

/// Gather `indices` along `axis`.
pub fn index_select<S: Scalar>(
    x: &[S],
    shape: &[usize],
    axis: usize,
    indices: &[usize],
) -> (Vec<S>, Vec<usize>) {
    let st = strides(shape);
    let inner = st[axis];
    let len = shape[axis];
    let outer = numel(shape) / (inner * len);
    let mut oshape = shape.to_vec();
    oshape[axis] = indices.len();
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        let base = o * len * inner;
        for &i in indices {
            out.extend_from_slice(&x[base + i * inner..base + (i + 1) * inner]);
        }
    }
    (out, oshape)
}

/// Adjoint of `index_select`: scatter-add rows of `g` back along `axis`.
pub fn index_scatter_add<S: Scalar>(
    g: &[S],
    axis: usize,
    indices: &[usize],
    target_shape: &[usize],
) -> Vec<S> {
    let st = strides(target_shape);
    let inner = st[axis];
    let len = target_shape[axis];
    let outer = numel(target_shape) / (inner * len);
    let mut out = vec![S::zero(); numel(target_shape)];
    let mut src = 0usize;
    for o in 0..outer {
        let base = o * len * inner;
        for &i in indices {
            let dst = &mut out[base + i * inner..base + (i + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(&g[src..src + inner]) {
                *d += s;
            }
            src += inner;
        }
    }
    out
}

/// Sum along `axis`, keeping it as extent 1.
pub fn sum_axis<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> (Vec<S>, Vec<usize>) {
    let st = strides(shape);
    let inner = st[axis];
    let len = shape[axis];
    let outer = numel(shape) / (inner * len);
    let mut out = vec![S::zero(); outer * inner];
    for o in 0..outer {
        let base = o * len * inner;
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            for (d, &s) in dst.iter_mut().zip(&x[base + l * inner..base + (l + 1) * inner]) {
                *d += s;
            }
        }
    }
    let mut oshape = shape.to_vec();
    oshape[axis] = 1;
    (out, oshape)
}

// ---------------------------------------------------------------------------
// Triangular solve
// ---------------------------------------------------------------------------

/// Solve `T X = B` for one `nxn` triangular block against `nxm` right-hand sides.
///
/// `trans` solves with `Tᵀ` instead (flipping effective lower/upper).
/// Returns an error message if a diagonal magnitude falls below `1e-12`.
pub fn tri_solve_block<S: Scalar>(
    t: &[S],
    n: usize,
    lower: bool,
    unit_diag: bool,
    trans: bool,
    b: &[S],
    m: usize,
    out: &mut [S],
) -> Result<(), String> {
    out.copy_from_slice(b);
    let effective_lower = lower != trans;
    let at = |i: usize, j: usize| if trans { t[j * n + i] } else { t[i * n + j] };
    let tiny = S::from_f64(1e-12);
    let rows: Vec<usize> = if effective_lower { (0..n).collect() } else { (0..n).rev().collect() };
    for &i in &rows {
        // Subtract already-solved rows j, then divide by the diagonal.
        let solved: Vec<usize> = if effective_lower { (0..i).collect() } else { (i + 1..n).collect() };
        for &j in &solved {
            let c = at(i, j);
            if c == S::zero() {
                continue;
            }
            let (dst, src) = (i * m, j * m);
            if src < dst {
                let (head, tail) = out.split_at_mut(dst);
                let srow = &head[src..src + m];
                for (d, &s) in tail[..m].iter_mut().zip(srow) {
                    *d -= c * s;
                }
            } else {
                let (head, tail) = out.split_at_mut(src);
                let srow = &tail[..m];
                for (d, &s) in head[dst..dst + m].iter_mut().zip(srow) {
                    *d -= c * s;
                }
            }
        }
        if !unit_diag {
            let d = at(i, i);
            if d.abs() < tiny {
                return Err(format!("triangular solve: near-zero diagonal at row {i}"));
            }
            for v in out[i * m..i * m + m].iter_mut() {
                *v /= d;
            }
        }
    }
    Ok(())
}
