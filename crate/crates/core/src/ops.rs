//! Forward kernels on plain tensors.
//!
//! Every kernel here has a differentiable twin on [`Graph`](crate::Graph); the
//! graph records the call and supplies the backward rule.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_with<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

/// Extent of `axis` and the stride of one step along it.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[axis], shape[axis + 1..].iter().product())
}

fn check_broadcast<T: Real>(
    op: &'static str,
    x: &Tensor<T>,
    v: &Tensor<T>,
    axis: usize,
) -> Result<()> {
    if axis >= x.ndim() {
        return Err(Error::dim(op, format!("axis {axis} out of range for {:?}", x.shape())));
    }
    if v.numel() != x.shape()[axis] {
        return Err(Error::shape(op, x.shape(), v.shape()));
    }
    Ok(())
}

/// `x + v` with `v` laid along `axis` and repeated over every other axis.
pub fn add_broadcast<T: Real>(x: &Tensor<T>, v: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_broadcast("add_broadcast", x, v, axis)?;
    let (dim, inner) = axis_layout(x.shape(), axis);
    let vd = v.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| a + vd[(i / inner) % dim])
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// `x ⊙ v` with `v` laid along `axis` and repeated over every other axis.
pub fn mul_broadcast<T: Real>(x: &Tensor<T>, v: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_broadcast("mul_broadcast", x, v, axis)?;
    let (dim, inner) = axis_layout(x.shape(), axis);
    let vd = v.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| a * vd[(i / inner) % dim])
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Batch count, rows and columns for a rank-2 or rank-3 operand.
pub(crate) fn mat_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

/// `out[b] += a[b] · bm[b]` on raw row-major slices.
pub(crate) fn gemm_acc<T: Real>(
    a: &[T],
    bm: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bm[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Matrix product of `[M×K]·[K×N]`, or batched `[B×M×K]·[B×K×N]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let err = || Error::shape("matmul", a.shape(), b.shape());
    let (ba, m, k) = mat_dims(a.shape()).ok_or_else(err)?;
    let (bb, k2, n) = mat_dims(b.shape()).ok_or_else(err)?;
    if k != k2 || ba != bb || a.ndim() != b.ndim() {
        return Err(err());
    }
    let mut out = vec![T::zero(); ba * m * n];
    for batch in 0..ba {
        gemm_acc(
            &a.data()[batch * m * k..(batch + 1) * m * k],
            &b.data()[batch * k * n..(batch + 1) * k * n],
            &mut out[batch * m * n..(batch + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let shape = if a.ndim() == 2 { vec![m, n] } else { vec![ba, m, n] };
    Ok(Tensor::from_parts(shape, out))
}

/// Source flat index for every element of the last-two-axes transpose.
pub(crate) fn transpose_index(shape: &[usize]) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let (b, r, c) =
        mat_dims(shape).ok_or_else(|| Error::dim("transpose", format!("rank {} unsupported", shape.len())))?;
    let mut idx = Vec::with_capacity(b * r * c);
    for batch in 0..b {
        for j in 0..c {
            for i in 0..r {
                idx.push(Some(batch * r * c + i * c + j));
            }
        }
    }
    let out = if shape.len() == 2 { vec![c, r] } else { vec![b, c, r] };
    Ok((out, idx))
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (shape, idx) = transpose_index(a.shape())?;
    index_select(a, &idx, &shape)
}

/// Gathers `out[j] = a[idx[j]]` over flat storage; `None` yields zero.
pub fn index_select<T: Real>(
    a: &Tensor<T>,
    idx: &[Option<usize>],
    shape: &[usize],
) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if numel != idx.len() {
        return Err(Error::dim(
            "index_select",
            format!("{} indices for output shape {shape:?}", idx.len()),
        ));
    }
    let src = a.data();
    let mut data = Vec::with_capacity(idx.len());
    for &i in idx {
        match i {
            Some(i) if i >= src.len() => {
                return Err(Error::dim(
                    "index_select",
                    format!("index {i} out of range for {} elements", src.len()),
                ))
            }
            Some(i) => data.push(src[i]),
            None => data.push(T::zero()),
        }
    }
    Tensor::new(shape, data)
}

/// Flat gather indices selecting whole rows (first-axis slices).
pub(crate) fn row_gather_index(shape: &[usize], rows: &[usize]) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let n = shape[0];
    let width: usize = shape[1..].iter().product();
    let mut idx = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        if r >= n {
            return Err(Error::dim("gather_rows", format!("row {r} out of range for {n} rows")));
        }
        idx.extend((r * width..(r + 1) * width).map(Some));
    }
    let mut out = shape.to_vec();
    out[0] = rows.len();
    Ok((out, idx))
}

pub fn gather_rows<T: Real>(a: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    if rows.is_empty() {
        return Err(Error::contract("gather_rows", "empty index list"));
    }
    let (shape, idx) = row_gather_index(a.shape(), rows)?;
    index_select(a, &idx, &shape)
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(Error::dim("concat", format!("axis {axis} out of range")));
    }
    for p in &parts[1..] {
        let ok = p.ndim() == first.ndim()
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.numel() / outer;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn sigmoid<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn relu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn exp<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| v.exp())
}

/// Natural log with inputs clamped from below at `floor`. NaN passes through.
pub fn ln<T: Real>(a: &Tensor<T>, floor: T) -> Tensor<T> {
    a.map(|v| if v < floor { floor.ln() } else { v.ln() })
}

/// Softmax over the last axis with per-row max subtraction.
pub fn softmax_rows<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let width = *a.shape().last().expect("tensor has rank >= 1");
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

/// Per-row normalization statistics: (normalized values, inverse std per row).
pub(crate) fn layer_norm_core<T: Real>(x: &[T], width: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::lit(width as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / width);
    for row in x.chunks(width) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let width = *x.shape().last().expect("rank >= 1");
    if gamma.numel() != width || beta.numel() != width {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let (xhat, _) = layer_norm_core(x.data(), width, eps);
    let data = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| v * gamma.data()[i % width] + beta.data()[i % width])
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(op, format!("expected C×H×W, got {shape:?}"))),
    }
}

/// 2×2 mean pooling with ceil output extents; edge windows average the cells present.
pub fn mean_pool2x2<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw("mean_pool2x2", a.shape())?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::zero(); c * ho * wo];
    let src = a.data();
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = T::zero();
                let mut cnt = 0usize;
                for di in 0..2 {
                    for dj in 0..2 {
                        let (r, q) = (2 * i + di, 2 * j + dj);
                        if r < h && q < w {
                            acc = acc + src[(ch * h + r) * w + q];
                            cnt += 1;
                        }
                    }
                }
                out[(ch * ho + i) * wo + j] = acc / T::lit(cnt as f64);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

/// Per channel `(mean, max, population variance)` over the spatial plane.
pub fn channel_stats<T: Real>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw("channel_stats", f.shape())?;
    let plane = h * w;
    let n = T::lit(plane as f64);
    let mut out = Vec::with_capacity(c * 3);
    for ch in 0..c {
        let vals = &f.data()[ch * plane..(ch + 1) * plane];
        let mean = vals.iter().copied().sum::<T>() / n;
        let max = vals.iter().copied().fold(T::neg_infinity(), T::max);
        let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        out.extend([mean, max, var]);
    }
    Ok(Tensor::from_parts(vec![c, 3], out))
}

/// Corner-aligned sampling positions: for each output coordinate the two
/// source taps and the weight of the upper tap.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling of a `C×H×W` map to `C×H2×W2`, corner-aligned.
pub fn upsample_bilinear<T: Real>(f: &Tensor<T>, h2: usize, w2: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw("upsample_bilinear", f.shape())?;
    if h2 < h || w2 < w {
        return Err(Error::dim(
            "upsample_bilinear",
            format!("target {h2}×{w2} smaller than source {h}×{w}"),
        ));
    }
    if h2 == h && w2 == w {
        return Ok(Tensor::from_parts(f.shape().to_vec(), f.data().to_vec()));
    }
    let rows = bilinear_taps(h, h2);
    let cols = bilinear_taps(w, w2);
    let src = f.data();
    let mut out = Vec::with_capacity(c * h2 * w2);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(r0, r1, fr) in &rows {
            let (fr, gr) = (T::lit(fr), T::lit(1.0 - fr));
            for &(c0, c1, fc) in &cols {
                let (fc, gc) = (T::lit(fc), T::lit(1.0 - fc));
                let v = gr * (gc * plane[r0 * w + c0] + fc * plane[r0 * w + c1])
                    + fr * (gc * plane[r1 * w + c0] + fc * plane[r1 * w + c1]);
                out.push(v);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h2, w2], out))
}

/// Per-cluster shifted exponential weights `e^{p_j - max_{C}p}` and their sums.
pub(crate) fn segment_weights<T: Real>(p: &[T], assignment: &[usize], m: usize) -> (Vec<T>, Vec<T>) {
    let mut maxes = vec![T::neg_infinity(); m];
    for (&pj, &a) in p.iter().zip(assignment) {
        maxes[a] = maxes[a].max(pj);
    }
    let w: Vec<T> = p
        .iter()
        .zip(assignment)
        .map(|(&pj, &a)| (pj - maxes[a]).exp())
        .collect();
    let mut sums = vec![T::zero(); m];
    for (&wj, &a) in w.iter().zip(assignment) {
        sums[a] = sums[a] + wj;
    }
    (w, sums)
}

/// Checks that `assignment` covers every cluster in `[0, m)`.
pub(crate) fn check_assignment(op: &'static str, assignment: &[usize], n: usize, m: usize) -> Result<()> {
    if assignment.len() != n {
        return Err(Error::dim(op, format!("assignment length {} for {n} tokens", assignment.len())));
    }
    let mut seen = vec![false; m];
    for &a in assignment {
        if a >= m {
            return Err(Error::contract(op, format!("cluster index {a} out of range [0, {m})")));
        }
        seen[a] = true;
    }
    if let Some(empty) = seen.iter().position(|s| !s) {
        return Err(Error::contract(op, format!("cluster {empty} is empty")));
    }
    Ok(())
}

/// Softmax-weighted per-cluster average of token rows.
pub fn segment_merge<T: Real>(
    tokens: &Tensor<T>,
    p: &Tensor<T>,
    assignment: &[usize],
    m: usize,
) -> Result<Tensor<T>> {
    let [n, c] = *tokens.shape() else {
        return Err(Error::dim("merge_tokens", format!("tokens must be N×C, got {:?}", tokens.shape())));
    };
    if p.numel() != n {
        return Err(Error::shape("merge_tokens", tokens.shape(), p.shape()));
    }
    check_assignment("merge_tokens", assignment, n, m)?;
    let (w, sums) = segment_weights(p.data(), assignment, m);
    let mut out = vec![T::zero(); m * c];
    for j in 0..n {
        let a = assignment[j];
        let coef = w[j] / sums[a];
        let row = tokens.row(j);
        for (o, &x) in out[a * c..(a + 1) * c].iter_mut().zip(row) {
            *o = *o + coef * x;
        }
    }
    Ok(Tensor::from_parts(vec![m, c], out))
}

/// Smoothed Euclidean distances `sqrt(eps + ‖a_i − b_j‖²)` between rows.
pub fn pairwise_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let ([m, c], [n, c2]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("pairwise_distance", a.shape(), b.shape()));
    };
    if c != c2 {
        return Err(Error::shape("pairwise_distance", a.shape(), b.shape()));
    }
    let (m, n) = (*m, *n);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..n {
            let sq: T = ai.iter().zip(b.row(j)).map(|(&x, &y)| (x - y) * (x - y)).sum();
            out.push((eps + sq).sqrt());
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Divides every column of a `[K×...]` tensor by its sum over the first axis.
pub fn normalize_axis0<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let k = a.shape()[0];
    let cols = a.numel() / k;
    let src = a.data();
    let mut out = src.to_vec();
    for col in 0..cols {
        let total: T = (0..k).map(|r| src[r * cols + col]).sum();
        for r in 0..k {
            out[r * cols + col] = src[r * cols + col] / total;
        }
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}
