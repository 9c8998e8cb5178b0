use super::Real;

/// Numpy broadcasting of two shapes; `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (left-padded), zero along broadcast axes.
fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + pad] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out` in row-major order, passing the matching
/// offsets into each strided operand.
fn walk<const N: usize>(out: &[usize], strides: [&[usize]; N], mut f: impl FnMut([usize; N])) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f([0; N]);
        return;
    }
    let rank = out.len();
    let last = rank - 1;
    let inner = out[last];
    let mut index = vec![0usize; rank];
    let mut base = [0usize; N];
    let mut done = 0;
    while done < total {
        for j in 0..inner {
            let mut offs = base;
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o += j * s[last];
            }
            f(offs);
        }
        done += inner;
        // odometer increment over the outer axes
        let mut axis = last;
        while axis > 0 {
            axis -= 1;
            index[axis] += 1;
            for (b, s) in base.iter_mut().zip(strides.iter()) {
                *b += s[axis];
            }
            if index[axis] < out[axis] {
                break;
            }
            for (b, s) in base.iter_mut().zip(strides.iter()) {
                *b -= s[axis] * out[axis];
            }
            index[axis] = 0;
        }
    }
}

pub(super) fn zip_strided<S: Real>(
    a_shape: &[usize],
    a: &[S],
    b_shape: &[usize],
    b: &[S],
    out: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    let sa = strides_in(a_shape, out);
    let sb = strides_in(b_shape, out);
    let mut data = Vec::with_capacity(out.iter().product());
    walk(out, [&sa, &sb], |[ia, ib]| data.push(f(a[ia], b[ib])));
    data
}

pub(super) fn reduce_to<S: Real>(shape: &[usize], data: &[S], target: &[usize]) -> Vec<S> {
    let st = strides_in(target, shape);
    let mut out = vec![S::zero(); target.iter().product()];
    let mut k = 0;
    walk(shape, [&st], |[it]| {
        out[it] = out[it] + data[k];
        k += 1;
    });
    out
}

pub(super) fn expand<S: Real>(shape: &[usize], data: &[S], target: &[usize]) -> Vec<S> {
    let ss = strides_in(shape, target);
    let mut out = Vec::with_capacity(target.iter().product());
    walk(target, [&ss], |[is]| out.push(data[is]));
    out
}
