//! Dense and submanifold-sparse 3D convolution.
//!
//! Sparse mode computes an output only at active output sites and sums only
//! over active input sites; everything else is exactly zero. Dense and sparse
//! share one kernel, so a fully active map reproduces dense mode bit for bit.

use super::{NnError, Occupancy, Real, Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub enum Activity<'a> {
    Dense,
    Sparse {
        input: &'a Occupancy,
        output: &'a Occupancy,
    },
}

pub fn conv_output_dims(dims: [usize; 3], stride: usize) -> Result<[usize; 3]> {
    if stride == 0 || dims.iter().any(|d| d % stride != 0) {
        return Err(NnError::Indivisible {
            dims,
            factor: stride,
        });
    }
    Ok(dims.map(|d| d / stride))
}

struct Geometry {
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    k: usize,
    pad: isize,
    stride: usize,
    cin: usize,
    cout: usize,
}

impl Geometry {
    fn new<T: Real>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        stride: usize,
        act: &Activity<'_>,
    ) -> Result<Self> {
        let in_dims = x.spatial()?;
        let cin = x.channels();
        let &[k, k1, k2, wcin, cout] = w.shape() else {
            return Err(NnError::Shape(format!(
                "weights must be [k, k, k, Cin, Cout], got {:?}",
                w.shape()
            )));
        };
        if k != k1 || k != k2 {
            return Err(NnError::Shape(format!("non-cubic kernel {:?}", w.shape())));
        }
        if k % 2 == 0 {
            return Err(NnError::EvenKernel(k));
        }
        if wcin != cin {
            return Err(NnError::Shape(format!(
                "input has {cin} channels, weights expect {wcin}"
            )));
        }
        let out_dims = conv_output_dims(in_dims, stride)?;
        if let Activity::Sparse { input, output } = act {
            if input.dims() != in_dims || output.dims() != out_dims {
                return Err(NnError::Shape(format!(
                    "occupancy {:?}->{:?} does not match conv {:?}->{:?}",
                    input.dims(),
                    output.dims(),
                    in_dims,
                    out_dims
                )));
            }
        }
        Ok(Self {
            in_dims,
            out_dims,
            k,
            pad: (k / 2) as isize,
            stride,
            cin,
            cout,
        })
    }

    /// Calls `f(tap, input_site)` for every in-bounds tap of output `(ox, oy, oz)`.
    #[inline]
    fn for_taps(&self, ox: usize, oy: usize, oz: usize, mut f: impl FnMut(usize, usize)) {
        let [ih, iw, id] = self.in_dims.map(|d| d as isize);
        let k = self.k;
        let s = self.stride as isize;
        for kz in 0..k {
            let iz = oz as isize * s + kz as isize - self.pad;
            if iz < 0 || iz >= id {
                continue;
            }
            for ky in 0..k {
                let iy = oy as isize * s + ky as isize - self.pad;
                if iy < 0 || iy >= iw {
                    continue;
                }
                let row = (iz * iw + iy) * ih;
                for kx in 0..k {
                    let ix = ox as isize * s + kx as isize - self.pad;
                    if ix < 0 || ix >= ih {
                        continue;
                    }
                    f((kz * k + ky) * k + kx, (row + ix) as usize);
                }
            }
        }
    }
}

fn flags<'a>(act: &Activity<'a>) -> (Option<&'a [bool]>, Option<&'a [bool]>) {
    match *act {
        Activity::Dense => (None, None),
        Activity::Sparse { input, output } => (Some(input.flags()), Some(output.flags())),
    }
}

pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    act: Activity<'_>,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x, w, stride, &act)?;
    if let Some(b) = b {
        if b.len() != g.cout {
            return Err(NnError::Shape(format!(
                "bias has {} entries, conv has {} outputs",
                b.len(),
                g.cout
            )));
        }
    }
    let mut out = Tensor::spatial_zeros(g.out_dims, g.cout);
    let bias = b.map(|b| b.data());
    let od = out.data_mut();
    match g.cout {
        1 => forward_sites::<T, 1>(&g, x.data(), w.data(), bias, &act, od),
        8 => forward_sites::<T, 8>(&g, x.data(), w.data(), bias, &act, od),
        16 => forward_sites::<T, 16>(&g, x.data(), w.data(), bias, &act, od),
        32 => forward_sites::<T, 32>(&g, x.data(), w.data(), bias, &act, od),
        _ => forward_sites::<T, 0>(&g, x.data(), w.data(), bias, &act, od),
    }
    Ok(out)
}

/// Forward loop over output sites. `CO > 0` fixes the output width at
/// compile time so the accumulator lives in registers; `CO == 0` is the
/// general path. Both accumulate in the same order.
fn forward_sites<T: Real, const CO: usize>(
    g: &Geometry,
    xs: &[T],
    ws: &[T],
    bias: Option<&[T]>,
    act: &Activity<'_>,
    od: &mut [T],
) {
    let (in_flags, out_flags) = flags(act);
    let (cin, cout) = (g.cin, g.cout);
    debug_assert!(CO == 0 || CO == cout);
    let tap_len = cin * cout;
    let [oh, ow, odp] = g.out_dims;
    let mut fixed = [T::zero(); CO];
    for oz in 0..odp {
        for oy in 0..ow {
            for ox in 0..oh {
                let o = ox + oh * (oy + ow * oz);
                if out_flags.is_some_and(|f| !f[o]) {
                    continue;
                }
                let acc = &mut od[o * cout..(o + 1) * cout];
                if CO > 0 {
                    match bias {
                        Some(b) => fixed.copy_from_slice(b),
                        None => fixed = [T::zero(); CO],
                    }
                } else if let Some(b) = bias {
                    acc.copy_from_slice(b);
                }
                g.for_taps(ox, oy, oz, |t, i| {
                    if in_flags.is_some_and(|f| !f[i]) {
                        return;
                    }
                    let xi = &xs[i * cin..(i + 1) * cin];
                    let wt = &ws[t * tap_len..(t + 1) * tap_len];
                    if CO > 0 {
                        for (&xv, wrow) in xi.iter().zip(wt.chunks_exact(CO)) {
                            let wrow: &[T; CO] = wrow.try_into().expect("row width");
                            for j in 0..CO {
                                fixed[j] += xv * wrow[j];
                            }
                        }
                    } else {
                        for (&xv, wrow) in xi.iter().zip(wt.chunks_exact(cout)) {
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                });
                if CO > 0 {
                    acc.copy_from_slice(&fixed);
                }
            }
        }
    }
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of a convolution given the upstream gradient `gout`.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    act: Activity<'_>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(x, w, stride, &act)?;
    if gout.spatial()? != g.out_dims || gout.channels() != g.cout {
        return Err(NnError::Shape(format!(
            "upstream gradient {:?} does not match conv output",
            gout.shape()
        )));
    }
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[g.cout]);
    let (xs, gs) = (x.data(), gout.data());
    let (gwd, gbd) = (gw.data_mut(), gb.data_mut());
    match g.cout {
        1 => weight_grad_sites::<T, 1>(&g, xs, gs, &act, gwd, gbd),
        8 => weight_grad_sites::<T, 8>(&g, xs, gs, &act, gwd, gbd),
        16 => weight_grad_sites::<T, 16>(&g, xs, gs, &act, gwd, gbd),
        32 => weight_grad_sites::<T, 32>(&g, xs, gs, &act, gwd, gbd),
        _ => weight_grad_sites::<T, 0>(&g, xs, gs, &act, gwd, gbd),
    }
    let gx = need_input.then(|| {
        let mut gx = Tensor::spatial_zeros(g.in_dims, g.cin);
        let wt = transpose_taps(&g, w.data());
        let gxd = gx.data_mut();
        match g.cin {
            1 => input_grad_sites::<T, 1>(&g, &wt, gs, &act, gxd),
            8 => input_grad_sites::<T, 8>(&g, &wt, gs, &act, gxd),
            16 => input_grad_sites::<T, 16>(&g, &wt, gs, &act, gxd),
            32 => input_grad_sites::<T, 32>(&g, &wt, gs, &act, gxd),
            _ => input_grad_sites::<T, 0>(&g, &wt, gs, &act, gxd),
        }
        gx
    });
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Weights re-laid per tap as `[co][ci]`.
fn transpose_taps<T: Real>(g: &Geometry, ws: &[T]) -> Vec<T> {
    let (cin, cout) = (g.cin, g.cout);
    let tap_len = cin * cout;
    let mut wt = vec![T::zero(); ws.len()];
    for t in 0..g.k * g.k * g.k {
        for ci in 0..cin {
            for co in 0..cout {
                wt[t * tap_len + co * cin + ci] = ws[t * tap_len + ci * cout + co];
            }
        }
    }
    wt
}

/// Scatter form over output sites; sites with an all-zero upstream gradient
/// contribute nothing and are skipped.
fn weight_grad_sites<T: Real, const CO: usize>(
    g: &Geometry,
    xs: &[T],
    gs: &[T],
    act: &Activity<'_>,
    gwd: &mut [T],
    gbd: &mut [T],
) {
    let (in_flags, out_flags) = flags(act);
    let (cin, cout) = (g.cin, g.cout);
    debug_assert!(CO == 0 || CO == cout);
    let tap_len = cin * cout;
    let [oh, ow, odp] = g.out_dims;
    let mut fixed = [T::zero(); CO];
    for oz in 0..odp {
        for oy in 0..ow {
            for ox in 0..oh {
                let o = ox + oh * (oy + ow * oz);
                if out_flags.is_some_and(|f| !f[o]) {
                    continue;
                }
                let go = &gs[o * cout..(o + 1) * cout];
                if go.iter().all(|v| v.is_zero()) {
                    continue;
                }
                for (b, &v) in gbd.iter_mut().zip(go) {
                    *b += v;
                }
                if CO > 0 {
                    fixed.copy_from_slice(go);
                }
                g.for_taps(ox, oy, oz, |t, i| {
                    if in_flags.is_some_and(|f| !f[i]) {
                        return;
                    }
                    let xi = &xs[i * cin..(i + 1) * cin];
                    let gwt = &mut gwd[t * tap_len..(t + 1) * tap_len];
                    if CO > 0 {
                        for (&xv, row) in xi.iter().zip(gwt.chunks_exact_mut(CO)) {
                            let row: &mut [T; CO] = row.try_into().expect("row width");
                            for j in 0..CO {
                                row[j] += xv * fixed[j];
                            }
                        }
                    } else {
                        for (&xv, row) in xi.iter().zip(gwt.chunks_exact_mut(cout)) {
                            for (r, &gv) in row.iter_mut().zip(go) {
                                *r += xv * gv;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Gather form over input sites: each active input collects from every
/// active output whose window covers it.
fn input_grad_sites<T: Real, const CI: usize>(
    g: &Geometry,
    wt: &[T],
    gs: &[T],
    act: &Activity<'_>,
    gxd: &mut [T],
) {
    let (in_flags, out_flags) = flags(act);
    let (cin, cout) = (g.cin, g.cout);
    debug_assert!(CI == 0 || CI == cin);
    let tap_len = cin * cout;
    let [ih, iw, id] = g.in_dims;
    let [oh, ow, odp] = g.out_dims;
    let (k, s, pad) = (g.k, g.stride, g.pad);
    // Output coordinate reached from input coordinate `p` through tap `kk`.
    let src = |p: usize, kk: usize, n: usize| -> Option<usize> {
        let num = p as isize + pad - kk as isize;
        if num < 0 || num % s as isize != 0 {
            return None;
        }
        let q = (num / s as isize) as usize;
        (q < n).then_some(q)
    };
    let mut fixed = [T::zero(); CI];
    for iz in 0..id {
        for iy in 0..iw {
            for ix in 0..ih {
                let i = ix + ih * (iy + iw * iz);
                if in_flags.is_some_and(|f| !f[i]) {
                    continue;
                }
                let acc = &mut gxd[i * cin..(i + 1) * cin];
                if CI > 0 {
                    fixed = [T::zero(); CI];
                }
                for kz in 0..k {
                    let Some(oz) = src(iz, kz, odp) else { continue };
                    for ky in 0..k {
                        let Some(oy) = src(iy, ky, ow) else { continue };
                        for kx in 0..k {
                            let Some(ox) = src(ix, kx, oh) else { continue };
                            let o = ox + oh * (oy + ow * oz);
                            if out_flags.is_some_and(|f| !f[o]) {
                                continue;
                            }
                            let t = (kz * k + ky) * k + kx;
                            let go = &gs[o * cout..(o + 1) * cout];
                            let wtt = &wt[t * tap_len..(t + 1) * tap_len];
                            if CI > 0 {
                                for (&gv, wrow) in go.iter().zip(wtt.chunks_exact(CI)) {
                                    let wrow: &[T; CI] = wrow.try_into().expect("row width");
                                    for j in 0..CI {
                                        fixed[j] += gv * wrow[j];
                                    }
                                }
                            } else {
                                for (&gv, wrow) in go.iter().zip(wtt.chunks_exact(cin)) {
                                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                                        *a += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
                if CI > 0 {
                    acc.copy_from_slice(&fixed);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_occ(dims: [usize; 3], rng: &mut crate::rng::Rng) -> Occupancy {
        let n = dims.iter().product();
        Occupancy::new(dims, (0..n).map(|_| rng.gen_bool(0.5)).collect()).unwrap()
    }

    /// Brute force: every (output, input) pair, with the tap recovered from
    /// the coordinate difference.
    fn reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        occ: Option<(&Occupancy, &Occupancy)>,
    ) -> Tensor<f64> {
        let [h, wd, d] = x.spatial().unwrap();
        let (k, cin, cout) = (w.shape()[0], w.shape()[3], w.shape()[4]);
        let p = (k / 2) as isize;
        let od = [h / stride, wd / stride, d / stride];
        let mut out = Tensor::spatial_zeros(od, cout);
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                for ox in 0..od[0] {
                    let o = ox + od[0] * (oy + od[1] * oz);
                    if let Some((_, oo)) = occ {
                        if !oo.is_active(o) {
                            continue;
                        }
                    }
                    for co in 0..cout {
                        let mut s = b.data()[co];
                        for iz in 0..d {
                            for iy in 0..wd {
                                for ix in 0..h {
                                    let dz = iz as isize - (oz * stride) as isize + p;
                                    let dy = iy as isize - (oy * stride) as isize + p;
                                    let dx = ix as isize - (ox * stride) as isize + p;
                                    let k = k as isize;
                                    if !(0..k).contains(&dz) || !(0..k).contains(&dy) || !(0..k).contains(&dx) {
                                        continue;
                                    }
                                    let i = ix + h * (iy + wd * iz);
                                    if let Some((io, _)) = occ {
                                        if !io.is_active(i) {
                                            continue;
                                        }
                                    }
                                    let t = ((dz * k + dy) * k + dx) as usize;
                                    for ci in 0..cin {
                                        s += x.data()[i * cin + ci]
                                            * w.data()[(t * cin + ci) * cout + co];
                                    }
                                }
                            }
                        }
                        out.data_mut()[o * cout + co] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = seeded(0);
        let x = random(&[4, 5, 6, 1], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 3, 1, 1]);
        w.data_mut()[13] = 1.0;
        let y = conv3d_forward(&x, &w, None, 1, Activity::Dense).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn inactive_everywhere_gives_zero() {
        let mut rng = seeded(1);
        let x = random(&[4, 4, 4, 2], &mut rng);
        let w = random(&[3, 3, 3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let occ = Occupancy::empty([4, 4, 4]);
        let act = Activity::Sparse { input: &occ, output: &occ };
        let y = conv3d_forward(&x, &w, Some(&b), 1, act).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_brute_force_sparse_and_dense() {
        let mut rng = seeded(2);
        let widths = [(2, 3), (1, 8), (8, 16), (16, 32), (32, 1), (3, 64)];
        for ((cin, cout), stride) in widths.into_iter().flat_map(|c| [(c, 1), (c, 2)]) {
            let x = random(&[6, 6, 6, cin], &mut rng);
            let w = random(&[3, 3, 3, cin, cout], &mut rng);
            let b = random(&[cout], &mut rng);
            let occ_in = random_occ([6, 6, 6], &mut rng);
            let occ_out = if stride == 1 { occ_in.clone() } else { occ_in.downsample().unwrap() };
            let act = Activity::Sparse { input: &occ_in, output: &occ_out };
            let y = conv3d_forward(&x, &w, Some(&b), stride, act).unwrap();
            let r = reference(&x, &w, &b, stride, Some((&occ_in, &occ_out)));
            assert!(y.max_abs_diff(&r) < 1e-12);
            let y = conv3d_forward(&x, &w, Some(&b), stride, Activity::Dense).unwrap();
            let r = reference(&x, &w, &b, stride, None);
            assert!(y.max_abs_diff(&r) < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros(&[4, 4, 4, 2]);
        let w = Tensor::<f64>::zeros(&[3, 3, 3, 3, 1]);
        assert!(conv3d_forward(&x, &w, None, 1, Activity::Dense).is_err());
        let w = Tensor::<f64>::zeros(&[2, 2, 2, 2, 1]);
        assert!(matches!(conv3d_forward(&x, &w, None, 1, Activity::Dense), Err(NnError::EvenKernel(2))));
        let x = Tensor::<f64>::zeros(&[3, 4, 4, 2]);
        let w = Tensor::<f64>::zeros(&[3, 3, 3, 2, 1]);
        assert!(conv3d_forward(&x, &w, None, 2, Activity::Dense).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(3);
        for (cin, cout) in [(2, 2), (8, 8), (1, 16), (16, 1), (3, 5)] {
            backward_case(cin, cout, &mut rng);
        }
    }

    fn backward_case(cin: usize, cout: usize, rng: &mut crate::rng::Rng) {
        let x = random(&[4, 4, 4, cin], rng);
        let w = random(&[3, 3, 3, cin, cout], rng);
        let b = random(&[cout], rng);
        let occ_in = random_occ([4, 4, 4], rng);
        let occ_out = occ_in.downsample().unwrap();
        let act = Activity::Sparse { input: &occ_in, output: &occ_out };
        let probe = random(&[2, 2, 2, cout], rng);
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let y = conv3d_forward(x, w, Some(b), 2, act).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum::<f64>()
        };
        let grads = conv3d_backward(&x, &w, &probe, 2, act, true).unwrap();
        let h = 1e-6;
        let gx = grads.input.unwrap();
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (f(&xp, &w, &b) - f(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-7);
        }
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += h;
            wm.data_mut()[i] -= h;
            let fd = (f(&x, &wp, &b) - f(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - grads.weight.data()[i]).abs() < 1e-7);
        }
        let total_active: f64 = (0..8)
            .filter(|&o| occ_out.is_active(o))
            .map(|o| probe.data()[o * cout])
            .sum();
        assert!((grads.bias.data()[0] - total_active).abs() < 1e-12);
    }
}
