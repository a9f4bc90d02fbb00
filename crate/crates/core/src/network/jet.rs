//! Batched MLP evaluation carrying pure input derivatives.
//!
//! For every point the kernel propagates the value and, per input axis `a`,
//! the derivatives `∂^j u / ∂x_a^j` for `j = 1..=K_a` (univariate Taylor
//! propagation, Faà di Bruno at each activation). Activations are stored as
//! `slots × points × width` row blocks so every affine map is a single GEMM.
//! The reverse sweep differentiates a scalar function of the output jets with
//! respect to the flat parameter vector.
//!
//! Orders above 4 are not supported here; the expression engine has no such
//! limit and serves as the reference implementation in tests.

use super::{Activation, MlpParams, NormStats};

pub const MAX_ORDER: usize = 4;

/// Which pure derivatives are carried for each input axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JetLayout {
    orders: Vec<usize>,
    offsets: Vec<usize>,
}

impl JetLayout {
    pub fn new(orders: &[usize]) -> Self {
        assert!(
            orders.iter().all(|&k| k <= MAX_ORDER),
            "jet orders above {MAX_ORDER} are not supported"
        );
        let mut offsets = Vec::with_capacity(orders.len());
        let mut next = 1;
        for &k in orders {
            offsets.push(next);
            next += k;
        }
        Self {
            orders: orders.to_vec(),
            offsets,
        }
    }

    pub fn value_only(dim: usize) -> Self {
        Self::new(&vec![0; dim])
    }

    pub fn num_slots(&self) -> usize {
        1 + self.orders.iter().sum::<usize>()
    }

    pub fn order(&self, axis: usize) -> usize {
        self.orders[axis]
    }

    pub fn max_order(&self) -> usize {
        self.orders.iter().copied().max().unwrap_or(0)
    }

    /// Slot holding `∂^order / ∂x_axis^order`; order 0 is the shared value slot.
    pub fn slot(&self, axis: usize, order: usize) -> usize {
        if order == 0 {
            0
        } else {
            assert!(order <= self.orders[axis], "order {order} not carried on axis {axis}");
            self.offsets[axis] + order - 1
        }
    }
}

/// Row-major `C = A·B + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    debug_assert!(c.len() >= (m - 1) * rsc + (n - 1) * csc + 1);
    // SAFETY: the strides and extents above address only elements inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Runs `$body` through an AVX2-enabled copy when the CPU supports it. No
/// fused multiply-add is enabled, so both paths round identically.
macro_rules! dispatch_simd {
    ($(#[$meta:meta])* $vis:vis fn $name:ident $(<const $k:ident: usize>)? ($($arg:ident: $ty:ty),* $(,)?) $body:block) => {
        $(#[$meta])*
        $vis fn $name $(<const $k: usize>)? ($($arg: $ty),*) {
            #[inline(always)]
            fn imp $(<const $k: usize>)? ($($arg: $ty),*) $body
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn avx2 $(<const $k: usize>)? ($($arg: $ty),*) {
                    imp $(::<$k>)? ($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { avx2 $(::<$k>)? ($($arg),*) };
                }
            }
            imp $(::<$k>)? ($($arg),*)
        }
    };
}

/// Activation derivatives `f^(n)` for `n = 0..=5` as `sign[n] · f[n][i]`.
/// Sine networks store only `sin` and `cos` and express the rest by sign.
#[derive(Clone, Copy)]
struct Derivs<'a> {
    f: [&'a [f64]; 6],
    sign: [f64; 6],
}

impl<'a> Derivs<'a> {
    fn new(act: Activation, fd: &'a [Vec<f64>]) -> Self {
        match act {
            Activation::Sin => {
                let (s, c) = (&fd[0][..], &fd[1][..]);
                Self {
                    f: [s, c, s, c, s, c],
                    sign: [1.0, 1.0, -1.0, -1.0, 1.0, 1.0],
                }
            }
            _ => Self {
                f: std::array::from_fn(|i| &fd[i.min(fd.len() - 1)][..]),
                sign: [1.0; 6],
            },
        }
    }
}

/// Cached forward pass over a batch of points. Buffers are kept between
/// calls to [`JetForward::run`], so one instance per batch shape avoids
/// reallocating every step.
pub struct JetForward {
    layout: JetLayout,
    n_points: usize,
    dims: Vec<usize>,
    activation: Activation,
    /// Input jets of every affine map (index 0 is the normalized input).
    inputs: Vec<Vec<f64>>,
    /// Stored activation derivatives per hidden layer, see [`Derivs`].
    fder: Vec<Vec<Vec<f64>>>,
    /// Hidden pre-activation jets.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
    delta: Vec<f64>,
    dh: Vec<f64>,
}

impl JetForward {
    /// Evaluates the network on `points` (row-major `n × input_dim`).
    pub fn new(params: &MlpParams, stats: &NormStats, points: &[f64], layout: &JetLayout) -> Self {
        let mut fwd = Self::with_layout(layout);
        fwd.run(params, stats, points);
        fwd
    }

    /// An empty pass; call [`JetForward::run`] before reading outputs.
    pub fn with_layout(layout: &JetLayout) -> Self {
        Self {
            layout: layout.clone(),
            n_points: 0,
            dims: Vec::new(),
            activation: Activation::Sin,
            inputs: Vec::new(),
            fder: Vec::new(),
            pre: Vec::new(),
            output: Vec::new(),
            delta: Vec::new(),
            dh: Vec::new(),
        }
    }

    /// Recomputes every jet for new parameters or points.
    pub fn run(&mut self, params: &MlpParams, stats: &NormStats, points: &[f64]) {
        let dims = params.dims().to_vec();
        let d_in = dims[0];
        let layout = &self.layout;
        assert_eq!(layout.orders.len(), d_in, "layout axes must match input dimension");
        assert_eq!(points.len() % d_in, 0);
        let n_points = points.len() / d_in;
        let slots = layout.num_slots();
        let rows = slots * n_points;
        let act = params.activation();
        let n_layers = params.num_layers();
        let stored = match act {
            Activation::Sin => 2,
            _ => layout.max_order() + 2,
        };

        self.inputs.resize_with(n_layers, Vec::new);
        self.pre.resize_with(n_layers - 1, Vec::new);
        self.fder.resize_with(n_layers - 1, Vec::new);

        let h0 = &mut self.inputs[0];
        h0.clear();
        h0.resize(rows * d_in, 0.0);
        for (p, x) in points.chunks_exact(d_in).enumerate() {
            for a in 0..d_in {
                h0[p * d_in + a] = (x[a] - stats.mean[a]) / stats.std[a];
                if layout.orders[a] > 0 {
                    let s = layout.slot(a, 1);
                    h0[(s * n_points + p) * d_in + a] = 1.0 / stats.std[a];
                }
            }
        }

        for l in 0..n_layers {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let last = l + 1 == n_layers;
            let (done, rest) = self.inputs.split_at_mut(l + 1);
            let h_in = &done[l];
            let z = if last { &mut self.output } else { &mut self.pre[l] };
            z.resize(rows * n_out, 0.0);
            gemm(
                rows,
                n_in,
                n_out,
                h_in,
                (n_in, 1),
                params.weights(l),
                (1, n_in),
                0.0,
                z,
                (n_out, 1),
            );
            let bias = params.biases(l);
            for row in z[..n_points * n_out].chunks_exact_mut(n_out) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            if last {
                break;
            }
            let block = n_points * n_out;
            let fd = &mut self.fder[l];
            fd.resize_with(stored, Vec::new);
            for f in fd.iter_mut() {
                f.resize(block, 0.0);
            }
            activation_derivatives(act, &z[..block], fd);
            let h = &mut rest[0];
            h.resize(rows * n_out, 0.0);
            h[..block].copy_from_slice(&fd[0]);
            let d = Derivs::new(act, fd);
            for axis in 0..d_in {
                let k = layout.orders[axis];
                if k == 0 {
                    continue;
                }
                let first = layout.slot(axis, 1) * block;
                let a = &z[first..first + k * block];
                let out = &mut h[first..first + k * block];
                match k {
                    1 => compose::<1>(&d, a, out, block),
                    2 => compose::<2>(&d, a, out, block),
                    3 => compose::<3>(&d, a, out, block),
                    _ => compose::<4>(&d, a, out, block),
                }
            }
        }
        self.n_points = n_points;
        self.dims = dims;
        self.activation = act;
    }

    pub fn layout(&self) -> &JetLayout {
        &self.layout
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Output component `o` in `slot` at point `p`.
    pub fn output(&self, slot: usize, p: usize, o: usize) -> f64 {
        self.output[(slot * self.n_points + p) * self.output_dim() + o]
    }

    /// Contiguous values of one slot for a single-output network.
    pub fn output_slot(&self, slot: usize) -> &[f64] {
        assert_eq!(self.output_dim(), 1);
        &self.output[slot * self.n_points..(slot + 1) * self.n_points]
    }

    /// Zeroed seed buffer matching the output jets.
    pub fn seed_buffer(&self) -> Vec<f64> {
        vec![0.0; self.output.len()]
    }

    /// Adds `Σ seed · ∂output/∂θ` into `grad`. `seed` has the layout of the
    /// output jets (`slots × points × output_dim`).
    pub fn backward(&mut self, params: &MlpParams, seed: &[f64], grad: &mut [f64]) {
        self.backward_truncated(params, seed, grad, MAX_ORDER);
    }

    /// Like [`JetForward::backward`] for a seed that is zero on every slot
    /// above `max_order`; only the slots it can reach are swept.
    pub fn backward_truncated(&mut self, params: &MlpParams, seed: &[f64], grad: &mut [f64], max_order: usize) {
        assert_eq!(seed.len(), self.output.len());
        assert_eq!(grad.len(), params.len());
        assert_eq!(params.dims(), &self.dims[..], "parameters do not match the cached pass");
        let n = self.n_points;
        let layout = &self.layout;
        // contiguous slot ranges [start, end) carrying nonzero adjoints
        let mut segments: Vec<(usize, usize)> = vec![(0, 1)];
        for axis in 0..layout.orders.len() {
            let k = layout.orders[axis].min(max_order);
            if k == 0 {
                continue;
            }
            let start = layout.offsets[axis];
            match segments.last_mut() {
                Some(seg) if seg.1 == start => seg.1 = start + k,
                _ => segments.push((start, start + k)),
            }
        }
        let dims = &self.dims;
        let n_layers = dims.len() - 1;
        let Self {
            delta, dh, inputs, fder, pre, ..
        } = self;
        let mut top = true;
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let d: &[f64] = if top { seed } else { delta };
            let off = params.layer_offset(l);
            let (gw, rest) = grad[off..].split_at_mut(n_out * n_in);
            for &(s0, s1) in &segments {
                let (r0, r1) = (s0 * n, s1 * n);
                // dW += deltaᵀ · H
                gemm(
                    n_out,
                    r1 - r0,
                    n_in,
                    &d[r0 * n_out..],
                    (1, n_out),
                    &inputs[l][r0 * n_in..],
                    (n_in, 1),
                    1.0,
                    gw,
                    (n_in, 1),
                );
            }
            let gb = &mut rest[..n_out];
            for row in d[..n * n_out].chunks_exact(n_out) {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            if l == 0 {
                break;
            }
            let rows = layout.num_slots() * n;
            dh.resize(rows * n_in, 0.0);
            for &(s0, s1) in &segments {
                let (r0, r1) = (s0 * n, s1 * n);
                gemm(
                    r1 - r0,
                    n_out,
                    n_in,
                    &d[r0 * n_out..],
                    (n_out, 1),
                    params.weights(l),
                    (n_in, 1),
                    0.0,
                    &mut dh[r0 * n_in..],
                    (n_in, 1),
                );
            }
            // back through the activation of hidden layer l - 1
            let block = n * n_in;
            let fd = Derivs::new(self.activation, &fder[l - 1]);
            let z = &pre[l - 1];
            delta.resize(rows * n_in, 0.0);
            for ((o, g), f) in delta[..block].iter_mut().zip(&dh[..block]).zip(fd.f[1]) {
                *o = g * f;
            }
            for axis in 0..layout.orders.len() {
                let k = layout.orders[axis].min(max_order);
                if k == 0 {
                    continue;
                }
                let first = layout.offsets[axis] * block;
                let span = first..first + k * block;
                let (head, tail) = delta.split_at_mut(first);
                let args = (&z[span.clone()], &dh[span], &mut tail[..k * block], &mut head[..block]);
                match k {
                    1 => compose_adjoint::<1>(&fd, args.0, args.1, args.2, args.3, block),
                    2 => compose_adjoint::<2>(&fd, args.0, args.1, args.2, args.3, block),
                    3 => compose_adjoint::<3>(&fd, args.0, args.1, args.2, args.3, block),
                    _ => compose_adjoint::<4>(&fd, args.0, args.1, args.2, args.3, block),
                }
            }
            top = false;
        }
    }
}

/// Fills the stored derivative arrays for `z` (see [`Derivs`]).
fn activation_derivatives(act: Activation, z: &[f64], fd: &mut [Vec<f64>]) {
    match act {
        Activation::Sin => {
            let (s, c) = fd.split_at_mut(1);
            sin_cos_slice(z, &mut s[0], &mut c[0]);
        }
        Activation::Tanh => {
            let (t, rest) = fd.split_at_mut(1);
            tanh_slice(z, &mut t[0]);
            tanh_derivatives(&t[0], rest);
        }
        Activation::Elu => {
            let mut buf = vec![0.0; fd.len()];
            for (i, &v) in z.iter().enumerate() {
                act.derivatives(v, &mut buf);
                for (f, b) in fd.iter_mut().zip(&buf) {
                    f[i] = *b;
                }
            }
        }
    }
}

/// `f^(n)` for `n = 1..=rest.len()` of tanh from `t = tanh(z)`, using
/// `s = 1 − t²` and `d t/dz = s`, `d s/dz = −2ts`.
fn tanh_derivatives(t: &[f64], rest: &mut [Vec<f64>]) {
    let n = t.len();
    for (order, f) in rest.iter_mut().enumerate() {
        tanh_derivative_order(t, &mut f[..n], order + 1);
    }
}

dispatch_simd! {
    fn tanh_derivative_order(t: &[f64], out: &mut [f64], order: usize) {
        let n = t.len();
        let out = &mut out[..n];
        for i in 0..n {
            let ti = t[i];
            let t2 = ti * ti;
            let s = 1.0 - t2;
            out[i] = match order {
                1 => s,
                2 => -2.0 * ti * s,
                3 => s * (4.0 * t2 - 2.0 * s),
                4 => ti * s * (16.0 * s - 8.0 * t2),
                _ => s * (16.0 * s * s - 88.0 * t2 * s + 16.0 * t2 * t2),
            };
        }
    }
}

dispatch_simd! {
    /// Branch-free `sin` and `cos` over a slice, accurate to a few ulp for
    /// moderate arguments.
    pub fn sin_cos_slice(x: &[f64], sin: &mut [f64], cos: &mut [f64]) {
        const S: [f64; 6] = [
            1.589_623_015_765_465_7e-10,
            -2.505_074_776_285_780_7e-8,
            2.755_731_362_138_572_5e-6,
            -1.984_126_982_958_953_9e-4,
            8.333_333_333_322_118e-3,
            -1.666_666_666_666_663_1e-1,
        ];
        const C: [f64; 6] = [
            -1.135_853_652_138_768_2e-11,
            2.087_570_084_197_473e-9,
            -2.755_731_417_929_673_8e-7,
            2.480_158_728_885_170_5e-5,
            -1.388_888_888_887_305_6e-3,
            4.166_666_666_666_659_3e-2,
        ];
        // π/2 in three parts so that j·P1 and j·P2 are exact
        const P1: f64 = 2.0 * 7.853_981_256_484_985e-1;
        const P2: f64 = 2.0 * 3.774_894_707_930_798e-8;
        const P3: f64 = 2.0 * 2.695_151_429_079_059_5e-15;
        const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
        let n = x.len();
        let (sin, cos) = (&mut sin[..n], &mut cos[..n]);
        for i in 0..n {
            let v = x[i];
            let t = v * std::f64::consts::FRAC_2_PI + MAGIC;
            let q = t.to_bits();
            let j = t - MAGIC;
            let r = ((v - j * P1) - j * P2) - j * P3;
            let z = r * r;
            let ps = ((((S[0] * z + S[1]) * z + S[2]) * z + S[3]) * z + S[4]) * z + S[5];
            let pc = ((((C[0] * z + C[1]) * z + C[2]) * z + C[3]) * z + C[4]) * z + C[5];
            let sr = r + r * z * ps;
            let cr = 1.0 - 0.5 * z + z * z * pc;
            let (a, b) = if q & 1 == 1 { (cr, sr) } else { (sr, cr) };
            sin[i] = if q & 2 == 2 { -a } else { a };
            cos[i] = if q.wrapping_add(1) & 2 == 2 { -b } else { b };
        }
    }
}

dispatch_simd! {
    /// Branch-free `tanh` over a slice: a rational approximation near zero,
    /// `1 − 2/(e^{2|x|} + 1)` elsewhere.
    pub fn tanh_slice(x: &[f64], out: &mut [f64]) {
        // rational approximation on |x| < 0.625
        const P: [f64; 3] = [
            -9.643_991_794_250_523e-1,
            -9.928_772_310_019_186e1,
            -1.614_687_684_417_084_5e3,
        ];
        const Q: [f64; 3] = [
            1.128_116_784_916_329_3e2,
            2.235_488_390_601_004_6e3,
            4.844_063_053_251_255e3,
        ];
        // exp on |r| ≤ ln2/2 as a Padé form
        const EP: [f64; 3] = [
            1.261_771_930_748_105_9e-4,
            3.029_944_077_074_419_6e-2,
            9.999_999_999_999_999_999_1e-1,
        ];
        const EQ: [f64; 4] = [
            3.001_985_051_386_644_5e-6,
            2.524_483_403_496_841e-3,
            2.272_655_482_081_550_3e-1,
            2.0,
        ];
        const C1: f64 = 6.931_457_519_531_25e-1;
        const C2: f64 = 1.428_606_820_309_417_2e-6;
        const MAGIC: f64 = 6_755_399_441_055_744.0;
        let n = x.len();
        let out = &mut out[..n];
        for i in 0..n {
            let v = x[i];
            let a = v.abs();
            // small argument branch
            let z = v * v;
            let small = v + v * z * ((P[0] * z + P[1]) * z + P[2]) / (((z + Q[0]) * z + Q[1]) * z + Q[2]);
            // large argument branch; tanh is ±1 in double precision past 19.1
            let y = (2.0 * a).min(40.0);
            let t = y * std::f64::consts::LOG2_E + MAGIC;
            let k = t - MAGIC;
            let r = (y - k * C1) - k * C2;
            let rr = r * r;
            let px = r * ((EP[0] * rr + EP[1]) * rr + EP[2]);
            let e = 1.0 + 2.0 * px / ((((EQ[0] * rr + EQ[1]) * rr + EQ[2]) * rr + EQ[3]) - px);
            let scale = f64::from_bits(((t.to_bits() & 0xfff) + 1023) << 52);
            let big = 1.0 - 2.0 / (e * scale + 1.0);
            let big = if v < 0.0 { -big } else { big };
            out[i] = if a < 0.625 { small } else { big };
        }
    }
}

/// Network outputs only (`points × output_dim`), without keeping the caches
/// a backward pass needs.
pub fn evaluate_values(params: &MlpParams, stats: &NormStats, points: &[f64]) -> Vec<f64> {
    let dims = params.dims();
    let d_in = dims[0];
    assert_eq!(points.len() % d_in, 0);
    let n_points = points.len() / d_in;
    let mut h: Vec<f64> = points
        .chunks_exact(d_in)
        .flat_map(|x| (0..d_in).map(move |a| (x[a] - stats.mean[a]) / stats.std[a]))
        .collect();
    let act = params.activation();
    let n_layers = params.num_layers();
    let mut scratch = Vec::new();
    for l in 0..n_layers {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let mut z = vec![0.0; n_points * n_out];
        gemm(n_points, n_in, n_out, &h, (n_in, 1), params.weights(l), (1, n_in), 0.0, &mut z, (n_out, 1));
        let bias = params.biases(l);
        for row in z.chunks_exact_mut(n_out) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        if l + 1 == n_layers {
            return z;
        }
        h.resize(z.len(), 0.0);
        match act {
            Activation::Sin => {
                scratch.resize(z.len(), 0.0);
                sin_cos_slice(&z, &mut h, &mut scratch);
            }
            Activation::Tanh => tanh_slice(&z, &mut h),
            Activation::Elu => {
                let mut buf = [0.0; 1];
                for (o, &v) in h.iter_mut().zip(&z) {
                    act.derivatives(v, &mut buf);
                    *o = buf[0];
                }
            }
        }
    }
    unreachable!("a network has at least one affine map")
}

dispatch_simd! {
    /// Faà di Bruno for orders `1..=K`: `a` holds the input jet blocks
    /// `a_1..a_K` and `out` receives `h_1..h_K`.
    fn compose<const K: usize>(d: &Derivs<'_>, a: &[f64], out: &mut [f64], n: usize) {
        let part = |j: usize| if j <= K { &a[(j - 1) * n..j * n] } else { &a[..n] };
        let fs = |j: usize| &d.f[j][..n];
        let sg = d.sign;
        let (f1, f2, f3, f4) = (fs(1), fs(2), fs(3), fs(4));
        let (a1, a2, a3, a4) = (part(1), part(2), part(3), part(4));
        let mut blocks = out.chunks_exact_mut(n);
        let mut take = |j: usize| {
            let b = if j <= K { blocks.next().unwrap() } else { &mut [] };
            &mut b[..if j <= K { n } else { 0 }]
        };
        let (o1, o2, o3, o4) = (take(1), take(2), take(3), take(4));
        for i in 0..n {
            let x1 = a1[i];
            let d1 = sg[1] * f1[i];
            o1[i] = d1 * x1;
            if K >= 2 {
                let (x2, d2) = (a2[i], sg[2] * f2[i]);
                let x1s = x1 * x1;
                o2[i] = d2 * x1s + d1 * x2;
                if K >= 3 {
                    let (x3, d3) = (a3[i], sg[3] * f3[i]);
                    o3[i] = d3 * x1s * x1 + 3.0 * d2 * x1 * x2 + d1 * x3;
                    if K >= 4 {
                        let (x4, d4) = (a4[i], sg[4] * f4[i]);
                        o4[i] = d4 * x1s * x1s
                            + 6.0 * d3 * x1s * x2
                            + d2 * (4.0 * x1 * x3 + 3.0 * x2 * x2)
                            + d1 * x4;
                    }
                }
            }
        }
    }
}

dispatch_simd! {
    /// Adjoint of [`compose`]: writes `∂L/∂a_j` for `j = 1..=K` into `out`
    /// and adds the value-slot contribution into `acc0`.
    fn compose_adjoint<const K: usize>(
        d: &Derivs<'_>,
        a: &[f64],
        g: &[f64],
        out: &mut [f64],
        acc0: &mut [f64],
        n: usize,
    ) {
        fn part(v: &[f64], j: usize, k: usize, n: usize) -> &[f64] {
            if j <= k {
                &v[(j - 1) * n..j * n]
            } else {
                &v[..n]
            }
        }
        let fs = |j: usize| &d.f[j][..n];
        let sg = d.sign;
        let (f1, f2, f3, f4, f5) = (fs(1), fs(2), fs(3), fs(4), fs(5));
        let (a1, a2, a3, a4) = (part(a, 1, K, n), part(a, 2, K, n), part(a, 3, K, n), part(a, 4, K, n));
        let (g1, g2, g3, g4) = (part(g, 1, K, n), part(g, 2, K, n), part(g, 3, K, n), part(g, 4, K, n));
        let acc0 = &mut acc0[..n];
        let mut blocks = out.chunks_exact_mut(n);
        let mut take = |j: usize| {
            let b = if j <= K { blocks.next().unwrap() } else { &mut [] };
            &mut b[..if j <= K { n } else { 0 }]
        };
        let (o1, o2, o3, o4) = (take(1), take(2), take(3), take(4));
        for i in 0..n {
            let (x1, y1) = (a1[i], g1[i]);
            let (d1, d2) = (sg[1] * f1[i], sg[2] * f2[i]);
            let mut r1 = y1 * d1;
            // ∂h_j/∂a_0 shifts every f^(n) to f^(n+1)
            let mut r0 = y1 * d2 * x1;
            if K >= 2 {
                let (x2, y2, d3) = (a2[i], g2[i], sg[3] * f3[i]);
                let x1s = x1 * x1;
                r1 += y2 * 2.0 * d2 * x1;
                let mut r2 = y2 * d1;
                r0 += y2 * (d3 * x1s + d2 * x2);
                if K >= 3 {
                    let (x3, y3, d4) = (a3[i], g3[i], sg[4] * f4[i]);
                    r1 += y3 * (3.0 * d3 * x1s + 3.0 * d2 * x2);
                    r2 += y3 * 3.0 * d2 * x1;
                    let mut r3 = y3 * d1;
                    r0 += y3 * (d4 * x1s * x1 + 3.0 * d3 * x1 * x2 + d2 * x3);
                    if K >= 4 {
                        let (x4, y4, d5) = (a4[i], g4[i], sg[5] * f5[i]);
                        r1 += y4 * (4.0 * d4 * x1s * x1 + 12.0 * d3 * x1 * x2 + 4.0 * d2 * x3);
                        r2 += y4 * (6.0 * d3 * x1s + 6.0 * d2 * x2);
                        r3 += y4 * 4.0 * d2 * x1;
                        o4[i] = y4 * d1;
                        r0 += y4
                            * (d5 * x1s * x1s
                                + 6.0 * d4 * x1s * x2
                                + d3 * (4.0 * x1 * x3 + 3.0 * x2 * x2)
                                + d2 * x4);
                    }
                    o3[i] = r3;
                }
                o2[i] = r2;
            }
            o1[i] = r1;
            acc0[i] += r0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Bindings, Graph};
    use crate::network::{build_output_expr, init_mlp, MlpConfig};

    #[test]
    fn fast_sin_cos_matches_libm() {
        let xs: Vec<f64> = (0..200_001).map(|i| (i as f64 - 100_000.0) * 1.37e-3).collect();
        let (mut s, mut c) = (vec![0.0; xs.len()], vec![0.0; xs.len()]);
        sin_cos_slice(&xs, &mut s, &mut c);
        for (i, &x) in xs.iter().enumerate() {
            assert!((s[i] - x.sin()).abs() < 1e-15, "sin({x})");
            assert!((c[i] - x.cos()).abs() < 1e-15, "cos({x})");
        }
    }

    #[test]
    fn fast_tanh_matches_libm() {
        let xs: Vec<f64> = (0..200_001).map(|i| (i as f64 - 100_000.0) * 3.1e-4).collect();
        let mut t = vec![0.0; xs.len()];
        tanh_slice(&xs, &mut t);
        for (x, v) in xs.iter().zip(&t) {
            let e = (v - x.tanh()).abs();
            assert!(e <= 2.0 * f64::EPSILON * x.tanh().abs().max(1e-300) || e < 1e-17, "tanh({x}): {v}");
        }
        tanh_slice(&[-800.0, 800.0, 0.0], &mut t[..3]);
        assert_eq!(&t[..3], &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn tanh_derivative_closed_forms() {
        let act = Activation::Tanh;
        let mut fd = vec![vec![0.0; 5]; 6];
        let z = [-1.3, -0.2, 0.0, 0.4, 2.1];
        activation_derivatives(act, &z, &mut fd);
        let mut buf = [0.0; 6];
        for (i, &v) in z.iter().enumerate() {
            act.derivatives(v, &mut buf);
            for n in 0..6 {
                assert!((fd[n][i] - buf[n]).abs() < 1e-13 * buf[n].abs().max(1.0), "order {n} at {v}: {} vs {}", fd[n][i], buf[n]);
            }
        }
    }

    #[test]
    fn truncated_backward_matches_full_sweep() {
        let params = init_mlp(&MlpConfig::new(2, 3, 6, Activation::Sin).with_seed(2)).unwrap();
        let pts = points(7);
        let layout = JetLayout::new(&[4, 3]);
        let mut fwd = JetForward::new(&params, &stats(), &pts, &layout);
        for q in 0..=4 {
            let mut seed = fwd.seed_buffer();
            for axis in 0..2 {
                for j in 0..=q.min(layout.order(axis)) {
                    let s = layout.slot(axis, j);
                    for p in 0..7 {
                        seed[s * 7 + p] = 0.1 * (p as f64 - 3.0) + j as f64;
                    }
                }
            }
            let mut full = vec![0.0; params.len()];
            let mut part = vec![0.0; params.len()];
            fwd.backward(&params, &seed, &mut full);
            fwd.backward_truncated(&params, &seed, &mut part, q);
            for (a, b) in full.iter().zip(&part) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "order {q}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rerun_reuses_buffers() {
        let params = init_mlp(&MlpConfig::new(2, 2, 5, Activation::Tanh).with_seed(4)).unwrap();
        let layout = JetLayout::new(&[2, 2]);
        let big = points(9);
        let small = points(4);
        let mut fwd = JetForward::new(&params, &stats(), &big, &layout);
        fwd.run(&params, &stats(), &small);
        let fresh = JetForward::new(&params, &stats(), &small, &layout);
        for slot in 0..layout.num_slots() {
            assert_eq!(fwd.output_slot(slot), fresh.output_slot(slot));
        }
    }

    #[test]
    fn value_only_evaluation_matches_jets() {
        for act in [Activation::Sin, Activation::Tanh, Activation::Elu] {
            let params = init_mlp(&MlpConfig::new(2, 3, 8, act).with_seed(5)).unwrap();
            let pts: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
            let stats = NormStats::fit(&pts, 2).unwrap();
            let fwd = JetForward::new(&params, &stats, &pts, &JetLayout::value_only(2));
            let vals = evaluate_values(&params, &stats, &pts);
            for (p, v) in vals.iter().enumerate() {
                assert!((fwd.output(0, p, 0) - v).abs() < 1e-13);
            }
        }
    }

    fn points(n: usize) -> Vec<f64> {
        (0..n)
            .flat_map(|i| {
                let t = i as f64 + 0.5;
                [(t * 1.37).sin() * 2.0 + 1.0, (t * 0.71).cos() * 1.5 - 0.3]
            })
            .collect()
    }

    fn stats() -> NormStats {
        NormStats {
            mean: vec![0.4, -0.2],
            std: vec![1.3, 0.8],
        }
    }

    /// The expression engine is the reference for values and gradients.
    fn check_against_graph(act: Activation, orders: [usize; 2]) {
        let cfg = MlpConfig::new(2, 2, 5, act).with_seed(9);
        let params = init_mlp(&cfg).unwrap();
        let st = stats();
        let pts = points(3);
        let layout = JetLayout::new(&orders);
        let mut fwd = JetForward::new(&params, &st, &pts, &layout);

        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.input("y");
        let net = build_output_expr(&mut g, &params, &st, &[x, y]);
        let u = net.outputs[0];
        let mut exprs = vec![(0usize, u)];
        for (axis, var) in [x, y].into_iter().enumerate() {
            let mut e = u;
            for j in 1..=orders[axis] {
                e = g.differentiate(e, var);
                exprs.push((layout.slot(axis, j), e));
            }
        }
        // Scalar test functional: Σ_slots Σ_p c_{slot,p} · output
        let mut seed = fwd.seed_buffer();
        for (i, s) in seed.iter_mut().enumerate() {
            *s = ((i * 7 % 5) as f64 - 2.0) * 0.3;
        }
        let mut jet_grad = vec![0.0; params.len()];
        fwd.backward(&params, &seed, &mut jet_grad);

        let roots: Vec<_> = exprs.iter().map(|e| e.1).collect();
        let program = g.compile(&roots);
        let mut graph_grad = vec![0.0; params.len()];
        let mut scratch = crate::autodiff::Scratch::default();
        for (p, pt) in pts.chunks(2).enumerate() {
            let mut b = Bindings::new().with(x, pt[0]).with(y, pt[1]);
            net.bind(&params, &mut b);
            for (r, &(slot, _)) in exprs.iter().enumerate() {
                let mut vals = Vec::new();
                program.evaluate(&b, &mut vals).unwrap();
                let v = program.root_value(r, &vals);
                let jv = fwd.output(slot, p, 0);
                assert!((v - jv).abs() <= 1e-11 * v.abs().max(1.0), "slot {slot}: {v} vs {jv}");
                let w = seed[slot * fwd.n_points() + p];
                program
                    .accumulate_gradient(r, &net.params, &b, w, &mut scratch, &mut graph_grad)
                    .unwrap();
            }
        }
        let scale = graph_grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in jet_grad.iter().zip(&graph_grad) {
            assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn sin_jets_match_expression_engine() {
        check_against_graph(Activation::Sin, [4, 4]);
        check_against_graph(Activation::Sin, [4, 0]);
    }

    #[test]
    fn tanh_jets_match_expression_engine() {
        check_against_graph(Activation::Tanh, [2, 2]);
        check_against_graph(Activation::Tanh, [4, 1]);
    }

    #[test]
    fn elu_jets_match_expression_engine() {
        check_against_graph(Activation::Elu, [3, 2]);
    }

    #[test]
    fn value_only_layout() {
        let l = JetLayout::value_only(2);
        assert_eq!(l.num_slots(), 1);
        let l = JetLayout::new(&[4, 2]);
        assert_eq!(l.num_slots(), 7);
        assert_eq!(l.slot(0, 4), 4);
        assert_eq!(l.slot(1, 1), 5);
        assert_eq!(l.slot(1, 0), 0);
    }
}
