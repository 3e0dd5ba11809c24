//! Dense 4-D activations `(channels, depth, height, width)` and the handful of
//! layers the transforms are built from, each with an explicit backward pass.
//!
//! Convolutions lower to a matrix product over an im2col buffer. Padding is
//! always `kernel / 2`, so stride-1 layers preserve spatial size and stride-2
//! layers map `n` to `ceil(n / 2)`.

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Grid4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    /// Number of positions per channel.
    pub fn volume(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let v = self.volume();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Grid4<U> {
        Grid4 {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: T) {
        for x in &mut self.data {
            *x *= a;
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Grid4<T>, b: &Grid4<T>) -> Result<Grid4<T>> {
    if a.spatial() != b.spatial() {
        return Err(Error::Shape(format!(
            "concat of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    let [_, d, h, w] = a.shape;
    Grid4::from_vec([a.channels() + b.channels(), d, h, w], data)
}

/// Splits off the first `first` channels.
pub fn split_channels<T: Scalar>(x: &Grid4<T>, first: usize) -> (Grid4<T>, Grid4<T>) {
    let [c, d, h, w] = x.shape;
    let cut = first * x.volume();
    (
        Grid4 {
            shape: [first, d, h, w],
            data: x.data[..cut].to_vec(),
        },
        Grid4 {
            shape: [c - first, d, h, w],
            data: x.data[cut..].to_vec(),
        },
    )
}

/// Kernel size and stride of a convolution; padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        input.map(|n| n.div_ceil(self.stride))
    }

    fn validate(&self) -> Result<()> {
        if !matches!(self.kernel, 1 | 3) || !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!(
                "unsupported conv kernel {} stride {}",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }
}

/// Weight and bias gradients of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Geometry shared by the three direct convolution kernels: a conv with
/// `spec` maps `cin` channels of `in_sp` to `cout` channels of `out_sp`.
///
/// The input is zero-padded and split into `stride³` phase grids of shape
/// `q`, so that every tap reads one phase at a constant offset. Outputs are
/// embedded at `oz·qz + oy·qy + ox` with the phase pitches, which turns each
/// tap into one long contiguous axpy.
#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    in_sp: [usize; 3],
    out_sp: [usize; 3],
    spec: ConvSpec,
}

impl ConvGeom {
    fn phase_shape(&self) -> [usize; 3] {
        let (k, s, p) = (self.spec.kernel, self.spec.stride, self.spec.padding());
        std::array::from_fn(|d| {
            let padded = (self.in_sp[d] + 2 * p).max(s * self.out_sp[d].saturating_sub(1) + k);
            padded.div_ceil(s).max(1)
        })
    }

    fn pitches(&self) -> (usize, usize) {
        let q = self.phase_shape();
        (q[1] * q[2], q[2])
    }

    fn phase_len(&self) -> usize {
        self.phase_shape().iter().product()
    }

    /// Per-channel length of the phase-split input.
    fn padded_len(&self) -> usize {
        self.spec.stride.pow(3) * self.phase_len()
    }

    /// Length of the embedded output range.
    fn embedded_len(&self) -> usize {
        let (qz, qy) = self.pitches();
        let o = self.out_sp;
        if o.contains(&0) {
            return 0;
        }
        (o[0] - 1) * qz + (o[1] - 1) * qy + o[2]
    }

    fn tap_offset(&self, tap: usize) -> usize {
        let (k, s) = (self.spec.kernel, self.spec.stride);
        let (qz, qy) = self.pitches();
        let (tz, ty, tx) = (tap / (k * k), tap / k % k, tap % k);
        let phase = ((tz % s) * s + ty % s) * s + tx % s;
        phase * self.phase_len() + (tz / s) * qz + (ty / s) * qy + tx / s
    }

    fn weight_index(&self, co: usize, ci: usize, tap: usize) -> usize {
        (co * self.cin + ci) * self.spec.taps() + tap
    }

    /// Calls `f(compact, split)` for each input row with stride-1 phases,
    /// or per voxel otherwise.
    fn input_map(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (s, p) = (self.spec.stride, self.spec.padding());
        let (qz, qy) = self.pitches();
        let qlen = self.phase_len();
        let [n0, n1, n2] = self.in_sp;
        for z in 0..n0 {
            let (pz, zq) = ((z + p) % s, (z + p) / s);
            for y in 0..n1 {
                let (py, yq) = ((y + p) % s, (y + p) / s);
                let src = (z * n1 + y) * n2;
                if s == 1 {
                    f(src, zq * qz + yq * qy + p, n2);
                    continue;
                }
                for x in 0..n2 {
                    let (px, xq) = ((x + p) % s, (x + p) / s);
                    let phase = (pz * s + py) * s + px;
                    f(src + x, phase * qlen + zq * qz + yq * qy + xq, 1);
                }
            }
        }
    }

    /// Copies compact input channels into the phase-split layout.
    fn pad_input<T: Scalar>(&self, x: &[T], channels: usize) -> Vec<T> {
        let plen = self.padded_len();
        let vol: usize = self.in_sp.iter().product();
        let mut out = vec![T::zero(); channels * plen];
        for c in 0..channels {
            let (xc, oc) = (&x[c * vol..(c + 1) * vol], &mut out[c * plen..(c + 1) * plen]);
            self.input_map(|src, dst, len| oc[dst..dst + len].copy_from_slice(&xc[src..src + len]));
        }
        out
    }

    /// Inverse of [`Self::pad_input`], dropping the border.
    fn unpad_input<T: Scalar>(&self, xp: &[T], channels: usize) -> Vec<T> {
        let plen = self.padded_len();
        let vol: usize = self.in_sp.iter().product();
        let mut out = vec![T::zero(); channels * vol];
        for c in 0..channels {
            let (xc, oc) = (&xp[c * plen..(c + 1) * plen], &mut out[c * vol..(c + 1) * vol]);
            self.input_map(|src, dst, len| oc[src..src + len].copy_from_slice(&xc[dst..dst + len]));
        }
        out
    }

    /// Copies compact output channels into the embedded layout, zeros elsewhere.
    fn embed_output<T: Scalar>(&self, o: &[T], channels: usize) -> Vec<T> {
        let (qz, qy) = self.pitches();
        let elen = self.embedded_len();
        let [n0, n1, n2] = self.out_sp;
        let mut out = vec![T::zero(); channels * elen];
        for c in 0..channels {
            for z in 0..n0 {
                for y in 0..n1 {
                    let src = ((c * n0 + z) * n1 + y) * n2;
                    let dst = c * elen + z * qz + y * qy;
                    out[dst..dst + n2].copy_from_slice(&o[src..src + n2]);
                }
            }
        }
        out
    }

    fn unembed_output<T: Scalar>(&self, e: &[T], channels: usize) -> Vec<T> {
        let (qz, qy) = self.pitches();
        let elen = self.embedded_len();
        let [n0, n1, n2] = self.out_sp;
        let mut out = Vec::with_capacity(channels * n0 * n1 * n2);
        for c in 0..channels {
            for z in 0..n0 {
                for y in 0..n1 {
                    let src = c * elen + z * qz + y * qy;
                    out.extend_from_slice(&e[src..src + n2]);
                }
            }
        }
        out
    }
}

/// Output elements per cache block in the direct kernels.
const BLOCK: usize = 512;

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, ar) = a.split_at(a.len() / 8 * 8);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Returns `conv(x)` without bias in compact layout.
fn conv_forward<T: Scalar>(g: ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let xp = g.pad_input(x, g.cin);
    let (plen, elen) = (g.padded_len(), g.embedded_len());
    let mut out = vec![T::zero(); g.cout * elen];
    for co in 0..g.cout {
        let oc = &mut out[co * elen..(co + 1) * elen];
        // Blocked so the accumulator row stays in L1 across all taps.
        for start in (0..elen).step_by(BLOCK) {
            let len = BLOCK.min(elen - start);
            let ob = &mut oc[start..start + len];
            for ci in 0..g.cin {
                let xc = &xp[ci * plen..(ci + 1) * plen];
                for tap in 0..g.spec.taps() {
                    let wv = w[g.weight_index(co, ci, tap)];
                    let off = g.tap_offset(tap) + start;
                    for (o, &v) in ob.iter_mut().zip(&xc[off..off + len]) {
                        *o += wv * v;
                    }
                }
            }
        }
    }
    g.unembed_output(&out, g.cout)
}

/// Returns `convᵀ(up)` in compact input layout: the adjoint of
/// [`conv_forward`] in its input.
fn conv_adjoint<T: Scalar>(g: ConvGeom, up: &[T], w: &[T]) -> Vec<T> {
    let ue = g.embed_output(up, g.cout);
    let (plen, elen) = (g.padded_len(), g.embedded_len());
    let mut dxp = vec![T::zero(); g.cin * plen];
    for ci in 0..g.cin {
        let dc = &mut dxp[ci * plen..(ci + 1) * plen];
        for start in (0..elen).step_by(BLOCK) {
            let len = BLOCK.min(elen - start);
            for co in 0..g.cout {
                let ub = &ue[co * elen + start..co * elen + start + len];
                for tap in 0..g.spec.taps() {
                    let wv = w[g.weight_index(co, ci, tap)];
                    let off = g.tap_offset(tap) + start;
                    for (d, &v) in dc[off..off + len].iter_mut().zip(ub) {
                        *d += wv * v;
                    }
                }
            }
        }
    }
    g.unpad_input(&dxp, g.cin)
}

/// Returns `∂⟨up, conv(x)⟩/∂w`.
fn conv_weight_grad<T: Scalar>(g: ConvGeom, up: &[T], x: &[T]) -> Vec<T> {
    let xp = g.pad_input(x, g.cin);
    let ue = g.embed_output(up, g.cout);
    let (plen, elen) = (g.padded_len(), g.embedded_len());
    let mut dw = vec![T::zero(); g.cout * g.cin * g.spec.taps()];
    for ci in 0..g.cin {
        let xc = &xp[ci * plen..(ci + 1) * plen];
        for tap in 0..g.spec.taps() {
            let off = g.tap_offset(tap);
            let row = &xc[off..off + elen];
            for co in 0..g.cout {
                dw[g.weight_index(co, ci, tap)] = dot(&ue[co * elen..(co + 1) * elen], row);
            }
        }
    }
    dw
}

fn check_conv<T: Scalar>(
    input: &Grid4<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    spec: ConvSpec,
) -> Result<()> {
    spec.validate()?;
    let cin = input.channels();
    if weight.len() != cout * cin * spec.taps() || bias.len() != cout {
        return Err(Error::Shape(format!(
            "conv {cin}→{cout} k{} expects {} weights and {cout} biases, got {} and {}",
            spec.kernel,
            cout * cin * spec.taps(),
            weight.len(),
            bias.len()
        )));
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], volume: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * volume..(c + 1) * volume] {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(upstream: &Grid4<T>) -> Vec<T> {
    (0..upstream.channels())
        .map(|c| upstream.channel(c).iter().copied().sum())
        .collect()
}

/// 3-D cross-correlation. `weight` is laid out `[cout][cin][kz][ky][kx]`.
pub fn conv3d<T: Scalar>(
    input: &Grid4<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    spec: ConvSpec,
) -> Result<Grid4<T>> {
    check_conv(input, weight, bias, cout, spec)?;
    let cin = input.channels();
    let out_sp = spec.output_spatial(input.spatial());
    let out_vol: usize = out_sp.iter().product();
    let mut out = vec![T::zero(); cout * out_vol];
    if spec.kernel == 1 && spec.stride == 1 {
        T::gemm(cout, cin, out_vol, weight, false, &input.data, false, T::zero(), &mut out);
    } else {
        let geom = ConvGeom {
            cin,
            cout,
            in_sp: input.spatial(),
            out_sp,
            spec,
        };
        out = conv_forward(geom, &input.data, weight);
    }
    add_bias(&mut out, bias, out_vol);
    Grid4::from_vec([cout, out_sp[0], out_sp[1], out_sp[2]], out)
}

/// Backward pass of [`conv3d`] given the forward input.
pub fn conv3d_backward<T: Scalar>(
    upstream: &Grid4<T>,
    input: &Grid4<T>,
    weight: &[T],
    spec: ConvSpec,
    want_input_grad: bool,
) -> Result<(Option<Grid4<T>>, LayerGradients<T>)> {
    spec.validate()?;
    let cin = input.channels();
    let cout = upstream.channels();
    let out_sp = spec.output_spatial(input.spatial());
    if upstream.spatial() != out_sp || weight.len() != cout * cin * spec.taps() {
        return Err(Error::Shape(format!(
            "conv backward: upstream {:?} does not match input {:?}",
            upstream.shape, input.shape
        )));
    }
    let out_vol: usize = out_sp.iter().product();
    let db = bias_grad(upstream);
    let mut dw = vec![T::zero(); cout * cin * spec.taps()];
    let dx = if spec.kernel == 1 && spec.stride == 1 {
        T::gemm(cout, out_vol, cin, &upstream.data, false, &input.data, true, T::zero(), &mut dw);
        want_input_grad.then(|| {
            let mut dx = vec![T::zero(); cin * out_vol];
            T::gemm(cin, cout, out_vol, weight, true, &upstream.data, false, T::zero(), &mut dx);
            dx
        })
    } else {
        let geom = ConvGeom {
            cin,
            cout,
            in_sp: input.spatial(),
            out_sp,
            spec,
        };
        dw = conv_weight_grad(geom, &upstream.data, &input.data);
        want_input_grad.then(|| conv_adjoint(geom, &upstream.data, weight))
    };
    let dx = dx.map(|d| Grid4::from_vec(input.shape, d)).transpose()?;
    Ok((dx, LayerGradients { weight: dw, bias: db }))
}

const DECONV: ConvSpec = ConvSpec::new(3, 2);

fn check_deconv<T: Scalar>(
    input: &Grid4<T>,
    weight: &[T],
    cout: usize,
    out_sp: [usize; 3],
) -> Result<()> {
    if DECONV.output_spatial(out_sp) != input.spatial() {
        return Err(Error::Shape(format!(
            "deconv cannot map {:?} to {out_sp:?}",
            input.spatial()
        )));
    }
    if weight.len() != input.channels() * cout * DECONV.taps() {
        return Err(Error::Shape(format!(
            "deconv {}→{cout} expects {} weights, got {}",
            input.channels(),
            input.channels() * cout * DECONV.taps(),
            weight.len()
        )));
    }
    Ok(())
}

/// Transposed 3×3×3 stride-2 convolution: the adjoint of a stride-2
/// [`conv3d`] whose input has spatial size `out_sp`. `weight` is laid out
/// `[cin][cout][kz][ky][kx]`, i.e. the same memory as the conv it transposes.
pub fn deconv3d<T: Scalar>(
    input: &Grid4<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    out_sp: [usize; 3],
) -> Result<Grid4<T>> {
    check_deconv(input, weight, cout, out_sp)?;
    if bias.len() != cout {
        return Err(Error::Shape(format!("deconv expects {cout} biases, got {}", bias.len())));
    }
    let geom = ConvGeom {
        cin: cout,
        cout: input.channels(),
        in_sp: out_sp,
        out_sp: input.spatial(),
        spec: DECONV,
    };
    let mut out = conv_adjoint(geom, &input.data, weight);
    add_bias(&mut out, bias, out_sp.iter().product());
    Grid4::from_vec([cout, out_sp[0], out_sp[1], out_sp[2]], out)
}

/// Output size used when no explicit target is given: twice the input.
pub fn deconv_default_size(input: [usize; 3]) -> [usize; 3] {
    input.map(|n| 2 * n)
}

/// Backward pass of [`deconv3d`].
pub fn deconv3d_backward<T: Scalar>(
    upstream: &Grid4<T>,
    input: &Grid4<T>,
    weight: &[T],
    want_input_grad: bool,
) -> Result<(Option<Grid4<T>>, LayerGradients<T>)> {
    let cout = upstream.channels();
    check_deconv(input, weight, cout, upstream.spatial())?;
    let geom = ConvGeom {
        cin: cout,
        cout: input.channels(),
        in_sp: upstream.spatial(),
        out_sp: input.spatial(),
        spec: DECONV,
    };
    let dw = conv_weight_grad(geom, &input.data, &upstream.data);
    let dx = if want_input_grad {
        Some(Grid4::from_vec(input.shape, conv_forward(geom, &upstream.data, weight))?)
    } else {
        None
    };
    Ok((
        dx,
        LayerGradients {
            weight: dw,
            bias: bias_grad(upstream),
        },
    ))
}

pub fn relu<T: Scalar>(x: &Grid4<T>) -> Grid4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at zero is zero.
pub fn relu_backward<T: Scalar>(upstream: &Grid4<T>, input: &Grid4<T>) -> Grid4<T> {
    Grid4 {
        shape: input.shape,
        data: upstream
            .data
            .iter()
            .zip(&input.data)
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

/// Largest logit magnitude for which the logistic function stays strictly
/// inside (0, 1) at precision `T`.
pub fn logit_limit<T: Scalar>() -> T {
    -T::epsilon().ln() - T::one()
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let lim = logit_limit::<T>();
    let x = x.max(-lim).min(lim);
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Grid4<T>) -> Grid4<T> {
    x.map(sigmoid_scalar)
}

/// Takes the forward output, not the input.
pub fn sigmoid_backward<T: Scalar>(upstream: &Grid4<T>, output: &Grid4<T>) -> Grid4<T> {
    Grid4 {
        shape: output.shape,
        data: upstream
            .data
            .iter()
            .zip(&output.data)
            .map(|(&g, &p)| g * p * (T::one() - p))
            .collect(),
    }
}

/// First and second moment estimates for a list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<T>> = shapes.into_iter().map(|n| vec![T::zero(); n]).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters are untouched when any
/// gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [Vec<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("adam: parameter/gradient/state count mismatch".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Shape(format!("adam: array {i} length mismatch")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter array {i}")));
        }
    }
    state.t += 1;
    let c = |v: f64| T::from_f64_lossy(v);
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let bc1 = T::one() - c(cfg.beta1.powi(state.t as i32));
    let bc2 = T::one() - c(cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (c(cfg.lr), c(cfg.eps));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_grid(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Grid4<f64> {
        let n = shape.iter().product();
        Grid4::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // Straightforward nested-loop convolution, independent of im2col.
    fn conv_reference(x: &Grid4<f64>, w: &[f64], b: &[f64], cout: usize, spec: ConvSpec) -> Grid4<f64> {
        let [cin, d, h, wd] = x.shape();
        let out = spec.output_spatial([d, h, wd]);
        let k = spec.kernel as isize;
        let pad = spec.padding() as isize;
        let mut y = Grid4::zeros([cout, out[0], out[1], out[2]]);
        for co in 0..cout {
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for dz in 0..k {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let iz = (oz * spec.stride) as isize + dz - pad;
                                        let iy = (oy * spec.stride) as isize + dy - pad;
                                        let ix = (ox * spec.stride) as isize + dx - pad;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let wi = (((co * cin + ci) as isize * k + dz) * k + dy) * k + dx;
                                        let xi = ((ci * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        acc += w[wi as usize] * x.data()[xi];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((co * out[0] + oz) * out[1] + oy) * out[2] + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()).max(1e-3)))
            .fold(0.0, f64::max)
    }

    // Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut xv = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xv[i];
                xv[i] = orig + h;
                let fp = f(&xv);
                xv[i] = orig - h;
                let fm = f(&xv);
                xv[i] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn pointwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_grid([1, 4, 4, 4], &mut rng);
        let y = conv3d(&x, &[1.0], &[0.0], 1, ConvSpec::new(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let x = Grid4::from_vec([1, 5, 5, 5], vec![1.0f64; 125]).unwrap();
        let y = conv3d(&x, &[1.0; 27], &[0.0], 1, ConvSpec::new(3, 1)).unwrap();
        assert_eq!(y.data()[(2 * 5 + 2) * 5 + 2], 27.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn stride_two_halves() {
        let x = Grid4::<f32>::zeros([1, 16, 16, 16]);
        let y = conv3d(&x, &[0.0; 27], &[0.0], 1, ConvSpec::new(3, 2)).unwrap();
        assert_eq!(y.shape(), [1, 8, 8, 8]);
        let x = Grid4::<f32>::zeros([1, 5, 3, 1]);
        let y = conv3d(&x, &[0.0; 27], &[0.0], 1, ConvSpec::new(3, 2)).unwrap();
        assert_eq!(y.spatial(), [3, 2, 1]);
    }

    #[test]
    fn conv_matches_reference_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [ConvSpec::new(1, 1), ConvSpec::new(3, 1), ConvSpec::new(3, 2), ConvSpec::new(1, 2)] {
            let x = rand_grid([3, 5, 4, 6], &mut rng);
            let w = rand_vec(2 * 3 * spec.taps(), &mut rng);
            let b = rand_vec(2, &mut rng);
            let got = conv3d(&x, &w, &b, 2, spec).unwrap();
            let want = conv_reference(&x, &w, &b, 2, spec);
            assert_eq!(got.shape(), want.shape());
            assert!(max_rel_err(got.data(), want.data()) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Grid4::<f64>::zeros([2, 4, 4, 4]);
        assert!(conv3d(&x, &[0.0; 27], &[0.0], 1, ConvSpec::new(3, 1)).is_err());
        assert!(conv3d(&x, &[0.0; 250], &[0.0], 1, ConvSpec::new(5, 1)).is_err());
        let up = Grid4::<f64>::zeros([1, 3, 4, 4]);
        assert!(conv3d_backward(&up, &x, &[0.0; 54], ConvSpec::new(3, 1), true).is_err());
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_grid([2, 4, 4, 4], &mut rng);
        let w = rand_vec(3 * 2 * 27, &mut rng);
        let up = Grid4::zeros([3, 2, 2, 2]);
        let (dx, g) = conv3d_backward(&up, &x, &w, ConvSpec::new(3, 2), true).unwrap();
        assert!(dx.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.weight.iter().chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::new(3, 1);
        let x = rand_grid([2, 4, 4, 4], &mut rng);
        let w = rand_vec(2 * 2 * 27, &mut rng);
        let up = rand_grid([2, 4, 4, 4], &mut rng);
        let mut up3 = up.clone();
        up3.scale(3.0);
        let (dx1, g1) = conv3d_backward(&up, &x, &w, spec, true).unwrap();
        let (dx3, g3) = conv3d_backward(&up3, &x, &w, spec, true).unwrap();
        for (a, b) in dx1.unwrap().data().iter().zip(dx3.unwrap().data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in g1.weight.iter().zip(&g3.weight) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradcheck_single_channel_4cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in [ConvSpec::new(3, 1), ConvSpec::new(3, 2), ConvSpec::new(1, 1)] {
            let x = rand_grid([1, 4, 4, 4], &mut rng);
            let w = rand_vec(spec.taps(), &mut rng);
            let b = rand_vec(1, &mut rng);
            let out_sp = spec.output_spatial(x.spatial());
            let probe = rand_grid([1, out_sp[0], out_sp[1], out_sp[2]], &mut rng);
            let loss = |x: &Grid4<f64>, w: &[f64], b: &[f64]| conv3d(x, w, b, 1, spec).unwrap().dot(&probe);
            let (dx, g) = conv3d_backward(&probe, &x, &w, spec, true).unwrap();
            let h = 1e-3;
            let nx = numeric_grad(x.data(), h, |v| loss(&Grid4::from_vec(x.shape(), v.to_vec()).unwrap(), &w, &b));
            let nw = numeric_grad(&w, h, |v| loss(&x, v, &b));
            let nb = numeric_grad(&b, h, |v| loss(&x, &w, v));
            assert!(max_rel_err(dx.unwrap().data(), &nx) < 1e-4);
            assert!(max_rel_err(&g.weight, &nw) < 1e-4);
            assert!(max_rel_err(&g.bias, &nb) < 1e-4);
        }
    }

    #[test]
    fn deconv_shapes_and_bias() {
        let x = Grid4::<f64>::zeros([2, 8, 8, 8]);
        let b = [0.5, -1.0, 2.0];
        let y = deconv3d(&x, &[0.3; 2 * 3 * 27], &b, 3, deconv_default_size(x.spatial())).unwrap();
        assert_eq!(y.shape(), [3, 16, 16, 16]);
        for c in 0..3 {
            assert!(y.channel(c).iter().all(|&v| v == b[c]));
        }
        // Odd targets are reachable as long as ceil(n/2) matches.
        assert!(deconv3d(&Grid4::<f64>::zeros([1, 2, 2, 2]), &[0.0; 27], &[0.0], 1, [3, 4, 3]).is_ok());
        assert!(deconv3d(&Grid4::<f64>::zeros([1, 2, 2, 2]), &[0.0; 27], &[0.0], 1, [5, 4, 4]).is_err());
    }

    #[test]
    fn deconv_is_adjoint_of_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (cin, cout, sp) in [(1, 1, [4, 4, 4]), (2, 3, [6, 5, 4]), (3, 2, [3, 3, 3])] {
            let spec = ConvSpec::new(3, 2);
            let x = rand_grid([cin, sp[0], sp[1], sp[2]], &mut rng);
            let w = rand_vec(cout * cin * 27, &mut rng);
            let out_sp = spec.output_spatial(sp);
            let y = rand_grid([cout, out_sp[0], out_sp[1], out_sp[2]], &mut rng);
            let lhs = conv3d(&x, &w, &vec![0.0; cout], cout, spec).unwrap().dot(&y);
            let rhs = x.dot(&deconv3d(&y, &w, &vec![0.0; cin], cin, sp).unwrap());
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn deconv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_grid([2, 2, 2, 2], &mut rng);
        let w = rand_vec(2 * 2 * 27, &mut rng);
        let b = rand_vec(2, &mut rng);
        let out = [4, 3, 4];
        let probe = rand_grid([2, 4, 3, 4], &mut rng);
        let loss = |x: &Grid4<f64>, w: &[f64], b: &[f64]| deconv3d(x, w, b, 2, out).unwrap().dot(&probe);
        let (dx, g) = deconv3d_backward(&probe, &x, &w, true).unwrap();
        let h = 1e-3;
        let nx = numeric_grad(x.data(), h, |v| loss(&Grid4::from_vec(x.shape(), v.to_vec()).unwrap(), &w, &b));
        let nw = numeric_grad(&w, h, |v| loss(&x, v, &b));
        let nb = numeric_grad(&b, h, |v| loss(&x, &w, v));
        assert!(max_rel_err(dx.unwrap().data(), &nx) < 1e-4);
        assert!(max_rel_err(&g.weight, &nw) < 1e-4);
        assert!(max_rel_err(&g.bias, &nb) < 1e-4);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Grid4::from_vec([1, 1, 1, 3], vec![-1.0f64, 2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!(sigmoid_scalar(f64::INFINITY) < 1.0);
        assert!(sigmoid_scalar(f32::INFINITY) < 1.0);
        assert!(sigmoid_scalar(f64::NEG_INFINITY) > 0.0);
        let up = Grid4::from_vec([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&up, &x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn activation_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Keep relu inputs away from the kink.
        let x = rand_grid([2, 4, 4, 4], &mut rng).map(|v| if v.abs() < 0.05 { 0.3 } else { 3.0 * v });
        let probe = rand_grid(x.shape(), &mut rng);
        let h = 1e-4;
        let nr = numeric_grad(x.data(), h, |v| relu(&Grid4::from_vec(x.shape(), v.to_vec()).unwrap()).dot(&probe));
        assert!(max_rel_err(relu_backward(&probe, &x).data(), &nr) < 1e-4);
        let ns = numeric_grad(x.data(), h, |v| sigmoid(&Grid4::from_vec(x.shape(), v.to_vec()).unwrap()).dot(&probe));
        assert!(max_rel_err(sigmoid_backward(&probe, &sigmoid(&x)).data(), &ns) < 1e-4);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_grid([2, 2, 3, 2], &mut rng);
        let b = rand_grid([1, 2, 3, 2], &mut rng);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), [3, 2, 3, 2]);
        let (a2, b2) = split_channels(&c, 2);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut p = vec![vec![1.0f64, -2.0, 0.5]];
        let g = vec![vec![3.0, -0.2, 0.0]];
        let mut st = AdamState::new([3]);
        adam_step(&mut p, &g, &mut st, cfg).unwrap();
        assert!((p[0][0] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((p[0][1] - (-2.0 + 0.01)).abs() < 1e-8);
        assert_eq!(p[0][2], 0.5);
    }

    #[test]
    fn adam_zero_grad_and_monotone() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut p = vec![vec![1.0f64]];
        let mut st = AdamState::new([1]);
        adam_step(&mut p, &[vec![0.0]], &mut st, cfg).unwrap();
        assert_eq!(p[0][0], 1.0);
        let mut st = AdamState::new([1]);
        let mut prev = p[0][0];
        for _ in 0..2 {
            adam_step(&mut p, &[vec![0.7]], &mut st, cfg).unwrap();
            assert!(p[0][0] < prev);
            prev = p[0][0];
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![vec![1.0f64]];
        let mut st = AdamState::new([1]);
        let e = adam_step(&mut p, &[vec![f64::NAN]], &mut st, AdamConfig::default());
        assert!(matches!(e, Err(Error::NonFinite(_))));
        assert_eq!(p[0][0], 1.0);
        assert_eq!(st.t, 0);
    }
}
