//! Small LeNet-style CNN with hand-written backpropagation and Adam.
//!
//! Layer stack: conv k x k (`conv1` maps) -> ReLU -> max-pool 2 -> conv k x k
//! (`conv2` maps) -> ReLU -> max-pool 2 -> FC `fc1` -> ReLU -> FC `fc2` ->
//! ReLU -> FC `n_classes`. Convolutions are valid (no padding), pooling
//! floors odd sizes. Parameters live in one flat vector in the order
//! conv1 w, conv1 b, conv2 w, conv2 b, fc1 w, fc1 b, fc2 w, fc2 b, fc3 w,
//! fc3 b, each weight tensor row-major `[out][in][ky][kx]` or `[out][in]`.
//!
//! The network is generic over the float type: training runs in `f32`,
//! gradient checks in `f64`. Minibatch gradients are computed over fixed
//! chunks of [`GRAD_CHUNK`] samples and summed in chunk order, so results do
//! not depend on the execution mode.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_h: usize,
    pub input_w: usize,
    pub kernel: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub n_classes: usize,
    /// Zero-mean, unit-variance scaling of each input before the first layer.
    pub standardize: bool,
}

impl ModelSpec {
    /// Classic LeNet-5 widths.
    pub fn lenet(input_h: usize, input_w: usize, n_classes: usize) -> Self {
        Self {
            input_h,
            input_w,
            kernel: 5,
            conv1: 6,
            conv2: 16,
            fc1: 120,
            fc2: 84,
            n_classes,
            standardize: true,
        }
    }

    /// [`ModelSpec::lenet`] with 3x3 kernels when 5x5 kernels leave no
    /// spatial extent, as for 13-pixel-wide digit cells.
    pub fn lenet_fit(input_h: usize, input_w: usize, n_classes: usize) -> Self {
        let spec = Self::lenet(input_h, input_w, n_classes);
        if spec.geometry().is_ok() {
            spec
        } else {
            Self { kernel: 3, ..spec }
        }
    }

    /// Double-width variant used for eye-chart letters.
    pub fn widened(input_h: usize, input_w: usize, n_classes: usize) -> Self {
        Self {
            conv1: 12,
            conv2: 32,
            ..Self::lenet(input_h, input_w, n_classes)
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_h * self.input_w
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let k = self.kernel;
        let zero = [
            self.input_h,
            self.input_w,
            k,
            self.conv1,
            self.conv2,
            self.fc1,
            self.fc2,
            self.n_classes,
        ]
        .contains(&0);
        let shrink = |v: usize| v.checked_sub(k.saturating_sub(1)).filter(|&x| x > 0);
        let dims = (|| {
            if zero {
                return None;
            }
            let o1h = shrink(self.input_h)?;
            let o1w = shrink(self.input_w)?;
            let (p1h, p1w) = (o1h / 2, o1w / 2);
            let o2h = shrink(p1h)?;
            let o2w = shrink(p1w)?;
            let (p2h, p2w) = (o2h / 2, o2w / 2);
            (p2h > 0 && p2w > 0).then_some([o1h, o1w, p1h, p1w, o2h, o2w, p2h, p2w])
        })();
        let Some([o1h, o1w, p1h, p1w, o2h, o2w, p2h, p2w]) = dims else {
            return Err(Error::InvalidParameter(format!(
                "layer stack collapses to zero size for {self:?}"
            )));
        };
        Ok(Geometry {
            h: self.input_h,
            w: self.input_w,
            k,
            c1: self.conv1,
            c2: self.conv2,
            o1h,
            o1w,
            p1h,
            p1w,
            o2h,
            o2w,
            p2h,
            p2w,
            flat: self.conv2 * p2h * p2w,
            f1: self.fc1,
            f2: self.fc2,
            n: self.n_classes,
            standardize: self.standardize,
        })
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.geometry()?.layout().total)
    }

    fn to_words(self) -> [u32; 9] {
        [
            self.input_h as u32,
            self.input_w as u32,
            self.kernel as u32,
            self.conv1 as u32,
            self.conv2 as u32,
            self.fc1 as u32,
            self.fc2 as u32,
            self.n_classes as u32,
            u32::from(self.standardize),
        ]
    }

    fn from_words(w: &[u32]) -> Result<Self> {
        if w.len() != 9 || w[8] > 1 {
            return Err(Error::format("weight file", "bad layer-spec block"));
        }
        Ok(Self {
            input_h: w[0] as usize,
            input_w: w[1] as usize,
            kernel: w[2] as usize,
            conv1: w[3] as usize,
            conv2: w[4] as usize,
            fc1: w[5] as usize,
            fc2: w[6] as usize,
            n_classes: w[7] as usize,
            standardize: w[8] == 1,
        })
    }
}

/// Resolved layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub c1: usize,
    pub c2: usize,
    pub o1h: usize,
    pub o1w: usize,
    pub p1h: usize,
    pub p1w: usize,
    pub o2h: usize,
    pub o2w: usize,
    pub p2h: usize,
    pub p2w: usize,
    pub flat: usize,
    pub f1: usize,
    pub f2: usize,
    pub n: usize,
    pub standardize: bool,
}

/// Start offsets of each parameter block.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub c1w: usize,
    pub c1b: usize,
    pub c2w: usize,
    pub c2b: usize,
    pub f1w: usize,
    pub f1b: usize,
    pub f2w: usize,
    pub f2b: usize,
    pub f3w: usize,
    pub f3b: usize,
    pub total: usize,
}

impl Geometry {
    pub fn layout(&self) -> Layout {
        let kk = self.k * self.k;
        let c1w = 0;
        let c1b = c1w + self.c1 * kk;
        let c2w = c1b + self.c1;
        let c2b = c2w + self.c2 * self.c1 * kk;
        let f1w = c2b + self.c2;
        let f1b = f1w + self.f1 * self.flat;
        let f2w = f1b + self.f1;
        let f2b = f2w + self.f2 * self.f1;
        let f3w = f2b + self.f2;
        let f3b = f3w + self.n * self.f2;
        Layout {
            c1w,
            c1b,
            c2w,
            c2b,
            f1w,
            f1b,
            f2w,
            f2b,
            f3w,
            f3b,
            total: f3b + self.n,
        }
    }

    /// `(weight start, bias start, bias end, fan-in)` per layer.
    fn blocks(&self) -> [(usize, usize, usize, usize); 5] {
        let l = self.layout();
        let kk = self.k * self.k;
        [
            (l.c1w, l.c1b, l.c2w, kk),
            (l.c2w, l.c2b, l.f1w, self.c1 * kk),
            (l.f1w, l.f1b, l.f2w, self.flat),
            (l.f2w, l.f2b, l.f3w, self.f1),
            (l.f3w, l.f3b, l.total, self.f2),
        ]
    }
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone)]
struct Acts<T> {
    x: Vec<T>,
    a1: Vec<T>,
    p1: Vec<T>,
    i1: Vec<u32>,
    a2: Vec<T>,
    p2: Vec<T>,
    i2: Vec<u32>,
    h1: Vec<T>,
    h2: Vec<T>,
    z: Vec<T>,
}

impl<T: Float> Acts<T> {
    fn new(g: &Geometry) -> Self {
        let z = T::zero();
        Self {
            x: vec![z; g.h * g.w],
            a1: vec![z; g.c1 * g.o1h * g.o1w],
            p1: vec![z; g.c1 * g.p1h * g.p1w],
            i1: vec![0; g.c1 * g.p1h * g.p1w],
            a2: vec![z; g.c2 * g.o2h * g.o2w],
            p2: vec![z; g.flat],
            i2: vec![0; g.flat],
            h1: vec![z; g.f1],
            h2: vec![z; g.f2],
            z: vec![z; g.n],
        }
    }
}

/// Backward scratch buffers.
#[derive(Debug, Clone)]
struct Grads<T> {
    dz: Vec<T>,
    dh2: Vec<T>,
    dh1: Vec<T>,
    dp2: Vec<T>,
    da2: Vec<T>,
    dp1: Vec<T>,
    da1: Vec<T>,
}

impl<T: Float> Grads<T> {
    fn new(g: &Geometry) -> Self {
        let z = T::zero();
        Self {
            dz: vec![z; g.n],
            dh2: vec![z; g.f2],
            dh1: vec![z; g.f1],
            dp2: vec![z; g.flat],
            da2: vec![z; g.c2 * g.o2h * g.o2w],
            dp1: vec![z; g.c1 * g.p1h * g.p1w],
            da1: vec![z; g.c1 * g.o1h * g.o1w],
        }
    }
}

fn relu<T: Float>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn standardize_into<T: Float>(src: &[f32], dst: &mut [T], enabled: bool) {
    if !enabled {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = T::from(*s).unwrap();
        }
        return;
    }
    let n = src.len() as f64;
    let mean = src.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = src.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-6);
    for (d, s) in dst.iter_mut().zip(src) {
        *d = T::from((f64::from(*s) - mean) * inv).unwrap();
    }
}

/// Valid convolution of `cin` input maps (`ih x iw`) into `cout` maps.
#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Float>(
    input: &[T],
    cin: usize,
    ih: usize,
    iw: usize,
    w: &[T],
    b: &[T],
    cout: usize,
    k: usize,
    out: &mut [T],
) {
    let (oh, ow) = (ih - k + 1, iw - k + 1);
    for c in 0..cout {
        let o = &mut out[c * oh * ow..(c + 1) * oh * ow];
        o.iter_mut().for_each(|v| *v = b[c]);
        for ic in 0..cin {
            let plane = &input[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((c * cin + ic) * k + ky) * k + kx];
                    for y in 0..oh {
                        let src = &plane[(y + ky) * iw + kx..(y + ky) * iw + kx + ow];
                        let dst = &mut o[y * ow..(y + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + wv * *s;
                        }
                    }
                }
            }
        }
    }
}

/// Weight/bias gradients of a valid convolution, and optionally the input
/// gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Float>(
    input: &[T],
    cin: usize,
    ih: usize,
    iw: usize,
    w: &[T],
    cout: usize,
    k: usize,
    dout: &[T],
    dw: &mut [T],
    db: &mut [T],
    mut din: Option<&mut [T]>,
) {
    let (oh, ow) = (ih - k + 1, iw - k + 1);
    if let Some(d) = din.as_deref_mut() {
        d.iter_mut().for_each(|v| *v = T::zero());
    }
    for c in 0..cout {
        let g = &dout[c * oh * ow..(c + 1) * oh * ow];
        db[c] = db[c] + g.iter().fold(T::zero(), |a, &v| a + v);
        for ic in 0..cin {
            let plane = &input[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let wi = ((c * cin + ic) * k + ky) * k + kx;
                    let mut acc = T::zero();
                    for y in 0..oh {
                        let src = &plane[(y + ky) * iw + kx..(y + ky) * iw + kx + ow];
                        let gr = &g[y * ow..(y + 1) * ow];
                        for (s, d) in src.iter().zip(gr) {
                            acc = acc + *s * *d;
                        }
                    }
                    dw[wi] = dw[wi] + acc;
                    if let Some(d) = din.as_deref_mut() {
                        let wv = w[wi];
                        let dplane = &mut d[ic * ih * iw..(ic + 1) * ih * iw];
                        for y in 0..oh {
                            let dst = &mut dplane[(y + ky) * iw + kx..(y + ky) * iw + kx + ow];
                            let gr = &g[y * ow..(y + 1) * ow];
                            for (s, d) in dst.iter_mut().zip(gr) {
                                *s = *s + wv * *d;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max-pool with floor sizing; records the winning input index.
fn pool_forward<T: Float>(input: &[T], c: usize, ih: usize, iw: usize, out: &mut [T], idx: &mut [u32]) {
    let (oh, ow) = (ih / 2, iw / 2);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = ch * ih * iw + 2 * y * iw + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ch * ih * iw + (2 * y + dy) * iw + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out[o] = input[best];
                idx[o] = best as u32;
            }
        }
    }
}

fn dense_forward<T: Float>(input: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let n_in = input.len();
    for (o, v) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *v = row
            .iter()
            .zip(input)
            .fold(b[o], |acc, (a, x)| acc + *a * *x);
    }
}

fn dense_backward<T: Float>(
    input: &[T],
    w: &[T],
    dout: &[T],
    dw: &mut [T],
    db: &mut [T],
    din: Option<&mut [T]>,
) {
    let n_in = input.len();
    for (o, &g) in dout.iter().enumerate() {
        db[o] = db[o] + g;
        let row = &mut dw[o * n_in..(o + 1) * n_in];
        for (d, x) in row.iter_mut().zip(input) {
            *d = *d + g * *x;
        }
    }
    if let Some(din) = din {
        din.iter_mut().for_each(|v| *v = T::zero());
        for (o, &g) in dout.iter().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            for (d, wv) in din.iter_mut().zip(row) {
                *d = *d + g * *wv;
            }
        }
    }
}

fn forward_sample<T: Float>(g: &Geometry, p: &[T], input: &[f32], a: &mut Acts<T>) {
    let l = g.layout();
    let kk = g.k * g.k;
    standardize_into(input, &mut a.x, g.standardize);
    conv_forward(
        &a.x,
        1,
        g.h,
        g.w,
        &p[l.c1w..l.c1w + g.c1 * kk],
        &p[l.c1b..l.c1b + g.c1],
        g.c1,
        g.k,
        &mut a.a1,
    );
    relu(&mut a.a1);
    pool_forward(&a.a1, g.c1, g.o1h, g.o1w, &mut a.p1, &mut a.i1);
    conv_forward(
        &a.p1,
        g.c1,
        g.p1h,
        g.p1w,
        &p[l.c2w..l.c2b],
        &p[l.c2b..l.f1w],
        g.c2,
        g.k,
        &mut a.a2,
    );
    relu(&mut a.a2);
    pool_forward(&a.a2, g.c2, g.o2h, g.o2w, &mut a.p2, &mut a.i2);
    dense_forward(&a.p2, &p[l.f1w..l.f1b], &p[l.f1b..l.f2w], &mut a.h1);
    relu(&mut a.h1);
    dense_forward(&a.h1, &p[l.f2w..l.f2b], &p[l.f2b..l.f3w], &mut a.h2);
    relu(&mut a.h2);
    dense_forward(&a.h2, &p[l.f3w..l.f3b], &p[l.f3b..l.total], &mut a.z);
}

/// Cross-entropy of the logits against `label`, and `softmax - onehot`
/// written to `dz`.
fn cross_entropy<T: Float>(z: &[T], label: usize, dz: &mut [T]) -> T {
    let m = z.iter().cloned().fold(T::neg_infinity(), T::max);
    let sum = z.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
    let lse = m + sum.ln();
    for (i, (d, &v)) in dz.iter_mut().zip(z).enumerate() {
        *d = (v - lse).exp();
        if i == label {
            *d = *d - T::one();
        }
    }
    lse - z[label]
}

fn backward_sample<T: Float>(g: &Geometry, p: &[T], a: &Acts<T>, s: &mut Grads<T>, grad: &mut [T]) {
    let l = g.layout();
    let kk = g.k * g.k;
    {
        let (pre, rest) = grad.split_at_mut(l.f3b);
        dense_backward(
            &a.h2,
            &p[l.f3w..l.f3b],
            &s.dz,
            &mut pre[l.f3w..],
            &mut rest[..g.n],
            Some(&mut s.dh2),
        );
    }
    for (d, &h) in s.dh2.iter_mut().zip(&a.h2) {
        if h <= T::zero() {
            *d = T::zero();
        }
    }
    {
        let (pre, rest) = grad.split_at_mut(l.f2b);
        dense_backward(
            &a.h1,
            &p[l.f2w..l.f2b],
            &s.dh2,
            &mut pre[l.f2w..],
            &mut rest[..g.f2],
            Some(&mut s.dh1),
        );
    }
    for (d, &h) in s.dh1.iter_mut().zip(&a.h1) {
        if h <= T::zero() {
            *d = T::zero();
        }
    }
    {
        let (pre, rest) = grad.split_at_mut(l.f1b);
        dense_backward(
            &a.p2,
            &p[l.f1w..l.f1b],
            &s.dh1,
            &mut pre[l.f1w..],
            &mut rest[..g.f1],
            Some(&mut s.dp2),
        );
    }
    s.da2.iter_mut().for_each(|v| *v = T::zero());
    for (o, &i) in a.i2.iter().enumerate() {
        let i = i as usize;
        if a.a2[i] > T::zero() {
            s.da2[i] = s.da2[i] + s.dp2[o];
        }
    }
    {
        let (pre, rest) = grad.split_at_mut(l.c2b);
        conv_backward(
            &a.p1,
            g.c1,
            g.p1h,
            g.p1w,
            &p[l.c2w..l.c2b],
            g.c2,
            g.k,
            &s.da2,
            &mut pre[l.c2w..],
            &mut rest[..g.c2],
            Some(&mut s.dp1),
        );
    }
    s.da1.iter_mut().for_each(|v| *v = T::zero());
    for (o, &i) in a.i1.iter().enumerate() {
        let i = i as usize;
        if a.a1[i] > T::zero() {
            s.da1[i] = s.da1[i] + s.dp1[o];
        }
    }
    let (pre, rest) = grad.split_at_mut(l.c1b);
    conv_backward(
        &a.x,
        1,
        g.h,
        g.w,
        &p[l.c1w..l.c1w + g.c1 * kk],
        g.c1,
        g.k,
        &s.da1,
        &mut pre[l.c1w..],
        &mut rest[..g.c1],
        None,
    );
}

/// Labeled inputs, `inputs.len() == labels.len() * h * w`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples {
    pub h: usize,
    pub w: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, input: &[f32], label: usize) -> Result<()> {
        if input.len() != self.h * self.w {
            return Err(Error::Dimension(format!(
                "sample of {} values for a {}x{} input",
                input.len(),
                self.h,
                self.w
            )));
        }
        self.inputs.extend_from_slice(input);
        self.labels.push(label);
        Ok(())
    }

    pub fn input(&self, i: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn extend(&mut self, other: &Samples) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Dimension("sample shapes differ".into()));
        }
        self.inputs.extend_from_slice(&other.inputs);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        let mut s = Samples::new(self.h, self.w);
        for &i in idx {
            s.inputs.extend_from_slice(self.input(i));
            s.labels.push(self.labels[i]);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<T = f32> {
    pub spec: ModelSpec,
    pub params: Vec<T>,
}

impl<T: Float + Send + Sync> CnnModel<T> {
    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let g = spec.geometry()?;
        let mut params = vec![T::zero(); g.layout().total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (w0, b0, _, fan_in) in g.blocks() {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut params[w0..b0] {
                *v = T::from(rng.random_range(-bound..bound)).unwrap();
            }
        }
        Ok(Self { spec, params })
    }

    pub fn geometry(&self) -> Geometry {
        self.spec.geometry().expect("validated at construction")
    }

    fn check_input(&self, input: &[f32]) -> Result<()> {
        if input.len() != self.spec.input_len() {
            return Err(Error::Dimension(format!(
                "input of {} values for a {}x{} model",
                input.len(),
                self.spec.input_h,
                self.spec.input_w
            )));
        }
        Ok(())
    }

    pub fn logits(&self, input: &[f32]) -> Result<Vec<T>> {
        self.check_input(input)?;
        let g = self.geometry();
        let mut a = Acts::new(&g);
        forward_sample(&g, &self.params, input, &mut a);
        Ok(a.z)
    }

    /// Logits for every sample of a flat batch.
    pub fn forward(&self, inputs: &[f32], exec: Exec) -> Result<Vec<Vec<T>>> {
        let n = self.spec.input_len();
        if inputs.len() % n != 0 {
            return Err(Error::Dimension(format!(
                "batch of {} values is not a multiple of {n}",
                inputs.len()
            )));
        }
        let items: Vec<&[f32]> = inputs.chunks(n).collect();
        exec.map(&items, |x| self.logits(x)).into_iter().collect()
    }

    /// Summed cross-entropy and its gradient over `idx`.
    pub fn loss_and_grad(&self, data: &Samples, idx: &[usize], exec: Exec) -> Result<(T, Vec<T>)> {
        let g = self.geometry();
        if (data.h, data.w) != (g.h, g.w) {
            return Err(Error::Dimension("sample shape differs from model".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| data.labels[i] >= g.n) {
            return Err(Error::InvalidParameter(format!(
                "label {} outside {} classes",
                data.labels[bad], g.n
            )));
        }
        let chunks: Vec<&[usize]> = idx.chunks(GRAD_CHUNK).collect();
        let parts = exec.map(&chunks, |chunk| {
            let mut grad = vec![T::zero(); self.params.len()];
            let mut a = Acts::new(&g);
            let mut s = Grads::new(&g);
            let mut loss = T::zero();
            for &i in chunk.iter() {
                forward_sample(&g, &self.params, data.input(i), &mut a);
                loss = loss + cross_entropy(&a.z, data.labels[i], &mut s.dz);
                backward_sample(&g, &self.params, &a, &mut s, &mut grad);
            }
            (loss, grad)
        });
        let mut total = vec![T::zero(); self.params.len()];
        let mut loss = T::zero();
        for (l, gpart) in parts {
            loss = loss + l;
            for (t, v) in total.iter_mut().zip(&gpart) {
                *t = *t + *v;
            }
        }
        Ok((loss, total))
    }

    pub fn loss(&self, data: &Samples, idx: &[usize]) -> Result<T> {
        let g = self.geometry();
        let mut a = Acts::new(&g);
        let mut dz = vec![T::zero(); g.n];
        let mut loss = T::zero();
        for &i in idx {
            forward_sample(&g, &self.params, data.input(i), &mut a);
            loss = loss + cross_entropy(&a.z, data.labels[i], &mut dz);
        }
        Ok(loss)
    }

    /// ReLU signs and pooling winners of every sample; the loss is smooth
    /// in the parameters wherever this pattern is constant.
    fn activation_pattern(&self, data: &Samples, idx: &[usize]) -> Vec<u32> {
        let g = self.geometry();
        let mut a = Acts::new(&g);
        let mut out = Vec::new();
        for &i in idx {
            forward_sample(&g, &self.params, data.input(i), &mut a);
            out.extend_from_slice(&a.i1);
            out.extend_from_slice(&a.i2);
            for v in a.a1.iter().chain(&a.a2).chain(&a.h1).chain(&a.h2) {
                out.push(u32::from(*v > T::zero()));
            }
        }
        out
    }

    /// Argmax label (lowest index on ties) and softmax probabilities.
    pub fn predict(&self, input: &[f32]) -> Result<(usize, Vec<T>)> {
        let z = self.logits(input)?;
        Ok((argmax(&z), softmax(&z)))
    }
}

pub fn softmax<T: Float>(z: &[T]) -> Vec<T> {
    let m = z.iter().cloned().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s = e.iter().fold(T::zero(), |a, &v| a + v);
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn argmax<T: Float>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 100,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.epochs >= 1
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = f64::from(grad[i]);
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] = (f64::from(params[i]) - cfg.learning_rate * mh / (vh.sqrt() + cfg.eps)) as f32;
        }
    }
}

/// Mean loss and accuracy over a sample set.
pub fn evaluate(model: &CnnModel<f32>, data: &Samples, exec: Exec) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let logits = model.forward(&data.inputs, exec)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut dz = vec![0.0f32; model.spec.n_classes];
    for (z, &y) in logits.iter().zip(&data.labels) {
        loss += f64::from(cross_entropy(z, y, &mut dz));
        correct += usize::from(argmax(z) == y);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Minibatch Adam on mean cross-entropy with a seeded shuffle per epoch.
/// Returns the checkpoint with the best validation accuracy (earliest epoch
/// on ties).
pub fn train(
    model: &CnnModel<f32>,
    train_set: &Samples,
    val_set: &Samples,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(CnnModel<f32>, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidParameter("training and validation sets must be non-empty".into()));
    }
    for s in [train_set, val_set] {
        if (s.h, s.w) != (model.spec.input_h, model.spec.input_w) {
            return Err(Error::Dimension("sample shape differs from model".into()));
        }
    }
    let mut current = model.clone();
    let mut best = model.clone();
    let mut adam = Adam::new(current.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        config: *cfg,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grad) = current.loss_and_grad(train_set, batch, exec)?;
            let loss = f64::from(loss);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss;
            let scale = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut current.params, &grad, cfg);
        }
        if current.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        let (_, train_accuracy) = evaluate(&current, train_set, exec)?;
        let (val_loss, val_accuracy) = evaluate(&current, val_set, exec)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
        if val_accuracy > history.best_val_accuracy {
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = epoch;
            best = current.clone();
        }
    }
    Ok((best, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub param_count: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Coordinates whose step was shrunk to stay clear of a kink.
    pub refined: usize,
}

const CHECK_STEP: f64 = 1e-4;
const MIN_CHECK_STEP: f64 = 1e-8;

/// Analytic versus central-difference gradient (`f64`) of the summed
/// cross-entropy of a random batch, on `coords` sampled parameters.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`. Biases are randomised
/// so that every block carries gradient. The step starts at `1e-4` and is
/// divided by ten while the two probes differ in activation pattern, so the
/// difference never straddles a ReLU or pooling kink.
pub fn grad_check(spec: ModelSpec, seed: u64, coords: usize) -> Result<GradCheckReport> {
    let mut model = CnnModel::<f64>::init(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let g = model.geometry();
    for (_, b0, b1, _) in g.blocks() {
        for v in &mut model.params[b0..b1] {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let mut data = Samples::new(spec.input_h, spec.input_w);
    for i in 0..3 {
        let x: Vec<f32> = (0..spec.input_len()).map(|_| rng.random::<f32>()).collect();
        data.push(&x, (i * 7 + 3) % spec.n_classes)?;
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (_, analytic) = model.loss_and_grad(&data, &idx, Exec::Sequential)?;
    let n = model.params.len();
    let mut picks: Vec<usize> = (0..n).collect();
    picks.shuffle(&mut rng);
    picks.truncate(coords.min(n));
    picks.sort_unstable();
    let mut report = GradCheckReport {
        param_count: n,
        coords_checked: picks.len(),
        max_rel_error: 0.0,
        worst_index: 0,
        refined: 0,
    };
    for &i in &picks {
        let orig = model.params[i];
        let mut h = CHECK_STEP;
        let numeric = loop {
            model.params[i] = orig + h;
            let up = model.loss(&data, &idx)?;
            let up_pattern = model.activation_pattern(&data, &idx);
            model.params[i] = orig - h;
            let down = model.loss(&data, &idx)?;
            let down_pattern = model.activation_pattern(&data, &idx);
            model.params[i] = orig;
            if up_pattern == down_pattern || h <= MIN_CHECK_STEP {
                break (up - down) / (2.0 * h);
            }
            h /= 10.0;
        };
        if h < CHECK_STEP {
            report.refined += 1;
        }
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

const MAGIC: &[u8; 4] = b"EMGL";
const FORMAT_VERSION: u32 = 1;

impl CnnModel<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let words = self.spec.to_words();
        out.extend_from_slice(&(words.len() as u32).to_le_bytes());
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("weight file", d.to_string());
        let u32_at = |pos: usize| -> Result<u32> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| bad("truncated header"))
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(bad("missing EMGL magic"));
        }
        let version = u32_at(4)?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n_words = u32_at(8)? as usize;
        let words: Vec<u32> = (0..n_words)
            .map(|i| u32_at(12 + 4 * i))
            .collect::<Result<_>>()?;
        let spec = ModelSpec::from_words(&words)?;
        let pos = 12 + 4 * n_words;
        let count = bytes
            .get(pos..pos + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad("truncated parameter count"))?;
        if count != spec.param_count()? {
            return Err(bad("parameter count disagrees with the layer spec"));
        }
        let body = &bytes[pos + 8..];
        if body.len() != count * 4 {
            return Err(bad("parameter block has the wrong length"));
        }
        let params: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(Self { spec, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
