//! Step encoder: token projection, sinusoidal positions, post-norm encoder
//! layers, masked attention pooling and a two-layer head, with explicit
//! reverse-mode gradients.
//!
//! Work is done on a packed batch: the valid tokens of every step in the
//! batch are stacked row-wise so token-wise maps run as single matrix
//! products, and attention and pooling run per step segment. Padding
//! positions never enter the computation, which is equivalent to masking
//! them out of attention and pooling.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StepClassifierConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FEATURE_CHANNELS};

const LN_EPS: f64 = 1e-5;
const POSITION_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    /// out × in
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn init(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Linear {
            weight: Array2::from_shape_simple_fn((out, inp), || rng.random_range(-bound..bound)),
            bias: Array1::from_shape_simple_fn(out, || rng.random_range(-bound..bound)),
        }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.weight.nrows()));
        general_mat_mul(1.0, x, &self.weight.t(), 0.0, &mut y);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &dy.t(), x, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row *= *is;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let mut dx = dy * &self.gamma;
        let d = dx.ncols() as f64;
        for ((mut row, xh), &is) in dx
            .axis_iter_mut(Axis(0))
            .zip(cache.xhat.axis_iter(Axis(0)))
            .zip(&cache.inv_std)
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|g, &x| *g = is * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU and its derivative.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, dy)
}

fn gelu_forward(pre: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut act = Array2::zeros(pre.raw_dim());
    let mut grad = Array2::zeros(pre.raw_dim());
    Zip::from(&mut act)
        .and(&mut grad)
        .and(pre)
        .for_each(|a, g, &p| (*a, *g) = gelu_with_grad(p));
    (act, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderLayer {
    /// Packed query/key/value projection, 3d × d.
    pub in_proj: Linear,
    pub out_proj: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

struct LayerCache {
    input: Array2<f64>,
    qkv: Array2<f64>,
    /// Attention weights, segment-major then head.
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
    drop1: Option<Array2<f64>>,
    norm1: NormCache,
    h1: Array2<f64>,
    ff_act: Array2<f64>,
    ff_grad: Array2<f64>,
    drop2: Option<Array2<f64>>,
    norm2: NormCache,
}

impl EncoderLayer {
    fn init(d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayer {
            in_proj: Linear::init(3 * d, d, rng),
            out_proj: Linear::init(d, d, rng),
            norm1: LayerNorm::new(d),
            ff1: Linear::init(ff, d, rng),
            ff2: Linear::init(d, ff, rng),
            norm2: LayerNorm::new(d),
        }
    }

    fn zeros(d: usize, ff: usize) -> Self {
        EncoderLayer {
            in_proj: Linear::zeros(3 * d, d),
            out_proj: Linear::zeros(d, d),
            norm1: LayerNorm::zeros(d),
            ff1: Linear::zeros(ff, d),
            ff2: Linear::zeros(d, ff),
            norm2: LayerNorm::zeros(d),
        }
    }

    fn forward(
        &self,
        h: Array2<f64>,
        segments: &[(usize, usize)],
        n_heads: usize,
        dropout: &mut Option<Dropout<'_>>,
    ) -> (Array2<f64>, LayerCache) {
        let d = h.ncols();
        let dk = d / n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let qkv = self.in_proj.forward(&h.view());

        let mut concat = Array2::zeros(h.raw_dim());
        let mut attn = Vec::with_capacity(segments.len() * n_heads);
        for &(r0, r1) in segments {
            for head in 0..n_heads {
                let c = head * dk;
                let q = qkv.slice(s![r0..r1, c..c + dk]);
                let k = qkv.slice(s![r0..r1, d + c..d + c + dk]);
                let v = qkv.slice(s![r0..r1, 2 * d + c..2 * d + c + dk]);
                let mut a = q.dot(&k.t());
                a *= scale;
                softmax_rows(&mut a);
                concat
                    .slice_mut(s![r0..r1, c..c + dk])
                    .assign(&a.dot(&v));
                attn.push(a);
            }
        }

        let mut att_out = self.out_proj.forward(&concat.view());
        let drop1 = dropout.as_mut().map(|d| d.mask(att_out.raw_dim()));
        if let Some(m) = &drop1 {
            att_out *= m;
        }
        let (h1, norm1) = self.norm1.forward(&(&h + &att_out));

        let pre = self.ff1.forward(&h1.view());
        let (ff_act, ff_grad) = gelu_forward(&pre);
        drop(pre);
        let mut ff_out = self.ff2.forward(&ff_act.view());
        let drop2 = dropout.as_mut().map(|d| d.mask(ff_out.raw_dim()));
        if let Some(m) = &drop2 {
            ff_out *= m;
        }
        let (h2, norm2) = self.norm2.forward(&(&h1 + &ff_out));

        let cache = LayerCache {
            input: h,
            qkv,
            attn,
            concat,
            drop1,
            norm1,
            h1,
            ff_act,
            ff_grad,
            drop2,
            norm2,
        };
        (h2, cache)
    }

    fn backward(
        &self,
        cache: &LayerCache,
        dh2: &Array2<f64>,
        segments: &[(usize, usize)],
        n_heads: usize,
        grad: &mut EncoderLayer,
    ) -> Array2<f64> {
        let d = dh2.ncols();
        let dk = d / n_heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let dr2 = self.norm2.backward(&cache.norm2, dh2, &mut grad.norm2);
        let mut dff_out = dr2.clone();
        if let Some(m) = &cache.drop2 {
            dff_out *= m;
        }
        let mut dact = self.ff2.backward(&cache.ff_act.view(), &dff_out, &mut grad.ff2);
        dact *= &cache.ff_grad;
        let mut dh1 = dr2;
        dh1 += &self.ff1.backward(&cache.h1.view(), &dact, &mut grad.ff1);

        let dr1 = self.norm1.backward(&cache.norm1, &dh1, &mut grad.norm1);
        let mut datt = dr1.clone();
        if let Some(m) = &cache.drop1 {
            datt *= m;
        }
        let dconcat = self
            .out_proj
            .backward(&cache.concat.view(), &datt, &mut grad.out_proj);

        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        let mut attn = cache.attn.iter();
        for &(r0, r1) in segments {
            for head in 0..n_heads {
                let a = attn.next().expect("attention cache per segment and head");
                let c = head * dk;
                let q = cache.qkv.slice(s![r0..r1, c..c + dk]);
                let k = cache.qkv.slice(s![r0..r1, d + c..d + c + dk]);
                let v = cache.qkv.slice(s![r0..r1, 2 * d + c..2 * d + c + dk]);
                let d_o = dconcat.slice(s![r0..r1, c..c + dk]);

                let da = d_o.dot(&v.t());
                let dv = a.t().dot(&d_o);
                // softmax backward, row-wise
                let mut ds = &da * a;
                let row_dot = ds.sum_axis(Axis(1));
                ds -= &(a * &row_dot.insert_axis(Axis(1)));
                ds *= scale;
                let dq = ds.dot(&k);
                let dkk = ds.t().dot(&q);

                dqkv.slice_mut(s![r0..r1, c..c + dk]).assign(&dq);
                dqkv.slice_mut(s![r0..r1, d + c..d + c + dk]).assign(&dkk);
                dqkv.slice_mut(s![r0..r1, 2 * d + c..2 * d + c + dk]).assign(&dv);
            }
        }
        let mut dinput = dr1;
        dinput += &self
            .in_proj
            .backward(&cache.input.view(), &dqkv, &mut grad.in_proj);
        dinput
    }
}

fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Inverted-dropout mask generator.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, dim: ndarray::Ix2) -> Array2<f64> {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let rng = &mut *self.rng;
        Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < keep { scale } else { 0.0 })
    }
}

/// Valid tokens of several steps stacked row-wise.
pub(crate) struct PackedSteps {
    x: Array2<f64>,
    positions: Vec<usize>,
    segments: Vec<(usize, usize)>,
}

impl PackedSteps {
    pub fn new<'a>(
        matrices: impl IntoIterator<Item = &'a FeatureMatrix>,
        width: usize,
    ) -> Result<Self> {
        let mut rows: Vec<f64> = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        for fm in matrices {
            if fm.width() != width {
                return Err(Error::validation(format!(
                    "feature matrix width {} does not match model width {width}",
                    fm.width()
                )));
            }
            let start = positions.len();
            for (pos, col) in fm.valid_columns() {
                rows.extend_from_slice(col);
                positions.push(pos);
            }
            if positions.len() == start {
                return Err(Error::validation("feature matrix has no valid tokens"));
            }
            segments.push((start, positions.len()));
        }
        let x = Array2::from_shape_vec((positions.len(), FEATURE_CHANNELS), rows)
            .expect("row-major token features");
        Ok(PackedSteps {
            x,
            positions,
            segments,
        })
    }
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    encoded: Array2<f64>,
    pool_weights: Vec<Array1<f64>>,
    pooled: Array2<f64>,
    head_act: Array2<f64>,
    head_grad: Array2<f64>,
}

/// All learnable tensors of the step encoder. The same type doubles as the
/// gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Network {
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
    pub pool_query: Array1<f64>,
    pub head1: Linear,
    pub head2: Linear,
    positional: Array2<f64>,
    n_heads: usize,
}

impl Network {
    pub fn init(cfg: &StepClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let input = Linear::init(d, FEATURE_CHANNELS, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| EncoderLayer::init(d, cfg.ff_dim, &mut rng))
            .collect();
        let bound = 1.0 / (d as f64).sqrt();
        let pool_query = Array1::from_shape_simple_fn(d, || rng.random_range(-bound..bound));
        let head1 = Linear::init(cfg.head_hidden, d, &mut rng);
        let head2 = Linear::init(1, cfg.head_hidden, &mut rng);
        Network {
            input,
            layers,
            pool_query,
            head1,
            head2,
            positional: sinusoidal_table(cfg.max_tokens, d),
            n_heads: cfg.n_heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.pool_query.len();
        let ff = self.layers.first().map_or(0, |l| l.ff1.weight.nrows());
        Network {
            input: Linear::zeros(d, FEATURE_CHANNELS),
            layers: (0..self.layers.len()).map(|_| EncoderLayer::zeros(d, ff)).collect(),
            pool_query: Array1::zeros(d),
            head1: Linear::zeros(self.head1.weight.nrows(), d),
            head2: Linear::zeros(1, self.head2.weight.ncols()),
            positional: self.positional.clone(),
            n_heads: self.n_heads,
        }
    }

    /// Step logits for every segment of the batch.
    pub fn forward(
        &self,
        batch: &PackedSteps,
        mut dropout: Option<Dropout<'_>>,
    ) -> (Vec<f64>, ForwardCache) {
        let mut h = self.input.forward(&batch.x.view());
        for (mut row, &p) in h.axis_iter_mut(Axis(0)).zip(&batch.positions) {
            row += &self.positional.row(p);
        }

        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(h, &batch.segments, self.n_heads, &mut dropout);
            h = out;
            layers.push(cache);
        }

        let d = h.ncols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut pooled = Array2::zeros((batch.segments.len(), d));
        let mut pool_weights = Vec::with_capacity(batch.segments.len());
        for (b, &(r0, r1)) in batch.segments.iter().enumerate() {
            let seg = h.slice(s![r0..r1, ..]);
            let mut w = seg.dot(&self.pool_query) * scale;
            let m = w.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            w.mapv_inplace(|v| (v - m).exp());
            let z = w.sum();
            w /= z;
            pooled.row_mut(b).assign(&w.dot(&seg));
            pool_weights.push(w);
        }

        let pre = self.head1.forward(&pooled.view());
        let (head_act, head_grad) = gelu_forward(&pre);
        let logits = self.head2.forward(&head_act.view());
        let logits = logits.column(0).to_vec();

        let cache = ForwardCache {
            layers,
            encoded: h,
            pool_weights,
            pooled,
            head_act,
            head_grad,
        };
        (logits, cache)
    }

    /// Accumulates dL/dθ into `grad` given dL/dℓ for every segment.
    pub fn backward(
        &self,
        batch: &PackedSteps,
        cache: &ForwardCache,
        dlogits: &[f64],
        grad: &mut Network,
    ) {
        let dl = Array2::from_shape_vec((dlogits.len(), 1), dlogits.to_vec())
            .expect("one logit per segment");
        let mut dact = self.head2.backward(&cache.head_act.view(), &dl, &mut grad.head2);
        dact *= &cache.head_grad;
        let dpooled = self
            .head1
            .backward(&cache.pooled.view(), &dact, &mut grad.head1);

        let d = cache.encoded.ncols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut dh = Array2::zeros(cache.encoded.raw_dim());
        for (b, &(r0, r1)) in batch.segments.iter().enumerate() {
            let seg = cache.encoded.slice(s![r0..r1, ..]);
            let w = &cache.pool_weights[b];
            let dz = dpooled.row(b);
            // z = Σ w_i h_i
            let dw = seg.dot(&dz);
            let mean = w.dot(&dw);
            let ds = w * &(&dw - mean) * scale;
            grad.pool_query += &ds.dot(&seg);
            let mut dseg = dh.slice_mut(s![r0..r1, ..]);
            for ((mut row, &wi), &dsi) in dseg.axis_iter_mut(Axis(0)).zip(w).zip(&ds) {
                row.scaled_add(wi, &dz);
                row.scaled_add(dsi, &self.pool_query);
            }
        }

        for (layer, (lcache, lgrad)) in self
            .layers
            .iter()
            .zip(cache.layers.iter().zip(grad.layers.iter_mut()))
            .rev()
        {
            dh = layer.backward(lcache, &dh, &batch.segments, self.n_heads, lgrad);
        }

        self.input.backward(&batch.x.view(), &dh, &mut grad.input);
    }

    /// Named flat views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        push_linear(&mut out, "input", &self.input);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            push_linear(&mut out, &format!("{p}.in_proj"), &l.in_proj);
            push_linear(&mut out, &format!("{p}.out_proj"), &l.out_proj);
            push_norm(&mut out, &format!("{p}.norm1"), &l.norm1);
            push_linear(&mut out, &format!("{p}.ff1"), &l.ff1);
            push_linear(&mut out, &format!("{p}.ff2"), &l.ff2);
            push_norm(&mut out, &format!("{p}.norm2"), &l.norm2);
        }
        out.push((
            "pool.query".into(),
            vec![self.pool_query.len()],
            self.pool_query.as_slice().expect("contiguous"),
        ));
        push_linear(&mut out, "head1", &self.head1);
        push_linear(&mut out, "head2", &self.head2);
        out
    }

    /// Mutable flat views in the same order as [`Network::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn lin<'a>(out: &mut Vec<&'a mut [f64]>, l: &'a mut Linear) {
            out.push(l.weight.as_slice_mut().expect("contiguous"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
        }
        fn norm<'a>(out: &mut Vec<&'a mut [f64]>, l: &'a mut LayerNorm) {
            out.push(l.gamma.as_slice_mut().expect("contiguous"));
            out.push(l.beta.as_slice_mut().expect("contiguous"));
        }
        lin(&mut out, &mut self.input);
        for l in &mut self.layers {
            lin(&mut out, &mut l.in_proj);
            lin(&mut out, &mut l.out_proj);
            norm(&mut out, &mut l.norm1);
            lin(&mut out, &mut l.ff1);
            lin(&mut out, &mut l.ff2);
            norm(&mut out, &mut l.norm2);
        }
        out.push(self.pool_query.as_slice_mut().expect("contiguous"));
        lin(&mut out, &mut self.head1);
        lin(&mut out, &mut self.head2);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

fn push_linear<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: &str, l: &'a Linear) {
    out.push((
        format!("{name}.weight"),
        l.weight.shape().to_vec(),
        l.weight.as_slice().expect("contiguous"),
    ));
    out.push((
        format!("{name}.bias"),
        l.bias.shape().to_vec(),
        l.bias.as_slice().expect("contiguous"),
    ));
}

fn push_norm<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: &str, l: &'a LayerNorm) {
    out.push((
        format!("{name}.gamma"),
        l.gamma.shape().to_vec(),
        l.gamma.as_slice().expect("contiguous"),
    ));
    out.push((
        format!("{name}.beta"),
        l.beta.shape().to_vec(),
        l.beta.as_slice().expect("contiguous"),
    ));
}

/// Fixed sin/cos table: even columns sin(p / base^(2i/d)), odd columns cos.
pub(crate) fn sinusoidal_table(positions: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((positions, d), |(p, j)| {
        let i = (j / 2) as f64;
        let angle = p as f64 / POSITION_BASE.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
