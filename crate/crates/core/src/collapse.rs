//! Collapsing activation-free networks into single-layer equivalents.
//!
//! Without nonlinearities a stack of affine layers is itself affine, and a
//! stack of convolutions is a single (larger) convolution. The functions
//! here compute that single layer, check it against the original by random
//! probing, count parameters before and after, and prune near-zero taps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{compose_spatial, conv2d, Kernel, Matrix, Padding, Plane, Vector};

/// `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    w: Matrix,
    b: Vector,
}

impl AffineMap {
    pub fn new(w: Matrix, b: Vector) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(Error::dim(format!(
                "bias length {} does not match {} output rows",
                b.len(),
                w.rows()
            )));
        }
        Ok(Self { w, b })
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn bias(&self) -> &Vector {
        &self.b
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.w.mul_vec(x)?;
        y.iter_mut().zip(self.b.as_slice()).for_each(|(y, b)| *y += b);
        Ok(y)
    }
}

/// A fully connected network with no activation functions.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFcn {
    layers: Vec<AffineMap>,
}

impl LinearFcn {
    pub fn new(layers: Vec<AffineMap>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dim(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[AffineMap] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer-by-layer evaluation.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.apply(&h)?;
        }
        Ok(h)
    }
}

impl From<AffineMap> for LinearFcn {
    fn from(m: AffineMap) -> Self {
        LinearFcn { layers: vec![m] }
    }
}

/// An ordered list of convolution layers with no activations in between.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    layers: Vec<Kernel>,
}

impl ConvStack {
    pub fn new(layers: Vec<Kernel>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("convolution stack needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(Error::dim(format!(
                    "layer {i} produces {} channels but layer {} expects {}",
                    pair[0].out_channels(),
                    i + 1,
                    pair[1].in_channels()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Kernel] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels()
    }

    /// Receptive field `(height, width)` of the whole stack.
    pub fn receptive_field(&self) -> (usize, usize) {
        self.layers.iter().fold((1, 1), |(h, w), k| (h + k.kh() - 1, w + k.kw() - 1))
    }

    /// Apply every layer in turn, valid mode.
    pub fn forward(&self, input: &[Plane]) -> Result<Vec<Plane>> {
        let mut h = conv2d(input, &self.layers[0], Padding::Valid)?;
        for k in &self.layers[1..] {
            h = conv2d(&h, k, Padding::Valid)?;
        }
        Ok(h)
    }
}

/// Fold an activation-free FCN into one affine map:
/// `W = W_L ⋯ W_1`, `b = W_L(⋯(W_2 b_1 + b_2)⋯) + b_L`.
pub fn collapse_affine(net: &LinearFcn) -> Result<AffineMap> {
    let mut iter = net.layers.iter();
    let first = iter.next().expect("LinearFcn is non-empty");
    let (mut w, mut b) = (first.w.clone(), first.b.as_slice().to_vec());
    for layer in iter {
        w = layer.w.matmul(&w)?;
        b = layer.apply(&b)?;
    }
    AffineMap::new(w, Vector::new(b)?)
}

/// Left-fold [`compose_spatial`] over the stack.
pub fn collapse_conv(stack: &ConvStack) -> Result<Kernel> {
    let mut iter = stack.layers.iter();
    let first = iter.next().expect("ConvStack is non-empty").clone();
    iter.try_fold(first, |acc, k| compose_spatial(&acc, k))
}

/// Parameter and multiply-accumulate counts for a model.
///
/// One MAC is counted per weight per output sample; bias additions are
/// reported separately and are not MACs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub weights: usize,
    pub biases: usize,
    pub param_count: usize,
    pub macs_per_forward: usize,
    /// Rounded up when the forward pass does not divide evenly over outputs.
    pub mac_count_per_output_sample: usize,
    pub bias_adds_per_output_sample: usize,
    pub notes: String,
}

impl ComplexityReport {
    pub(crate) fn new(weights: usize, biases: usize, macs_per_forward: usize, outputs: usize, bias_adds: usize) -> Self {
        Self {
            weights,
            biases,
            param_count: weights + biases,
            macs_per_forward,
            mac_count_per_output_sample: macs_per_forward.div_ceil(outputs.max(1)),
            bias_adds_per_output_sample: bias_adds.div_ceil(outputs.max(1)),
            notes: String::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes = note.into();
        self
    }
}

pub trait ParamCount {
    fn complexity(&self) -> ComplexityReport;
}

pub fn count_params<M: ParamCount + ?Sized>(model: &M) -> ComplexityReport {
    model.complexity()
}

impl ParamCount for AffineMap {
    fn complexity(&self) -> ComplexityReport {
        let w = self.w.rows() * self.w.cols();
        ComplexityReport::new(w, self.b.len(), w, self.output_dim(), self.b.len())
    }
}

impl ParamCount for LinearFcn {
    fn complexity(&self) -> ComplexityReport {
        let weights: usize = self.layers.iter().map(|l| l.w.rows() * l.w.cols()).sum();
        let biases: usize = self.layers.iter().map(|l| l.b.len()).sum();
        ComplexityReport::new(weights, biases, weights, self.output_dim(), biases)
            .with_note(format!("{} affine layers", self.layers.len()))
    }
}

impl ParamCount for Kernel {
    fn complexity(&self) -> ComplexityReport {
        let biases = self.bias().map_or(0, <[f64]>::len);
        // Per output pixel: every tap fires once for every output channel.
        ComplexityReport::new(self.tap_count(), biases, self.tap_count(), self.out_channels(), biases)
            .with_note(format!("{}x{} support", self.kh(), self.kw()))
    }
}

impl ParamCount for ConvStack {
    fn complexity(&self) -> ComplexityReport {
        let weights: usize = self.layers.iter().map(Kernel::tap_count).sum();
        let biases: usize = self.layers.iter().map(|k| k.bias().map_or(0, <[f64]>::len)).sum();
        let (rh, rw) = self.receptive_field();
        ComplexityReport::new(weights, biases, weights, self.out_channels(), biases).with_note(format!(
            "{} layers, {rh}x{rw} receptive field",
            self.layers.len()
        ))
    }
}

/// Anything that maps a flat input vector to a flat output vector.
pub trait VectorModel {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl VectorModel for AffineMap {
    fn input_dim(&self) -> usize {
        AffineMap::input_dim(self)
    }
    fn output_dim(&self) -> usize {
        AffineMap::output_dim(self)
    }
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply(x)
    }
}

impl VectorModel for LinearFcn {
    fn input_dim(&self) -> usize {
        LinearFcn::input_dim(self)
    }
    fn output_dim(&self) -> usize {
        LinearFcn::output_dim(self)
    }
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x)
    }
}

/// Convolutional model evaluated in valid mode on planes of a fixed size,
/// seen as a flat vector model. Only single-input-channel models.
pub trait ConvModel {
    fn receptive_field(&self) -> (usize, usize);
    fn out_channels(&self) -> usize;
    fn run(&self, input: &Plane) -> Result<Vec<Plane>>;
}

impl ConvModel for Kernel {
    fn receptive_field(&self) -> (usize, usize) {
        (self.kh(), self.kw())
    }
    fn out_channels(&self) -> usize {
        Kernel::out_channels(self)
    }
    fn run(&self, input: &Plane) -> Result<Vec<Plane>> {
        conv2d(std::slice::from_ref(input), self, Padding::Valid)
    }
}

impl ConvModel for ConvStack {
    fn receptive_field(&self) -> (usize, usize) {
        ConvStack::receptive_field(self)
    }
    fn out_channels(&self) -> usize {
        ConvStack::out_channels(self)
    }
    fn run(&self, input: &Plane) -> Result<Vec<Plane>> {
        self.forward(std::slice::from_ref(input))
    }
}

/// Adapts a [`ConvModel`] to [`VectorModel`] on `width x height` inputs.
pub struct OnPlane<'a, M: ?Sized> {
    pub model: &'a M,
    pub width: usize,
    pub height: usize,
}

impl<M: ConvModel + ?Sized> VectorModel for OnPlane<'_, M> {
    fn input_dim(&self) -> usize {
        self.width * self.height
    }
    fn output_dim(&self) -> usize {
        let (rh, rw) = self.model.receptive_field();
        self.model.out_channels()
            * (self.width + 1).saturating_sub(rw)
            * (self.height + 1).saturating_sub(rh)
    }
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let plane = Plane::new(self.width, self.height, 8, x.to_vec())?;
        Ok(self.model.run(&plane)?.into_iter().flat_map(Plane::into_samples).collect())
    }
}

/// Outcome of comparing two models on random inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_abs_error: f64,
    /// `max |a - b| / (1 + |a|)`, `a` being the original model's output.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const DEFAULT_VERIFY_SEED: u64 = 0x5eed_c011_a95e;

/// Probe both models with `n_trials` inputs drawn uniformly from `[0, 255]`.
pub fn verify_equivalence<A, B>(original: &A, collapsed: &B, n_trials: usize, tol: f64) -> Result<EquivalenceReport>
where
    A: VectorModel + ?Sized,
    B: VectorModel + ?Sized,
{
    verify_equivalence_seeded(original, collapsed, n_trials, tol, DEFAULT_VERIFY_SEED)
}

pub fn verify_equivalence_seeded<A, B>(
    original: &A,
    collapsed: &B,
    n_trials: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivalenceReport>
where
    A: VectorModel + ?Sized,
    B: VectorModel + ?Sized,
{
    if original.input_dim() != collapsed.input_dim() || original.output_dim() != collapsed.output_dim() {
        return Err(Error::dim(format!(
            "models differ in shape: {}->{} vs {}->{}",
            original.input_dim(),
            original.output_dim(),
            collapsed.input_dim(),
            collapsed.output_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; original.input_dim()];
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for _ in 0..n_trials {
        x.iter_mut().for_each(|v| *v = rng.gen_range(0.0..=255.0));
        let a = original.evaluate(&x)?;
        let b = collapsed.evaluate(&x)?;
        for (a, b) in a.iter().zip(&b) {
            let d = (a - b).abs();
            max_abs = max_abs.max(d);
            max_rel = max_rel.max(d / (1.0 + a.abs()));
        }
    }
    Ok(EquivalenceReport {
        trials: n_trials,
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        tolerance: tol,
        pass: max_rel <= tol,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PruneStrategy {
    /// Zero every tap with `|tap| < t`.
    Threshold(f64),
    /// Round every tap to the nearest multiple of `step`.
    Quantize(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    /// Taps that were nonzero before and are zero after.
    pub removed: usize,
    pub remaining: usize,
    /// Largest absolute output difference on the probe plane.
    pub max_deviation: f64,
}

/// Prune or quantize taps; output deviation is measured by filtering `probe`
/// (replicated to every input channel) with both kernels.
pub fn prune_taps(k: &Kernel, strategy: PruneStrategy, probe: &Plane) -> Result<(Kernel, PruneReport)> {
    let taps: Vec<f64> = match strategy {
        PruneStrategy::Threshold(t) => {
            if !(t >= 0.0) {
                return Err(Error::Param(format!("threshold must be >= 0, got {t}")));
            }
            k.taps().iter().map(|&v| if v.abs() < t { 0.0 } else { v }).collect()
        }
        PruneStrategy::Quantize(step) => {
            if !(step > 0.0) || !step.is_finite() {
                return Err(Error::Param(format!("quantization step must be > 0, got {step}")));
            }
            k.taps()
                .iter()
                .map(|&v| {
                    let q = (v / step).round() * step;
                    // -0.0 counts as removed too
                    if q == 0.0 {
                        0.0
                    } else {
                        q
                    }
                })
                .collect()
        }
    };
    let removed = k.taps().iter().zip(&taps).filter(|(a, b)| **a != 0.0 && **b == 0.0).count();
    let remaining = taps.iter().filter(|v| **v != 0.0).count();
    let pruned = Kernel::new(
        k.out_channels(),
        k.in_channels(),
        k.kh(),
        k.kw(),
        taps,
        k.bias().map(<[f64]>::to_vec),
    )?;
    let input = vec![probe.clone(); k.in_channels()];
    let before = conv2d(&input, k, Padding::Valid)?;
    let after = conv2d(&input, &pruned, Padding::Valid)?;
    let max_deviation = before
        .iter()
        .zip(&after)
        .flat_map(|(a, b)| a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok((
        pruned,
        PruneReport {
            removed,
            remaining,
            max_deviation,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(w: Matrix, b: Vec<f64>) -> AffineMap {
        AffineMap::new(w, Vector::new(b).unwrap()).unwrap()
    }

    fn scaled_identity(n: usize, s: f64) -> Matrix {
        Matrix::from_fn(n, n, |r, c| if r == c { s } else { 0.0 })
    }

    fn random_fcn(rng: &mut ChaCha8Rng, dims: &[usize]) -> LinearFcn {
        let layers = dims
            .windows(2)
            .map(|d| {
                let scale = (3.0 / d[0] as f64).sqrt();
                let w = Matrix::from_fn(d[1], d[0], |_, _| rng.gen_range(-scale..scale));
                affine(w, (0..d[1]).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect();
        LinearFcn::new(layers).unwrap()
    }

    #[test]
    fn single_layer_collapses_to_itself() {
        let m = affine(Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), vec![0.5, -0.5]);
        let net = LinearFcn::from(m.clone());
        assert_eq!(collapse_affine(&net).unwrap(), m);
    }

    #[test]
    fn two_layer_scalar_composition() {
        let net = LinearFcn::new(vec![
            affine(scaled_identity(2, 2.0), vec![0.0, 0.0]),
            affine(scaled_identity(2, 3.0), vec![1.0, 1.0]),
        ])
        .unwrap();
        let m = collapse_affine(&net).unwrap();
        assert_eq!(m.weights(), &scaled_identity(2, 6.0));
        assert_eq!(m.bias().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn broken_chain_is_rejected() {
        let err = LinearFcn::new(vec![
            affine(Matrix::zeros(3, 2), vec![0.0; 3]),
            affine(Matrix::zeros(2, 4), vec![0.0; 2]),
        ]);
        assert!(matches!(err, Err(Error::Dimension(_))));
        assert!(AffineMap::new(Matrix::zeros(3, 2), Vector::zeros(2)).is_err());
    }

    #[test]
    fn four_layer_intra_shape_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = random_fcn(&mut rng, &[144, 96, 96, 96, 256]);
        let m = collapse_affine(&net).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..144).map(|_| rng.gen_range(0.0..255.0)).collect();
            let seq = net.forward(&x).unwrap();
            let col = m.apply(&x).unwrap();
            for (s, c) in seq.iter().zip(&col) {
                assert!((s - c).abs() <= 1e-9 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn collapse_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = random_fcn(&mut rng, &[8, 6, 4]);
        let once = collapse_affine(&net).unwrap();
        assert_eq!(collapse_affine(&LinearFcn::from(once.clone())).unwrap(), once);

        let k = Kernel::new(1, 1, 3, 3, (0..9).map(f64::from).collect(), Some(vec![1.0])).unwrap();
        let stack = ConvStack::new(vec![k.clone()]).unwrap();
        assert_eq!(collapse_conv(&stack).unwrap(), k);
    }

    fn srcnn_shape(rng: &mut ChaCha8Rng) -> ConvStack {
        let mut layer = |o: usize, i: usize, k: usize| {
            let s = (3.0 / (i * k * k) as f64).sqrt();
            Kernel::new(
                o,
                i,
                k,
                k,
                (0..o * i * k * k).map(|_| rng.gen_range(-s..s)).collect(),
                Some((0..o).map(|_| rng.gen_range(-0.1..0.1)).collect()),
            )
            .unwrap()
        };
        ConvStack::new(vec![layer(64, 1, 9), layer(32, 64, 1), layer(1, 32, 5)]).unwrap()
    }

    #[test]
    fn srcnn_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let stack = srcnn_shape(&mut rng);
        let before = count_params(&stack);
        assert_eq!(before.param_count, 8129);
        assert_eq!(before.mac_count_per_output_sample, 8032);
        let fused = collapse_conv(&stack).unwrap();
        assert_eq!((fused.kh(), fused.kw()), (13, 13));
        assert_eq!(count_params(&fused.without_bias()).param_count, 169);
        assert_eq!(count_params(&fused).param_count, 170);
    }

    #[test]
    fn affine_count() {
        let m = affine(Matrix::zeros(16, 80), vec![0.0; 16]);
        assert_eq!(count_params(&m).param_count, 1296);
    }

    #[test]
    fn verify_self_passes_and_perturbed_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = random_fcn(&mut rng, &[10, 7, 7, 5]);
        let same = verify_equivalence(&net, &net, 20, 1e-9).unwrap();
        assert!(same.pass);
        assert_eq!(same.max_abs_error, 0.0);

        let collapsed = collapse_affine(&net).unwrap();
        assert!(verify_equivalence(&net, &collapsed, 50, 1e-9).unwrap().pass);

        let mut w = collapsed.weights().values().to_vec();
        w[3] += 1e-3;
        let perturbed = affine(Matrix::new(5, 10, w).unwrap(), collapsed.bias().as_slice().to_vec());
        assert!(!verify_equivalence(&net, &perturbed, 50, 1e-9).unwrap().pass);
    }

    #[test]
    fn verify_shape_mismatch() {
        let a = affine(Matrix::zeros(2, 3), vec![0.0; 2]);
        let b = affine(Matrix::zeros(2, 4), vec![0.0; 2]);
        assert!(matches!(verify_equivalence(&a, &b, 1, 1e-9), Err(Error::Dimension(_))));
    }

    #[test]
    fn verify_conv_stack_against_fused_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let stack = srcnn_shape(&mut rng);
        let fused = collapse_conv(&stack).unwrap();
        let a = OnPlane { model: &stack, width: 32, height: 32 };
        let b = OnPlane { model: &fused, width: 32, height: 32 };
        let report = verify_equivalence(&a, &b, 3, 1e-9).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn prune_threshold() {
        let probe = Plane::from_fn(8, 4, 8, |x, y| (x * 7 + y * 3) as f64).unwrap();
        let k = Kernel::new(1, 1, 1, 3, vec![0.5, 1e-6, 0.5], None).unwrap();
        let (same, r) = prune_taps(&k, PruneStrategy::Threshold(0.0), &probe).unwrap();
        assert_eq!((same, r.removed, r.max_deviation), (k.clone(), 0, 0.0));

        let (pruned, r) = prune_taps(&k, PruneStrategy::Threshold(1e-3), &probe).unwrap();
        assert_eq!(pruned.taps(), &[0.5, 0.0, 0.5]);
        assert_eq!((r.removed, r.remaining), (1, 2));
        assert!(r.max_deviation > 0.0 && r.max_deviation < 1e-3);
    }

    #[test]
    fn prune_quantize_reports_deviation() {
        let probe = Plane::from_fn(16, 16, 8, |x, y| ((x * 37 + y * 91) % 256) as f64).unwrap();
        let taps = vec![0.013, -0.004, 0.27, 0.51, 0.2, 0.011];
        let k = Kernel::new(1, 1, 2, 3, taps.clone(), None).unwrap();
        let step = 1.0 / 64.0;
        let (q, r) = prune_taps(&k, PruneStrategy::Quantize(step), &probe).unwrap();
        for (&t, &qt) in taps.iter().zip(q.taps()) {
            assert_eq!((qt / step).fract(), 0.0);
            assert!((t - qt).abs() <= step / 2.0);
        }
        // 0.004 rounds to zero; 0.011 and 0.013 round to 1/64
        assert_eq!(r.removed, 1);
        // direct oracle: difference filter applied to the probe
        let mut worst = 0.0f64;
        for y in 0..15 {
            for x in 0..14 {
                let mut d = 0.0;
                for ky in 0..2 {
                    for kx in 0..3 {
                        d += (taps[ky * 3 + kx] - q.taps()[ky * 3 + kx]) * probe.get(x + kx, y + ky);
                    }
                }
                worst = worst.max(d.abs());
            }
        }
        assert!((worst - r.max_deviation).abs() < 1e-9);
    }

    #[test]
    fn prune_rejects_bad_parameters() {
        let probe = Plane::filled(4, 4, 8, 1.0).unwrap();
        let k = Kernel::identity(1);
        assert!(matches!(prune_taps(&k, PruneStrategy::Threshold(-1.0), &probe), Err(Error::Param(_))));
        assert!(matches!(prune_taps(&k, PruneStrategy::Quantize(0.0), &probe), Err(Error::Param(_))));
    }
}
