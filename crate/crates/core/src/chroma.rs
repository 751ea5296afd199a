//! Chroma prediction from co-located luma with boundary attention.
//!
//! The model sees an `n x n` luma block (already on the chroma grid) and the
//! `4n + 1` reconstructed boundary samples around it, each a `(luma, U, V)`
//! triple. Boundary samples are lifted to 32-d features by an affine map and
//! squeezed to 3-d codes by the encoder half of an autoencoder. A single
//! 5x5 convolution turns the luma block into a 3-d query per pixel; scaled
//! dot-product attention between queries and codes mixes the boundary chroma
//! values, and a small affine head maps `[mixed U, mixed V, mixed code,
//! query]` to the predicted U and V.
//!
//! Boundary order: the corner above-left, then the top row of `2n` samples
//! (above and above-right) from left to right, then the left column of `2n`
//! samples (left and below-left) from top to bottom.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collapse::{AffineMap, ComplexityReport, ConvStack, LinearFcn, ParamCount};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::{conv2d, correlate_accumulate, Kernel, Matrix, Padding, Plane, Vector};

pub const BLOCK_SIZES: [usize; 3] = [4, 8, 16];
/// Width of the per-sample boundary features.
pub const FEATURE_DIM: usize = 32;
/// Width of the encoded boundary codes and of the luma queries.
pub const CODE_DIM: usize = 3;
/// Inputs to the head: mixed U and V, mixed code, query.
pub const HEAD_INPUTS: usize = 2 + 2 * CODE_DIM;
/// Side of the luma branch filter; zero padding by 2 keeps the block size.
pub const BRANCH_SIZE: usize = 5;

/// `4n + 1`.
pub fn boundary_len(n: usize) -> usize {
    4 * n + 1
}

fn check_block_size(n: usize) -> Result<()> {
    if !BLOCK_SIZES.contains(&n) {
        return Err(Error::dim(format!("block size must be one of 4, 8, 16, got {n}")));
    }
    Ok(())
}

/// One block to predict: its luma and its `(luma, U, V)` boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct ChromaInput {
    luma: Plane,
    boundary: Vec<[f64; 3]>,
}

impl ChromaInput {
    pub fn new(luma: Plane, boundary: Vec<[f64; 3]>) -> Result<Self> {
        if luma.width() != luma.height() {
            return Err(Error::dim(format!("luma block must be square, got {}x{}", luma.width(), luma.height())));
        }
        let n = luma.width();
        check_block_size(n)?;
        if boundary.len() != boundary_len(n) {
            return Err(Error::dim(format!(
                "block size {n} needs {} boundary samples, got {}",
                boundary_len(n),
                boundary.len()
            )));
        }
        Ok(Self { luma, boundary })
    }

    pub fn n(&self) -> usize {
        self.luma.width()
    }

    pub fn luma(&self) -> &Plane {
        &self.luma
    }

    pub fn boundary(&self) -> &[[f64; 3]] {
        &self.boundary
    }
}

/// A training example: input plus the true chroma of the block.
#[derive(Clone, Debug, PartialEq)]
pub struct ChromaSample {
    pub input: ChromaInput,
    pub u: Plane,
    pub v: Plane,
}

/// 2x2 box average, used when luma has twice the chroma resolution.
pub fn downsample_luma(y: &Plane) -> Result<Plane> {
    if !y.width().is_multiple_of(2) || !y.height().is_multiple_of(2) {
        return Err(Error::dim(format!("cannot halve a {}x{} plane", y.width(), y.height())));
    }
    Plane::from_fn(y.width() / 2, y.height() / 2, y.bit_depth(), |x, j| {
        (y.get(2 * x, 2 * j) + y.get(2 * x + 1, 2 * j) + y.get(2 * x, 2 * j + 1) + y.get(2 * x + 1, 2 * j + 1)) / 4.0
    })
}

/// Cut blocks of size `n` every `stride` samples from a Y/U/V triple. Luma
/// may be at chroma resolution or twice it (4:2:0). Only blocks whose whole
/// boundary, including above-right and below-left, lies inside the frame
/// are used.
pub fn extract_chroma_samples(y: &Plane, u: &Plane, v: &Plane, n: usize, stride: usize) -> Result<Vec<ChromaSample>> {
    check_block_size(n)?;
    if stride == 0 {
        return Err(Error::Param("stride must be positive".into()));
    }
    if u.width() != v.width() || u.height() != v.height() {
        return Err(Error::dim("U and V planes differ in size"));
    }
    let luma = if y.width() == u.width() && y.height() == u.height() {
        y.clone()
    } else if y.width() == 2 * u.width() && y.height() == 2 * u.height() {
        downsample_luma(y)?
    } else {
        return Err(Error::dim(format!(
            "luma {}x{} matches neither chroma {}x{} nor twice it",
            y.width(),
            y.height(),
            u.width(),
            u.height()
        )));
    };
    let (w, h) = (u.width(), u.height());
    let mut out = Vec::new();
    let mut by = 1;
    while by + 2 * n <= h {
        let mut bx = 1;
        while bx + 2 * n <= w {
            let triple = |x: usize, yy: usize| [luma.get(x, yy), u.get(x, yy), v.get(x, yy)];
            let mut boundary = Vec::with_capacity(boundary_len(n));
            boundary.push(triple(bx - 1, by - 1));
            boundary.extend((0..2 * n).map(|i| triple(bx + i, by - 1)));
            boundary.extend((0..2 * n).map(|i| triple(bx - 1, by + i)));
            out.push(ChromaSample {
                input: ChromaInput::new(luma.crop(bx, by, n, n)?, boundary)?,
                u: u.crop(bx, by, n, n)?,
                v: v.crop(bx, by, n, n)?,
            });
            bx += stride;
        }
        by += stride;
    }
    Ok(out)
}

/// A linear autoencoder; only the encoder runs at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    encoder: AffineMap,
    decoder: AffineMap,
}

impl Autoencoder {
    pub fn new(encoder: AffineMap, decoder: AffineMap) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() || decoder.output_dim() != encoder.input_dim() {
            return Err(Error::dim(format!(
                "encoder {}->{} and decoder {}->{} do not mirror each other",
                encoder.input_dim(),
                encoder.output_dim(),
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn encoder(&self) -> &AffineMap {
        &self.encoder
    }

    pub fn decoder(&self) -> &AffineMap {
        &self.decoder
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Mean squared reconstruction error per feature component over the rows of `features`.
    pub fn reconstruction_mse(&self, features: &Matrix) -> Result<f64> {
        let mut se = 0.0;
        for r in 0..features.rows() {
            let rec = self.decoder.apply(&self.encoder.apply(features.row(r))?)?;
            se += rec.iter().zip(features.row(r)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(se / (features.rows() * features.cols()) as f64)
    }
}

/// Softmax attention rows: one per predicted pixel, one column per boundary sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl AttentionWeights {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Row-wise softmax of `Q Kᵀ / temperature`.
pub fn attention_weights(queries: &Matrix, keys: &Matrix, temperature: f64) -> Result<AttentionWeights> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Param(format!("temperature must be positive, got {temperature}")));
    }
    if queries.cols() != keys.cols() {
        return Err(Error::dim(format!(
            "queries have {} components, keys {}",
            queries.cols(),
            keys.cols()
        )));
    }
    let (rows, cols) = (queries.rows(), keys.rows());
    let mut values = vec![0.0; rows * cols];
    for r in 0..rows {
        softmax_row(queries.row(r), keys, temperature, &mut values[r * cols..(r + 1) * cols]);
    }
    Ok(AttentionWeights { rows, cols, values })
}

fn softmax_row(q: &[f64], keys: &Matrix, temperature: f64, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = q.iter().zip(keys.row(j)).map(|(a, b)| a * b).sum::<f64>() / temperature;
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// The simplified chroma model, shared by all block sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ChromaHybridModel {
    conv_branch: Kernel,
    boundary_encoder: AffineMap,
    bottleneck: Autoencoder,
    temperature: f64,
    head: AffineMap,
}

impl ChromaHybridModel {
    pub fn new(
        conv_branch: Kernel,
        boundary_encoder: AffineMap,
        bottleneck: Autoencoder,
        temperature: f64,
        head: AffineMap,
    ) -> Result<Self> {
        if conv_branch.in_channels() != 1
            || conv_branch.out_channels() != CODE_DIM
            || conv_branch.kh() != BRANCH_SIZE
            || conv_branch.kw() != BRANCH_SIZE
        {
            return Err(Error::dim("conv branch must map 1 channel to 3 with a 5x5 filter"));
        }
        if boundary_encoder.input_dim() != 3 || boundary_encoder.output_dim() != FEATURE_DIM {
            return Err(Error::dim("boundary encoder must map 3 values to 32 features"));
        }
        if bottleneck.encoder().input_dim() != FEATURE_DIM || bottleneck.bottleneck_dim() != CODE_DIM {
            return Err(Error::dim("bottleneck must squeeze 32 features to 3"));
        }
        if head.input_dim() != HEAD_INPUTS || head.output_dim() != 2 {
            return Err(Error::dim("head must map 8 inputs to 2 chroma values"));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Param(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            conv_branch,
            boundary_encoder,
            bottleneck,
            temperature,
            head,
        })
    }

    pub fn conv_branch(&self) -> &Kernel {
        &self.conv_branch
    }

    pub fn boundary_encoder(&self) -> &AffineMap {
        &self.boundary_encoder
    }

    pub fn bottleneck(&self) -> &Autoencoder {
        &self.bottleneck
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn head(&self) -> &AffineMap {
        &self.head
    }

    /// Parameters used at inference (the decoder is excluded).
    pub fn inference_param_count(&self) -> usize {
        self.complexity().param_count - count_params_affine(self.bottleneck.decoder())
    }
}

fn count_params_affine(m: &AffineMap) -> usize {
    m.complexity().param_count
}

impl ParamCount for ChromaHybridModel {
    /// All stored parameters, decoder included. MACs are for one 4x4 block.
    fn complexity(&self) -> ComplexityReport {
        let parts = [
            self.conv_branch.complexity(),
            self.boundary_encoder.complexity(),
            self.bottleneck.encoder().complexity(),
            self.bottleneck.decoder().complexity(),
            self.head.complexity(),
        ];
        let weights = parts.iter().map(|p| p.weights).sum();
        let biases = parts.iter().map(|p| p.biases).sum();
        let ops = op_counts(self, 4);
        ComplexityReport::new(weights, biases, ops.total(), 2 * 16, 0)
            .with_note("decoder stored for training only; MACs for a 4x4 block")
    }
}

/// Zero-pad the luma block by 2 on each side, so the padded block is
/// `(n + 4) x (n + 4)`, and apply the branch filter: one `n x n` plane per
/// query component.
pub fn pad_and_convolve(luma: &Plane, conv_branch: &Kernel) -> Result<Vec<Plane>> {
    if luma.width() != luma.height() {
        return Err(Error::dim("luma block must be square"));
    }
    check_block_size(luma.width())?;
    conv2d(std::slice::from_ref(luma), conv_branch, Padding::SameZero)
}

/// 32-d features of every boundary sample, one row each.
pub fn boundary_features(model: &ChromaHybridModel, boundary: &[[f64; 3]]) -> Result<Matrix> {
    let mut values = Vec::with_capacity(boundary.len() * FEATURE_DIM);
    for b in boundary {
        values.extend(model.boundary_encoder.apply(b)?);
    }
    Matrix::new(boundary.len(), FEATURE_DIM, values)
}

/// 3-d codes of every boundary sample: features passed through the encoder.
pub fn encode_boundary(model: &ChromaHybridModel, input: &ChromaInput) -> Result<Matrix> {
    let features = boundary_features(model, input.boundary())?;
    let mut values = Vec::with_capacity(features.rows() * CODE_DIM);
    for r in 0..features.rows() {
        values.extend(model.bottleneck.encoder().apply(features.row(r))?);
    }
    Matrix::new(features.rows(), CODE_DIM, values)
}

/// Multiply-accumulates spent on one block, by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub conv_macs: usize,
    pub boundary_encoder_macs: usize,
    pub encoder_macs: usize,
    pub decoder_macs: usize,
    pub attention_macs: usize,
    pub head_macs: usize,
}

impl OpCounts {
    pub fn total(&self) -> usize {
        self.conv_macs
            + self.boundary_encoder_macs
            + self.encoder_macs
            + self.decoder_macs
            + self.attention_macs
            + self.head_macs
    }
}

fn op_counts(model: &ChromaHybridModel, n: usize) -> OpCounts {
    let (pixels, b) = (n * n, boundary_len(n));
    OpCounts {
        conv_macs: pixels * model.conv_branch.tap_count(),
        boundary_encoder_macs: b * 3 * FEATURE_DIM,
        encoder_macs: b * FEATURE_DIM * CODE_DIM,
        decoder_macs: 0,
        // scores, then mixing of 2 chroma values and 3 code components
        attention_macs: pixels * b * (CODE_DIM + 2 + CODE_DIM),
        head_macs: pixels * HEAD_INPUTS * 2,
    }
}

/// Every intermediate of one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ChromaTrace {
    /// `n² x 3`, raster order.
    pub queries: Matrix,
    /// `(4n + 1) x 3`.
    pub codes: Matrix,
    pub weights: AttentionWeights,
    /// Attention-weighted boundary `(U, V)` per pixel, before the head.
    pub mixed_chroma: Vec<[f64; 2]>,
    pub u: Plane,
    pub v: Plane,
    pub ops: OpCounts,
}

/// Predict U and V (unclipped) for one block.
pub fn predict_chroma(model: &ChromaHybridModel, input: &ChromaInput) -> Result<(Plane, Plane)> {
    let t = predict_chroma_traced(model, input)?;
    Ok((t.u, t.v))
}

pub fn predict_chroma_traced(model: &ChromaHybridModel, input: &ChromaInput) -> Result<ChromaTrace> {
    let n = input.n();
    let feats = pad_and_convolve(input.luma(), &model.conv_branch)?;
    let queries = Matrix::from_fn(n * n, CODE_DIM, |p, c| feats[c].samples()[p]);
    let codes = encode_boundary(model, input)?;
    let weights = attention_weights(&queries, &codes, model.temperature)?;
    let bd = input.luma().bit_depth();
    let mut u = Vec::with_capacity(n * n);
    let mut v = Vec::with_capacity(n * n);
    let mut mixed_chroma = Vec::with_capacity(n * n);
    let mut head_in = [0.0; HEAD_INPUTS];
    for p in 0..n * n {
        head_in.iter_mut().for_each(|h| *h = 0.0);
        for (j, (&a, b)) in weights.row(p).iter().zip(input.boundary()).enumerate() {
            head_in[0] += a * b[1];
            head_in[1] += a * b[2];
            for c in 0..CODE_DIM {
                head_in[2 + c] += a * codes.get(j, c);
            }
        }
        head_in[2 + CODE_DIM..].copy_from_slice(queries.row(p));
        mixed_chroma.push([head_in[0], head_in[1]]);
        let out = model.head.apply(&head_in)?;
        u.push(out[0]);
        v.push(out[1]);
    }
    Ok(ChromaTrace {
        queries,
        codes,
        weights,
        mixed_chroma,
        u: Plane::new(n, n, bd, u)?,
        v: Plane::new(n, n, bd, v)?,
        ops: op_counts(model, n),
    })
}

/// Mean squared error over U and V of the model on `samples`.
pub fn chroma_mse(model: &ChromaHybridModel, samples: &[ChromaSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no chroma samples".into()));
    }
    let (mut se, mut count) = (0.0, 0usize);
    for s in samples {
        let (u, v) = predict_chroma(model, &s.input)?;
        for (pred, truth) in [(&u, &s.u), (&v, &s.v)] {
            se += pred.samples().iter().zip(truth.samples()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += pred.samples().len();
        }
    }
    Ok(se / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChromaTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Full-batch steps for the autoencoder stage.
    pub ae_steps: usize,
    pub ae_lr: f64,
    pub seed: u64,
}

impl Default for ChromaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-2,
            batch_size: 16,
            ae_steps: 1500,
            ae_lr: 3e-2,
            seed: 0,
        }
    }
}

/// What training produced besides the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ChromaTrainLog {
    /// Autoencoder reconstruction MSE after training, normalized units.
    pub ae_reconstruction_mse: f64,
    /// Variance of the features it was trained on (the predict-the-mean error).
    pub feature_variance: f64,
    /// Training MSE over U and V averaged over each epoch, raw units.
    pub epoch_mse: Vec<f64>,
}

pub fn train_chroma(samples: &[ChromaSample], cfg: &ChromaTrainConfig) -> Result<ChromaHybridModel> {
    train_chroma_logged(samples, cfg).map(|(m, _)| m)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Train one model for all block sizes.
///
/// Stages: the boundary encoder is a fixed seeded random lift of `(L, U, V)`
/// to 32 features; the autoencoder is trained on those features by
/// full-batch Adam and frozen; then the luma branch and the head are trained
/// jointly on U/V squared error with minibatch Adam, back-propagating through
/// the softmax. Samples are divided by the peak sample value during training
/// and the scaling is folded back into the stored weights.
pub fn train_chroma_logged(samples: &[ChromaSample], cfg: &ChromaTrainConfig) -> Result<(ChromaHybridModel, ChromaTrainLog)> {
    for n in BLOCK_SIZES {
        if !samples.iter().any(|s| s.input.n() == n) {
            return Err(Error::Data(format!("training set has no {n}x{n} blocks; a joint model needs all sizes")));
        }
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.ae_lr > 0.0) {
        return Err(Error::Param("batch size and learning rates must be positive".into()));
    }
    let bd = samples[0].input.luma().bit_depth();
    if samples.iter().any(|s| s.input.luma().bit_depth() != bd) {
        return Err(Error::Data("training samples mix bit depths".into()));
    }
    let scale = samples[0].input.luma().max_value();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // stage 0: fixed lift to 32 features
    let lift_w = uniform(&mut rng, FEATURE_DIM * 3, 1.0);
    let lift_b = uniform(&mut rng, FEATURE_DIM, 0.5);
    let lift = AffineMap::new(Matrix::new(FEATURE_DIM, 3, lift_w)?, Vector::new(lift_b)?)?;

    // stage 1: autoencoder on the features of (a subsample of) all boundary samples
    let mut triples: Vec<[f64; 3]> = samples.iter().flat_map(|s| s.input.boundary().iter().copied()).collect();
    triples.shuffle(&mut rng);
    triples.truncate(4096);
    let feats: Vec<Vec<f64>> = triples
        .iter()
        .map(|t| lift.apply(&t.map(|x| x / scale)))
        .collect::<Result<_>>()?;
    let features = Matrix::new(feats.len(), FEATURE_DIM, feats.concat())?;
    let (bottleneck, ae_mse) = train_autoencoder(&features, cfg.ae_steps, cfg.ae_lr, &mut rng)?;
    let feature_variance = column_variance(&features);

    // stage 2: luma branch and head
    let codes: Vec<Vec<[f64; CODE_DIM]>> = samples
        .iter()
        .map(|s| {
            s.input
                .boundary()
                .iter()
                .map(|t| {
                    let f = lift.apply(&t.map(|x| x / scale))?;
                    let c = bottleneck.encoder().apply(&f)?;
                    Ok([c[0], c[1], c[2]])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let taps = BRANCH_SIZE * BRANCH_SIZE;
    let mut p = BranchParams {
        k: uniform(&mut rng, CODE_DIM * taps, (3.0 / taps as f64).sqrt()),
        kb: vec![0.0; CODE_DIM],
        h: vec![0.0; 2 * HEAD_INPUTS],
        hb: vec![0.0; 2],
    };
    // the head starts as "copy the mixed boundary chroma"
    p.h[0] = 1.0;
    p.h[HEAD_INPUTS + 1] = 1.0;
    let mut g = BranchParams::zeros();
    let mut adam = Adam::new(&[p.k.len(), p.kb.len(), p.h.len(), p.hb.len()]);
    let temperature = (CODE_DIM as f64).sqrt();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut se, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            g.clear();
            let batch_count: usize = batch.iter().map(|&i| 2 * samples[i].input.n().pow(2)).sum();
            for &i in batch {
                se += block_backward(&p, &samples[i], &codes[i], scale, temperature, 1.0 / batch_count as f64, &mut g);
            }
            count += batch_count;
            adam.step(
                cosine_lr(cfg.lr, step, total_steps),
                &mut [&mut p.k, &mut p.kb, &mut p.h, &mut p.hb],
                &[&g.k, &g.kb, &g.h, &g.hb],
            );
            step += 1;
        }
        epoch_mse.push(se / count as f64 * scale * scale);
    }

    // fold the 1/scale input normalization and the scale on the output back in
    let conv_branch = Kernel::new(
        CODE_DIM,
        1,
        BRANCH_SIZE,
        BRANCH_SIZE,
        p.k.iter().map(|w| w / scale).collect(),
        Some(p.kb),
    )?;
    let lift = AffineMap::new(
        Matrix::new(FEATURE_DIM, 3, lift.weights().values().iter().map(|w| w / scale).collect())?,
        lift.bias().clone(),
    )?;
    let head_w: Vec<f64> = p
        .h
        .iter()
        .enumerate()
        .map(|(i, &w)| if i % HEAD_INPUTS < 2 { w } else { w * scale })
        .collect();
    let head = AffineMap::new(
        Matrix::new(2, HEAD_INPUTS, head_w)?,
        Vector::new(p.hb.iter().map(|b| b * scale).collect())?,
    )?;
    let model = ChromaHybridModel::new(conv_branch, lift, bottleneck, temperature, head)?;
    Ok((
        model,
        ChromaTrainLog {
            ae_reconstruction_mse: ae_mse,
            feature_variance,
            epoch_mse,
        },
    ))
}

/// Mean over columns of each column's variance.
fn column_variance(m: &Matrix) -> f64 {
    let (r, c) = (m.rows(), m.cols());
    let mut total = 0.0;
    for j in 0..c {
        let mean = (0..r).map(|i| m.get(i, j)).sum::<f64>() / r as f64;
        total += (0..r).map(|i| (m.get(i, j) - mean).powi(2)).sum::<f64>() / r as f64;
    }
    total / c as f64
}

/// Full-batch Adam on `mean ||D(E f + e) + d - f||²`.
fn train_autoencoder(features: &Matrix, steps: usize, lr: f64, rng: &mut ChaCha8Rng) -> Result<(Autoencoder, f64)> {
    let (n, f) = (features.rows(), FEATURE_DIM);
    let mut e = uniform(rng, CODE_DIM * f, (3.0 / f as f64).sqrt());
    let mut eb = vec![0.0; CODE_DIM];
    let mut d = uniform(rng, f * CODE_DIM, (3.0 / CODE_DIM as f64).sqrt());
    let mut db = vec![0.0; f];
    let mut adam = Adam::new(&[e.len(), eb.len(), d.len(), db.len()]);
    let (mut ge, mut geb, mut gd, mut gdb) = (vec![0.0; e.len()], vec![0.0; CODE_DIM], vec![0.0; d.len()], vec![0.0; f]);
    let inv = 1.0 / (n * f) as f64;
    let mut code = [0.0; CODE_DIM];
    let mut err = vec![0.0; f];
    let mut last = 0.0;
    for s in 0..=steps {
        ge.iter_mut().chain(&mut geb).chain(&mut gd).chain(&mut gdb).for_each(|g| *g = 0.0);
        let mut se = 0.0;
        for r in 0..n {
            let x = features.row(r);
            for c in 0..CODE_DIM {
                code[c] = eb[c] + e[c * f..(c + 1) * f].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            for i in 0..f {
                let rec = db[i] + (0..CODE_DIM).map(|c| d[i * CODE_DIM + c] * code[c]).sum::<f64>();
                err[i] = rec - x[i];
                se += err[i] * err[i];
            }
            let mut gcode = [0.0; CODE_DIM];
            for i in 0..f {
                let gi = 2.0 * err[i] * inv;
                gdb[i] += gi;
                for c in 0..CODE_DIM {
                    gd[i * CODE_DIM + c] += gi * code[c];
                    gcode[c] += gi * d[i * CODE_DIM + c];
                }
            }
            for c in 0..CODE_DIM {
                geb[c] += gcode[c];
                for (g, xi) in ge[c * f..(c + 1) * f].iter_mut().zip(x) {
                    *g += gcode[c] * xi;
                }
            }
        }
        last = se * inv;
        if s == steps {
            break;
        }
        adam.step(
            cosine_lr(lr, s, steps),
            &mut [&mut e, &mut eb, &mut d, &mut db],
            &[&ge, &geb, &gd, &gdb],
        );
    }
    let ae = Autoencoder::new(
        AffineMap::new(Matrix::new(CODE_DIM, f, e)?, Vector::new(eb)?)?,
        AffineMap::new(Matrix::new(f, CODE_DIM, d)?, Vector::new(db)?)?,
    )?;
    Ok((ae, last))
}

/// Trainable parameters of the luma branch and head, normalized units.
struct BranchParams {
    k: Vec<f64>,
    kb: Vec<f64>,
    h: Vec<f64>,
    hb: Vec<f64>,
}

impl BranchParams {
    fn zeros() -> Self {
        Self {
            k: vec![0.0; CODE_DIM * BRANCH_SIZE * BRANCH_SIZE],
            kb: vec![0.0; CODE_DIM],
            h: vec![0.0; 2 * HEAD_INPUTS],
            hb: vec![0.0; 2],
        }
    }

    fn clear(&mut self) {
        for v in [&mut self.k, &mut self.kb, &mut self.h, &mut self.hb] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Forward and backward for one block; adds `weight ·∂(squared error)` into
/// `g` and returns the block's squared error, both in normalized units.
fn block_backward(
    p: &BranchParams,
    s: &ChromaSample,
    codes: &[[f64; CODE_DIM]],
    scale: f64,
    temperature: f64,
    weight: f64,
    g: &mut BranchParams,
) -> f64 {
    let n = s.input.n();
    let pw = n + BRANCH_SIZE - 1;
    let half = BRANCH_SIZE / 2;
    let taps = BRANCH_SIZE * BRANCH_SIZE;
    let mut padded = vec![0.0; pw * pw];
    for y in 0..n {
        for (x, v) in s.input.luma().row(y).iter().enumerate() {
            padded[(y + half) * pw + x + half] = v / scale;
        }
    }
    let mut q = vec![0.0; CODE_DIM * n * n];
    for c in 0..CODE_DIM {
        let plane = &mut q[c * n * n..(c + 1) * n * n];
        plane.iter_mut().for_each(|v| *v = p.kb[c]);
        correlate_accumulate(&padded, pw, &p.k[c * taps..(c + 1) * taps], BRANCH_SIZE, BRANCH_SIZE, plane, n, n);
    }
    let boundary = s.input.boundary();
    let b = boundary.len();
    let mut alpha = vec![0.0; b];
    let mut galpha = vec![0.0; b];
    let mut gq = vec![0.0; CODE_DIM * n * n];
    let mut se = 0.0;
    for px in 0..n * n {
        let qp = [q[px], q[n * n + px], q[2 * n * n + px]];
        let mut max = f64::NEG_INFINITY;
        for (a, c) in alpha.iter_mut().zip(codes) {
            *a = (qp[0] * c[0] + qp[1] * c[1] + qp[2] * c[2]) / temperature;
            max = max.max(*a);
        }
        let mut sum = 0.0;
        for a in alpha.iter_mut() {
            *a = (*a - max).exp();
            sum += *a;
        }
        let mut h = [0.0; HEAD_INPUTS];
        for ((a, t), c) in alpha.iter_mut().zip(boundary).zip(codes) {
            *a /= sum;
            h[0] += *a * t[1] / scale;
            h[1] += *a * t[2] / scale;
            for k in 0..CODE_DIM {
                h[2 + k] += *a * c[k];
            }
        }
        h[2 + CODE_DIM..].copy_from_slice(&qp);
        let targets = [s.u.samples()[px] / scale, s.v.samples()[px] / scale];
        let mut gh = [0.0; HEAD_INPUTS];
        for o in 0..2 {
            let row = &p.h[o * HEAD_INPUTS..(o + 1) * HEAD_INPUTS];
            let out = p.hb[o] + row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
            let e = out - targets[o];
            se += e * e;
            let go = 2.0 * e * weight;
            g.hb[o] += go;
            for i in 0..HEAD_INPUTS {
                g.h[o * HEAD_INPUTS + i] += go * h[i];
                gh[i] += go * row[i];
            }
        }
        // through the mixing and the softmax
        let mut mean_g = 0.0;
        for ((ga, t), (a, c)) in galpha.iter_mut().zip(boundary).zip(alpha.iter().zip(codes)) {
            *ga = gh[0] * t[1] / scale + gh[1] * t[2] / scale + gh[2] * c[0] + gh[3] * c[1] + gh[4] * c[2];
            mean_g += a * *ga;
        }
        let mut gqp = [gh[5], gh[6], gh[7]];
        for ((ga, a), c) in galpha.iter().zip(&alpha).zip(codes) {
            let gs = a * (ga - mean_g) / temperature;
            for k in 0..CODE_DIM {
                gqp[k] += gs * c[k];
            }
        }
        for k in 0..CODE_DIM {
            gq[k * n * n + px] = gqp[k];
        }
    }
    for c in 0..CODE_DIM {
        let gplane = &gq[c * n * n..(c + 1) * n * n];
        g.kb[c] += gplane.iter().sum::<f64>();
        // ∂/∂k[ky][kx] = Σ_p gq[p] · padded[p + (ky, kx)]
        correlate_accumulate(&padded, pw, gplane, n, n, &mut g.k[c * taps..(c + 1) * taps], BRANCH_SIZE, BRANCH_SIZE);
    }
    se
}

/// The unsimplified reference configuration the simplified model is
/// compared against: separate models per block size, a three-layer luma
/// branch (3x3, 3x3, 1x1), a two-layer 32-d boundary branch, 32-d query and
/// key projections, and a two-layer head over attended and luma features.
/// Weights are zero; only the shapes matter.
#[derive(Clone, Debug, PartialEq)]
pub struct ChromaBaseline {
    pub per_size: Vec<BaselineSizeModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSizeModel {
    pub n: usize,
    pub luma_branch: ConvStack,
    pub boundary_branch: LinearFcn,
    pub query: AffineMap,
    pub key: AffineMap,
    pub head: LinearFcn,
}

fn zero_affine(out: usize, inp: usize) -> AffineMap {
    AffineMap::new(Matrix::zeros(out, inp), Vector::zeros(out)).expect("consistent shapes")
}

fn zero_conv(out: usize, inp: usize, k: usize) -> Kernel {
    Kernel::new(out, inp, k, k, vec![0.0; out * inp * k * k], Some(vec![0.0; out])).expect("consistent shapes")
}

impl ChromaBaseline {
    pub fn reference() -> Self {
        let per_size = BLOCK_SIZES
            .iter()
            .map(|&n| BaselineSizeModel {
                n,
                luma_branch: ConvStack::new(vec![zero_conv(64, 1, 3), zero_conv(64, 64, 3), zero_conv(32, 64, 1)])
                    .expect("chained shapes"),
                boundary_branch: LinearFcn::new(vec![zero_affine(32, 3), zero_affine(32, 32)]).expect("chained shapes"),
                query: zero_affine(32, 32),
                key: zero_affine(32, 32),
                head: LinearFcn::new(vec![zero_affine(32, 64), zero_affine(2, 32)]).expect("chained shapes"),
            })
            .collect();
        Self { per_size }
    }
}

impl ParamCount for ChromaBaseline {
    fn complexity(&self) -> ComplexityReport {
        let mut weights = 0;
        let mut biases = 0;
        for m in &self.per_size {
            for r in [
                m.luma_branch.complexity(),
                m.boundary_branch.complexity(),
                m.query.complexity(),
                m.key.complexity(),
                m.head.complexity(),
            ] {
                weights += r.weights;
                biases += r.biases;
            }
        }
        ComplexityReport::new(weights, biases, weights, 1, biases)
            .with_note(format!("{} per-size models", self.per_size.len()))
    }
}
