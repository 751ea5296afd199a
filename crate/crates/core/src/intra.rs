//! Fully connected intra prediction from an L-shaped reference region.
//!
//! Reference layout for an `n x n` block at `(x, y)` with `D = 4` lines, in
//! vector order:
//!
//! 1. the `D` rows above, farthest row first, each spanning columns
//!    `x - D .. x + n` (the `D` corner columns followed by the `n` columns
//!    directly above the block);
//! 2. the `D` columns to the left for each block row `y .. y + n`, top row
//!    first, farthest column first.
//!
//! That is `D·(n + D) + D·n = D·(2n + D)` samples: 48, 80 and 144 for
//! `n = 4, 8, 16`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collapse::{AffineMap, LinearFcn, VectorModel};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::{cholesky_solve, gemm_nn, gemm_nt, gemm_tn_accumulate, Matrix, Plane, Vector};

/// Number of reference lines above and to the left of the block.
pub const REFERENCE_LINES: usize = 4;

pub const BLOCK_SIZES: [usize; 3] = [4, 8, 16];

/// `R(n) = D·(2n + D)`.
pub const fn reference_count(n: usize) -> usize {
    REFERENCE_LINES * (2 * n + REFERENCE_LINES)
}

fn check_block_size(n: usize) -> Result<()> {
    if BLOCK_SIZES.contains(&n) {
        Ok(())
    } else {
        Err(Error::Param(format!("block size must be one of 4, 8, 16; got {n}")))
    }
}

/// Offsets of every reference sample relative to the block's top-left corner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceLayout {
    n: usize,
    offsets: Vec<(isize, isize)>,
}

impl ReferenceLayout {
    pub fn new(n: usize) -> Result<Self> {
        check_block_size(n)?;
        let d = REFERENCE_LINES as isize;
        let ni = n as isize;
        let mut offsets = Vec::with_capacity(reference_count(n));
        for dy in -d..0 {
            for dx in -d..ni {
                offsets.push((dx, dy));
            }
        }
        for dy in 0..ni {
            for dx in -d..0 {
                offsets.push((dx, dy));
            }
        }
        Ok(Self { n, offsets })
    }

    pub fn block_size(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// `(dx, dy)` per reference, in vector order.
    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }
}

/// Gather the reference vector for the `n x n` block at `(x, y)`.
///
/// Samples outside the frame copy the nearest in-frame reference (squared
/// distance, ties to the earlier one in layout order). When none of the
/// references is inside the frame they all take the mid-range value.
pub fn extract_references(frame: &Plane, x: usize, y: usize, n: usize) -> Result<Vector> {
    let layout = ReferenceLayout::new(n)?;
    if x + n > frame.width() || y + n > frame.height() {
        return Err(Error::Bounds(format!(
            "{n}x{n} block at ({x}, {y}) outside {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    let (w, h) = (frame.width() as isize, frame.height() as isize);
    let pos: Vec<(isize, isize)> = layout
        .offsets
        .iter()
        .map(|&(dx, dy)| (x as isize + dx, y as isize + dy))
        .collect();
    let available: Vec<bool> = pos.iter().map(|&(px, py)| px >= 0 && py >= 0 && px < w && py < h).collect();
    if !available.iter().any(|&a| a) {
        return Vector::new(vec![frame.mid_value(); pos.len()]);
    }
    let values = pos
        .iter()
        .enumerate()
        .map(|(i, &(px, py))| {
            let (sx, sy) = if available[i] {
                (px, py)
            } else {
                pos.iter()
                    .zip(&available)
                    .filter(|(_, a)| **a)
                    .map(|(p, _)| *p)
                    .min_by_key(|&(qx, qy)| (qx - px).pow(2) + (qy - py).pow(2))
                    .expect("at least one available reference")
            };
            frame.get(sx as usize, sy as usize)
        })
        .collect();
    Vector::new(values)
}

/// The `n x n` block at `(x, y)`, raster order.
pub fn extract_block(frame: &Plane, x: usize, y: usize, n: usize) -> Result<Vec<f64>> {
    Ok(frame.crop(x, y, n, n)?.into_samples())
}

/// One training example: references and the true block.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraSample {
    pub refs: Vec<f64>,
    pub block: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct IntraDataset {
    pub train: Vec<IntraSample>,
    pub holdout: Vec<IntraSample>,
}

pub(crate) fn coord_hash(frame: usize, x: usize, y: usize) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = (frame as u64) << 42 ^ (x as u64) << 21 ^ y as u64;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Whether the block at these coordinates belongs to the 10% holdout split.
pub fn is_holdout(frame: usize, x: usize, y: usize) -> bool {
    coord_hash(frame, x, y).is_multiple_of(10)
}

/// Harvest blocks on a `stride` grid. Only blocks whose references all lie
/// inside the frame are used.
pub fn harvest(frames: &[Plane], n: usize, stride: usize) -> Result<IntraDataset> {
    check_block_size(n)?;
    if stride == 0 {
        return Err(Error::Param("stride must be positive".into()));
    }
    let d = REFERENCE_LINES;
    let mut out = IntraDataset::default();
    for (f, frame) in frames.iter().enumerate() {
        let mut y = d;
        while y + n <= frame.height() {
            let mut x = d;
            while x + n <= frame.width() {
                let sample = IntraSample {
                    refs: extract_references(frame, x, y, n)?.into_values(),
                    block: extract_block(frame, x, y, n)?,
                };
                if is_holdout(f, x, y) {
                    out.holdout.push(sample);
                } else {
                    out.train.push(sample);
                }
                x += stride;
            }
            y += stride;
        }
    }
    Ok(out)
}

fn check_dataset(dataset: &[IntraSample], n: usize) -> Result<()> {
    check_block_size(n)?;
    if dataset.is_empty() {
        return Err(Error::Data("empty intra dataset".into()));
    }
    let (r, b) = (reference_count(n), n * n);
    if let Some(i) = dataset.iter().position(|s| s.refs.len() != r || s.block.len() != b) {
        return Err(Error::Data(format!(
            "sample {i} does not match block size {n} ({r} references, {b} samples)"
        )));
    }
    Ok(())
}

/// Either form of an intra predictor for one block size.
#[derive(Clone, Debug, PartialEq)]
pub enum IntraModel {
    Fcn(LinearFcn),
    Affine(AffineMap),
}

impl IntraModel {
    /// Block size implied by the output dimension.
    pub fn block_size(&self) -> Result<usize> {
        let out = self.output_dim();
        BLOCK_SIZES
            .into_iter()
            .find(|&n| n * n == out && reference_count(n) == self.input_dim())
            .ok_or_else(|| Error::dim(format!("{} -> {out} is not an intra model shape", self.input_dim())))
    }

    pub fn collapsed(&self) -> Result<AffineMap> {
        match self {
            IntraModel::Fcn(net) => crate::collapse::collapse_affine(net),
            IntraModel::Affine(m) => Ok(m.clone()),
        }
    }
}

impl VectorModel for IntraModel {
    fn input_dim(&self) -> usize {
        match self {
            IntraModel::Fcn(n) => n.input_dim(),
            IntraModel::Affine(m) => m.input_dim(),
        }
    }
    fn output_dim(&self) -> usize {
        match self {
            IntraModel::Fcn(n) => n.output_dim(),
            IntraModel::Affine(m) => m.output_dim(),
        }
    }
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            IntraModel::Fcn(n) => n.forward(x),
            IntraModel::Affine(m) => m.apply(x),
        }
    }
}

/// Mini-batch training settings for the four-layer network.
#[derive(Clone, Debug, PartialEq)]
pub struct FcnTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub bit_depth: u8,
}

impl Default for FcnTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 96,
            epochs: 40,
            lr: 2e-3,
            batch_size: 32,
            seed: 0,
            bit_depth: 8,
        }
    }
}

/// Train `R(n) → h → h → h → n²` with no activations; see
/// [`train_intra_fcn_logged`].
pub fn train_intra_fcn(dataset: &[IntraSample], n: usize, cfg: &FcnTrainConfig) -> Result<LinearFcn> {
    train_intra_fcn_logged(dataset, n, cfg).map(|(net, _)| net)
}

/// Adam on the mean squared error over shuffled mini-batches, with a cosine
/// learning-rate decay. Samples are centred and scaled to roughly `[-1, 1]`
/// while training; that normalization is folded back into the first and
/// last layers, so the returned network works on raw sample values.
///
/// Returns the network and the mean training MSE of every epoch (raw units).
pub fn train_intra_fcn_logged(
    dataset: &[IntraSample],
    n: usize,
    cfg: &FcnTrainConfig,
) -> Result<(LinearFcn, Vec<f64>)> {
    check_dataset(dataset, n)?;
    if cfg.hidden == 0 || cfg.batch_size == 0 {
        return Err(Error::Param("hidden width and batch size must be positive".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Param(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let mid = f64::from(1u32 << (cfg.bit_depth - 1));
    let dims = [reference_count(n), cfg.hidden, cfg.hidden, cfg.hidden, n * n];
    let layers = dims.len() - 1;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights: Vec<Vec<f64>> = (0..layers)
        .map(|l| {
            let a = (3.0 / dims[l] as f64).sqrt();
            (0..dims[l] * dims[l + 1]).map(|_| rng.gen_range(-a..a)).collect()
        })
        .collect();
    let mut biases: Vec<Vec<f64>> = (0..layers).map(|l| vec![0.0; dims[l + 1]]).collect();

    let norm = |v: f64| (v - mid) / mid;
    let xs: Vec<Vec<f64>> = dataset.iter().map(|s| s.refs.iter().map(|&v| norm(v)).collect()).collect();
    let ys: Vec<Vec<f64>> = dataset.iter().map(|s| s.block.iter().map(|&v| norm(v)).collect()).collect();

    let mut sizes = Vec::new();
    for l in 0..layers {
        sizes.push(weights[l].len());
        sizes.push(biases[l].len());
    }
    let mut adam = Adam::new(&sizes);
    let bs = cfg.batch_size.min(dataset.len());
    let steps_per_epoch = dataset.len().div_ceil(bs);
    let total_steps = cfg.epochs * steps_per_epoch;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut acts: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; bs * d]).collect();
    let mut grads_a: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; bs * d]).collect();
    let mut gw: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut gb: Vec<Vec<f64>> = biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sse = 0.0;
        for batch in order.chunks(bs) {
            let b = batch.len();
            for (row, &i) in batch.iter().enumerate() {
                acts[0][row * dims[0]..(row + 1) * dims[0]].copy_from_slice(&xs[i]);
            }
            for l in 0..layers {
                let (lo, hi) = acts.split_at_mut(l + 1);
                let out = &mut hi[0][..b * dims[l + 1]];
                gemm_nt(&lo[l][..b * dims[l]], &weights[l], b, dims[l], dims[l + 1], out);
                for r in 0..b {
                    out[r * dims[l + 1]..(r + 1) * dims[l + 1]]
                        .iter_mut()
                        .zip(&biases[l])
                        .for_each(|(o, bb)| *o += bb);
                }
            }
            let od = dims[layers];
            let scale = 2.0 / (b * od) as f64;
            for (row, &i) in batch.iter().enumerate() {
                for j in 0..od {
                    let e = acts[layers][row * od + j] - ys[i][j];
                    epoch_sse += e * e;
                    grads_a[layers][row * od + j] = scale * e;
                }
            }
            for l in (0..layers).rev() {
                let (din, dout) = (dims[l], dims[l + 1]);
                gw[l].iter_mut().for_each(|v| *v = 0.0);
                gemm_tn_accumulate(&grads_a[l + 1][..b * dout], &acts[l][..b * din], b, dout, din, &mut gw[l]);
                gb[l].iter_mut().for_each(|v| *v = 0.0);
                for r in 0..b {
                    gb[l].iter_mut().zip(&grads_a[l + 1][r * dout..(r + 1) * dout]).for_each(|(g, v)| *g += v);
                }
                if l > 0 {
                    let (lo, hi) = grads_a.split_at_mut(l + 1);
                    gemm_nn(&hi[0][..b * dout], &weights[l], b, dout, din, &mut lo[l][..b * din]);
                }
            }
            let lr = cosine_lr(cfg.lr, step, total_steps);
            let mut params: Vec<&mut [f64]> = Vec::with_capacity(2 * layers);
            for (w, bb) in weights.iter_mut().zip(biases.iter_mut()) {
                params.push(w);
                params.push(bb);
            }
            let grads: Vec<&[f64]> = gw.iter().zip(&gb).flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).collect();
            adam.step(lr, &mut params, &grads);
            step += 1;
        }
        log.push(epoch_sse / (dataset.len() * dims[layers]) as f64 * mid * mid);
    }

    // Fold x' = (x - mid)/mid into layer 0 and y = mid·y' + mid into the last.
    let (din0, dout0) = (dims[0], dims[1]);
    for r in 0..dout0 {
        let row = &mut weights[0][r * din0..(r + 1) * din0];
        let s: f64 = row.iter().sum();
        biases[0][r] -= s;
        row.iter_mut().for_each(|w| *w /= mid);
    }
    weights[layers - 1].iter_mut().for_each(|w| *w *= mid);
    biases[layers - 1].iter_mut().for_each(|b| *b = *b * mid + mid);

    let layers = (0..layers)
        .map(|l| {
            AffineMap::new(
                Matrix::new(dims[l + 1], dims[l], std::mem::take(&mut weights[l]))?,
                Vector::new(std::mem::take(&mut biases[l]))?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((LinearFcn::new(layers)?, log))
}

/// Closed-form ridge regression for a single affine predictor.
///
/// The inputs are centred so the bias is unregularized: as `lambda` grows
/// the weights go to zero and the bias to the mean block.
pub fn train_intra_direct(dataset: &[IntraSample], n: usize, lambda: f64) -> Result<AffineMap> {
    check_dataset(dataset, n)?;
    if !(lambda >= 0.0) {
        return Err(Error::Param(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let (r, o) = (reference_count(n), n * n);
    let count = dataset.len() as f64;
    let mut mx = vec![0.0; r];
    let mut my = vec![0.0; o];
    for s in dataset {
        mx.iter_mut().zip(&s.refs).for_each(|(m, v)| *m += v / count);
        my.iter_mut().zip(&s.block).for_each(|(m, v)| *m += v / count);
    }
    let mut xtx = vec![0.0; r * r];
    let mut xty = vec![0.0; r * o];
    let mut xc = vec![0.0; r];
    let mut yc = vec![0.0; o];
    for s in dataset {
        xc.iter_mut().zip(s.refs.iter().zip(&mx)).for_each(|(c, (v, m))| *c = v - m);
        yc.iter_mut().zip(s.block.iter().zip(&my)).for_each(|(c, (v, m))| *c = v - m);
        gemm_tn_accumulate(&xc, &xc, 1, r, r, &mut xtx);
        gemm_tn_accumulate(&xc, &yc, 1, r, o, &mut xty);
    }
    for i in 0..r {
        xtx[i * r + i] += lambda;
    }
    let theta = cholesky_solve(&Matrix::new(r, r, xtx)?, &Matrix::new(r, o, xty)?).map_err(|e| match e {
        Error::Singular(msg) => Error::Singular(format!("{msg}; try a positive ridge lambda")),
        other => other,
    })?;
    let w = theta.transpose();
    let wx = w.mul_vec(&mx)?;
    let b: Vec<f64> = my.iter().zip(&wx).map(|(m, p)| m - p).collect();
    AffineMap::new(w, Vector::new(b)?)
}

/// Mean squared prediction error over a dataset.
pub fn dataset_mse<M: VectorModel + ?Sized>(model: &M, dataset: &[IntraSample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut sse = 0.0;
    let mut count = 0usize;
    for s in dataset {
        let p = model.evaluate(&s.refs)?;
        if p.len() != s.block.len() {
            return Err(Error::dim("model output does not match block size"));
        }
        sse += p.iter().zip(&s.block).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += p.len();
    }
    Ok(sse / count as f64)
}

/// How much each reference sample contributes to one predicted pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionMap {
    pub n: usize,
    pub pixel: usize,
    /// One weight per reference, in layout order.
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ContributionMap {
    /// The weights placed on the `(n + D) x (n + D)` grid whose origin is the
    /// top-left reference; block positions are `None`.
    pub fn grid(&self) -> Vec<Vec<Option<f64>>> {
        let side = self.n + REFERENCE_LINES;
        let mut g = vec![vec![None; side]; side];
        let layout = ReferenceLayout::new(self.n).expect("validated block size");
        for (&(dx, dy), &w) in layout.offsets().iter().zip(&self.weights) {
            let gx = (dx + REFERENCE_LINES as isize) as usize;
            let gy = (dy + REFERENCE_LINES as isize) as usize;
            g[gy][gx] = Some(w);
        }
        g
    }

    /// This pixel's prediction from a reference vector.
    pub fn apply(&self, refs: &[f64]) -> f64 {
        crate::tensor::dot(&self.weights, refs) + self.bias
    }
}

pub fn contribution_map(m: &AffineMap, n: usize, pixel: usize) -> Result<ContributionMap> {
    check_block_size(n)?;
    if m.input_dim() != reference_count(n) || m.output_dim() != n * n {
        return Err(Error::dim(format!(
            "{} -> {} map is not an intra map for n = {n}",
            m.input_dim(),
            m.output_dim()
        )));
    }
    if pixel >= n * n {
        return Err(Error::Bounds(format!("pixel {pixel} outside {n}x{n} block")));
    }
    Ok(ContributionMap {
        n,
        pixel,
        weights: m.weights().row(pixel).to_vec(),
        bias: m.bias().as_slice()[pixel],
    })
}

/// Predict an `n x n` block, unclipped.
pub fn predict_block<M: VectorModel + ?Sized>(model: &M, refs: &[f64], n: usize, bit_depth: u8) -> Result<Plane> {
    check_block_size(n)?;
    if refs.len() != reference_count(n) || model.input_dim() != refs.len() {
        return Err(Error::dim(format!(
            "expected {} references for n = {n} (model takes {}), got {}",
            reference_count(n),
            model.input_dim(),
            refs.len()
        )));
    }
    if model.output_dim() != n * n {
        return Err(Error::dim(format!("model predicts {} samples, block has {}", model.output_dim(), n * n)));
    }
    Plane::new(n, n, bit_depth, model.evaluate(refs)?)
}
