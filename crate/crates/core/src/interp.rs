//! Learned quarter-sample interpolation filters.
//!
//! A three-layer convolutional network without activations (64 9x9 filters,
//! 32 1x1 filters, one 5x5 filter over 32 channels) is trained per
//! fractional position, then folded into one 13x13 filter. The fifteen
//! folded filters form a [`QuarterPelFilterSet`] that can stand in for, or
//! be switched against, fixed separable filters.
//!
//! Geometry: a 13x13 filter applied in valid mode to a reference plane
//! produces, at output `(x, y)`, the fractional sample at
//! `(x + 6 + dx/4, y + 6 + dy/4)` of that reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collapse::{collapse_conv, ConvStack};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::{cholesky_solve, conv2d, correlate_accumulate, full_convolve_accumulate, gemm_nn, gemm_nt, gemm_tn_accumulate, Kernel, Matrix, Padding, Plane};

/// Side of a fused filter.
pub const FILTER_SIZE: usize = 13;
/// Offset from a filter's top-left tap to its anchor (integer) sample.
pub const FILTER_CENTER: usize = 6;
/// `(out_channels, in_channels, kernel side)` per layer.
pub const SRCNN_SHAPE: [(usize, usize, usize); 3] = [(64, 1, 9), (32, 64, 1), (1, 32, 5)];

/// A quarter-sample offset `(dx/4, dy/4)`, never `(0, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FractionalPosition {
    dx: u8,
    dy: u8,
}

impl FractionalPosition {
    pub fn new(dx: u8, dy: u8) -> Result<Self> {
        if dx > 3 || dy > 3 || (dx == 0 && dy == 0) {
            return Err(Error::Param(format!(
                "fractional position must be in quarter units 0..=3 and not (0, 0), got ({dx}, {dy})"
            )));
        }
        Ok(Self { dx, dy })
    }

    /// All fifteen positions, `dy`-major.
    pub fn all() -> Vec<FractionalPosition> {
        (0..4u8)
            .flat_map(|dy| (0..4u8).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx != 0 || dy != 0)
            .map(|(dx, dy)| FractionalPosition { dx, dy })
            .collect()
    }

    /// Horizontal offset in quarter samples.
    pub fn dx(self) -> u8 {
        self.dx
    }

    pub fn dy(self) -> u8 {
        self.dy
    }

    /// Position in [`FractionalPosition::all`] order.
    pub fn index(self) -> usize {
        usize::from(self.dy * 4 + self.dx) - 1
    }

    /// Short name such as `dx1dy2`, used in file names and filter files.
    pub fn tag(self) -> String {
        format!("dx{}dy{}", self.dx, self.dy)
    }

    pub fn parse_tag(s: &str) -> Result<Self> {
        let bad = || Error::Param(format!("not a fractional position tag: {s:?}"));
        let rest = s.strip_prefix("dx").ok_or_else(bad)?;
        let (dx, dy) = rest.split_once("dy").ok_or_else(bad)?;
        let dx: u8 = dx.parse().map_err(|_| bad())?;
        let dy: u8 = dy.parse().map_err(|_| bad())?;
        Self::new(dx, dy)
    }
}

impl std::fmt::Display for FractionalPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}/4, {}/4)", self.dx, self.dy)
    }
}

/// The activation-free three-layer network for one position.
#[derive(Clone, Debug, PartialEq)]
pub struct SrcnnLinear {
    stack: ConvStack,
}

impl SrcnnLinear {
    pub fn new(stack: ConvStack) -> Result<Self> {
        let layers = stack.layers();
        let ok = layers.len() == 3
            && layers.iter().zip(SRCNN_SHAPE).all(|(k, (o, i, s))| {
                k.out_channels() == o && k.in_channels() == i && k.kh() == s && k.kw() == s
            });
        if !ok {
            return Err(Error::dim("stack is not (1->64, 9x9), (64->32, 1x1), (32->1, 5x5)"));
        }
        Ok(Self { stack })
    }

    pub fn stack(&self) -> &ConvStack {
        &self.stack
    }

    pub fn into_stack(self) -> ConvStack {
        self.stack
    }

    /// Layer-by-layer application, valid mode.
    pub fn forward(&self, input: &Plane) -> Result<Plane> {
        Ok(self.stack.forward(std::slice::from_ref(input))?.remove(0))
    }
}

/// Fifteen fused 13x13 filters, one per fractional position.
#[derive(Clone, Debug, PartialEq)]
pub struct QuarterPelFilterSet {
    filters: Vec<Kernel>,
}

impl QuarterPelFilterSet {
    pub fn new(entries: Vec<(FractionalPosition, Kernel)>) -> Result<Self> {
        let mut slots: Vec<Option<Kernel>> = vec![None; 15];
        for (pos, k) in entries {
            if k.out_channels() != 1 || k.in_channels() != 1 || k.kh() != FILTER_SIZE || k.kw() != FILTER_SIZE {
                return Err(Error::dim(format!("filter for {} is not a single-channel 13x13 kernel", pos.tag())));
            }
            if k.bias().is_some() {
                return Err(Error::Data(format!("filter for {} carries a bias", pos.tag())));
            }
            let slot = &mut slots[pos.index()];
            if slot.is_some() {
                return Err(Error::Data(format!("duplicate filter for {}", pos.tag())));
            }
            *slot = Some(k);
        }
        let filters = slots
            .into_iter()
            .zip(FractionalPosition::all())
            .map(|(k, pos)| k.ok_or_else(|| Error::Data(format!("missing filter for {}", pos.tag()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { filters })
    }

    pub fn get(&self, pos: FractionalPosition) -> &Kernel {
        &self.filters[pos.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (FractionalPosition, &Kernel)> {
        FractionalPosition::all().into_iter().zip(&self.filters)
    }
}

/// Which fixed separable filter family to compare against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedFilterKind {
    /// Two taps: `[1 - q/4, q/4]`.
    Bilinear,
    /// Four taps in 1/64 units at offsets -1..=2: quarter `[-4, 54, 16, -2]`,
    /// half `[-4, 36, 36, -4]`, three-quarter `[-2, 16, 54, -4]`.
    FourTap,
}

/// Fixed separable interpolation, applied horizontally and vertically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedFilterBank {
    pub kind: FixedFilterKind,
}

impl FixedFilterBank {
    pub fn bilinear() -> Self {
        Self {
            kind: FixedFilterKind::Bilinear,
        }
    }

    pub fn four_tap() -> Self {
        Self {
            kind: FixedFilterKind::FourTap,
        }
    }

    /// `(offset, weight)` pairs of the 1-D filter for quarter phase `q`.
    /// Weights are exact binary fractions and sum to exactly one.
    pub fn taps_1d(&self, q: u8) -> Vec<(isize, f64)> {
        if q == 0 {
            return vec![(0, 1.0)];
        }
        match self.kind {
            FixedFilterKind::Bilinear => {
                let f = f64::from(q) / 4.0;
                vec![(0, 1.0 - f), (1, f)]
            }
            FixedFilterKind::FourTap => {
                let t: [i32; 4] = match q {
                    1 => [-4, 54, 16, -2],
                    2 => [-4, 36, 36, -4],
                    _ => [-2, 16, 54, -4],
                };
                t.iter().enumerate().map(|(i, &v)| (i as isize - 1, f64::from(v) / 64.0)).collect()
            }
        }
    }

    /// The separable filter for `pos` embedded in a 13x13 kernel with the
    /// same anchor as the learned filters.
    pub fn kernel(&self, pos: FractionalPosition) -> Kernel {
        let mut taps = vec![0.0; FILTER_SIZE * FILTER_SIZE];
        let c = FILTER_CENTER as isize;
        for (oy, wy) in self.taps_1d(pos.dy) {
            for (ox, wx) in self.taps_1d(pos.dx) {
                taps[((c + oy) as usize) * FILTER_SIZE + (c + ox) as usize] += wy * wx;
            }
        }
        Kernel::new(1, 1, FILTER_SIZE, FILTER_SIZE, taps, None).expect("valid fixed kernel")
    }
}

/// An input plane and the fractional samples the model should produce from it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub input: Plane,
    /// `(input.width - 12) x (input.height - 12)`, aligned with valid output.
    pub target: Plane,
}

/// Every `scale`-th sample starting at `(phase_x, phase_y)`.
pub fn decimate(hr: &Plane, phase_x: usize, phase_y: usize, scale: usize) -> Result<Plane> {
    if scale == 0 || phase_x >= hr.width() || phase_y >= hr.height() {
        return Err(Error::Param(format!("bad decimation phase ({phase_x}, {phase_y}) / scale {scale}")));
    }
    let w = (hr.width() - 1 - phase_x) / scale + 1;
    let h = (hr.height() - 1 - phase_y) / scale + 1;
    Plane::from_fn(w, h, hr.bit_depth(), |x, y| hr.get(phase_x + x * scale, phase_y + y * scale))
}

fn check_scale(hr: &Plane, scale: usize) -> Result<()> {
    if scale == 0 || !scale.is_multiple_of(4) {
        return Err(Error::Param(format!("scale must be a positive multiple of 4, got {scale}")));
    }
    if !hr.width().is_multiple_of(scale) || !hr.height().is_multiple_of(scale) {
        return Err(Error::Data(format!(
            "{}x{} image is not divisible by scale {scale}",
            hr.width(),
            hr.height()
        )));
    }
    if hr.width() / scale < FILTER_SIZE || hr.height() / scale < FILTER_SIZE {
        return Err(Error::Data(format!(
            "{}x{} image is too small: decimated size must be at least {FILTER_SIZE}x{FILTER_SIZE}",
            hr.width(),
            hr.height()
        )));
    }
    Ok(())
}

/// The phase-(0,0) decimation of `hr` and the matching fractional-phase
/// samples, cropped to where a 13x13 filter has full support.
pub fn aligned_pair(hr: &Plane, pos: FractionalPosition, scale: usize) -> Result<TrainingPair> {
    check_scale(hr, scale)?;
    let step = scale / 4;
    let input = decimate(hr, 0, 0, scale)?;
    let target = decimate(hr, usize::from(pos.dx) * step, usize::from(pos.dy) * step, scale)?;
    let (w, h) = (input.width() - FILTER_SIZE + 1, input.height() - FILTER_SIZE + 1);
    let target = target.crop(FILTER_CENTER, FILTER_CENTER, w, h)?;
    Ok(TrainingPair { input, target })
}

/// Output tile side used by [`gen_training_pairs`].
pub const TRAINING_TILE: usize = 32;

/// Cut the aligned pair into tiles of at most 32x32 target samples.
pub fn gen_training_pairs(hr: &Plane, pos: FractionalPosition, scale: usize) -> Result<Vec<TrainingPair>> {
    let full = aligned_pair(hr, pos, scale)?;
    let (ow, oh) = (full.target.width(), full.target.height());
    let mut pairs = Vec::new();
    for ty in (0..oh).step_by(TRAINING_TILE) {
        for tx in (0..ow).step_by(TRAINING_TILE) {
            let (tw, th) = (TRAINING_TILE.min(ow - tx), TRAINING_TILE.min(oh - ty));
            pairs.push(TrainingPair {
                input: full.input.crop(tx, ty, tw + FILTER_SIZE - 1, th + FILTER_SIZE - 1)?,
                target: full.target.crop(tx, ty, tw, th)?,
            });
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpTrainConfig {
    /// Full-batch gradient steps.
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for InterpTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Second moments of `[13x13 patch, 1]` against the target, normalized
/// samples. The squared error of any fused filter follows from these.
struct PatchMoments {
    /// 170 x 170, `E[z zᵀ]`.
    gram: Vec<f64>,
    /// `E[z t]`.
    cross: Vec<f64>,
    /// `E[t²]`.
    energy: f64,
}

const AUG: usize = FILTER_SIZE * FILTER_SIZE + 1;

fn patch_moments(pairs: &[TrainingPair], mid: f64) -> Result<PatchMoments> {
    let mut gram = vec![0.0; AUG * AUG];
    let mut cross = vec![0.0; AUG];
    let mut energy = 0.0;
    let mut count = 0usize;
    let mut z = vec![0.0; AUG];
    for p in pairs {
        let (w, h) = (p.input.width(), p.input.height());
        if w < FILTER_SIZE || h < FILTER_SIZE || p.target.width() != w - 12 || p.target.height() != h - 12 {
            return Err(Error::dim(format!(
                "pair geometry: {}x{} input needs a {}x{} target",
                w,
                h,
                w.saturating_sub(12),
                h.saturating_sub(12)
            )));
        }
        for y in 0..p.target.height() {
            for x in 0..p.target.width() {
                for ky in 0..FILTER_SIZE {
                    let row = &p.input.row(y + ky)[x..x + FILTER_SIZE];
                    for (kx, v) in row.iter().enumerate() {
                        z[ky * FILTER_SIZE + kx] = (v - mid) / mid;
                    }
                }
                z[AUG - 1] = 1.0;
                let t = (p.target.get(x, y) - mid) / mid;
                for i in 0..AUG {
                    let zi = z[i];
                    let row = &mut gram[i * AUG..(i + 1) * AUG];
                    for j in i..AUG {
                        row[j] += zi * z[j];
                    }
                    cross[i] += zi * t;
                }
                energy += t * t;
                count += 1;
            }
        }
    }
    let inv = 1.0 / count as f64;
    for i in 0..AUG {
        for j in i..AUG {
            let v = gram[i * AUG + j] * inv;
            gram[i * AUG + j] = v;
            gram[j * AUG + i] = v;
        }
        cross[i] *= inv;
    }
    Ok(PatchMoments {
        gram,
        cross,
        energy: energy * inv,
    })
}

/// The least-squares 13x13 filter with bias for `pairs`: the best any
/// linear model of this receptive field can do on the training data.
/// `ridge` penalizes the taps only, in normalized units.
pub fn solve_interp_direct(pairs: &[TrainingPair], ridge: f64) -> Result<Kernel> {
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Param(format!("ridge must be non-negative, got {ridge}")));
    }
    let mid = pairs[0].input.mid_value();
    let mut mom = patch_moments(pairs, mid)?;
    for i in 0..AUG - 1 {
        mom.gram[i * AUG + i] += ridge;
    }
    let sol = cholesky_solve(&Matrix::new(AUG, AUG, mom.gram)?, &Matrix::new(AUG, 1, mom.cross)?)?.into_values();
    let taps = sol[..AUG - 1].to_vec();
    let sum: f64 = sol[..AUG - 1].iter().sum();
    let bias = mid * (sol[AUG - 1] - sum) + mid;
    Kernel::new(1, 1, FILTER_SIZE, FILTER_SIZE, taps, Some(vec![bias]))
}

/// Parameters of the three layers as flat buffers.
struct Factors {
    w1: Vec<f64>, // 64 x 81
    b1: Vec<f64>,
    w2: Vec<f64>, // 32 x 64
    b2: Vec<f64>,
    w3: Vec<f64>, // 32 x 25
    b3: Vec<f64>,
}

const C1: usize = 64;
const C2: usize = 32;
const K1: usize = 9 * 9;
const K3: usize = 5 * 5;

impl Factors {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut uniform = |n: usize, fan_in: usize| {
            let a = (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect::<Vec<f64>>()
        };
        Self {
            w1: uniform(C1 * K1, K1),
            b1: vec![0.0; C1],
            w2: uniform(C2 * C1, C1),
            b2: vec![0.0; C2],
            w3: uniform(C2 * K3, C2 * K3),
            b3: vec![0.0; 1],
        }
    }

    /// Fused 13x13 taps and bias, plus the intermediates the gradient needs.
    fn fuse(&self, m: &mut [f64], e2: &mut [f64]) -> (Vec<f64>, f64) {
        gemm_nn(&self.w2, &self.w1, C2, C1, K1, m);
        let mut k = vec![0.0; FILTER_SIZE * FILTER_SIZE];
        let mut beta = self.b3[0];
        for c in 0..C2 {
            full_convolve_accumulate(&m[c * K1..(c + 1) * K1], 9, 9, &self.w3[c * K3..(c + 1) * K3], 5, 5, &mut k);
            let carried: f64 = self.w2[c * C1..(c + 1) * C1].iter().zip(&self.b1).map(|(w, b)| w * b).sum();
            e2[c] = carried + self.b2[c];
            beta += e2[c] * self.w3[c * K3..(c + 1) * K3].iter().sum::<f64>();
        }
        (k, beta)
    }

    fn into_stack(mut self, mid: f64) -> Result<SrcnnLinear> {
        // x' = (x - mid)/mid on the way in, y = mid·y' + mid on the way out
        for c in 0..C1 {
            let f = &mut self.w1[c * K1..(c + 1) * K1];
            self.b1[c] -= f.iter().sum::<f64>();
            f.iter_mut().for_each(|w| *w /= mid);
        }
        self.w3.iter_mut().for_each(|w| *w *= mid);
        self.b3[0] = self.b3[0] * mid + mid;
        SrcnnLinear::new(ConvStack::new(vec![
            Kernel::new(C1, 1, 9, 9, self.w1, Some(self.b1))?,
            Kernel::new(C2, C1, 1, 1, self.w2, Some(self.b2))?,
            Kernel::new(1, C2, 5, 5, self.w3, Some(self.b3))?,
        ])?)
    }
}

pub fn train_interp(pairs: &[TrainingPair], pos: FractionalPosition, cfg: &InterpTrainConfig) -> Result<SrcnnLinear> {
    train_interp_logged(pairs, pos, cfg).map(|(m, _)| m)
}

/// Train the three-layer network by full-batch gradient descent (Adam, cosine
/// decay) on the mean squared error over every target sample.
///
/// Because the network is linear, the loss of a parameter setting depends on
/// the data only through the second moments of the 13x13 input patches; those
/// are accumulated once and each step back-propagates the exact full-batch
/// gradient through the layer composition. Samples are normalized to about
/// `[-1, 1]` while training and the normalization is folded back into the
/// first and last layers.
///
/// Returns the network and the training MSE (raw units) before every step.
pub fn train_interp_logged(
    pairs: &[TrainingPair],
    pos: FractionalPosition,
    cfg: &InterpTrainConfig,
) -> Result<(SrcnnLinear, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Param(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let mid = pairs[0].input.mid_value();
    let mom = patch_moments(pairs, mid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((pos.index() as u64) << 32));
    let mut f = Factors::random(&mut rng);
    let mut adam = Adam::new(&[C1 * K1, C1, C2 * C1, C2, C2 * K3, 1]);

    let mut m = vec![0.0; C2 * K1];
    let mut e2 = vec![0.0; C2];
    let mut gm = vec![0.0; C2 * K1];
    let mut g = (
        vec![0.0; C1 * K1],
        vec![0.0; C1],
        vec![0.0; C2 * C1],
        vec![0.0; C2],
        vec![0.0; C2 * K3],
        vec![0.0; 1],
    );
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut z = vec![0.0; AUG];
    let mut gz = vec![0.0; AUG];
    for step in 0..cfg.epochs {
        let (k, beta) = f.fuse(&mut m, &mut e2);
        z[..AUG - 1].copy_from_slice(&k);
        z[AUG - 1] = beta;
        // loss = zᵀGz - 2 cᵀz + E[t²];  ∂/∂z = 2(Gz - c)
        let mut loss = mom.energy;
        for i in 0..AUG {
            let gzi: f64 = crate::tensor::dot(&mom.gram[i * AUG..(i + 1) * AUG], &z) - mom.cross[i];
            gz[i] = 2.0 * gzi;
            loss += z[i] * (gzi - mom.cross[i]);
        }
        log.push((loss * mid * mid).max(0.0));
        let (gk, gbeta) = (&gz[..AUG - 1], gz[AUG - 1]);

        // layer 3 and the 9x9 intermediates
        gm.iter_mut().for_each(|v| *v = 0.0);
        g.4.iter_mut().for_each(|v| *v = 0.0);
        let mut ge2 = [0.0; C2];
        for c in 0..C2 {
            let w3 = &f.w3[c * K3..(c + 1) * K3];
            correlate_accumulate(gk, FILTER_SIZE, &m[c * K1..(c + 1) * K1], 9, 9, &mut g.4[c * K3..(c + 1) * K3], 5, 5);
            g.4[c * K3..(c + 1) * K3].iter_mut().for_each(|v| *v += gbeta * e2[c]);
            correlate_accumulate(gk, FILTER_SIZE, w3, 5, 5, &mut gm[c * K1..(c + 1) * K1], 9, 9);
            ge2[c] = gbeta * w3.iter().sum::<f64>();
        }
        g.5[0] = gbeta;
        // layer 2: M = W2·W1, e2 = W2·b1 + b2
        gemm_nt(&gm, &f.w1, C2, K1, C1, &mut g.2);
        for c in 0..C2 {
            for j in 0..C1 {
                g.2[c * C1 + j] += ge2[c] * f.b1[j];
            }
        }
        g.3.copy_from_slice(&ge2);
        // layer 1
        g.0.iter_mut().for_each(|v| *v = 0.0);
        gemm_tn_accumulate(&f.w2, &gm, C2, C1, K1, &mut g.0);
        for j in 0..C1 {
            g.1[j] = (0..C2).map(|c| f.w2[c * C1 + j] * ge2[c]).sum();
        }

        let lr = cosine_lr(cfg.lr, step, cfg.epochs);
        adam.step(
            lr,
            &mut [&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2, &mut f.w3, &mut f.b3],
            &[&g.0, &g.1, &g.2, &g.3, &g.4, &g.5],
        );
    }
    Ok((f.into_stack(mid)?, log))
}

/// One entry per position: what fusing its network discarded or changed.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedFilterInfo {
    pub pos: FractionalPosition,
    /// Fused bias, dropped from the filter.
    pub dropped_bias: f64,
    /// Sum of the fused taps before any normalization.
    pub dc_gain: f64,
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivationReport {
    pub entries: Vec<DerivedFilterInfo>,
}

/// Collapse each position's network into its 13x13 filter. The fused bias
/// is dropped; with `normalize_dc` the taps are rescaled to sum to one.
pub fn derive_filters(
    models: &[(FractionalPosition, SrcnnLinear)],
    normalize_dc: bool,
) -> Result<(QuarterPelFilterSet, DerivationReport)> {
    let mut entries = Vec::with_capacity(15);
    let mut info = Vec::with_capacity(15);
    for (pos, model) in models {
        let fused = collapse_conv(model.stack())?;
        let dropped_bias = fused.bias().map_or(0.0, |b| b[0]);
        let dc_gain: f64 = fused.taps().iter().sum();
        let mut taps = fused.taps().to_vec();
        if normalize_dc {
            if dc_gain.abs() < 1e-12 {
                return Err(Error::Data(format!("filter for {} has zero DC gain", pos.tag())));
            }
            taps.iter_mut().for_each(|t| *t /= dc_gain);
        }
        entries.push((*pos, Kernel::new(1, 1, FILTER_SIZE, FILTER_SIZE, taps, None)?));
        info.push(DerivedFilterInfo {
            pos: *pos,
            dropped_bias,
            dc_gain,
            normalized: normalize_dc,
        });
    }
    let set = QuarterPelFilterSet::new(entries)?;
    info.sort_by_key(|i| i.pos.index());
    Ok((set, DerivationReport { entries: info }))
}

/// Fractional-sample plane for `pos`, valid region only.
pub fn apply_filter(reference: &Plane, pos: FractionalPosition, set: &QuarterPelFilterSet) -> Result<Plane> {
    Ok(conv2d(std::slice::from_ref(reference), set.get(pos), Padding::Valid)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterChoice {
    Learned,
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchDecision {
    pub choice: FilterChoice,
    pub learned_sad: f64,
    pub fixed_sad: f64,
}

impl SwitchDecision {
    pub fn chosen_sad(&self) -> f64 {
        match self.choice {
            FilterChoice::Learned => self.learned_sad,
            FilterChoice::Fixed => self.fixed_sad,
        }
    }
}

fn sad(a: &Plane, b: &Plane) -> f64 {
    a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).abs()).sum()
}

/// Pick the filter with the lower SAD against `orig_block`; ties go to the
/// fixed filter. `reference` must be the block's 13x13-support neighbourhood:
/// 12 samples larger than the block in each dimension.
pub fn switchable_select(
    orig_block: &Plane,
    reference: &Plane,
    pos: FractionalPosition,
    learned: &QuarterPelFilterSet,
    fixed: &FixedFilterBank,
) -> Result<SwitchDecision> {
    if reference.width() != orig_block.width() + FILTER_SIZE - 1
        || reference.height() != orig_block.height() + FILTER_SIZE - 1
    {
        return Err(Error::dim(format!(
            "{}x{} reference does not cover a {}x{} block with 13x13 support",
            reference.width(),
            reference.height(),
            orig_block.width(),
            orig_block.height()
        )));
    }
    let learned_pred = apply_filter(reference, pos, learned)?;
    let fixed_pred = conv2d(std::slice::from_ref(reference), &fixed.kernel(pos), Padding::Valid)?.remove(0);
    let learned_sad = sad(orig_block, &learned_pred);
    let fixed_sad = sad(orig_block, &fixed_pred);
    Ok(SwitchDecision {
        choice: if learned_sad < fixed_sad {
            FilterChoice::Learned
        } else {
            FilterChoice::Fixed
        },
        learned_sad,
        fixed_sad,
    })
}

/// Aggregate of per-block switching decisions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionStats {
    pub blocks: usize,
    pub learned_chosen: usize,
    pub fixed_only_sad: f64,
    pub switched_sad: f64,
    /// Blocks where switching did worse than fixed-only. Always zero.
    pub dominance_violations: usize,
}

impl SelectionStats {
    pub fn learned_fraction(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.learned_chosen as f64 / self.blocks as f64
        }
    }

    /// Mean SAD saved per block by switching.
    pub fn mean_sad_reduction(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            (self.fixed_only_sad - self.switched_sad) / self.blocks as f64
        }
    }

    fn add(&mut self, d: &SwitchDecision) {
        self.blocks += 1;
        if d.choice == FilterChoice::Learned {
            self.learned_chosen += 1;
        }
        self.fixed_only_sad += d.fixed_sad;
        self.switched_sad += d.chosen_sad();
        if d.chosen_sad() > d.fixed_sad {
            self.dominance_violations += 1;
        }
    }
}

/// Run block-wise switching over an image for one position: the image is
/// split into phase-(0,0) reference and fractional-phase targets, and each
/// `block x block` target tile picks its filter.
pub fn switchable_stats(
    hr: &Plane,
    pos: FractionalPosition,
    scale: usize,
    block: usize,
    learned: &QuarterPelFilterSet,
    fixed: &FixedFilterBank,
) -> Result<SelectionStats> {
    if block == 0 {
        return Err(Error::Param("block size must be positive".into()));
    }
    let pair = aligned_pair(hr, pos, scale)?;
    let mut stats = SelectionStats::default();
    let (tw, th) = (pair.target.width(), pair.target.height());
    for by in (0..th.saturating_sub(block - 1)).step_by(block) {
        for bx in (0..tw.saturating_sub(block - 1)).step_by(block) {
            let orig = pair.target.crop(bx, by, block, block)?;
            let reference = pair.input.crop(bx, by, block + FILTER_SIZE - 1, block + FILTER_SIZE - 1)?;
            stats.add(&switchable_select(&orig, &reference, pos, learned, fixed)?);
        }
    }
    Ok(stats)
}

/// Mean squared error of predicting `pos` samples of `hr` with `filter`.
pub fn position_mse(hr: &Plane, pos: FractionalPosition, scale: usize, filter: &Kernel) -> Result<f64> {
    let pair = aligned_pair(hr, pos, scale)?;
    let pred = conv2d(std::slice::from_ref(&pair.input), filter, Padding::Valid)?.remove(0);
    let n = pred.samples().len() as f64;
    Ok(pred.samples().iter().zip(pair.target.samples()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_positions_dy_major() {
        let all = FractionalPosition::all();
        assert_eq!(all.len(), 15);
        assert_eq!((all[0].dx(), all[0].dy()), (1, 0));
        assert_eq!((all[3].dx(), all[3].dy()), (0, 1));
        for (i, p) in all.iter().enumerate() {
            assert_eq!(p.index(), i);
            assert_eq!(FractionalPosition::parse_tag(&p.tag()).unwrap(), *p);
        }
        assert!(FractionalPosition::new(0, 0).is_err());
        assert!(FractionalPosition::new(4, 1).is_err());
        assert!(FractionalPosition::parse_tag("dx0dy0").is_err());
        assert!(FractionalPosition::parse_tag("x1y1").is_err());
    }

    #[test]
    fn fixed_filters_sum_to_one() {
        for bank in [FixedFilterBank::bilinear(), FixedFilterBank::four_tap()] {
            for q in 0..4 {
                assert_eq!(bank.taps_1d(q).iter().map(|t| t.1).sum::<f64>(), 1.0);
            }
            for pos in FractionalPosition::all() {
                assert_eq!(bank.kernel(pos).taps().iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn decimation_phase_zero_is_the_input() {
        let hr = crate::synth::natural_image(64, 64, 1).unwrap();
        let pos = FractionalPosition::new(2, 1).unwrap();
        let pair = aligned_pair(&hr, pos, 4).unwrap();
        assert_eq!(pair.input, decimate(&hr, 0, 0, 4).unwrap());
        assert_eq!((pair.input.width(), pair.target.width()), (16, 4));
        // target(x, y) = hr(4(x+6) + 2, 4(y+6) + 1)
        assert_eq!(pair.target.get(1, 2), hr.get(4 * 7 + 2, 4 * 8 + 1));
    }

    #[test]
    fn constant_image_gives_constant_pairs() {
        let hr = Plane::filled(64, 64, 8, 77.0).unwrap();
        for p in gen_training_pairs(&hr, FractionalPosition::new(3, 3).unwrap(), 4).unwrap() {
            assert!(p.input.samples().iter().chain(p.target.samples()).all(|&v| v == 77.0));
        }
    }

    #[test]
    fn ramp_half_pel_is_the_average() {
        let hr = Plane::from_fn(128, 64, 8, |x, _| x as f64).unwrap();
        let pos = FractionalPosition::new(2, 0).unwrap();
        let pairs = gen_training_pairs(&hr, pos, 4).unwrap();
        for p in &pairs {
            for y in 0..p.target.height() {
                for x in 0..p.target.width() {
                    let a = p.input.get(x + 6, y + 6);
                    let b = p.input.get(x + 7, y + 6);
                    assert_eq!(p.target.get(x, y), (a + b) / 2.0);
                }
            }
        }
    }

    #[test]
    fn pair_generation_errors() {
        let small = Plane::filled(48, 48, 8, 0.0).unwrap();
        let pos = FractionalPosition::new(1, 0).unwrap();
        assert!(matches!(gen_training_pairs(&small, pos, 4), Err(Error::Data(_))));
        let odd = Plane::filled(66, 64, 8, 0.0).unwrap();
        assert!(matches!(gen_training_pairs(&odd, pos, 4), Err(Error::Data(_))));
        assert!(train_interp(&[], pos, &InterpTrainConfig::default()).is_err());
    }

    #[test]
    fn tiles_cover_the_aligned_pair() {
        let hr = crate::synth::natural_image(256, 192, 2).unwrap();
        let pos = FractionalPosition::new(1, 3).unwrap();
        let full = aligned_pair(&hr, pos, 4).unwrap();
        let tiles = gen_training_pairs(&hr, pos, 4).unwrap();
        let covered: usize = tiles.iter().map(|t| t.target.samples().len()).sum();
        assert_eq!(covered, full.target.samples().len());
        for t in &tiles {
            assert_eq!(t.input.width(), t.target.width() + 12);
            assert_eq!(t.input.height(), t.target.height() + 12);
        }
    }

    fn delta_set(shift: (usize, usize)) -> QuarterPelFilterSet {
        let entries = FractionalPosition::all()
            .into_iter()
            .map(|p| {
                let mut taps = vec![0.0; 169];
                taps[(6 + shift.1) * 13 + 6 + shift.0] = 1.0;
                (p, Kernel::new(1, 1, 13, 13, taps, None).unwrap())
            })
            .collect();
        QuarterPelFilterSet::new(entries).unwrap()
    }

    #[test]
    fn apply_delta_filter_shifts() {
        let r = crate::synth::natural_image(40, 30, 3).unwrap();
        let pos = FractionalPosition::new(1, 1).unwrap();
        let out = apply_filter(&r, pos, &delta_set((1, 0))).unwrap();
        assert_eq!((out.width(), out.height()), (28, 18));
        assert_eq!(out, r.crop(7, 6, 28, 18).unwrap());

        let flat = Plane::filled(20, 20, 8, 90.0).unwrap();
        let avg = FixedFilterBank::four_tap().kernel(pos);
        let set = QuarterPelFilterSet::new(FractionalPosition::all().into_iter().map(|p| (p, avg.clone())).collect())
            .unwrap();
        assert!(apply_filter(&flat, pos, &set).unwrap().samples().iter().all(|v| (v - 90.0).abs() < 1e-12));
        assert!(matches!(apply_filter(&Plane::filled(12, 20, 8, 0.0).unwrap(), pos, &set), Err(Error::Dimension(_))));
    }

    #[test]
    fn filter_set_validation() {
        let mut entries: Vec<_> = FractionalPosition::all()
            .into_iter()
            .map(|p| (p, Kernel::new(1, 1, 13, 13, vec![0.0; 169], None).unwrap()))
            .collect();
        entries.pop();
        assert!(matches!(QuarterPelFilterSet::new(entries.clone()), Err(Error::Data(_))));
        entries.push(entries[0].clone());
        assert!(matches!(QuarterPelFilterSet::new(entries), Err(Error::Data(_))));
    }

    #[test]
    fn switch_ties_go_to_fixed_and_planted_learned_wins() {
        let pos = FractionalPosition::new(2, 2).unwrap();
        let fixed = FixedFilterBank::bilinear();
        let same = QuarterPelFilterSet::new(
            FractionalPosition::all().into_iter().map(|p| (p, fixed.kernel(p))).collect(),
        )
        .unwrap();
        let reference = crate::synth::natural_image(20, 20, 5).unwrap();
        let orig = Plane::filled(8, 8, 8, 100.0).unwrap();
        let d = switchable_select(&orig, &reference, pos, &same, &fixed).unwrap();
        assert_eq!(d.choice, FilterChoice::Fixed);
        assert_eq!(d.learned_sad, d.fixed_sad);

        let learned = delta_set((2, 1));
        let orig = apply_filter(&reference, pos, &learned).unwrap();
        let d = switchable_select(&orig, &reference, pos, &learned, &fixed).unwrap();
        assert_eq!(d.choice, FilterChoice::Learned);
        assert_eq!(d.learned_sad, 0.0);

        let wrong = Plane::filled(9, 8, 8, 0.0).unwrap();
        assert!(matches!(switchable_select(&wrong, &reference, pos, &learned, &fixed), Err(Error::Dimension(_))));
    }

    fn planted_pairs(planted: &Kernel, n: usize) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|_| {
                let input = Plane::from_fn(60, 60, 8, |_, _| f64::from(rng.gen_range(0u8..=255))).unwrap();
                let target = conv2d(std::slice::from_ref(&input), planted, Padding::Valid).unwrap().remove(0);
                TrainingPair { input, target }
            })
            .collect()
    }

    #[test]
    fn training_recovers_a_planted_filter() {
        let pos = FractionalPosition::new(1, 2).unwrap();
        let planted = FixedFilterBank::four_tap().kernel(pos).with_bias(Some(vec![3.0])).unwrap();
        let pairs = planted_pairs(&planted, 3);
        let model = train_interp(&pairs, pos, &InterpTrainConfig::default()).unwrap();
        let fused = collapse_conv(model.stack()).unwrap();
        for (a, b) in fused.taps().iter().zip(planted.taps()) {
            assert!((a - b).abs() < 1e-3, "tap {a} vs planted {b}");
        }
        assert!((fused.bias().unwrap()[0] - 3.0).abs() < 1e-3);
        let direct = solve_interp_direct(&pairs, 0.0).unwrap();
        for (a, b) in direct.taps().iter().zip(planted.taps()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn train_mse(pairs: &[TrainingPair], k: &Kernel) -> f64 {
        let (mut se, mut n) = (0.0, 0usize);
        for p in pairs {
            let out = conv2d(std::slice::from_ref(&p.input), k, Padding::Valid).unwrap().remove(0);
            se += out.samples().iter().zip(p.target.samples()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            n += out.samples().len();
        }
        se / n as f64
    }

    #[test]
    fn training_is_deterministic_and_bounded_by_least_squares() {
        let hr = crate::synth::natural_image(128, 128, 8).unwrap();
        let pos = FractionalPosition::new(3, 1).unwrap();
        let pairs = gen_training_pairs(&hr, pos, 4).unwrap();
        let cfg = InterpTrainConfig {
            epochs: 300,
            ..InterpTrainConfig::default()
        };
        let (a, log) = train_interp_logged(&pairs, pos, &cfg).unwrap();
        assert_eq!(a, train_interp(&pairs, pos, &cfg).unwrap());
        assert_ne!(a, train_interp(&pairs, pos, &InterpTrainConfig { seed: 1, ..cfg.clone() }).unwrap());
        assert!(log.last().unwrap() < &log[0]);

        let trained = train_mse(&pairs, &collapse_conv(a.stack()).unwrap());
        let optimum = train_mse(&pairs, &solve_interp_direct(&pairs, 0.0).unwrap());
        assert!(trained >= optimum - 1e-6, "trained {trained} below optimum {optimum}");
        // the logged loss before the last step tracks the real one
        assert!((log.last().unwrap() - trained).abs() < 0.05 * trained + 1e-6);
    }

    #[test]
    fn derived_filters_drop_bias_and_match_the_network() {
        let hr = crate::synth::natural_image(96, 96, 9).unwrap();
        let cfg = InterpTrainConfig {
            epochs: 20,
            ..InterpTrainConfig::default()
        };
        let models: Vec<_> = FractionalPosition::all()
            .into_iter()
            .map(|p| (p, train_interp(&gen_training_pairs(&hr, p, 4).unwrap(), p, &cfg).unwrap()))
            .collect();
        let (set, report) = derive_filters(&models, false).unwrap();
        let probe = crate::synth::natural_image(40, 40, 10).unwrap();
        for ((pos, model), info) in models.iter().zip(&report.entries) {
            assert_eq!(info.pos, *pos);
            let k = set.get(*pos);
            assert_eq!(k.tap_count(), 169);
            assert!(k.bias().is_none());
            let seq = model.forward(&probe).unwrap();
            let fused = apply_filter(&probe, *pos, &set).unwrap();
            for (s, f) in seq.samples().iter().zip(fused.samples()) {
                assert!((s - (f + info.dropped_bias)).abs() <= 1e-9 * (1.0 + s.abs()));
            }
        }
        let (normed, _) = derive_filters(&models, true).unwrap();
        for (_, k) in normed.iter() {
            assert!((k.taps().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(derive_filters(&models[1..], false), Err(Error::Data(_))));
    }
}
