use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lincollapse::chroma::{self, train_chroma_logged, ChromaSample, ChromaTrainConfig};
use lincollapse::collapse::{
    collapse_affine, collapse_conv, count_params, verify_equivalence, ComplexityReport, ConvStack, EquivalenceReport,
    LinearFcn, OnPlane,
};
use lincollapse::formats::{self, filter_set_text, filter_taps_csv, Model, RunConfig};
use lincollapse::interp::{
    derive_filters, gen_training_pairs, train_interp_logged, DerivationReport, FractionalPosition, InterpTrainConfig,
    SrcnnLinear,
};
use lincollapse::intra::{
    self, dataset_mse, extract_block, extract_references, harvest, predict_block, train_intra_direct,
    train_intra_fcn_logged, FcnTrainConfig, IntraModel,
};
use lincollapse::metrics::{bd_rate, psnr, BdResult};
use lincollapse::synth::{linear_chroma_samples, natural_image, LinearChromaSpec};
use lincollapse::tensor::Plane;
use lincollapse::Error;

use crate::{CliError, CliResult};

/// Seeds of the synthetic training frames; the held-out frame uses
/// [`HOLDOUT_IMAGE_SEED`].
pub const TRAIN_IMAGE_SEED: u64 = 100;
pub const HOLDOUT_IMAGE_SEED: u64 = 999;
/// Seed of the synthetic chroma training blocks.
pub const CHROMA_DATA_SEED: u64 = 1;

pub fn intra_model_name(n: usize) -> String {
    format!("intra_n{n}.lncm")
}

pub fn intra_ls_name(n: usize) -> String {
    format!("intra_ls_n{n}.lncm")
}

pub fn interp_model_name(pos: FractionalPosition) -> String {
    format!("interp_{}.lncm", pos.tag())
}

pub const CHROMA_MODEL: &str = "chroma.lncm";
pub const INTRA_SUMMARY: &str = "intra_summary.csv";

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    })
}

fn output_dir(cfg: &RunConfig, out: Option<&Path>) -> CliResult<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    Ok(formats::write_file(path, text.as_bytes())?)
}

fn log_csv(header: &str, values: &[f64]) -> String {
    let mut out = format!("{header}\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{},{v}", i + 1);
    }
    out
}

/// Training frames from the config's manifest, or synthetic ones.
fn training_frames(cfg: &RunConfig, default_count: usize, default_size: usize) -> CliResult<Vec<Plane>> {
    if let Some(m) = &cfg.images {
        return formats::read_manifest(m, 1)?
            .iter()
            .map(|p| Ok(formats::read_pgm_file(&p[0])?))
            .collect();
    }
    let count = cfg.synthetic_images.unwrap_or(default_count);
    let size = cfg.image_size.unwrap_or(default_size);
    if count == 0 || size < 32 {
        return Err(CliError::Usage("need at least one synthetic image of side 32 or more".into()));
    }
    (0..count as u64)
        .map(|i| Ok(natural_image(size, size, TRAIN_IMAGE_SEED + i)?))
        .collect()
}

/// Per-size results of `train-intra`, also written to `intra_summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraSummary {
    pub n: usize,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub fcn_holdout_mse: f64,
    pub collapsed_holdout_mse: f64,
    pub direct_holdout_mse: f64,
    pub collapsed_train_mse: f64,
    pub direct_train_mse: f64,
}

/// Writes `intra_n<n>.lncm` (the four-layer network), `intra_ls_n<n>.lncm`
/// (the ridge solution), `intra_n<n>_log.csv` and `intra_summary.csv`.
pub fn cmd_train_intra(config: Option<&Path>, out: Option<&Path>) -> CliResult<Vec<IntraSummary>> {
    let cfg = load_config(config)?;
    let dir = output_dir(&cfg, out)?;
    let frames = training_frames(&cfg, 4, 256)?;
    let bit_depth = frames[0].bit_depth();
    if frames.iter().any(|f| f.bit_depth() != bit_depth) {
        return Err(Error::Data("training frames mix bit depths".into()).into());
    }
    let d = FcnTrainConfig::default();
    let tc = FcnTrainConfig {
        hidden: cfg.hidden.unwrap_or(d.hidden),
        epochs: cfg.epochs.unwrap_or(d.epochs),
        lr: cfg.lr.unwrap_or(d.lr),
        batch_size: cfg.batch_size.unwrap_or(d.batch_size),
        seed: cfg.seed.unwrap_or(d.seed),
        bit_depth,
    };
    let lambda = cfg.lambda.unwrap_or(1e-6);
    let stride = cfg.stride.unwrap_or(4);
    let sizes = cfg.block_sizes.clone().unwrap_or(intra::BLOCK_SIZES.to_vec());
    let mut summary = Vec::new();
    for n in sizes {
        let data = harvest(&frames, n, stride)?;
        if data.train.is_empty() || data.holdout.is_empty() {
            return Err(Error::Data(format!("frames are too small to harvest {n}x{n} training and holdout blocks")).into());
        }
        let (net, log) = train_intra_fcn_logged(&data.train, n, &tc)?;
        let direct = train_intra_direct(&data.train, n, lambda)?;
        let collapsed = collapse_affine(&net)?;
        Model::Fcn(net.clone()).write(&dir.join(intra_model_name(n)))?;
        Model::Fcn(LinearFcn::from(direct.clone())).write(&dir.join(intra_ls_name(n)))?;
        write(&dir.join(format!("intra_n{n}_log.csv")), &log_csv("epoch,train_mse", &log))?;
        summary.push(IntraSummary {
            n,
            train_samples: data.train.len(),
            holdout_samples: data.holdout.len(),
            fcn_holdout_mse: dataset_mse(&net, &data.holdout)?,
            collapsed_holdout_mse: dataset_mse(&collapsed, &data.holdout)?,
            direct_holdout_mse: dataset_mse(&direct, &data.holdout)?,
            collapsed_train_mse: dataset_mse(&collapsed, &data.train)?,
            direct_train_mse: dataset_mse(&direct, &data.train)?,
        });
    }
    let mut csv = String::from(
        "n,train_samples,holdout_samples,fcn_holdout_mse,collapsed_holdout_mse,direct_holdout_mse,collapsed_train_mse,direct_train_mse\n",
    );
    for s in &summary {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            s.n,
            s.train_samples,
            s.holdout_samples,
            s.fcn_holdout_mse,
            s.collapsed_holdout_mse,
            s.direct_holdout_mse,
            s.collapsed_train_mse,
            s.direct_train_mse
        );
    }
    write(&dir.join(INTRA_SUMMARY), &csv)?;
    Ok(summary)
}

/// Writes `interp_<tag>.lncm` and `interp_<tag>_log.csv` for every
/// configured position.
pub fn cmd_train_interp(
    config: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<Vec<(FractionalPosition, SrcnnLinear)>> {
    let cfg = load_config(config)?;
    let dir = output_dir(&cfg, out)?;
    let frames = training_frames(&cfg, 8, 512)?;
    let scale = cfg.scale.unwrap_or(4);
    let d = InterpTrainConfig::default();
    let tc = InterpTrainConfig {
        epochs: cfg.epochs.unwrap_or(d.epochs),
        lr: cfg.lr.unwrap_or(d.lr),
        seed: cfg.seed.unwrap_or(d.seed),
    };
    let positions = cfg.positions.clone().unwrap_or_else(FractionalPosition::all);
    let mut models = Vec::with_capacity(positions.len());
    for pos in positions {
        let mut pairs = Vec::new();
        for f in &frames {
            pairs.extend(gen_training_pairs(f, pos, scale)?);
        }
        let (model, log) = train_interp_logged(&pairs, pos, &tc)?;
        Model::Conv(model.stack().clone()).write(&dir.join(interp_model_name(pos)))?;
        write(&dir.join(format!("interp_{}_log.csv", pos.tag())), &log_csv("step,train_mse", &log))?;
        models.push((pos, model));
    }
    Ok(models)
}

fn chroma_samples(cfg: &RunConfig) -> CliResult<Vec<ChromaSample>> {
    let Some(m) = &cfg.chroma_manifest else {
        return Ok(linear_chroma_samples(
            cfg.chroma_per_size.unwrap_or(200),
            CHROMA_DATA_SEED,
            &LinearChromaSpec::default(),
        )?);
    };
    let stride = cfg.stride.unwrap_or(4);
    let mut out = Vec::new();
    for triple in formats::read_manifest(m, 3)? {
        let [y, u, v] = [0, 1, 2].map(|i| formats::read_pgm_file(&triple[i]));
        let (y, u, v) = (y?, u?, v?);
        for n in chroma::BLOCK_SIZES {
            out.extend(chroma::extract_chroma_samples(&y, &u, &v, n, stride)?);
        }
    }
    Ok(out)
}

/// Writes `chroma.lncm` and `chroma_log.csv`.
pub fn cmd_train_chroma(config: Option<&Path>, out: Option<&Path>) -> CliResult<chroma::ChromaHybridModel> {
    let cfg = load_config(config)?;
    let dir = output_dir(&cfg, out)?;
    let samples = chroma_samples(&cfg)?;
    let d = ChromaTrainConfig::default();
    let tc = ChromaTrainConfig {
        epochs: cfg.epochs.unwrap_or(d.epochs),
        lr: cfg.lr.unwrap_or(d.lr),
        batch_size: cfg.batch_size.unwrap_or(d.batch_size),
        ae_steps: cfg.ae_steps.unwrap_or(d.ae_steps),
        ae_lr: cfg.ae_lr.unwrap_or(d.ae_lr),
        seed: cfg.seed.unwrap_or(d.seed),
    };
    let (model, log) = train_chroma_logged(&samples, &tc)?;
    Model::Chroma(Box::new(model.clone())).write(&dir.join(CHROMA_MODEL))?;
    let mut csv = log_csv("epoch,train_mse", &log.epoch_mse);
    let _ = writeln!(csv, "# autoencoder reconstruction mse {} (feature variance {})", log.ae_reconstruction_mse, log.feature_variance);
    write(&dir.join("chroma_log.csv"), &csv)?;
    Ok(model)
}

/// Collapse a model file; returns the complexity before and after.
/// `drop_bias` applies to convolutional models only.
pub fn cmd_collapse(model_in: &Path, model_out: &Path, drop_bias: bool) -> CliResult<(ComplexityReport, ComplexityReport)> {
    let (before, collapsed) = match Model::read(model_in)? {
        Model::Fcn(_) if drop_bias => {
            return Err(CliError::Usage("--drop-bias applies to convolutional models only".into()))
        }
        Model::Fcn(net) => (count_params(&net), Model::Fcn(LinearFcn::from(collapse_affine(&net)?))),
        Model::Conv(stack) => {
            let mut fused = collapse_conv(&stack)?;
            if drop_bias {
                fused = fused.without_bias();
            }
            (count_params(&stack), Model::Conv(ConvStack::new(vec![fused])?))
        }
        Model::Chroma(_) => {
            return Err(Error::Data(
                "chroma models are stored collapsed already; use `report` for their complexity".into(),
            )
            .into())
        }
    };
    let after = match &collapsed {
        Model::Fcn(net) => count_params(net),
        Model::Conv(stack) => count_params(stack),
        Model::Chroma(_) => unreachable!(),
    };
    collapsed.write(model_out)?;
    Ok((before, after))
}

/// Compare two models on random inputs. Convolutional models are probed
/// with `size x size` planes.
pub fn cmd_verify(model_a: &Path, model_b: &Path, trials: usize, tol: f64, size: usize) -> CliResult<EquivalenceReport> {
    if trials == 0 || tol.is_nan() || tol < 0.0 {
        return Err(CliError::Usage("trials must be positive and the tolerance non-negative".into()));
    }
    Ok(match (Model::read(model_a)?, Model::read(model_b)?) {
        (Model::Fcn(a), Model::Fcn(b)) => verify_equivalence(&a, &b, trials, tol)?,
        (Model::Conv(a), Model::Conv(b)) => {
            let pa = OnPlane { model: &a, width: size, height: size };
            let pb = OnPlane { model: &b, width: size, height: size };
            verify_equivalence(&pa, &pb, trials, tol)?
        }
        (a, b) => {
            return Err(Error::Data(format!("cannot compare a {} model with a {} model", a.kind(), b.kind())).into())
        }
    })
}

/// Read `interp_<tag>.lncm` for all fifteen positions from `models_dir`,
/// write the filter set and the per-tap CSV.
pub fn cmd_derive_filters(models_dir: &Path, out_file: &Path, taps_csv: &Path, normalize_dc: bool) -> CliResult<DerivationReport> {
    let mut models = Vec::with_capacity(15);
    for pos in FractionalPosition::all() {
        let path = models_dir.join(interp_model_name(pos));
        let Model::Conv(stack) = Model::read(&path)? else {
            return Err(Error::Data(format!("{} is not a convolutional model", path.display())).into());
        };
        models.push((pos, SrcnnLinear::new(stack)?));
    }
    let (set, report) = derive_filters(&models, normalize_dc)?;
    write(out_file, &filter_set_text(&set))?;
    write(taps_csv, &filter_taps_csv(&set))?;
    Ok(report)
}

fn intra_model(path: &Path) -> CliResult<(IntraModel, usize)> {
    let Model::Fcn(net) = Model::read(path)? else {
        return Err(Error::Data(format!("{} is not an affine model", path.display())).into());
    };
    let m = IntraModel::Fcn(net);
    let n = m.block_size()?;
    Ok((m, n))
}

/// The collapsed weights for one pixel on the reference grid, one CSV row per
/// grid row; block positions are left empty. A final `bias` line follows.
pub fn cmd_contrib_map(model: &Path, n: Option<usize>, pixel: usize) -> CliResult<String> {
    let (m, size) = intra_model(model)?;
    if let Some(n) = n {
        if n != size {
            return Err(CliError::Usage(format!("model predicts {size}x{size} blocks, not {n}x{n}")));
        }
    }
    let map = intra::contribution_map(&m.collapsed()?, size, pixel)?;
    let mut out = String::new();
    for row in map.grid() {
        let cells: Vec<String> = row.iter().map(|c| c.map_or(String::new(), |w| w.to_string())).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let _ = writeln!(out, "bias,{}", map.bias);
    Ok(out)
}

/// Predict the block at `(x, y)` and compare it with the frame's own block.
pub fn cmd_predict(model: &Path, frame: &Path, x: usize, y: usize, out: Option<&Path>) -> CliResult<(Plane, f64)> {
    let (m, n) = intra_model(model)?;
    let frame = formats::read_pgm_file(frame)?;
    let refs = extract_references(&frame, x, y, n)?;
    let pred = predict_block(&m, refs.as_slice(), n, frame.bit_depth())?.clipped();
    let orig = Plane::new(n, n, frame.bit_depth(), extract_block(&frame, x, y, n)?)?;
    let p = psnr(&orig, &pred, frame.bit_depth())?;
    if let Some(out) = out {
        formats::write_pgm_file(out, &pred)?;
    }
    Ok((pred, p))
}

pub fn cmd_bdrate(anchor: &Path, test: &Path, out: Option<&Path>) -> CliResult<BdResult> {
    let a = formats::parse_rd_csv(&formats::read_text(anchor)?)?;
    let t = formats::parse_rd_csv(&formats::read_text(test)?)?;
    let r = bd_rate(&a, &t)?;
    if let Some(out) = out {
        write(
            out,
            &format!("bd_rate_percent,psnr_low,psnr_high\n{},{},{}\n", r.bd_rate_percent, r.overlap.0, r.overlap.1),
        )?;
    }
    Ok(r)
}
