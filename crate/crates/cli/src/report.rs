use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lincollapse::chroma::ChromaBaseline;
use lincollapse::collapse::{collapse_affine, collapse_conv, count_params, verify_equivalence, OnPlane};
use lincollapse::formats::{self, Model};
use lincollapse::interp::{derive_filters, position_mse, switchable_stats, FixedFilterBank, FractionalPosition, SrcnnLinear};
use lincollapse::intra::BLOCK_SIZES;
use lincollapse::synth::natural_image;
use lincollapse::Error;

use crate::commands::{interp_model_name, intra_model_name, CHROMA_MODEL, HOLDOUT_IMAGE_SEED, INTRA_SUMMARY};
use crate::CliResult;

const VERIFY_TOL: f64 = 1e-9;

/// Write `report.md` and `params.csv` into `workspace`, covering whatever
/// trained models are present there. Returns the report's path.
pub fn cmd_report(workspace: &Path, image: Option<&Path>) -> CliResult<PathBuf> {
    let mut md = String::from("# Collapse report\n\n");
    let mut params = String::from("model,before_params,after_params,before_macs_per_sample,after_macs_per_sample\n");
    let mut found = false;

    let intra: Vec<(usize, Model)> = BLOCK_SIZES
        .into_iter()
        .filter_map(|n| {
            let p = workspace.join(intra_model_name(n));
            p.exists().then(|| Model::read(&p).map(|m| (n, m)))
        })
        .collect::<Result<_, _>>()?;
    if !intra.is_empty() {
        found = true;
        md.push_str("## Intra prediction\n\n");
        md.push_str("| block | layers | params | collapsed params | MACs/sample | collapsed MACs/sample | max rel. error |\n");
        md.push_str("|---|---|---|---|---|---|---|\n");
        for (n, m) in &intra {
            let Model::Fcn(net) = m else {
                return Err(Error::Data(format!("{} is not an affine model", intra_model_name(*n))).into());
            };
            let collapsed = collapse_affine(net)?;
            let (b, a) = (count_params(net), count_params(&collapsed));
            let eq = verify_equivalence(net, &collapsed, 100, VERIFY_TOL)?;
            let _ = writeln!(
                md,
                "| {n}x{n} | {} | {} | {} | {} | {} | {:.2e} |",
                net.layers().len(),
                b.param_count,
                a.param_count,
                b.mac_count_per_output_sample,
                a.mac_count_per_output_sample,
                eq.max_rel_error
            );
            let _ = writeln!(
                params,
                "intra_n{n},{},{},{},{}",
                b.param_count, a.param_count, b.mac_count_per_output_sample, a.mac_count_per_output_sample
            );
        }
        let summary = workspace.join(INTRA_SUMMARY);
        if summary.exists() {
            md.push_str("\nHoldout and training MSE (from `intra_summary.csv`):\n\n");
            let text = formats::read_text(&summary)?;
            for (i, line) in text.lines().enumerate() {
                let _ = writeln!(md, "| {} |", line.replace(',', " | "));
                if i == 0 {
                    let _ = writeln!(md, "{}|", "|---".repeat(line.split(',').count()));
                }
            }
        }
        md.push('\n');
    }

    let mut interp = Vec::new();
    for pos in FractionalPosition::all() {
        let p = workspace.join(interp_model_name(pos));
        if p.exists() {
            let Model::Conv(stack) = Model::read(&p)? else {
                return Err(Error::Data(format!("{} is not a convolutional model", p.display())).into());
            };
            interp.push((pos, SrcnnLinear::new(stack)?));
        }
    }
    if !interp.is_empty() {
        found = true;
        md.push_str("## Interpolation\n\n");
        md.push_str("| position | params | fused params | MACs/sample | fused MACs/sample | max rel. error |\n");
        md.push_str("|---|---|---|---|---|---|\n");
        for (pos, m) in &interp {
            let fused = collapse_conv(m.stack())?;
            let (b, a) = (count_params(m.stack()), count_params(&fused));
            let eq = verify_equivalence(
                &OnPlane { model: m.stack(), width: 32, height: 32 },
                &OnPlane { model: &fused, width: 32, height: 32 },
                3,
                VERIFY_TOL,
            )?;
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {:.2e} |",
                pos.tag(),
                b.param_count,
                a.param_count,
                b.mac_count_per_output_sample,
                a.mac_count_per_output_sample,
                eq.max_rel_error
            );
            let _ = writeln!(
                params,
                "interp_{},{},{},{},{}",
                pos.tag(),
                b.param_count,
                a.param_count,
                b.mac_count_per_output_sample,
                a.mac_count_per_output_sample
            );
        }
        if interp.len() == 15 {
            let hr = match image {
                Some(p) => formats::read_pgm_file(p)?,
                None => natural_image(512, 512, HOLDOUT_IMAGE_SEED)?,
            };
            let (set, _) = derive_filters(&interp, false)?;
            let (bilinear, four_tap) = (FixedFilterBank::bilinear(), FixedFilterBank::four_tap());
            md.push_str("\nDerived filters on the held-out image (scale 4, 8x8 switching blocks):\n\n");
            md.push_str("| position | learned MSE | bilinear MSE | 4-tap MSE | learned chosen | mean SAD saved | dominance violations |\n");
            md.push_str("|---|---|---|---|---|---|---|\n");
            for pos in FractionalPosition::all() {
                let stats = switchable_stats(&hr, pos, 4, 8, &set, &bilinear)?;
                let _ = writeln!(
                    md,
                    "| {} | {:.3} | {:.3} | {:.3} | {:.1}% | {:.2} | {} |",
                    pos.tag(),
                    position_mse(&hr, pos, 4, set.get(pos))?,
                    position_mse(&hr, pos, 4, &bilinear.kernel(pos))?,
                    position_mse(&hr, pos, 4, &four_tap.kernel(pos))?,
                    100.0 * stats.learned_fraction(),
                    stats.mean_sad_reduction(),
                    stats.dominance_violations
                );
            }
        }
        md.push('\n');
    }

    let chroma = workspace.join(CHROMA_MODEL);
    if chroma.exists() {
        found = true;
        let Model::Chroma(m) = Model::read(&chroma)? else {
            return Err(Error::Data(format!("{} is not a chroma model", chroma.display())).into());
        };
        let ours = count_params(&*m);
        let baseline = ChromaBaseline::reference();
        let base = count_params(&baseline);
        let inference = m.inference_param_count();
        md.push_str("## Chroma prediction\n\n");
        md.push_str("| model | params |\n|---|---|\n");
        let _ = writeln!(md, "| baseline (three per-size networks) | {} |", base.param_count);
        let _ = writeln!(md, "| attention model, all weights | {} |", ours.param_count);
        let _ = writeln!(md, "| attention model, inference (no decoder) | {inference} |");
        let _ = writeln!(
            md,
            "\nInference parameters are {:.2}% of the baseline.\n",
            100.0 * inference as f64 / base.param_count as f64
        );
        let _ = writeln!(
            params,
            "chroma,{},{},{},{}",
            base.param_count, inference, base.mac_count_per_output_sample, ours.mac_count_per_output_sample
        );
    }

    if !found {
        return Err(Error::Data(format!("no trained models found in {}", workspace.display())).into());
    }
    let path = workspace.join("report.md");
    formats::write_file(&path, md.as_bytes())?;
    formats::write_file(&workspace.join("params.csv"), params.as_bytes())?;
    Ok(path)
}
