use lincollapse::chroma::attention_weights;
use lincollapse::collapse::{
    collapse_affine, collapse_conv, prune_taps, AffineMap, ConvStack, LinearFcn, PruneStrategy,
};
use lincollapse::formats::{read_pgm, write_pgm, Layer, ModelFile, RunConfig};
use lincollapse::metrics::{bd_rate, mse, psnr, RdCurve};
use lincollapse::tensor::{conv2d, Kernel, Matrix, Padding, Plane, Vector};
use proptest::prelude::*;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, n)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    values(rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn affine(out: usize, inp: usize) -> impl Strategy<Value = AffineMap> {
    (matrix(out, inp), values(out)).prop_map(|(w, b)| AffineMap::new(w, Vector::new(b).unwrap()).unwrap())
}

fn fcn() -> impl Strategy<Value = LinearFcn> {
    prop::collection::vec(1usize..9, 2..6).prop_flat_map(|dims| {
        let layers: Vec<_> = dims.windows(2).map(|w| affine(w[1], w[0])).collect();
        layers.prop_map(|l| LinearFcn::new(l).unwrap())
    })
}

fn kernel(o: usize, i: usize, k: usize) -> impl Strategy<Value = Kernel> {
    (values(o * i * k * k), prop::option::of(values(o)))
        .prop_map(move |(t, b)| Kernel::new(o, i, k, k, t, b).unwrap())
}

fn conv_stack() -> impl Strategy<Value = ConvStack> {
    (prop::collection::vec(1usize..4, 2..5), prop::collection::vec(prop::sample::select(vec![1usize, 3, 5]), 3))
        .prop_flat_map(|(chans, sizes)| {
            let mut chans = chans;
            chans[0] = 1;
            let layers: Vec<_> = chans.windows(2).enumerate().map(|(l, w)| kernel(w[1], w[0], sizes[l % 3])).collect();
            layers.prop_map(|l| ConvStack::new(l).unwrap())
        })
}

fn plane(side: usize) -> impl Strategy<Value = Plane> {
    prop::collection::vec(0.0f64..=255.0, side * side).prop_map(move |s| Plane::new(side, side, 8, s).unwrap())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #[test]
    fn matmul_is_associative((a, b, c) in (1usize..7, 1usize..7, 1usize..7, 1usize..7)
        .prop_flat_map(|(m, k, l, n)| (matrix(m, k), matrix(k, l), matrix(l, n))))
    {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(close(left.values(), right.values(), 1e-12));
    }

    #[test]
    fn matmul_distributes_over_addition((a, b, c) in (1usize..7, 1usize..7, 1usize..7)
        .prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n), matrix(k, n))))
    {
        let left = a.matmul(&b.add(&c).unwrap()).unwrap();
        let right = a.matmul(&b).unwrap().add(&a.matmul(&c).unwrap()).unwrap();
        prop_assert!(close(left.values(), right.values(), 1e-12));
    }

    #[test]
    fn collapsed_fcn_matches_sequential((net, x) in fcn().prop_flat_map(|n| {
        let d = n.input_dim();
        (Just(n), values(d))
    })) {
        let fused = collapse_affine(&net).unwrap();
        prop_assert!(close(&net.forward(&x).unwrap(), &fused.apply(&x).unwrap(), 1e-12));
    }

    #[test]
    fn collapsed_conv_matches_sequential(stack in conv_stack(), x in plane(14)) {
        let fused = collapse_conv(&stack).unwrap();
        prop_assert_eq!((fused.kh(), fused.kw()), stack.receptive_field());
        let seq = stack.forward(std::slice::from_ref(&x)).unwrap();
        let one = conv2d(std::slice::from_ref(&x), &fused, Padding::Valid).unwrap();
        prop_assert_eq!(seq.len(), one.len());
        for (s, o) in seq.iter().zip(&one) {
            prop_assert!(close(s.samples(), o.samples(), 1e-10));
        }
    }

    #[test]
    fn collapse_is_pure(net in fcn(), stack in conv_stack()) {
        let (n0, s0) = (net.clone(), stack.clone());
        let a = collapse_affine(&net).unwrap();
        let k = collapse_conv(&stack).unwrap();
        prop_assert_eq!(&net, &n0);
        prop_assert_eq!(&stack, &s0);
        prop_assert_eq!(a, collapse_affine(&net).unwrap());
        prop_assert_eq!(k, collapse_conv(&stack).unwrap());
    }

    #[test]
    fn zero_threshold_prune_is_identity(k in kernel(2, 2, 3), probe in plane(8)) {
        let (pruned, report) = prune_taps(&k, PruneStrategy::Threshold(0.0), &probe).unwrap();
        prop_assert_eq!(&pruned, &k);
        prop_assert_eq!(report.removed, 0);
        prop_assert_eq!(report.max_deviation, 0.0);
    }

    #[test]
    fn bd_rate_is_monotone_in_rate_scaling(
        base in 10.0f64..1e4,
        steps in prop::collection::vec((0.2f64..1.0, 0.5f64..3.0), 4..7),
        s1 in 0.5f64..2.0,
        s2 in 0.5f64..2.0,
    ) {
        let mut pts = Vec::new();
        let (mut r, mut p) = (base, 30.0);
        for (dr, dp) in steps {
            r *= 1.0 + dr;
            p += dp;
            pts.push((r, p));
        }
        let anchor = RdCurve::new(pts).unwrap();
        let b1 = bd_rate(&anchor, &anchor.scale_rates(s1).unwrap()).unwrap().bd_rate_percent;
        let b2 = bd_rate(&anchor, &anchor.scale_rates(s2).unwrap()).unwrap().bd_rate_percent;
        prop_assert!((b1 - (s1 - 1.0) * 100.0).abs() < 1e-6);
        if s1 < s2 - 1e-9 {
            prop_assert!(b1 < b2);
        }
    }

    #[test]
    fn psnr_is_symmetric_and_finite_for_distinct_planes(a in plane(6), b in plane(6)) {
        prop_assume!(a != b);
        let (p, q) = (psnr(&a, &b, 8).unwrap(), psnr(&b, &a, 8).unwrap());
        prop_assert_eq!(p, q);
        prop_assert!(p.is_finite());
        prop_assert!(mse(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn attention_rows_are_distributions(
        (q, k) in (1usize..12, 1usize..40).prop_flat_map(|(nq, nk)| (matrix(nq, 3), matrix(nk, 3))),
        scale in 0.01f64..200.0,
    ) {
        let scaled = |m: &Matrix| Matrix::new(m.rows(), m.cols(), m.values().iter().map(|v| v * scale).collect()).unwrap();
        let w = attention_weights(&scaled(&q), &scaled(&k), 3f64.sqrt()).unwrap();
        for r in 0..w.rows() {
            prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(w.row(r).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn model_file_round_trip(
        a in (1usize..5, 1usize..5).prop_flat_map(|(o, i)| affine(o, i)),
        k in (1usize..3, 1usize..3, 1usize..4).prop_flat_map(|(o, i, s)| kernel(o, i, s)),
        t in 0.01f64..10.0,
        scale in prop::sample::select(vec![1e-300, 1e-5, 1.0, 1e5, 1e300]),
    ) {
        let big = AffineMap::new(
            Matrix::new(a.output_dim(), a.input_dim(), a.weights().values().iter().map(|v| v * scale).collect()).unwrap(),
            a.bias().clone(),
        ).unwrap();
        let file = ModelFile { layers: vec![Layer::Affine(big), Layer::Conv(k), Layer::Attention { dim: 3, temperature: t }] };
        let text = file.to_text();
        let back = ModelFile::parse(&text).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn pgm_round_trip(samples in prop::collection::vec(0u16..=1023, 1..60), w in 1usize..8, ten in any::<bool>()) {
        let h = samples.len().div_ceil(w);
        let depth = if ten { 10 } else { 8 };
        let max = if ten { 1023 } else { 255 };
        let px: Vec<f64> = (0..w * h).map(|i| f64::from(samples.get(i).copied().unwrap_or(0) % (max + 1))).collect();
        let p = Plane::new(w, h, depth, px).unwrap();
        prop_assert_eq!(read_pgm(&write_pgm(&p)).unwrap(), p);
    }

    #[test]
    fn parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let text = String::from_utf8_lossy(&bytes);
        let _ = read_pgm(&bytes);
        let _ = ModelFile::parse(&text);
        let _ = RunConfig::parse(&text);
    }

    #[test]
    fn unknown_config_keys_are_rejected(key in "[a-z_]{1,12}") {
        let known = [
            "seed", "epochs", "lr", "batch_size", "hidden", "lambda", "block_sizes", "stride", "images",
            "synthetic_images", "image_size", "scale", "positions", "chroma_manifest", "chroma_per_size",
            "ae_steps", "ae_lr", "output",
        ];
        prop_assume!(!known.contains(&key.as_str()));
        let is_unknown_key = matches!(
            RunConfig::parse(&format!("{key} = 1\n")),
            Err(lincollapse::Error::Parse { line: 1, .. })
        );
        prop_assert!(is_unknown_key);
    }
}
