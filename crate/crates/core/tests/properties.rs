use ndarray::Array2;
use proptest::prelude::*;
use s2swtv_core::io::{read_grid, read_group, write_grid, write_manifest, GroupManifest};
use s2swtv_core::masking::{kept_fidelity, make_instance, masked_fidelity, sample_mask};
use s2swtv_core::metrics::{evaluate, psnr};
use s2swtv_core::network::{init_params, Architecture, ConvVariant, DenoiserParams};
use s2swtv_core::wtv::{horizontal_derivative, horizontal_derivative_adjoint, soft_threshold};
use s2swtv_core::{derive_stream, Gather, MaskMode, Purpose, RngStream};

fn grid(h: usize, w: usize) -> impl Strategy<Value = Array2<f32>> {
    proptest::collection::vec(-1e3f32..1e3, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn sized_grid() -> impl Strategy<Value = Array2<f32>> {
    (2usize..12, 2usize..12).prop_flat_map(|(h, w)| grid(h, w))
}

fn mode() -> impl Strategy<Value = MaskMode> {
    prop_oneof![Just(MaskMode::Trace), Just(MaskMode::Row), Just(MaskMode::Element)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_files_round_trip(data in sized_grid(), dt in proptest::option::of(1e-4f64..1.0)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        let g = Gather::new(data).unwrap().with_sampling(dt, None);
        write_grid(&g, &path).unwrap();
        let back = read_grid(&path).unwrap();
        prop_assert_eq!(back.data(), g.data());
        prop_assert_eq!(back.dt, dt);
    }

    #[test]
    fn group_preserves_order(n in 1usize..5, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut names = Vec::new();
        for k in 0..n {
            let g = Gather::new(Array2::from_elem((3, 4), (seed % 97) as f32 + k as f32)).unwrap();
            let name = format!("s{k}.bin");
            write_grid(&g, &dir.path().join(&name)).unwrap();
            names.push(name.into());
        }
        let manifest = dir.path().join("group.json");
        write_manifest(&GroupManifest { slices: names }, &manifest).unwrap();
        let group = read_group(&manifest).unwrap();
        prop_assert_eq!(group.len(), n);
        for (k, g) in group.iter().enumerate() {
            prop_assert_eq!(g.data()[(0, 0)], (seed % 97) as f32 + k as f32);
        }
    }

    #[test]
    fn masks_respect_their_mode(h in 2usize..20, w in 2usize..20, m in mode(), rate in 0.05f64..0.95, seed in any::<u64>()) {
        let mask = sample_mask(h, w, m, rate, RngStream::new(seed, 1)).unwrap();
        let d = mask.data();
        let hidden = mask.hidden_count();
        prop_assert!(hidden > 0 && hidden < h * w);
        match m {
            MaskMode::Trace => prop_assert!((0..w).all(|j| d.column(j).iter().all(|&v| v == d[(0, j)]))),
            MaskMode::Row => prop_assert!((0..h).all(|i| d.row(i).iter().all(|&v| v == d[(i, 0)]))),
            MaskMode::Element => {}
        }
        let again = sample_mask(h, w, m, rate, RngStream::new(seed, 1)).unwrap();
        prop_assert_eq!(again, mask);
    }

    #[test]
    fn instance_zeroes_hidden_entries(data in grid(6, 7), seed in any::<u64>()) {
        let y = Gather::new(data).unwrap();
        let mask = sample_mask(6, 7, MaskMode::Trace, 0.4, RngStream::new(seed, 1)).unwrap();
        let inst = make_instance(&y, &mask).unwrap();
        for ((i, j), &m) in mask.data().indexed_iter() {
            let expect = if m == 1 { y.data()[(i, j)] } else { 0.0 };
            prop_assert_eq!(inst.input.data()[(i, j)], expect);
        }
        let zero = Gather::<f32>::zeros(6, 7).unwrap();
        let total: f32 = y.data().iter().map(|v| v * v).sum();
        let split = masked_fidelity(&y, &zero, &mask).unwrap() + kept_fidelity(&y, &zero, &mask).unwrap();
        prop_assert!((split - total).abs() <= 1e-4 * total.max(1.0));
    }

    #[test]
    fn derivative_adjoint_identity(x in grid(5, 8), z in grid(5, 7)) {
        let x = x.mapv(f64::from);
        let z = z.mapv(f64::from);
        let lhs: f64 = (horizontal_derivative(x.view()).unwrap() * &z).sum();
        let rhs: f64 = (&x * &horizontal_derivative_adjoint(z.view())).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + lhs.abs()));
    }

    #[test]
    fn soft_threshold_is_a_shrinkage(y in -10.0f64..10.0, v in 0.0f64..5.0) {
        let s = soft_threshold(y, v);
        prop_assert!(s.abs() <= y.abs());
        prop_assert!(s == 0.0 || s.signum() == y.signum());
        prop_assert!((y - s).abs() <= v + 1e-12);
        if y.abs() > v {
            prop_assert!(((y - s).abs() - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn psnr_is_symmetric(a in grid(4, 4), b in grid(4, 4)) {
        let a = Gather::new(a).unwrap();
        let b = Gather::new(b).unwrap();
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn residual_completes_the_noisy_gather(n in grid(12, 12), d in grid(12, 12)) {
        let noisy = Gather::new(n.mapv(f64::from)).unwrap();
        let denoised = Gather::new(d.mapv(f64::from)).unwrap();
        let report = evaluate(&noisy, &denoised, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&report.ls));
        let back = &report.residual.data() + &denoised.data();
        prop_assert!(back.iter().zip(noisy.data()).all(|(a, b)| (a - b).abs() <= 1e-9));
    }
}

#[test]
fn checkpoint_survives_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    for conv in ConvVariant::ALL {
        let arch = Architecture {
            depth: 3,
            width: 6,
            conv,
            dropout: 0.3,
        };
        let p = init_params::<f32>(&arch, derive_stream(5, Purpose::Init, 0)).unwrap();
        let path = dir.path().join(format!("{conv}.bin"));
        p.save(&path).unwrap();
        let back = DenoiserParams::<f32>::load(&path).unwrap();
        assert_eq!(back, p);
    }
}
