//! Acceptance gate: every release-blocking claim about the toolkit, checked
//! in one sequential run. Each criterion prints a single PASS/FAIL line; the
//! test fails if any criterion fails, but always executes all of them.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to watch the lines
//! appear as the criteria complete (the later ones train real models and
//! take several minutes each).

use ndarray::{Array3, Array4, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use tempfile::TempDir;
use unisyn::checkpoint::load_checkpoint;
use unisyn::conditioning::{
    curriculum_missing_count, sample_condition, AvailabilityCondition, CurriculumSchedule,
    MissingCountRule, UniformPolicy,
};
use unisyn::data::{generate_phantom_dataset, Dataset, PhantomSpec, Split};
use unisyn::decoder::{Decoder, DecoderConfig, GeneratorOutput};
use unisyn::discriminator::{DiscriminatorConfig, PatchDiscriminator};
use unisyn::encoder::{EncoderConfig, EncoderVariant};
use unisyn::fusion::{
    hard_integrate, soft_integrate, CombineOp, FusionConfig, FusionStrategy, ScaleFusion,
    UnifiedFeatureSet,
};
use unisyn::generator::Generator;
use unisyn::gradcheck::{
    analytic_param_grads, max_rel_error, max_rel_error_flat, numeric_input_grad,
    numeric_param_grads,
};
use unisyn::losses::{
    discriminator_loss, discriminator_score_grads, generator_adversarial_loss,
    generator_adversarial_score_grad, reconstruction_loss, reconstruction_loss_grad,
    synthesis_loss, synthesis_loss_grad, total_generator_loss, LossWeights,
};
use unisyn::metrics::{evaluate_matrix, psnr, ssim, MetricsReport, Psnr, SsimConstants};
use unisyn::nn::block::EncBlock;
use unisyn::nn::param::Parameterized;
use unisyn::optim::OptimizerKind;
use unisyn::training::{load_eval_subjects, lr_at_epoch, train, ExperimentConfig};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-7;

/// Quality floors for the headline four-modality run (criterion 10),
/// calibrated from an adversarial-free (lambda_adv = 0) pilot of the same
/// configuration on the same dataset: the weakest single-missing modality
/// scored 21.48 dB / 0.931 SSIM, and the floors sit 1 dB / 0.02 below that
/// to leave room for the adversarial term.
const C10_MIN_PSNR_DB: f64 = 20.48;
const C10_MIN_SSIM: f64 = 0.911;

fn seed(n: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(n)
}

fn randn4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(dim, |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

fn views(f: &[Array4<f64>]) -> Vec<ArrayView4<'_, f64>> {
    f.iter().map(|a| a.view()).collect()
}

fn dot(a: &ArrayView4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// A random condition with at least one available modality.
fn random_input_condition(rng: &mut ChaCha8Rng, m: usize) -> AvailabilityCondition {
    loop {
        let flags: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2u8)).collect();
        if flags.iter().any(|&f| f == 1) {
            return AvailabilityCondition::new(flags).unwrap();
        }
    }
}

/// A random condition with at least one available and one missing modality.
fn random_training_condition(rng: &mut ChaCha8Rng, m: usize) -> AvailabilityCondition {
    let all = AvailabilityCondition::all_valid(m);
    all[rng.gen_range(0..all.len())].clone()
}

// ---------------------------------------------------------------------------
// criterion 1: hard integration equals the brute-force element-wise maximum
// ---------------------------------------------------------------------------

fn c01_hard_fusion_matches_brute_force() {
    let mut rng = seed(101);
    for _ in 0..1000 {
        let m = rng.gen_range(2..=4);
        let ac = random_input_condition(&mut rng, m);
        let dim = (
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        let feats: Vec<Array4<f64>> = (0..m).map(|_| randn4(&mut rng, dim)).collect();
        let out = hard_integrate(&views(&feats), &ac).unwrap();
        let avail = ac.available_indices();
        for (idx, &v) in out.indexed_iter() {
            let expect = avail
                .iter()
                .map(|&i| feats[i][idx])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(v.to_bits(), expect.to_bits(), "mismatch at {idx:?}");
        }
    }
}

// ---------------------------------------------------------------------------
// criterion 2: masked modalities cannot influence the fused output
// ---------------------------------------------------------------------------

fn c02_masked_modalities_are_inert() {
    let mut rng = seed(102);
    let strategies = [FusionStrategy::Dfum, FusionStrategy::Max, FusionStrategy::Hemis];
    for draw in 0..200 {
        let strategy = strategies[draw % strategies.len()];
        let m = rng.gen_range(2..=4);
        let ac = random_training_condition(&mut rng, m);
        let cfg = FusionConfig {
            strategy,
            combine: CombineOp::Mean,
            normalize_soft: draw % 2 == 0,
            branch_width_div: 2,
        };
        let channels = rng.gen_range(1..=3);
        let fus = ScaleFusion::<f64>::new(&mut rng, m, channels, &cfg);
        let dim = (rng.gen_range(1..=2), channels, 4, 4);
        let base: Vec<Array4<f64>> = (0..m).map(|_| randn4(&mut rng, dim)).collect();
        // two different garbage fillings of the masked slots
        let mut a = base.clone();
        let mut b = base.clone();
        for i in ac.missing_indices() {
            a[i] = randn4(&mut rng, dim).mapv(|v| v * 1e6);
            b[i] = randn4(&mut rng, dim).mapv(|v| -v * 1e3 + 7.0);
        }
        let (out_a, _) = fus.forward(&views(&a), &ac).unwrap();
        let (out_b, _) = fus.forward(&views(&b), &ac).unwrap();
        for (x, y) in out_a.iter().zip(out_b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{strategy:?} leaked a masked input");
        }
    }
}

// ---------------------------------------------------------------------------
// criterion 3: single-modality degeneracy of the two fusion branches
// ---------------------------------------------------------------------------

fn c03_single_modality_degeneracy() {
    let mut rng = seed(103);
    let cfg = FusionConfig {
        strategy: FusionStrategy::Dfum,
        combine: CombineOp::Mean,
        normalize_soft: false,
        branch_width_div: 2,
    };
    for _ in 0..100 {
        let m = rng.gen_range(2..=4);
        let only = rng.gen_range(0..m);
        let mut flags = vec![0u8; m];
        flags[only] = 1;
        let ac = AvailabilityCondition::new(flags).unwrap();
        let channels = rng.gen_range(1..=3);
        let dim = (rng.gen_range(1..=2), channels, 4, 4);
        let feats: Vec<Array4<f64>> = (0..m).map(|_| randn4(&mut rng, dim)).collect();
        let fus = ScaleFusion::<f64>::new(&mut rng, m, channels, &cfg);

        // hard branch: identity on the lone available modality
        let hard = hard_integrate(&views(&feats), &ac).unwrap();
        for (x, y) in hard.iter().zip(feats[only].iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        // soft branch: exactly gate (*) features, gate strictly inside (0,1)
        let gates = fus.compute_attention(&views(&feats), &ac).unwrap();
        assert!(gates[only].iter().all(|&g| g > 0.0 && g < 1.0));
        for (i, g) in gates.iter().enumerate() {
            if i != only {
                assert!(g.iter().all(|&v| v == 0.0));
            }
        }
        let soft = soft_integrate(&views(&feats), &gates, &ac).unwrap();
        let (b, c, h, w) = dim;
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let expect = feats[only][[bi, ci, y, x]] * gates[only][[bi, 0, y, x]];
                        assert_eq!(soft[[bi, ci, y, x]].to_bits(), expect.to_bits());
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// criterion 4: finite-difference gradient checks at 64-bit precision
// ---------------------------------------------------------------------------

fn c04_gradient_checks() {
    // fusion parameters and inputs
    {
        let mut rng = seed(401);
        let cfg = FusionConfig {
            strategy: FusionStrategy::Dfum,
            combine: CombineOp::Mean,
            normalize_soft: false,
            branch_width_div: 2,
        };
        let ac = AvailabilityCondition::parse("110").unwrap();
        let mut fus = ScaleFusion::<f64>::new(&mut rng, 3, 2, &cfg);
        let feats: Vec<Array4<f64>> = (0..3).map(|_| randn4(&mut rng, (1, 2, 4, 4))).collect();
        let w = randn4(&mut rng, (1, 2, 4, 4));
        fus.zero_grads();
        let (_, cache) = fus.forward(&views(&feats), &ac).unwrap();
        let g_feats = fus.backward(&cache, &w.view()).unwrap();
        let analytic = analytic_param_grads(&mut fus);
        let numeric = numeric_param_grads(
            &mut fus,
            |f| dot(&f.forward(&views(&feats), &ac).unwrap().0.view(), &w),
            H,
        );
        assert!(max_rel_error(&analytic, &numeric, FLOOR) < TOL, "fusion params");
        for i in ac.available_indices() {
            let mut flat: Vec<f64> = feats[i].iter().cloned().collect();
            let dim = feats[i].dim();
            let num = numeric_input_grad(
                &mut flat,
                |v| {
                    let mut f2 = feats.clone();
                    f2[i] = Array4::from_shape_vec(dim, v.to_vec()).unwrap();
                    dot(&fus.forward(&views(&f2), &ac).unwrap().0.view(), &w)
                },
                H,
            );
            let ana: Vec<f64> = g_feats[i].iter().cloned().collect();
            assert!(max_rel_error_flat(&ana, &num, FLOOR) < TOL, "fusion input {i}");
        }
    }

    // the five loss terms, against their closed-form gradients
    {
        let mut rng = seed(402);
        let ac = AvailabilityCondition::parse("101").unwrap();
        let outputs = randn4(&mut rng, (2, 3, 4, 4));
        let targets = randn4(&mut rng, (2, 3, 4, 4));
        let dim = outputs.dim();

        let check_image_loss = |name: &str,
                                analytic: Array4<f64>,
                                loss: &dyn Fn(&Array4<f64>) -> f64| {
            let mut flat: Vec<f64> = outputs.iter().cloned().collect();
            let num = numeric_input_grad(
                &mut flat,
                |v| loss(&Array4::from_shape_vec(dim, v.to_vec()).unwrap()),
                H,
            );
            let ana: Vec<f64> = analytic.iter().cloned().collect();
            assert!(max_rel_error_flat(&ana, &num, FLOOR) < TOL, "{name}");
        };
        check_image_loss(
            "synthesis loss",
            synthesis_loss_grad(&outputs.view(), &targets.view(), &ac).unwrap(),
            &|o| synthesis_loss(&o.view(), &targets.view(), &ac).unwrap(),
        );
        check_image_loss(
            "reconstruction loss",
            reconstruction_loss_grad(&outputs.view(), &targets.view(), &ac).unwrap(),
            &|o| reconstruction_loss(&o.view(), &targets.view(), &ac).unwrap(),
        );
        let weights = LossWeights {
            lambda_syn: 0.7,
            lambda_rec: 0.3,
            lambda_adv: 0.2,
        };
        let syn_g = synthesis_loss_grad(&outputs.view(), &targets.view(), &ac).unwrap();
        let rec_g = reconstruction_loss_grad(&outputs.view(), &targets.view(), &ac).unwrap();
        check_image_loss(
            "total generator loss",
            syn_g.mapv(|v| v * weights.lambda_syn) + rec_g.mapv(|v| v * weights.lambda_rec),
            &|o| {
                total_generator_loss(
                    synthesis_loss(&o.view(), &targets.view(), &ac).unwrap(),
                    reconstruction_loss(&o.view(), &targets.view(), &ac).unwrap(),
                    0.125,
                    &weights,
                )
            },
        );

        // adversarial terms, w.r.t. the missing modality's score maps
        let sdim = (2, 1, 3, 3);
        let fake: Vec<Array4<f64>> = (0..3).map(|_| randn4(&mut rng, sdim)).collect();
        let real: Vec<Array4<f64>> = (0..3).map(|_| randn4(&mut rng, sdim)).collect();
        let miss = 1;
        let ana_gen: Vec<f64> = generator_adversarial_score_grad(&fake[miss].view())
            .iter()
            .cloned()
            .collect();
        let mut flat: Vec<f64> = fake[miss].iter().cloned().collect();
        let num_gen = numeric_input_grad(
            &mut flat,
            |v| {
                let mut f2 = fake.clone();
                f2[miss] = Array4::from_shape_vec(sdim, v.to_vec()).unwrap();
                generator_adversarial_loss(&f2, &real, &ac).unwrap()
            },
            H,
        );
        assert!(max_rel_error_flat(&ana_gen, &num_gen, FLOOR) < TOL, "adversarial loss");

        let (gf, gr) = discriminator_score_grads(&fake[miss].view(), &real[miss].view());
        let ana_f: Vec<f64> = gf.iter().cloned().collect();
        let mut flat: Vec<f64> = fake[miss].iter().cloned().collect();
        let num_f = numeric_input_grad(
            &mut flat,
            |v| {
                let mut f2 = fake.clone();
                f2[miss] = Array4::from_shape_vec(sdim, v.to_vec()).unwrap();
                discriminator_loss(&f2, &real, &ac).unwrap()
            },
            H,
        );
        assert!(max_rel_error_flat(&ana_f, &num_f, FLOOR) < TOL, "discriminator fake");
        let ana_r: Vec<f64> = gr.iter().cloned().collect();
        let mut flat: Vec<f64> = real[miss].iter().cloned().collect();
        let num_r = numeric_input_grad(
            &mut flat,
            |v| {
                let mut r2 = real.clone();
                r2[miss] = Array4::from_shape_vec(sdim, v.to_vec()).unwrap();
                discriminator_loss(&fake, &r2, &ac).unwrap()
            },
            H,
        );
        assert!(max_rel_error_flat(&ana_r, &num_r, FLOOR) < TOL, "discriminator real");
    }

    // one encoder block
    {
        let mut rng = seed(403);
        let mut block = EncBlock::<f64>::new(&mut rng, 2, 3, true);
        let x = randn4(&mut rng, (1, 2, 6, 6));
        let w = randn4(&mut rng, (1, 3, 3, 3));
        block.zero_grads();
        let (_, cache) = block.forward(&x.view()).unwrap();
        block.backward(&cache, &w.view()).unwrap();
        let analytic = analytic_param_grads(&mut block);
        let numeric = numeric_param_grads(
            &mut block,
            |b| dot(&b.forward(&x.view()).unwrap().0.view(), &w),
            H,
        );
        assert!(max_rel_error(&analytic, &numeric, FLOOR) < TOL, "encoder block");
    }

    // one decoder
    {
        let mut rng = seed(404);
        let widths = vec![2, 3];
        let cfg = DecoderConfig { out_clamp: None };
        let mut dec = Decoder::<f64>::new(&mut rng, 2, &widths, &cfg);
        let maps = vec![randn4(&mut rng, (1, 2, 4, 4)), randn4(&mut rng, (1, 3, 2, 2))];
        let w = randn4(&mut rng, (1, 2, 4, 4));
        dec.zero_grads();
        let (_, cache) = dec.forward(&UnifiedFeatureSet { maps: maps.clone() }).unwrap();
        dec.backward(&cache, &w.view()).unwrap();
        let analytic = analytic_param_grads(&mut dec);
        let numeric = numeric_param_grads(
            &mut dec,
            |d| {
                let u = UnifiedFeatureSet { maps: maps.clone() };
                let out: GeneratorOutput<f64> = d.forward(&u).unwrap().0;
                dot(&out.images.view(), &w)
            },
            H,
        );
        assert!(max_rel_error(&analytic, &numeric, FLOOR) < TOL, "decoder");
    }

    // one discriminator
    {
        let mut rng = seed(405);
        let cfg = DiscriminatorConfig { widths: vec![2, 3] };
        let mut disc = PatchDiscriminator::<f64>::new(&mut rng, &cfg);
        let x = randn4(&mut rng, (1, 1, 8, 8));
        let (score, cache) = disc.forward(&x.view()).unwrap();
        let w = randn4(&mut rng, score.dim());
        disc.zero_grads();
        disc.backward(&cache, &w.view()).unwrap();
        let analytic = analytic_param_grads(&mut disc);
        let numeric = numeric_param_grads(
            &mut disc,
            |d| dot(&d.forward(&x.view()).unwrap().0.view(), &w),
            H,
        );
        assert!(max_rel_error(&analytic, &numeric, FLOOR) < TOL, "discriminator");
    }
}

// ---------------------------------------------------------------------------
// criterion 5: exact complementarity of the masked L1 terms, and the worked
// weighted-total example
// ---------------------------------------------------------------------------

fn c05_masked_loss_complementarity() {
    let mut rng = seed(105);
    // Dyadic values on power-of-two pixel counts keep every intermediate sum
    // exactly representable, so the partition identity must hold bit for bit.
    let dyadic = |rng: &mut ChaCha8Rng| rng.gen_range(-32i32..=32) as f64 / 16.0;
    for _ in 0..500 {
        let m = rng.gen_range(2..=4);
        let ac = random_training_condition(&mut rng, m);
        let dim = (2, m, 4, 4);
        let outputs = Array4::from_shape_fn(dim, |_| dyadic(&mut rng));
        let targets = Array4::from_shape_fn(dim, |_| dyadic(&mut rng));
        let syn = synthesis_loss(&outputs.view(), &targets.view(), &ac).unwrap();
        let rec = reconstruction_loss(&outputs.view(), &targets.view(), &ac).unwrap();
        let none = AvailabilityCondition::new(vec![0; m]).unwrap();
        let full_syn = synthesis_loss(&outputs.view(), &targets.view(), &none).unwrap();
        let full_rec = reconstruction_loss(
            &outputs.view(),
            &targets.view(),
            &AvailabilityCondition::all_available(m),
        )
        .unwrap();
        assert_eq!((syn + rec).to_bits(), full_syn.to_bits());
        assert_eq!(full_syn.to_bits(), full_rec.to_bits());
    }

    let w = LossWeights {
        lambda_syn: 100.0,
        lambda_rec: 30.0,
        lambda_adv: 1.0,
    };
    let total = total_generator_loss(0.1f64, 0.2, 0.5, &w);
    assert!((total - 16.5).abs() < 1e-12, "worked example gave {total}");
}

// ---------------------------------------------------------------------------
// criterion 6: curriculum difficulty over a 40-epoch dry run
// ---------------------------------------------------------------------------

fn c06_curriculum_dry_run() {
    let mut rng = seed(106);
    let schedule = CurriculumSchedule::default();
    let m = 4;
    let mut late_counts = std::collections::BTreeSet::new();
    for epoch in 0..40 {
        let rule = curriculum_missing_count(epoch, &schedule, m, UniformPolicy::CountsFirst);
        for _ in 0..50 {
            let ac = sample_condition(&mut rng, rule, m).unwrap();
            let k = ac.missing_count();
            match epoch {
                0..=9 => assert_eq!(k, 1, "epoch {epoch}"),
                10..=19 => assert_eq!(k, 2, "epoch {epoch}"),
                20..=29 => assert_eq!(k, 3, "epoch {epoch}"),
                _ => {
                    assert!(matches!(rule, MissingCountRule::Uniform(_)));
                    assert!((1..=3).contains(&k), "epoch {epoch}");
                    late_counts.insert(k);
                }
            }
        }
    }
    assert_eq!(late_counts.into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
}

// ---------------------------------------------------------------------------
// criterion 7: the learning-rate schedule at its three landmark epochs
// ---------------------------------------------------------------------------

fn c07_lr_schedule_landmarks() {
    let cfg = ExperimentConfig::default();
    assert!((lr_at_epoch(10, &cfg).unwrap() - 2e-4).abs() < 1e-12);
    assert!((lr_at_epoch(125, &cfg).unwrap() - 1e-4).abs() < 1e-12);
    assert!((lr_at_epoch(199, &cfg).unwrap() - 2e-4 / 150.0).abs() < 1e-12);
}

// ---------------------------------------------------------------------------
// criterion 8: PSNR and SSIM against an independent direct-formula oracle
// ---------------------------------------------------------------------------

fn c08_metric_oracle() {
    let mut rng = seed(108);
    let k = SsimConstants::from_range(1.0).unwrap();
    for _ in 0..100 {
        let n = rng.gen_range(16..200);
        let e: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) + 0.5)
            .collect();
        let r: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) + 0.5)
            .collect();

        // oracle PSNR, written out directly
        let nf = n as f64;
        let mse: f64 = e.iter().zip(&r).map(|(&a, &b)| (a - b).powi(2)).sum::<f64>() / nf;
        let peak = e.iter().chain(&r).cloned().fold(f64::NEG_INFINITY, f64::max);
        let want_psnr = 10.0 * (peak * peak / mse).log10();
        let got = match psnr(&e, &r).unwrap() {
            Psnr::Db(v) => v,
            Psnr::Infinite => panic!("finite pair scored as infinite"),
        };
        assert!(((got - want_psnr) / want_psnr).abs() < 1e-9, "psnr {got} vs {want_psnr}");

        // oracle SSIM, written out directly
        let mu_e = e.iter().sum::<f64>() / nf;
        let mu_r = r.iter().sum::<f64>() / nf;
        let var_e = e.iter().map(|&v| (v - mu_e).powi(2)).sum::<f64>() / nf;
        let var_r = r.iter().map(|&v| (v - mu_r).powi(2)).sum::<f64>() / nf;
        let cov = e
            .iter()
            .zip(&r)
            .map(|(&a, &b)| (a - mu_e) * (b - mu_r))
            .sum::<f64>()
            / nf;
        let want_ssim = ((2.0 * mu_e * mu_r + k.c1) * (2.0 * cov + k.c2))
            / ((mu_e * mu_e + mu_r * mu_r + k.c1) * (var_e + var_r + k.c2));
        let got = ssim(&e, &r, &k).unwrap();
        assert!(((got - want_ssim) / want_ssim).abs() < 1e-9, "ssim {got} vs {want_ssim}");
    }

    // constant pairs with known closed forms
    let e = vec![1.0; 64];
    let r = vec![0.5; 64];
    let got = psnr(&e, &r).unwrap().db().unwrap();
    assert!((got - 6.0206).abs() < 1e-4, "constant-pair psnr {got}");
    let r = vec![0.0; 64];
    let got = ssim(&e, &r, &k).unwrap();
    let want = k.c1 / (1.0 + k.c1);
    assert!((got - want).abs() < 1e-7, "constant-pair ssim {got}");
    assert!((want - 9.999e-5).abs() < 1e-7);
}

// ---------------------------------------------------------------------------
// criterion 9: the evaluation matrix covers every valid configuration
// ---------------------------------------------------------------------------

fn c09_evaluation_matrix_coverage() {
    for (m, expected) in [(4usize, 14usize), (3, 6)] {
        let mut rng = seed(109 + m as u64);
        let enc = EncoderConfig {
            variant: EncoderVariant::Cds,
            widths: vec![2, 3],
            shared_scales: 1,
        };
        let gen = Generator::<f32>::new(
            &mut rng,
            m,
            &enc,
            &FusionConfig::default(),
            &DecoderConfig::default(),
        )
        .unwrap();
        let subjects: Vec<Vec<Array3<f32>>> = (0..2)
            .map(|_| {
                (0..2)
                    .map(|_| Array3::from_shape_fn((m, 4, 4), |_| rng.gen_range(0.0f32..1.0)))
                    .collect()
            })
            .collect();
        let names: Vec<String> = (0..m).map(|i| format!("m{}", i + 1)).collect();
        let report = evaluate_matrix(
            &gen,
            &subjects,
            &names,
            &SsimConstants::from_range(1.0).unwrap(),
            "ck",
            "ds",
        )
        .unwrap();
        assert_eq!(report.rows.len(), expected, "M={m}");
        let distinct: std::collections::BTreeSet<&str> =
            report.rows.iter().map(|r| r.ac.as_str()).collect();
        assert_eq!(distinct.len(), expected, "M={m}");
        // populated cells sit exactly on the missing modalities
        for row in &report.rows {
            let ac = AvailabilityCondition::parse(&row.ac).unwrap();
            for (i, cell) in row.cells.iter().enumerate() {
                assert_eq!(cell.is_some(), !ac.is_available(i));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// criteria 10-12: trained-model quality at desk scale
// ---------------------------------------------------------------------------

fn write_phantoms(root: &Path, spec: &PhantomSpec, n_train: usize, n_test: usize, seed: u64) {
    let vols = generate_phantom_dataset(seed, spec, n_train + n_test).unwrap();
    let mut splits = vec![Split::Train; n_train];
    splits.extend(vec![Split::Test; n_test]);
    Dataset::write(root, &vols, &splits).unwrap();
}

/// Mean PSNR / SSIM over every populated cell, optionally restricted to rows
/// with a given number of available modalities.
fn report_means(report: &MetricsReport, available: Option<usize>) -> (f64, f64) {
    let (mut psnr_sum, mut ssim_sum, mut n) = (0.0, 0.0, 0usize);
    for row in &report.rows {
        let ac = AvailabilityCondition::parse(&row.ac).unwrap();
        if let Some(k) = available {
            if ac.available_count() != k {
                continue;
            }
        }
        for cell in row.cells.iter().flatten() {
            psnr_sum += cell.psnr_mean;
            ssim_sum += cell.ssim_mean;
            n += 1;
        }
    }
    (psnr_sum / n as f64, ssim_sum / n as f64)
}

fn evaluate_run(cfg: &ExperimentConfig, checkpoint: &Path) -> MetricsReport {
    let state = load_checkpoint::<f32>(checkpoint).unwrap();
    let subjects = load_eval_subjects(cfg, Split::Test).unwrap();
    let range = cfg.decoder.out_clamp.unwrap_or(1.0);
    evaluate_matrix(
        &state.generator,
        &subjects,
        &cfg.modality_names,
        &SsimConstants::from_range(range).unwrap(),
        "acceptance",
        cfg.dataset_dir.to_string_lossy().as_ref(),
    )
    .unwrap()
}

fn c10_headline_training_run(dir: &Path) {
    let ds = dir.join("c10_ds");
    write_phantoms(&ds, &PhantomSpec::default(), 50, 10, 11);
    let mut cfg = ExperimentConfig::default();
    cfg.image_size = 64;
    cfg.n_slices = 4;
    cfg.encoder.widths = vec![8, 16, 32, 32, 32];
    cfg.encoder.shared_scales = 2;
    cfg.discriminator.widths = vec![8, 16, 32];
    cfg.optimizer = OptimizerKind::adam();
    cfg.learning_rate = 2e-4;
    cfg.epochs = 30;
    cfg.decay_start_epoch = 30;
    cfg.batch_size = 16;
    cfg.checkpoint_every = 30;
    cfg.seed = 17;
    cfg.dataset_dir = ds;
    cfg.run_dir = dir.join("c10_run");
    let out = train::<f32>(cfg.clone(), None).unwrap();
    let report = evaluate_run(&cfg, &out.final_checkpoint);

    // every modality, synthesized from the other three, clears the floors
    for row in &report.rows {
        let ac = AvailabilityCondition::parse(&row.ac).unwrap();
        if ac.available_count() != 3 {
            continue;
        }
        for (i, cell) in row.cells.iter().enumerate() {
            let Some(cell) = cell else { continue };
            assert!(
                cell.psnr_mean >= C10_MIN_PSNR_DB,
                "modality {i} from {}: {:.2} dB < {C10_MIN_PSNR_DB}",
                row.ac,
                cell.psnr_mean
            );
            assert!(
                cell.ssim_mean >= C10_MIN_SSIM,
                "modality {i} from {}: SSIM {:.4} < {C10_MIN_SSIM}",
                row.ac,
                cell.ssim_mean
            );
        }
    }
}

/// Shared material for criteria 11 and 12: three encoder/fusion variants,
/// each trained with three seeds on one small four-modality dataset.
struct AblationRuns {
    /// reports[variant][seed]
    reports: Vec<Vec<MetricsReport>>,
}

const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

fn run_ablations(dir: &Path) -> AblationRuns {
    let ds = dir.join("ablate_ds");
    let spec = PhantomSpec {
        depth: 8,
        height: 32,
        width: 32,
        ..PhantomSpec::default()
    };
    write_phantoms(&ds, &spec, 30, 10, 77);
    let variants = [
        (EncoderVariant::Cds, FusionStrategy::Dfum),
        (EncoderVariant::Cds, FusionStrategy::Max),
        (EncoderVariant::C, FusionStrategy::Dfum),
    ];
    let mut reports = Vec::new();
    for (vi, &(enc, fus)) in variants.iter().enumerate() {
        let mut per_seed = Vec::new();
        for &seed in &ABLATION_SEEDS {
            let mut cfg = ExperimentConfig::default();
            cfg.image_size = 32;
            cfg.n_slices = 2;
            cfg.encoder.variant = enc;
            cfg.encoder.widths = vec![8, 16, 32];
            cfg.encoder.shared_scales = 1;
            cfg.fusion.strategy = fus;
            cfg.optimizer = OptimizerKind::adam();
            cfg.loss_weights.lambda_adv = 0.0;
            cfg.train_discriminator = false;
            cfg.curriculum.phase_lengths = [3, 3, 3];
            cfg.learning_rate = 1e-3;
            cfg.epochs = 60;
            cfg.decay_start_epoch = 40;
            cfg.batch_size = 8;
            cfg.checkpoint_every = 60;
            cfg.seed = seed;
            cfg.dataset_dir = ds.clone();
            cfg.run_dir = dir.join(format!("ablate_v{vi}_s{seed}"));
            let out = train::<f32>(cfg.clone(), None).unwrap();
            per_seed.push(evaluate_run(&cfg, &out.final_checkpoint));
        }
        reports.push(per_seed);
    }
    AblationRuns { reports }
}

fn c11_more_inputs_help(runs: &AblationRuns) {
    // the reference variant: deepest-sharing encoder with the full fusion
    let mut gaps = Vec::new();
    for report in &runs.reports[0] {
        let (rich, _) = report_means(report, Some(3));
        let (poor, _) = report_means(report, Some(1));
        gaps.push(rich - poor);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(
        mean_gap >= 0.3,
        "three-input PSNR advantage {mean_gap:.3} dB < 0.3 dB (per seed: {gaps:?})"
    );
}

fn c12_ablations_rank_correctly(runs: &AblationRuns) {
    let mean_psnr = |per_seed: &[MetricsReport]| {
        per_seed.iter().map(|r| report_means(r, None).0).sum::<f64>() / per_seed.len() as f64
    };
    let full = mean_psnr(&runs.reports[0]);
    let max_only = mean_psnr(&runs.reports[1]);
    let common_only = mean_psnr(&runs.reports[2]);
    assert!(
        full >= max_only,
        "gated fusion {full:.3} dB below plain max fusion {max_only:.3} dB"
    );
    assert!(
        full >= common_only,
        "split encoder {full:.3} dB below common-only encoder {common_only:.3} dB"
    );
}

// ---------------------------------------------------------------------------
// criterion 13: bit-level reproducibility of a whole training run
// ---------------------------------------------------------------------------

fn c13_training_is_reproducible(dir: &Path) {
    let ds = dir.join("c13_ds");
    let spec = PhantomSpec {
        modality_names: vec!["a".into(), "b".into(), "c".into()],
        depth: 6,
        height: 24,
        width: 24,
        blob_count: (1, 2),
        contrast: vec![
            [0.0, 1.0, 0.4, 1.8],
            [0.0, 0.7, 1.6, 2.2],
            [0.0, 1.2, 0.8, 0.5],
        ],
        noise_std: 0.02,
    };
    write_phantoms(&ds, &spec, 4, 0, 11);
    let run = |run_dir: &Path| {
        let mut cfg = ExperimentConfig::default();
        cfg.modality_names = vec!["a".into(), "b".into(), "c".into()];
        cfg.image_size = 16;
        cfg.n_slices = 2;
        cfg.encoder.widths = vec![4, 8];
        cfg.encoder.shared_scales = 1;
        cfg.discriminator.widths = vec![4, 8];
        cfg.curriculum.phase_lengths = [1, 1, 1];
        cfg.learning_rate = 1e-3;
        cfg.epochs = 2;
        cfg.decay_start_epoch = 2;
        cfg.batch_size = 4;
        cfg.checkpoint_every = 2;
        cfg.seed = 7;
        cfg.dataset_dir = ds.clone();
        cfg.run_dir = run_dir.to_path_buf();
        let out = train::<f32>(cfg, None).unwrap();
        (
            std::fs::read(&out.log_path).unwrap(),
            std::fs::read(&out.final_checkpoint).unwrap(),
        )
    };
    // the same master seed must reproduce the run bit for bit, so both runs
    // use the same run directory (the checkpoint embeds its configuration)
    let run_dir = dir.join("c13_run");
    let (log_a, ckpt_a) = run(&run_dir);
    std::fs::remove_dir_all(&run_dir).unwrap();
    let (log_b, ckpt_b) = run(&run_dir);
    assert_eq!(log_a, log_b, "loss logs differ between identical runs");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ between identical runs");
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let dir = TempDir::new().unwrap();
    let mut failures: Vec<usize> = Vec::new();
    let mut check = |n: usize, name: &str, body: &dyn Fn()| {
        let start = std::time::Instant::now();
        let ok = catch_unwind(AssertUnwindSafe(body)).is_ok();
        let status = if ok { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:2}: {status}  {name}  ({:.1}s)",
            start.elapsed().as_secs_f64()
        );
        if !ok {
            failures.push(n);
        }
    };

    check(1, "hard fusion equals the brute-force maximum", &c01_hard_fusion_matches_brute_force);
    check(2, "masked modalities cannot influence fusion", &c02_masked_modalities_are_inert);
    check(3, "single-modality degeneracy of both branches", &c03_single_modality_degeneracy);
    check(4, "finite-difference gradient checks", &c04_gradient_checks);
    check(5, "masked-loss complementarity and worked total", &c05_masked_loss_complementarity);
    check(6, "curriculum difficulty over a 40-epoch dry run", &c06_curriculum_dry_run);
    check(7, "learning-rate schedule landmarks", &c07_lr_schedule_landmarks);
    check(8, "PSNR/SSIM against a direct-formula oracle", &c08_metric_oracle);
    check(9, "evaluation matrix configuration coverage", &c09_evaluation_matrix_coverage);
    check(10, "headline four-modality training quality", &|| {
        c10_headline_training_run(dir.path())
    });

    let ablations = catch_unwind(AssertUnwindSafe(|| run_ablations(dir.path()))).ok();
    check(11, "more available inputs give better synthesis", &|| {
        c11_more_inputs_help(ablations.as_ref().expect("ablation training failed"))
    });
    check(12, "fusion and encoder ablations rank correctly", &|| {
        c12_ablations_rank_correctly(ablations.as_ref().expect("ablation training failed"))
    });
    check(13, "bit-level reproducibility of training", &|| {
        c13_training_is_reproducible(dir.path())
    });

    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
