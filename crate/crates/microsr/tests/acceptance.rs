//! Acceptance suite: one test per release criterion, each printing a
//! PASS line (visible with `--nocapture`). Criteria run serialized so the
//! timed ones are not skewed by parallel load.

use std::sync::Mutex;
use std::time::Instant;

use microsr::dataset::{build_dataset, load_source_dir, AugmentOptions, DatasetSpec, Split};
use microsr::degradation::{
    calibrate, convolve_reflect, degrade, denoise, gaussian_kernel, DegradationParams,
};
use microsr::fixtures;
use microsr::inference::{
    benchmark_inference, nearest_neighbor_upscale, plan_tiles, super_resolve,
    super_resolve_detailed, GeneratorBackend, NearestNeighborBackend, TileBackend, TileSettings,
};
use microsr::losses::{adv_loss_g, d_loss, LossWeights};
use microsr::metrics::{evaluate, psnr, ssim, SsimConfig};
use microsr::network::{
    Discriminator, DiscriminatorConfig, FeatureConfig, FeatureNet, Generator, GeneratorConfig,
    Mode, Tensor4,
};
use microsr::raster::Image;
use microsr::rng::SeededRng;
use microsr::training::{
    discriminator_loss_and_grads, generator_loss_and_grads, train, TrainConfig, TrainSetup,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|poison| poison.into_inner())
}

fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = SeededRng::new(seed);
    Image::new(h, w, 1, (0..h * w).map(|_| rng.uniform() as f32).collect()).unwrap()
}

fn max_abs_diff(a: &Image, b: &Image) -> f32 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

// --- criterion 1 -----------------------------------------------------------

#[test]
fn criterion_1_calibration_round_trip() {
    let _guard = serial();
    let start = Instant::now();

    let hr = fixtures::blob_specimen(40, 512);
    let sigma_grid: Vec<f64> = (0..9).map(|i| 1.0 + 0.25 * i as f64).collect();
    let var_grid = [5e-5, 1e-4, 2e-4, 4e-4, 8e-4];
    // 3x3 grid of planted truths, all interior to the search grids.
    for &t_sigma in &[1.5, 2.0, 2.5] {
        for &t_var in &[1e-4, 2e-4, 4e-4] {
            let truth = DegradationParams::new(t_sigma, t_var, 4).unwrap();
            let lr = degrade(&hr, &truth, &mut SeededRng::new(7)).unwrap();
            let report = calibrate(&hr, &lr, &sigma_grid, &var_grid).unwrap();
            assert_eq!(
                report.best_sigma, t_sigma,
                "sigma recovery failed for truth ({t_sigma}, {t_var:e})"
            );
            assert_eq!(
                report.best_variance, t_var,
                "variance grid pick failed for truth ({t_sigma}, {t_var:e})"
            );
            let rel = (report.residual_variance - t_var).abs() / t_var;
            assert!(
                rel < 0.10,
                "stage-2 estimate off by {:.1}% for truth ({t_sigma}, {t_var:e})",
                rel * 100.0
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "calibration round trip took {elapsed:?} (budget 2 min)"
    );
    println!(
        "criterion 1 (degradation round trip, 9 truth combinations on the 512^2 fixture): PASS in {elapsed:?}"
    );
}

// --- criterion 2 -----------------------------------------------------------

fn naive_convolve(img: &Image, kernel: &microsr::degradation::Kernel) -> Image {
    let (h, w) = (img.height(), img.width());
    let r = kernel.radius() as isize;
    let size = kernel.size();
    Image::from_fn(h, w, |y, x| {
        let mut acc = 0.0f64;
        for ky in 0..size {
            for kx in 0..size {
                let wk = kernel.weights()[ky * size + kx];
                acc += wk
                    * img.get_reflect(y as isize + ky as isize - r, x as isize + kx as isize - r, 0)
                        as f64;
            }
        }
        acc as f32
    })
    .unwrap()
}

fn naive_median(img: &Image, window: usize) -> Image {
    let r = (window / 2) as isize;
    Image::from_fn(img.height(), img.width(), |y, x| {
        let mut vals = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                vals.push(img.get_reflect(y as isize + dy, x as isize + dx, 0));
            }
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        vals[vals.len() / 2]
    })
    .unwrap()
}

fn naive_ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> f64 {
    let win = 8;
    let (h, w) = (a.height(), a.width());
    let n = (win * win) as f64;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=(h - win) {
        for x in 0..=(w - win) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    ma += a.get(y + dy, x + dx, 0) as f64;
                    mb += b.get(y + dy, x + dx, 0) as f64;
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let da = a.get(y + dy, x + dx, 0) as f64 - ma;
                    let db = b.get(y + dy, x + dx, 0) as f64 - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov / n + c2))
                / ((ma * ma + mb * mb + c1) * (va / n + vb / n + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn criterion_2_oracle_equivalence() {
    let _guard = serial();
    let kernel = gaussian_kernel(1.5, 4).unwrap();
    let cfg = SsimConfig::default();
    for seed in 0..50u64 {
        let a = random_image(1000 + seed, 32, 32);
        let b = random_image(2000 + seed, 32, 32);

        let fast = convolve_reflect(&a, &kernel);
        let oracle = naive_convolve(&a, &kernel);
        assert!(
            max_abs_diff(&fast, &oracle) < 1e-6,
            "convolution diverged from the oracle at seed {seed}"
        );

        let fast = denoise(&a, 3).unwrap();
        let oracle = naive_median(&a, 3);
        assert!(
            max_abs_diff(&fast, &oracle) < 1e-6,
            "median diverged from the oracle at seed {seed}"
        );

        let fast = ssim(&a, &b, &cfg).unwrap();
        let oracle = naive_ssim(&a, &b, &cfg);
        assert!(
            (fast - oracle).abs() < 1e-6,
            "SSIM diverged from the oracle at seed {seed}: {fast} vs {oracle}"
        );
    }
    println!("criterion 2 (convolution/median/SSIM match naive oracles on 50 random 32^2 images): PASS");
}

// --- criterion 3 -----------------------------------------------------------

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic sample of entry indices for one tensor.
fn probe_indices(len: usize, name: &str) -> Vec<usize> {
    let mut idx = vec![0, len / 2, len - 1];
    let mut rng = SeededRng::new(fnv1a(name.as_bytes()));
    idx.push(rng.index(len));
    idx.sort_unstable();
    idx.dedup();
    idx
}

struct ToyNets {
    gen: Generator<f64>,
    disc: Discriminator<f64>,
    feat: FeatureNet<f64>,
    lr: Tensor4<f64>,
    hr: Tensor4<f64>,
}

fn toy_nets() -> ToyNets {
    let gen = Generator::new(
        GeneratorConfig {
            n_res_blocks: 1,
            n_features: 8,
            upscale: 2,
            channels: 1,
        },
        21,
    )
    .unwrap();
    let disc = Discriminator::new(
        DiscriminatorConfig {
            base_features: 8,
            input_size: 16,
            channels: 1,
        },
        22,
    )
    .unwrap();
    let feat = FeatureNet::new(FeatureConfig {
        widths: vec![8, 8],
        pools_after: vec![1],
        channels: 1,
        seed: 23,
    })
    .unwrap();
    let mut rng = SeededRng::new(24);
    let lr = Tensor4::from_vec(2, 8, 8, 1, (0..128).map(|_| rng.uniform()).collect()).unwrap();
    let hr = Tensor4::from_vec(2, 16, 16, 1, (0..512).map(|_| rng.uniform()).collect()).unwrap();
    ToyNets {
        gen,
        disc,
        feat,
        lr,
        hr,
    }
}

/// Checks analytic gradients against central finite differences for every
/// trainable tensor the gradient map covers, mutating tensors through the
/// given visitor and re-evaluating `loss`.
fn check_grads<V, L>(
    what: &str,
    grads: &microsr::network::Grads<f64>,
    prefixes: &[&str],
    mut visit: V,
    mut loss: L,
) where
    V: FnMut(&mut dyn FnMut(&str, &mut [f64], bool)),
    L: FnMut() -> f64,
{
    // Probe steps start at 1e-3 and shrink when the difference quotient is
    // dominated by curvature or an activation kink at that scale (batch-2
    // batch-norm chains make the toy losses violently curved in the early
    // weights); the analytic value must match a central difference to better
    // than 1e-3 relative error at some step, and a genuinely wrong gradient
    // fails at every step. The absolute floor covers gradients that are
    // mathematically zero, like conv biases feeding a batch norm.
    let steps = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
    let atol = 1e-7;
    let mut names = Vec::new();
    visit(&mut |name, data, trainable| {
        if trainable && prefixes.iter().any(|p| name.starts_with(p)) {
            names.push((name.to_string(), data.len()));
        }
    });
    assert!(!names.is_empty(), "{what}: no tensors to check");
    let mut checked = 0;
    for (name, len) in names {
        let analytic_tensor = grads
            .get(&name)
            .unwrap_or_else(|| panic!("{what}: no gradient recorded for {name}"));
        for idx in probe_indices(len, &name) {
            let analytic = analytic_tensor[idx];
            let mut base = f64::NAN;
            visit(&mut |n, data, _| {
                if n == name {
                    base = data[idx];
                }
            });
            let mut central_diff = |h: f64| -> f64 {
                let mut vals = [0.0; 2];
                for (i, value) in [base + h, base - h].into_iter().enumerate() {
                    visit(&mut |n, data, _| {
                        if n == name {
                            data[idx] = value;
                        }
                    });
                    vals[i] = loss();
                    visit(&mut |n, data, _| {
                        if n == name {
                            data[idx] = base;
                        }
                    });
                }
                (vals[0] - vals[1]) / (2.0 * h)
            };
            let mut passed = false;
            let mut last_numeric = f64::NAN;
            let mut best_rel = f64::INFINITY;
            for &h in &steps {
                let numeric = central_diff(h);
                last_numeric = numeric;
                let scale = analytic.abs().max(numeric.abs());
                best_rel = best_rel.min((analytic - numeric).abs() / scale.max(1e-12));
                if (analytic - numeric).abs() <= atol + 1e-3 * scale {
                    passed = true;
                    break;
                }
            }
            assert!(
                passed,
                "{what}: {name}[{idx}] analytic {analytic:.6e} vs numeric {last_numeric:.6e} \
                 (best rel {best_rel:.2e} across steps {steps:?})"
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "{what}: nothing checked");
}

#[test]
fn criterion_3_gradient_checks() {
    let _guard = serial();
    let start = Instant::now();
    let mut nets = toy_nets();

    // Pixel loss: gradients for every generator tensor.
    let w_mse = LossWeights { w_mse: 1.0, w_feat: 0.0, w_adv: 0.0 };
    let (_, grads) =
        generator_loss_and_grads(&nets.gen, &nets.disc, &nets.feat, &nets.lr, &nets.hr, &w_mse)
            .unwrap();
    {
        let (gen, disc, feat) = (&mut nets.gen, &nets.disc, &nets.feat);
        let (lr, hr) = (&nets.lr, &nets.hr);
        let gen_cell = std::cell::RefCell::new(gen);
        check_grads(
            "mse loss",
            &grads,
            &["g."],
            |f| gen_cell.borrow_mut().visit_tensors_mut(f),
            || {
                generator_loss_and_grads(&gen_cell.borrow(), disc, feat, lr, hr, &w_mse)
                    .unwrap()
                    .0
            },
        );
    }

    // Feature loss through the fixed extractor.
    let w_feat = LossWeights { w_mse: 0.0, w_feat: 1.0, w_adv: 0.0 };
    let (_, grads) =
        generator_loss_and_grads(&nets.gen, &nets.disc, &nets.feat, &nets.lr, &nets.hr, &w_feat)
            .unwrap();
    {
        let (gen, disc, feat) = (&mut nets.gen, &nets.disc, &nets.feat);
        let (lr, hr) = (&nets.lr, &nets.hr);
        let gen_cell = std::cell::RefCell::new(gen);
        check_grads(
            "feature loss",
            &grads,
            &["g."],
            |f| gen_cell.borrow_mut().visit_tensors_mut(f),
            || {
                generator_loss_and_grads(&gen_cell.borrow(), disc, feat, lr, hr, &w_feat)
                    .unwrap()
                    .0
            },
        );
    }

    // Adversarial loss: gradients for generator AND discriminator tensors.
    let w_adv = LossWeights { w_mse: 0.0, w_feat: 0.0, w_adv: 1.0 };
    let (_, grads) =
        generator_loss_and_grads(&nets.gen, &nets.disc, &nets.feat, &nets.lr, &nets.hr, &w_adv)
            .unwrap();
    {
        let gen_cell = std::cell::RefCell::new(&mut nets.gen);
        let disc_cell = std::cell::RefCell::new(&mut nets.disc);
        let feat = &nets.feat;
        let (lr, hr) = (&nets.lr, &nets.hr);
        check_grads(
            "adversarial loss",
            &grads,
            &["g.", "d."],
            |f| {
                gen_cell.borrow_mut().visit_tensors_mut(f);
                disc_cell.borrow_mut().visit_tensors_mut(f);
            },
            || {
                generator_loss_and_grads(
                    &gen_cell.borrow(),
                    &disc_cell.borrow(),
                    feat,
                    lr,
                    hr,
                    &w_adv,
                )
                .unwrap()
                .0
            },
        );
    }

    // Discriminator loss on (real, fixed SR).
    let sr = nets.gen.forward(&nets.lr, Mode::Eval).unwrap();
    let (_, grads) = discriminator_loss_and_grads(&nets.disc, &nets.hr, &sr).unwrap();
    {
        let disc_cell = std::cell::RefCell::new(&mut nets.disc);
        let hr = &nets.hr;
        check_grads(
            "discriminator loss",
            &grads,
            &["d."],
            |f| disc_cell.borrow_mut().visit_tensors_mut(f),
            || {
                discriminator_loss_and_grads(&disc_cell.borrow(), hr, &sr)
                    .unwrap()
                    .0
            },
        );
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "gradient checks took {elapsed:?} (budget 1 min)"
    );
    println!("criterion 3 (analytic gradients of all four losses match finite differences, every parameter tensor): PASS in {elapsed:?}");
}

// --- criterion 4 -----------------------------------------------------------

#[test]
fn criterion_4_loss_arithmetic() {
    let _guard = serial();
    // Frozen closed forms, six significant figures.
    let adv = adv_loss_g(&[0.5f64]).unwrap();
    assert!((adv - 0.693147).abs() < 5e-7, "adv at 0.5 = {adv}");

    let d = d_loss(&[0.5f64], &[0.5f64]).unwrap();
    assert!((d - 1.386294).abs() < 5e-7, "d_loss at (0.5, 0.5) = {d}");

    let a = Image::constant(16, 16, 1, 0.75).unwrap();
    let b = Image::constant(16, 16, 1, 0.25).unwrap();
    let p = psnr(&a, &b).unwrap();
    assert!((p - 6.0206).abs() < 5e-5, "psnr at diff 0.5 = {p}");

    let zeros = Image::constant(16, 16, 1, 0.0).unwrap();
    let ones = Image::constant(16, 16, 1, 1.0).unwrap();
    let s = ssim(&zeros, &ones, &SsimConfig::default()).unwrap();
    assert!((s - 9.999e-5).abs() < 5e-9, "ssim 0-vs-1 = {s}");
    assert!((s - 1e-4 / 1.0001).abs() < 1e-12);

    println!("criterion 4 (closed-form loss/metric values to six significant figures): PASS");
}

// --- criterion 5 -----------------------------------------------------------

#[test]
fn criterion_5_smoke_training_beats_bicubic() {
    let _guard = serial();
    let start = Instant::now();

    // Sources come from the blob-field fixture family (sharp-rimmed disks
    // over smooth background), the content class the pipeline targets.
    let sources: Vec<microsr::dataset::SourceImage> = (0..11)
        .map(|i| microsr::dataset::SourceImage {
            id: format!("d{i:02}"),
            image: fixtures::blob_specimen(300 + i, 256),
        })
        .collect();
    let spec = DatasetSpec {
        params: DegradationParams::new(2.5, 4e-4, 4).unwrap(),
        patch_lr: 16,
        stride: 16,
        augment: AugmentOptions::none(),
        split_fraction: 0.9,
        seed: 7,
    };
    let data_dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(&sources, &spec, data_dir.path()).unwrap();
    let n_train = manifest.split_records(Split::Train).count();
    assert!(
        (120..=260).contains(&n_train),
        "expected roughly 200 training pairs, got {n_train}"
    );

    // Toy config pinned by the criterion: 2 residual blocks, 16 features,
    // upscale 4, ~200 pairs. Optimization settings are free: the paper's
    // fixed 1e-4 rate needs far more steps than the budget allows, so the
    // toy run uses 3e-3 with an MSE-only warm-up before the adversarial
    // tail (the last three epochs).
    let setup = TrainSetup {
        train: TrainConfig {
            batch_size: 16,
            learning_rate: 3e-3,
            epochs: 150,
            seed: 7,
            checkpoint_interval: 0,
            mse_warmup_steps: 1617,
            ..Default::default()
        },
        generator: GeneratorConfig {
            n_res_blocks: 2,
            n_features: 16,
            upscale: 4,
            channels: 1,
        },
        discriminator: DiscriminatorConfig {
            base_features: 8,
            input_size: 64,
            channels: 1,
        },
        features: FeatureConfig::scaled_down(16),
    };
    let out_dir = tempfile::tempdir().unwrap();
    let summary = train(&setup, data_dir.path(), out_dir.path(), None).unwrap();

    let val_pairs = manifest.load_pairs(data_dir.path(), Split::Validation).unwrap();
    let (params, _, _) =
        microsr::network::NetworkParams::load(&summary.final_checkpoint).unwrap();
    let report = evaluate(&val_pairs, &params.generator, &SsimConfig::default()).unwrap();
    let network = report.row("network reconstruction").unwrap();
    let bicubic = report.row("bicubic interpolation").unwrap();
    let target = report.row("high-resolution target").unwrap();
    assert_eq!(target.mean_ssim, 1.0);
    assert_eq!(target.mean_psnr, f64::INFINITY);

    let elapsed = start.elapsed();
    println!(
        "criterion 5 (smoke training): network {:.3} dB / SSIM {:.4} vs bicubic {:.3} dB / SSIM {:.4} ({elapsed:?})",
        network.mean_psnr, network.mean_ssim, bicubic.mean_psnr, bicubic.mean_ssim
    );
    assert!(
        network.mean_psnr > bicubic.mean_psnr,
        "network PSNR {:.3} did not beat bicubic {:.3}",
        network.mean_psnr,
        bicubic.mean_psnr
    );
    assert!(
        network.mean_ssim > bicubic.mean_ssim,
        "network SSIM {:.4} did not beat bicubic {:.4}",
        network.mean_ssim,
        bicubic.mean_ssim
    );
    assert!(
        elapsed.as_secs() < 900,
        "smoke training took {elapsed:?} (budget 15 min)"
    );
    println!("criterion 5 (trained toy model beats the bicubic baseline on PSNR and SSIM): PASS in {elapsed:?}");
}

// --- criterion 6 -----------------------------------------------------------

#[test]
fn criterion_6_tiled_inference_exactness() {
    let _guard = serial();
    // Identity stub: stitched result equals the direct whole-image upscale.
    let img = random_image(61, 400, 400);
    let stub = NearestNeighborBackend { factor: 4 };
    let settings = TileSettings::default();
    let (stitched, blend) = super_resolve_detailed(&img, &stub, &settings).unwrap();
    let direct = nearest_neighbor_upscale(&img, 4);
    assert_eq!(
        stitched.data(),
        direct.data(),
        "identity-stub stitching must introduce zero error"
    );

    // Blend weights sum to one at every one of the 1600^2 output pixels.
    assert_eq!(blend.weights.len(), 1600 * 1600);
    for (i, &w) in blend.weights.iter().enumerate() {
        assert!((w - 1.0).abs() < 1e-6, "blend weight {w} at pixel {i}");
    }

    // Trained generator: interior non-overlap pixels bit-identical to the
    // single-tile output.
    let gen = Generator::<f32>::new(
        GeneratorConfig {
            n_res_blocks: 2,
            n_features: 8,
            upscale: 2,
            channels: 1,
        },
        62,
    )
    .unwrap();
    let backend = GeneratorBackend { generator: &gen };
    let out = super_resolve(&img, &backend, &settings).unwrap();
    let tile_out = backend.run(&img.crop(0, 0, 100, 100).unwrap()).unwrap();
    // Tile (0,0) spans [0, 200) in output space; the next tile starts at 160.
    for y in 0..160 {
        for x in 0..160 {
            assert_eq!(
                out.get(y, x, 0).to_bits(),
                tile_out.get(y, x, 0).to_bits(),
                "interior pixel ({y},{x}) differs from the single-tile output"
            );
        }
    }
    println!("criterion 6 (tiled inference: zero-error stub stitching, unit blend weights, bit-identical interiors): PASS");
}

// --- criterion 7 -----------------------------------------------------------

#[test]
fn criterion_7_shape_contracts() {
    let _guard = serial();
    let gen = Generator::<f32>::new(
        GeneratorConfig {
            n_res_blocks: 1,
            n_features: 8,
            upscale: 4,
            channels: 1,
        },
        71,
    )
    .unwrap();
    let lr = Tensor4::<f32>::from_images(&[random_image(72, 96, 96)]).unwrap();
    let sr = gen.forward(&lr, Mode::Eval).unwrap();
    assert_eq!(sr.shape(), (1, 384, 384, 1), "96 -> 384 at upscale 4");

    let grid = plan_tiles(400, 400, 100, 20).unwrap();
    assert_eq!(grid.len(), 25, "400^2 with tile 100 / overlap 20");
    println!("criterion 7 (shape contracts: 96->384 generator output, 25-tile plan): PASS");
}

// --- criterion 8 -----------------------------------------------------------

#[test]
fn criterion_8_end_to_end_determinism() {
    let _guard = serial();
    let run = || {
        let root = tempfile::tempdir().unwrap();
        let fix = root.path().join("fix");
        fixtures::make_fixtures(11, &fix).unwrap();
        let sources = load_source_dir(fix.join("train")).unwrap();
        let spec = DatasetSpec {
            params: DegradationParams::new(1.2, 1e-4, 2).unwrap(),
            patch_lr: 16,
            stride: 48,
            augment: AugmentOptions::none(),
            split_fraction: 0.8,
            seed: 11,
        };
        let data = root.path().join("data");
        build_dataset(&sources, &spec, &data).unwrap();
        let setup = TrainSetup {
            train: TrainConfig {
                batch_size: 16,
                epochs: 2,
                seed: 11,
                checkpoint_interval: 0,
                ..Default::default()
            },
            generator: GeneratorConfig {
                n_res_blocks: 1,
                n_features: 4,
                upscale: 2,
                channels: 1,
            },
            discriminator: DiscriminatorConfig {
                base_features: 2,
                input_size: 32,
                channels: 1,
            },
            features: FeatureConfig {
                widths: vec![4, 4],
                pools_after: vec![1],
                channels: 1,
                seed: 3,
            },
        };
        let train_out = root.path().join("train");
        let summary = train(&setup, &data, &train_out, None).unwrap();
        let ckpt_bytes = std::fs::read(&summary.final_checkpoint).unwrap();

        let (params, _, _) =
            microsr::network::NetworkParams::load(&summary.final_checkpoint).unwrap();
        let backend = GeneratorBackend {
            generator: &params.generator,
        };
        let input = microsr::raster::load_image(fix.join("train/bars.png")).unwrap();
        let sr = super_resolve(
            &input,
            &backend,
            &TileSettings {
                tile: 100,
                overlap: 20,
                ..Default::default()
            },
        )
        .unwrap();
        let sr_path = root.path().join("sr.png");
        microsr::raster::save_image(&sr, &sr_path, 16).unwrap();
        (ckpt_bytes, std::fs::read(&sr_path).unwrap())
    };

    let (ckpt_a, img_a) = run();
    let (ckpt_b, img_b) = run();
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ across same-seed runs");
    assert_eq!(img_a, img_b, "inference outputs differ across same-seed runs");
    println!("criterion 8 (same-seed end-to-end runs produce bit-identical checkpoints and images): PASS");
}

// --- criterion 9 -----------------------------------------------------------

#[test]
fn criterion_9_inference_throughput_report() {
    let _guard = serial();
    let gen = Generator::<f32>::new(
        GeneratorConfig {
            n_res_blocks: 2,
            n_features: 8,
            upscale: 2,
            channels: 1,
        },
        91,
    )
    .unwrap();
    let backend = GeneratorBackend { generator: &gen };
    let img = random_image(92, 400, 400);
    let (out, report) = benchmark_inference(&img, &backend, &TileSettings::default()).unwrap();
    assert_eq!((out.height(), out.width()), (800, 800));
    assert_eq!(report.tile_count, 25);
    assert!(report.wall_ms > 0.0);
    assert!(
        report.tile_ms_median < 250.0,
        "per-tile median latency {:.1} ms exceeds the 250 ms desk budget",
        report.tile_ms_median
    );
    println!(
        "criterion 9 (throughput report: {} tiles, median {:.2} ms/tile, wall {:.0} ms): PASS",
        report.tile_count, report.tile_ms_median, report.wall_ms
    );
}
