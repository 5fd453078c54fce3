//! Manual experiment probe for calibrating acceptance run sizes. Run with:
//! cargo test -p vtadl-core --test experiment_probe -- --ignored --nocapture

use std::io::Write;
use std::time::Instant;

fn log_line(line: &str) {
    println!("{line}");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open("/tmp/vtadl_probe.log")
        .unwrap();
    writeln!(f, "{line}").unwrap();
}
use vtadl_core::data::synthetic::{generate_synthetic, SyntheticConfig};
use vtadl_core::eval;
use vtadl_core::metrics::{pro_score, roc_auc};
use vtadl_core::model::{Model, ModelConfig};
use vtadl_core::trainer::{self, Adam, TrainConfig};

fn synth_run(seed: u64, n_train: usize, epochs: usize, k: usize, noise: f64, n_anom: usize) -> f64 {
    synth_run_lr(seed, n_train, epochs, k, noise, n_anom, 1e-3)
}

#[allow(clippy::too_many_arguments)]
fn synth_run_lr(seed: u64, n_train: usize, epochs: usize, k: usize, noise: f64, n_anom: usize, lr: f64) -> f64 {
    let mut mc = ModelConfig::desk(64, 64, 1, 8);
    mc.mixture_components = k;
    mc.noise_std = noise;
    let tc = TrainConfig {
        learning_rate: lr,
        batch_size: 8,
        epochs,
        seed,
        ..Default::default()
    };
    let ds = generate_synthetic(
        &SyntheticConfig {
            height: 64,
            width: 64,
            n_train,
            n_test_normal: 10,
            n_test_anomalous: n_anom,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let mut model = Model::<f32>::new(mc, seed).unwrap();
    let mut opt = Adam::new(&tc, &trainer::param_sizes(&model));
    let log = trainer::train(&mut model, &mut opt, &ds.train, &tc, 0).unwrap();
    log_line(&format!(
        "  seed {seed} k {k} noise {noise}: loss {:.4} -> {:.4}",
        log[0].loss.total,
        log.last().unwrap().loss.total
    ));
    let mut heatmaps = Vec::new();
    let mut masks = Vec::new();
    for s in ds.test.iter().filter(|s| s.is_anomalous()) {
        heatmaps.push(eval::heatmap_for_image(&model, &s.image).unwrap());
        masks.push(s.mask.clone().unwrap());
    }
    pro_score(&heatmaps, &masks, 0.3, 256).unwrap().capped_auc
}

#[test]
#[ignore]
fn probe_synth_localization() {
    let t0 = Instant::now();
    let pro = synth_run(1, 80, 30, 10, 0.2, 100);
    println!("criterion-5 style: PRO {pro:.4} in {:.1}s", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn probe_ablation_scale() {
    for k in [2usize, 16, 32] {
        let t0 = Instant::now();
        let pro = synth_run(1, 48, 10, k, 0.2, 40);
        println!("ablation k={k}: PRO {pro:.4} in {:.1}s", t0.elapsed().as_secs_f64());
    }
    let pro0 = synth_run(1, 48, 10, 16, 0.0, 40);
    println!("ablation noise=0 k=16: PRO {pro0:.4}");
}

#[test]
#[ignore]
fn probe_digits_roc() {
    use vtadl_core::data::digits::digit_images;
    use vtadl_core::data::{write_idx_images, write_idx_labels, DatasetSpec, IdxSpec};

    let t0 = Instant::now();
    let dir = std::env::temp_dir().join("vtadl_probe_digits");
    std::fs::create_dir_all(&dir).unwrap();
    let n_train = 2000;
    let mut train_imgs = digit_images(1, n_train, 77);
    let train_labels = vec![1u8; n_train];
    let mut test_imgs = digit_images(1, 500, 901);
    let mut test_labels = vec![1u8; 500];
    let others: Vec<u8> = (0u8..10).filter(|&c| c != 1).collect();
    for i in 0..500 {
        let class = others[i % others.len()];
        test_imgs.extend(digit_images(class, 1, 1000 + i as u64));
        test_labels.push(class);
    }
    let ip = dir.join("train-images.idx");
    let lp = dir.join("train-labels.idx");
    let tip = dir.join("test-images.idx");
    let tlp = dir.join("test-labels.idx");
    write_idx_images(&ip, &train_imgs, 28, 28).unwrap();
    write_idx_labels(&lp, &train_labels).unwrap();
    write_idx_images(&tip, &test_imgs, 28, 28).unwrap();
    write_idx_labels(&tlp, &test_labels).unwrap();
    train_imgs.clear();
    test_imgs.clear();

    let spec = DatasetSpec::Idx(IdxSpec {
        train_images: ip,
        train_labels: lp,
        test_images: tip,
        test_labels: tlp,
        normal_digit: 1,
        pad_to: Some(32),
        train_limit: None,
        test_limit: None,
    });
    let ds = spec.load().unwrap();
    println!("dataset: {} train, {} test in {:.1}s", ds.train.len(), ds.test.len(), t0.elapsed().as_secs_f64());

    let mut mc = ModelConfig::desk(32, 32, 1, 8);
    mc.mixture_components = 10;
    let tc = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 5,
        seed: 7,
        ..Default::default()
    };
    let (train_split, val_split) = trainer::split_validation(&ds.train, 0.1);
    let mut model = Model::<f32>::new(mc, 7).unwrap();
    let mut opt = Adam::new(&tc, &trainer::param_sizes(&model));
    let log = trainer::train(&mut model, &mut opt, train_split, &tc, 0).unwrap();
    println!("loss {:.4} -> {:.4}", log[0].loss.total, log.last().unwrap().loss.total);

    let stats = eval::compute_norm_stats(&model, val_split).unwrap();
    let scored = eval::evaluate_dataset(&model, &ds.test, &stats).unwrap();
    let auc = roc_auc(&scored.scores, &scored.labels).unwrap();
    let mse_scores: Vec<f64> = scored.evaluations.iter().map(|e| e.mse).collect();
    let mse_auc = roc_auc(&mse_scores, &scored.labels).unwrap();
    println!(
        "global ROC-AUC {auc:.4}, mse-only {mse_auc:.4}, total {:.1}s",
        t0.elapsed().as_secs_f64()
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
#[ignore]
fn probe_synth_variants() {
    let t0 = Instant::now();
    let pro = synth_run_lr(1, 80, 30, 10, 0.2, 100, 2e-3);
    log_line(&format!("variant lr2e-3: PRO {pro:.4} in {:.1}s", t0.elapsed().as_secs_f64()));
    let t1 = Instant::now();
    let pro = synth_run_lr(1, 80, 45, 10, 0.2, 100, 1e-3);
    log_line(&format!("variant 45ep: PRO {pro:.4} in {:.1}s", t1.elapsed().as_secs_f64()));
}

#[test]
#[ignore]
fn probe_synth_more_data() {
    let t0 = Instant::now();
    let pro = synth_run_lr(1, 160, 30, 10, 0.2, 100, 1e-3);
    log_line(&format!("variant 160train: PRO {pro:.4} in {:.1}s", t0.elapsed().as_secs_f64()));
}

#[test]
#[ignore]
fn probe_step_count_vs_data() {
    let t0 = Instant::now();
    let pro = synth_run_lr(1, 160, 15, 10, 0.2, 100, 1e-3);
    log_line(&format!("variant 160train-15ep-lr1e3: PRO {pro:.4} in {:.1}s", t0.elapsed().as_secs_f64()));
    let t1 = Instant::now();
    let pro = synth_run_lr(1, 160, 30, 10, 0.2, 100, 1e-4);
    log_line(&format!("variant 160train-30ep-lr1e4: PRO {pro:.4} in {:.1}s", t1.elapsed().as_secs_f64()));
}

fn synth_diag(seed: u64, n_train: usize, epochs: usize, k: usize, noise: f64, lr: f64, freeze_trunk: bool) {
    use vtadl_core::trainer::DensityTarget;
    use vtadl_core::mdn::gaussian_noise;
    use vtadl_core::tape::Tape;
    use vtadl_core::data::synthetic::stream;

    let mut mc = ModelConfig::desk(64, 64, 1, 8);
    mc.mixture_components = k;
    mc.noise_std = noise;
    let tc = TrainConfig {
        learning_rate: lr,
        batch_size: 8,
        epochs,
        seed,
        val_fraction: 0.0,
        ..Default::default()
    };
    let ds = generate_synthetic(
        &SyntheticConfig {
            height: 64,
            width: 64,
            n_train,
            n_test_normal: 10,
            n_test_anomalous: 60,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let mut model = Model::<f32>::new(mc.clone(), seed).unwrap();
    let mut opt = Adam::new(&tc, &trainer::param_sizes(&model));
    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();

    for epoch in 0..epochs {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut stream(seed, 101, epoch as u64));
        for (bi, chunk) in order.chunks(8).enumerate() {
            let images: Vec<&vtadl_core::Tensor<f32>> = chunk.iter().map(|&i| &ds.train[i].image).collect();
            let mut tape = Tape::new();
            let shape = vec![images.len() * mc.num_patches(), mc.mdn_dim()];
            let mut rng = stream(seed, 102, ((epoch as u64) << 32) | bi as u64);
            let (ni, nt) = if noise > 0.0 {
                (Some(gaussian_noise::<f32>(shape.clone(), noise, &mut rng)), Some(gaussian_noise::<f32>(shape, noise, &mut rng)))
            } else { (None, None) };
            let step = trainer::training_loss_on_tape(&mut model, &mut tape, &images, ni.as_ref(), DensityTarget::Snapshot(nt.as_ref())).unwrap();
            tape.backward(step.total).unwrap();
            let grads: Vec<Vec<f32>> = step.leaves.iter().enumerate().map(|(i, &v)| {
                if freeze_trunk && !names[i].starts_with("mdn.") {
                    vec![0.0; tape.value(v).numel()]
                } else {
                    tape.grad_or_zeros(v)
                }
            }).collect();
            drop(tape);
            let mut params: Vec<&mut vtadl_core::Tensor<f32>> = model.named_params_mut().into_iter().map(|(_, t)| t).collect();
            opt.step(&mut params, &grads).unwrap();
        }
    }

    // patch-level separability and PRO
    let mut heatmaps = Vec::new();
    let mut masks = Vec::new();
    let mut patch_scores = Vec::new();
    let mut patch_labels = Vec::new();
    let mut mean_sigma = 0.0f64;
    let mut count = 0usize;
    for s in ds.test.iter().filter(|s| s.is_anomalous()) {
        let ev = vtadl_core::eval::evaluate_image(&model, &s.image).unwrap();
        let mask = s.mask.clone().unwrap();
        let rows = ev.grid_rows;
        let cols = ev.grid_cols;
        let ph = 64 / rows;
        for pr in 0..rows {
            for pc in 0..cols {
                let mut has_defect = false;
                for y in pr * ph..(pr + 1) * ph {
                    for x in pc * ph..(pc + 1) * ph {
                        if mask.data[y * 64 + x] { has_defect = true; }
                    }
                }
                patch_scores.push(ev.per_patch_nll[pr * cols + pc]);
                patch_labels.push(has_defect);
            }
        }
        heatmaps.push(vtadl_core::metrics::heatmap_from_patch_scores(&ev.per_patch_nll, (rows, cols), (64, 64)).unwrap());
        masks.push(mask);
        // sigma diagnostics
        let out = model.forward(&s.image).unwrap();
        let params = model.mdn.predict_params(&out.encoded).unwrap();
        mean_sigma += params.sigmas.data().iter().map(|&v| v as f64).sum::<f64>() / params.sigmas.numel() as f64;
        count += 1;
    }
    let patch_auc = roc_auc(&patch_scores, &patch_labels).unwrap();
    let pro = pro_score(&heatmaps, &masks, 0.3, 256).unwrap().capped_auc;
    log_line(&format!(
        "diag seed {seed} train {n_train} ep {epochs} k {k} noise {noise} lr {lr} freeze {freeze_trunk}: PRO {pro:.4} patchAUC {patch_auc:.4} meansigma {:.4}",
        mean_sigma / count as f64
    ));
}

#[test]
#[ignore]
fn probe_diagnostics() {
    synth_diag(1, 80, 30, 10, 0.2, 1e-3, true);   // frozen random encoder
    synth_diag(1, 80, 30, 10, 0.2, 1e-3, false);  // end to end
    synth_diag(1, 160, 30, 10, 0.2, 1e-3, true);
}
