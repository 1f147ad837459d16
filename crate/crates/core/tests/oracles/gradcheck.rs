//! Central-difference check of the full model gradient on the tiny config.

use issc_core::channel::NoiseDraw;
use issc_core::datamodel::{ModelConfig, SegMask, IGNORE_INDEX};
use issc_core::loss::loss_and_grad;
use issc_core::model::IsscModel;
use issc_core::params::Parameters;
use issc_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(cfg: &ModelConfig, seed: u64) -> (Tensor<f64>, SegMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::from_fn(&[2, cfg.height, cfg.width, 3], |_| rng.random::<f64>());
    let labels = (0..2 * cfg.height * cfg.width)
        .map(|_| if rng.random::<f64>() < 0.05 { IGNORE_INDEX } else { rng.random_range(0..cfg.n_cls as u8) })
        .collect();
    (image, SegMask::new(2, cfg.height, cfg.width, labels).unwrap())
}

fn loss(model: &IsscModel<f64>, image: &Tensor<f64>, labels: &SegMask, noise: Option<&Tensor<f64>>) -> f64 {
    let (logits, _) = model.forward_train(image, noise).unwrap();
    loss_and_grad(&logits, labels, None).unwrap().loss
}

fn bump(model: &mut IsscModel<f64>, group: usize, i: usize, d: f64) {
    let mut k = 0;
    model.visit_mut("", &mut |_, t| {
        if k == group {
            t.data_mut()[i] += d;
        }
        k += 1;
    });
}

/// Worst relative error over parameter groups, comparing the analytic
/// gradient with central differences on every scalar parameter.
pub fn worst_group_error(noise_snr: Option<f64>) -> (String, f64) {
    let cfg = ModelConfig::tiny();
    let mut model = IsscModel::<f64>::new(&cfg, 11).unwrap();
    assert!(model.param_count() <= 5000, "{} parameters", model.param_count());
    let (image, labels) = batch(&cfg, 12);
    let tx_shape = [2, cfg.height / 16, cfg.width / 16, cfg.k];
    let noise = noise_snr.map(|snr| NoiseDraw::<f64>::for_snr(&tx_shape, snr, 13).unwrap().realization);

    let (logits, cache) = model.forward_train(&image, noise.as_ref()).unwrap();
    let out = loss_and_grad(&logits, &labels, None).unwrap();
    let grad = model.backward(&cache, &out.dlogits).unwrap();
    let analytic: Vec<(String, Vec<f64>)> =
        grad.named_params().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();

    let h = 1e-5;
    let mut numeric: Vec<Vec<f64>> = Vec::new();
    let names: Vec<(String, usize)> = model.named_params().into_iter().map(|(n, t)| (n, t.len())).collect();
    for (g, (_, len)) in names.iter().enumerate() {
        let mut col = Vec::with_capacity(*len);
        for i in 0..*len {
            bump(&mut model, g, i, h);
            let up = loss(&model, &image, &labels, noise.as_ref());
            bump(&mut model, g, i, -2.0 * h);
            let down = loss(&model, &image, &labels, noise.as_ref());
            bump(&mut model, g, i, h);
            col.push((up - down) / (2.0 * h));
        }
        numeric.push(col);
    }

    let mut worst = (String::new(), 0.0);
    for ((name, a), n) in analytic.iter().zip(&numeric) {
        let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
        // Groups whose true gradient is identically zero (single-token
        // windows) only carry finite-difference rounding.
        let rel = if diff < 1e-9 { 0.0 } else { diff / scale };
        if rel > worst.1 {
            worst = (name.clone(), rel);
        }
    }
    worst
}
