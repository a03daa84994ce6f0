mod common;

use common::{linear_mean_side, random_image, random_text, rng, tiny_config, uniform};
use interattr::attribution::{interaction_attributions, AttributionConfig, IntegrationConfig, ReferenceMode, Scheme};
use interattr::baselines::{
    cam_pair, fit_bilinear_surrogate, interaction_cam, interaction_lime, itsm, itsm_from_features, ItsmVariant,
    SurrogateConfig, SurrogateSample,
};
use interattr::encoders::{DualEncoder, EmbeddingModel, Encoding, ImageInput, TextInput};
use interattr::tensor::{Feed, Tensor};
use interattr::{Error, Result};
use rand::Rng;

#[test]
fn cam_bit_equals_single_step_zero_reference_attribution() {
    let cfg = AttributionConfig {
        integration: IntegrationConfig::new(1, Scheme::Right),
        reference: ReferenceMode::ZeroAtTap,
        tap: None,
    };
    for i in 0..20u64 {
        let m = DualEncoder::new(tiny_config(i % 5)).unwrap();
        let mut r = rng(500 + i);
        let img = random_image(&mut r, 3, 3, 4);
        let txt = random_text(&mut r, 1 + (i as usize % 6), 12);
        let ours = interaction_attributions(&m, &img, &txt, &cfg).unwrap();
        let cam = interaction_cam(&m, &img, &txt, None).unwrap();
        assert_eq!(ours.shape(), cam.shape());
        assert!(ours.values().iter().zip(cam.values()).all(|(a, b)| a.to_bits() == b.to_bits()), "pair {i}");
        assert_eq!(ours.corners(), cam.corners());
        assert_eq!(cam.provenance().method, "icam");
    }
}

#[test]
fn cam_on_a_bilinear_pair_is_exact() {
    let mut r = rng(1);
    let (k, d, la, lb) = (4, 3, 5, 2);
    let u = uniform(&mut r, &[k, d], -1.0, 1.0);
    let v = uniform(&mut r, &[k, d], -1.0, 1.0);
    let a = uniform(&mut r, &[la, d], -1.0, 1.0);
    let b = uniform(&mut r, &[lb, d], -1.0, 1.0);
    let (ga, pa) = linear_mean_side(&u, la);
    let (gb, pb) = linear_mean_side(&v, lb);
    let ea = Encoding::new(&ga, &pa, Feed::from([("x".to_string(), a.clone())]), "embedding").unwrap();
    let eb = Encoding::new(&gb, &pb, Feed::from([("x".to_string(), b.clone())]), "embedding").unwrap();
    let (values, corners) = cam_pair(&ea, &eb, "t").unwrap();
    for p in 0..la {
        for t in 0..lb {
            let mut expected = 0.0;
            for kk in 0..k {
                let gp: f64 = (0..d).map(|i| u.get(kk, i) * a.get(p, i)).sum::<f64>() / la as f64;
                let ht: f64 = (0..d).map(|j| v.get(kk, j) * b.get(t, j)).sum::<f64>() / lb as f64;
                expected += gp * ht;
            }
            assert!((values[p * lb + t] - expected).abs() < 1e-12);
        }
    }
    let total: f64 = values.iter().sum();
    assert!((total - corners.f_ab).abs() < 1e-12);
    assert_eq!(corners.f_ra_rb, 0.0);

    let zero = Encoding::new(&gb, &pb, Feed::from([("x".to_string(), Tensor::zeros(&[lb, d]))]), "embedding").unwrap();
    let (values, _) = cam_pair(&ea, &zero, "t").unwrap();
    assert!(values.iter().all(|&v| v == 0.0));
}

#[test]
fn itsm_unit_examples() {
    let e = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    assert_eq!(itsm_from_features(&e, &e).unwrap(), vec![1.0]);
    let o = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    assert_eq!(itsm_from_features(&e, &o).unwrap(), vec![0.0]);

    let mut r = rng(2);
    let img = uniform(&mut r, &[4, 3], -1.0, 1.0);
    let txt = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let base = itsm_from_features(&img, &txt).unwrap();
    let doubled = Tensor::new(vec![4, 3], img.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    let twice = itsm_from_features(&doubled, &txt).unwrap();
    assert!(base.iter().zip(&twice).all(|(a, b)| *b == 2.0 * a));
    assert!(itsm_from_features(&img, &Tensor::zeros(&[2, 4])).is_err());
}

#[test]
fn itsm_with_context_free_features_is_row_local() {
    let mut r = rng(3);
    let proj = uniform(&mut r, &[5, 3], -1.0, 1.0);
    let project = |x: &Tensor| {
        let rows: Vec<Vec<f64>> = (0..x.rows())
            .map(|p| (0..3).map(|j| (0..5).map(|i| x.get(p, i) * proj.get(i, j)).sum()).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let patches = uniform(&mut r, &[6, 5], 0.0, 1.0);
    let tokens = uniform(&mut r, &[3, 3], -1.0, 1.0);
    let before = itsm_from_features(&project(&patches), &tokens).unwrap();
    let mut edited = patches.data().to_vec();
    for v in &mut edited[2 * 5..3 * 5] {
        *v = 0.5 - *v;
    }
    let after = itsm_from_features(&project(&Tensor::new(vec![6, 5], edited).unwrap()), &tokens).unwrap();
    for p in 0..6 {
        let changed = (0..3).any(|t| before[p * 3 + t] != after[p * 3 + t]);
        assert_eq!(changed, p == 2);
    }
}

#[test]
fn itsm_variants_on_a_model() {
    let m = DualEncoder::new(tiny_config(4)).unwrap();
    let mut r = rng(4);
    let img = random_image(&mut r, 3, 3, 4);
    let txt = random_text(&mut r, 4, 12);
    let out = itsm(&m, &img, &txt, ItsmVariant::Out).unwrap();
    let hidden = itsm(&m, &img, &txt, ItsmVariant::Hidden).unwrap();
    assert_eq!(out.shape(), vec![3, 3, 4]);
    assert_eq!(hidden.shape(), vec![3, 3, 4]);
    let states_i = m.image_states(&img).unwrap();
    let states_t = m.text_states(&txt).unwrap();
    let expected: f64 = states_i["hidden1"].row(4).iter().zip(states_t["hidden1"].row(2)).map(|(a, b)| a * b).sum();
    assert_eq!(hidden.get(4, 2), expected);
    let expected: f64 = states_i["tokens"].row(7).iter().zip(states_t["tokens"].row(1)).map(|(a, b)| a * b).sum();
    assert_eq!(out.get(7, 1), expected);
}

struct Constant(f64);

impl EmbeddingModel for Constant {
    fn embed_image(&self, _: &ImageInput) -> Result<Vec<f64>> {
        Ok(vec![self.0, 0.0])
    }
    fn embed_text(&self, _: &TextInput) -> Result<Vec<f64>> {
        Ok(vec![1.0, 0.0])
    }
    fn pad_id(&self) -> usize {
        0
    }
}

#[test]
fn constant_model_gives_flat_surrogate() {
    let mut r = rng(5);
    let img = random_image(&mut r, 4, 4, 3);
    let txt = random_text(&mut r, 6, 12);
    for c0 in [0.3, -0.8, 1.0] {
        let cfg = SurrogateConfig {
            epochs: 20,
            ..SurrogateConfig::default()
        };
        let fit = interaction_lime(&Constant(c0), &img, &txt, &cfg).unwrap();
        let w = &fit.surrogate.w;
        assert_eq!(w.shape(), &[16, 6]);
        let max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-2, "c0 {c0}: max |W| {max}");
        assert!((fit.surrogate.c - c0).abs() < 1e-2, "c0 {c0}: c {}", fit.surrogate.c);
    }
}

fn bilinear_samples(seed: u64, p: usize, s: usize, n: usize) -> (Vec<SurrogateSample>, Tensor, f64) {
    let mut r = rng(seed);
    let w = uniform(&mut r, &[p, s], -1.0, 1.0);
    let c = 0.4;
    let samples = (0..n)
        .map(|_| {
            let image_mask: Vec<bool> = (0..p).map(|_| r.random_bool(0.7)).collect();
            let text_mask: Vec<bool> = (0..s).map(|_| r.random_bool(0.7)).collect();
            let mut target = c;
            for i in 0..p {
                for j in 0..s {
                    if image_mask[i] && text_mask[j] {
                        target += w.get(i, j);
                    }
                }
            }
            SurrogateSample {
                image_mask,
                text_mask,
                target,
                weight: r.random_range(0.5..1.0),
            }
        })
        .collect();
    (samples, w, c)
}

/// Minimises `sum_n w_n (phi_n . theta - y_n)^2 + ridge |theta|^2` over
/// features `[scale * vec(z_a z_b^T), 1]` via the normal equations, solved by
/// Gauss-Jordan elimination with partial pivoting. Returns `W` in mask
/// coordinates followed by `c`.
fn weighted_ridge(samples: &[SurrogateSample], scale: f64, ridge: f64) -> Vec<f64> {
    let p = samples[0].image_mask.len();
    let s = samples[0].text_mask.len();
    let n = p * s + 1;
    let mut a = vec![vec![0.0; n + 1]; n];
    for x in samples {
        let mut phi = vec![0.0; n];
        for i in 0..p {
            for j in 0..s {
                phi[i * s + j] = scale * f64::from(u8::from(x.image_mask[i] && x.text_mask[j]));
            }
        }
        phi[n - 1] = 1.0;
        for r in 0..n {
            for c in 0..n {
                a[r][c] += x.weight * phi[r] * phi[c];
            }
            a[r][n] += x.weight * phi[r] * x.target;
        }
    }
    for (r, row) in a.iter_mut().enumerate() {
        row[r] += ridge;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, pivot);
        let d = a[col][col];
        for c in col..=n {
            a[col][c] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut theta: Vec<f64> = a.iter().map(|row| row[n]).collect();
    for v in &mut theta[..n - 1] {
        *v *= scale;
    }
    theta
}

#[test]
fn surrogate_fit_matches_weighted_ridge_oracle() {
    let (p, s) = (3, 2);
    let n = 400;
    let (samples, w_true, c_true) = bilinear_samples(6, p, s, n);
    let exact = weighted_ridge(&samples, 1.0, 0.0);
    for (i, v) in exact[..p * s].iter().enumerate() {
        assert!((v - w_true.data()[i]).abs() < 1e-8);
    }
    assert!((exact[p * s] - c_true).abs() < 1e-8);
    for scaled in [false, true] {
        let cfg = SurrogateConfig {
            epochs: 800,
            lr: 2e-3,
            scale_image: scaled,
            scale_text: scaled,
            ..SurrogateConfig::default()
        };
        let scale = if scaled { 1.0 / ((p * s) as f64).sqrt() } else { 1.0 };
        let oracle = weighted_ridge(&samples, scale, n as f64 * cfg.weight_decay / 2.0);
        let fit = fit_bilinear_surrogate(&samples, &cfg).unwrap();
        let diff: f64 = fit.surrogate.w.data().iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum();
        let norm: f64 = oracle[..p * s].iter().map(|v| v * v).sum();
        let rel = (diff / norm).sqrt();
        assert!(rel < 0.05, "scaled={scaled}: relative Frobenius error {rel}");
        assert!((fit.surrogate.c - oracle[p * s]).abs() < 0.05, "scaled={scaled}: c {}", fit.surrogate.c);
    }
}

#[test]
fn surrogate_fit_is_deterministic_and_mostly_monotone() {
    let mut monotone = 0;
    let runs = 20;
    for seed in 0..runs {
        let (samples, _, _) = bilinear_samples(100 + seed, 4, 3, 300);
        let cfg = SurrogateConfig {
            seed,
            epochs: 8,
            ..SurrogateConfig::default()
        };
        let a = fit_bilinear_surrogate(&samples, &cfg).unwrap();
        let b = fit_bilinear_surrogate(&samples, &cfg).unwrap();
        assert!(a.surrogate.w.bit_eq(&b.surrogate.w));
        if a.epoch_mse.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone as f64 >= 0.9 * runs as f64, "{monotone}/{runs}");
}

#[test]
fn lime_on_a_model_is_seeded() {
    let m = DualEncoder::new(tiny_config(7)).unwrap();
    let mut r = rng(7);
    let img = random_image(&mut r, 3, 3, 4);
    let txt = random_text(&mut r, 4, 12);
    let cfg = SurrogateConfig {
        samples: 120,
        ..SurrogateConfig::default()
    };
    let a = interaction_lime(&m, &img, &txt, &cfg).unwrap();
    let b = interaction_lime(&m, &img, &txt, &cfg).unwrap();
    assert_eq!(a, b);
    let t = a.surrogate.to_tensor(3, 3, &m.digest()).unwrap();
    assert_eq!(t.shape(), vec![3, 3, 4]);
    assert_eq!(t.provenance().method, "ilime");
}

#[test]
fn surrogate_errors_are_reported() {
    let (samples, _, _) = bilinear_samples(9, 3, 2, 50);
    let bad = SurrogateConfig {
        drop_image: 1.0,
        ..SurrogateConfig::default()
    };
    assert!(matches!(fit_bilinear_surrogate(&samples, &bad), Err(Error::InvalidConfig(_))));
    let explode = SurrogateConfig {
        lr: 1e6,
        scale_image: false,
        scale_text: false,
        ..SurrogateConfig::default()
    };
    assert!(matches!(fit_bilinear_surrogate(&samples, &explode), Err(Error::NonConvergence(_))));
    assert!(matches!(fit_bilinear_surrogate(&[], &SurrogateConfig::default()), Err(Error::Empty(_))));
}

#[test]
fn method_names_dispatch() {
    use interattr::method::{attribute, Method};
    for m in Method::ALL {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
    }
    assert!("itsm_out".parse::<Method>().is_err());

    let model = DualEncoder::new(tiny_config(1)).unwrap();
    let mut r = rng(90);
    let (img, txt) = (random_image(&mut r, 3, 3, 4), random_text(&mut r, 4, 12));
    let cfg = AttributionConfig::default();
    let cases = [
        (Method::Ours, "ours"),
        (Method::Icam, "icam"),
        (Method::ItsmOut, "itsm_out"),
        (Method::ItsmHidden, "itsm_hidden"),
    ];
    for (m, recorded) in cases {
        let t = attribute(&model, &img, &txt, m, &cfg, 0).unwrap();
        assert_eq!(t.provenance().method, recorded);
        assert_eq!(t.shape(), vec![3, 3, 4]);
    }
    let direct = interaction_attributions(&model, &img, &txt, &cfg).unwrap();
    assert_eq!(attribute(&model, &img, &txt, Method::Ours, &cfg, 0).unwrap(), direct);
}
