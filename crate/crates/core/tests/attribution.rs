mod common;

use common::{random_image, random_text, rng, tiny_config, uniform};
use interattr::attribution::{
    completeness_residual, full_attribution_matrix, integrated_jacobian, interaction_attributions,
    intra_modal_attributions, pair_attributions, slice_project, AttributionConfig, Corners, Input,
    IntegrationConfig, InteractionTensor, Layout, Provenance, ReferenceMode, Scheme, Selection,
};
use interattr::data::{BBox, Span};
use interattr::encoders::{DualEncoder, Encoding, ImageInput, TextInput};
use interattr::tensor::{Feed, Graph, GraphBuilder, Tensor};
use interattr::Error;

/// `embedding = f(x)` with the tap `t` placed on the input itself.
fn scalar_graph(f: impl Fn(&mut GraphBuilder, usize) -> usize) -> Graph {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[1, 1]).unwrap();
    b.tap("t", x).unwrap();
    let y = f(&mut b, x);
    b.output("embedding", y).unwrap();
    b.build()
}

fn scalar(v: f64) -> Tensor {
    Tensor::matrix(1, 1, vec![v]).unwrap()
}

fn encoding<'g>(g: &'g Graph, params: &'g Feed, x: Tensor) -> Encoding<'g> {
    Encoding::new(g, params, Feed::from([("x".to_string(), x)]), "embedding").unwrap()
}

#[test]
fn linear_encoder_has_constant_jacobian() {
    let c = -1.75;
    let g = scalar_graph(|b, x| b.scale(x, c).unwrap());
    let params = Feed::new();
    let enc = encoding(&g, &params, scalar(0.8));
    for steps in [1, 2, 5, 50] {
        for scheme in [Scheme::Right, Scheme::Midpoint] {
            let j = integrated_jacobian(&enc, &scalar(0.0), &IntegrationConfig::new(steps, scheme), "t").unwrap();
            assert!((j.jacobian.data()[0] - c).abs() < 1e-15);
        }
    }
}

#[test]
fn square_encoder_matches_finite_sum() {
    let a = 1.3;
    let g = scalar_graph(|b, x| b.mul(x, x).unwrap());
    let params = Feed::new();
    let enc = encoding(&g, &params, scalar(a));
    for steps in [1, 2, 3, 10, 100] {
        let j = integrated_jacobian(&enc, &scalar(0.0), &IntegrationConfig::new(steps, Scheme::Right), "t").unwrap();
        let expected = a * (steps as f64 + 1.0) / steps as f64;
        assert!((j.jacobian.data()[0] - expected).abs() < 1e-12, "N={steps}");
    }
    let j = integrated_jacobian(&enc, &scalar(0.0), &IntegrationConfig::new(100_000, Scheme::Right), "t").unwrap();
    assert!((j.jacobian.data()[0] - a).abs() < 1e-4);
    let j = integrated_jacobian(&enc, &scalar(0.0), &IntegrationConfig::new(3, Scheme::Midpoint), "t").unwrap();
    assert!((j.jacobian.data()[0] - a).abs() < 1e-12);
}

#[test]
fn square_times_identity_residual_is_closed_form() {
    let (a, bv) = (0.9, -1.4);
    let ga = scalar_graph(|b, x| b.mul(x, x).unwrap());
    let gb = scalar_graph(|_, x| x);
    let params = Feed::new();
    let ea = encoding(&ga, &params, scalar(a));
    let eb = encoding(&gb, &params, scalar(bv));
    for steps in [1, 4, 25] {
        let cfg = IntegrationConfig::new(steps, Scheme::Right);
        let (values, corners) = pair_attributions(&ea, &scalar(0.0), &eb, &scalar(0.0), "t", &cfg).unwrap();
        let n = steps as f64;
        assert!((values[0] - a * a * bv * (n + 1.0) / n).abs() < 1e-12);
        let residual = values[0] - corners.four_term();
        assert!((residual - a * a * bv / n).abs() < 1e-12);
    }
}

fn two_layer(seed: u64) -> (Graph, Feed) {
    let mut r = rng(seed);
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[3, 4]).unwrap();
    b.tap("t", x).unwrap();
    let w1 = b.input("w1", &[4, 6]).unwrap();
    let w2 = b.input("w2", &[6, 5]).unwrap();
    let h = b.matmul(x, w1).unwrap();
    let h = b.gelu(h);
    let h = b.matmul(h, w2).unwrap();
    let e = b.mean_rows(h);
    b.output("embedding", e).unwrap();
    let params = Feed::from([
        ("w1".to_string(), uniform(&mut r, &[4, 6], -1.0, 1.0)),
        ("w2".to_string(), uniform(&mut r, &[6, 5], -1.0, 1.0)),
    ]);
    (b.build(), params)
}

#[test]
fn midpoint_and_right_agree_at_many_steps() {
    let (g, params) = two_layer(3);
    let mut r = rng(4);
    let enc = encoding(&g, &params, uniform(&mut r, &[3, 4], -1.0, 1.0));
    let reference = Tensor::zeros(&[3, 4]);
    let right = integrated_jacobian(&enc, &reference, &IntegrationConfig::new(500, Scheme::Right), "t").unwrap();
    let mid = integrated_jacobian(&enc, &reference, &IntegrationConfig::new(500, Scheme::Midpoint), "t").unwrap();
    let scale = right.jacobian.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(right.jacobian.max_abs_diff(&mid.jacobian) < 1e-2 * scale);
}

#[test]
fn workers_do_not_change_bits() {
    let (g, params) = two_layer(5);
    let mut r = rng(6);
    let enc = encoding(&g, &params, uniform(&mut r, &[3, 4], -1.0, 1.0));
    let reference = uniform(&mut r, &[3, 4], -0.2, 0.2);
    let seq = integrated_jacobian(&enc, &reference, &IntegrationConfig::new(11, Scheme::Right), "t").unwrap();
    let cfg = IntegrationConfig {
        workers: 3,
        ..IntegrationConfig::new(11, Scheme::Right)
    };
    let par = integrated_jacobian(&enc, &reference, &cfg, "t").unwrap();
    assert!(seq.jacobian.bit_eq(&par.jacobian));
}

#[test]
fn integration_errors() {
    let (g, params) = two_layer(5);
    let enc = encoding(&g, &params, Tensor::zeros(&[3, 4]));
    let zero_steps = IntegrationConfig::new(0, Scheme::Right);
    assert!(matches!(
        integrated_jacobian(&enc, &Tensor::zeros(&[3, 4]), &zero_steps, "t"),
        Err(Error::InvalidConfig(_))
    ));
    assert!(matches!(
        integrated_jacobian(&enc, &Tensor::zeros(&[4, 3]), &IntegrationConfig::default(), "t"),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(matches!(
        integrated_jacobian(&enc, &Tensor::zeros(&[3, 4]), &IntegrationConfig::default(), "nope"),
        Err(Error::UnknownTap(_))
    ));
}

/// `g(a) = U vec(a)` with the tap on the flattened input.
fn bilinear_side(u: &Tensor) -> (Graph, Feed) {
    let (k, n) = (u.rows(), u.cols());
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[1, n]).unwrap();
    b.tap("t", x).unwrap();
    let ut = b.input("ut", &[n, k]).unwrap();
    let y = b.matmul(x, ut).unwrap();
    b.output("embedding", y).unwrap();
    let mut t = vec![0.0; n * k];
    for i in 0..k {
        for j in 0..n {
            t[j * k + i] = u.get(i, j);
        }
    }
    (b.build(), Feed::from([("ut".to_string(), Tensor::matrix(n, k, t).unwrap())]))
}

#[test]
fn bilinear_attribution_is_exact_at_every_step_count() {
    let mut r = rng(11);
    let (k, na, nb) = (5, 7, 6);
    let u = uniform(&mut r, &[k, na], -1.0, 1.0);
    let v = uniform(&mut r, &[k, nb], -1.0, 1.0);
    let a = uniform(&mut r, &[1, na], -1.0, 1.0);
    let bvec = uniform(&mut r, &[1, nb], -1.0, 1.0);
    let (ga, pa) = bilinear_side(&u);
    let (gb, pb) = bilinear_side(&v);
    let ea = encoding(&ga, &pa, a.clone());
    let eb = encoding(&gb, &pb, bvec.clone());
    for steps in [1, 7, 50] {
        let cfg = IntegrationConfig::new(steps, Scheme::Right);
        let ja = integrated_jacobian(&ea, &Tensor::zeros(&[1, na]), &cfg, "t").unwrap();
        let jb = integrated_jacobian(&eb, &Tensor::zeros(&[1, nb]), &cfg, "t").unwrap();
        let full = full_attribution_matrix(&ja, &jb).unwrap();
        let mut err: f64 = 0.0;
        for i in 0..na {
            for j in 0..nb {
                let utv: f64 = (0..k).map(|kk| u.get(kk, i) * v.get(kk, j)).sum();
                err = err.max((full.get(i, j) - a.data()[i] * utv * bvec.data()[j]).abs());
            }
        }
        assert!(err < 1e-10, "N={steps}: {err}");
        let (_, corners) = pair_attributions(&ea, &Tensor::zeros(&[1, na]), &eb, &Tensor::zeros(&[1, nb]), "t", &cfg).unwrap();
        let total: f64 = full.data().iter().sum();
        assert!((total - corners.four_term()).abs() < 1e-10);
    }
}

#[test]
fn identical_inputs_under_a_bilinear_encoder_give_a_gram_form() {
    let mut r = rng(12);
    let u = uniform(&mut r, &[4, 6], -1.0, 1.0);
    let (g, p) = bilinear_side(&u);
    let x = uniform(&mut r, &[1, 6], -1.0, 1.0);
    let e1 = encoding(&g, &p, x.clone());
    let e2 = encoding(&g, &p, x.clone());
    let zero = Tensor::zeros(&[1, 6]);
    let cfg = IntegrationConfig::new(3, Scheme::Right);
    let ja = integrated_jacobian(&e1, &zero, &cfg, "t").unwrap();
    let jb = integrated_jacobian(&e2, &zero, &cfg, "t").unwrap();
    let full = full_attribution_matrix(&ja, &jb).unwrap();
    let ux: Vec<f64> = (0..4).map(|k| (0..6).map(|i| u.get(k, i) * x.data()[i]).sum()).collect();
    let norm2: f64 = ux.iter().map(|v| v * v).sum();
    let total: f64 = full.data().iter().sum();
    assert!((total - norm2).abs() < 1e-12);
    assert!(total >= 0.0);
}

fn model(seed: u64) -> DualEncoder {
    DualEncoder::new(tiny_config(seed)).unwrap()
}

#[test]
fn inter_modal_tensor_shape_and_metadata() {
    let m = model(1);
    let mut r = rng(2);
    let img = random_image(&mut r, 3, 3, 4);
    let txt = random_text(&mut r, 4, 12);
    let t = interaction_attributions(&m, &img, &txt, &AttributionConfig::default()).unwrap();
    assert_eq!(t.shape(), vec![3, 3, 4]);
    let p = t.provenance();
    assert_eq!((p.steps, p.scheme, p.tap.as_deref()), (Some(50), Some(Scheme::Right), Some("hidden1")));
    assert_eq!(p.model_digest, m.digest());
    let c = t.corners().unwrap();
    assert!((c.f_ab - m.similarity(&img, &txt).unwrap()).abs() < 1e-12);
    let black = ImageInput::black(3, 3, 4);
    assert!((c.f_ra_b - m.similarity(&black, &txt).unwrap()).abs() < 1e-12);
    let pad = TextInput::padding(4, 0);
    assert!((c.f_a_rb - m.similarity(&img, &pad).unwrap()).abs() < 1e-12);
    assert!((c.f_ra_rb - m.similarity(&black, &pad).unwrap()).abs() < 1e-12);
}

#[test]
fn reference_inputs_annihilate() {
    let m = model(3);
    let mut r = rng(4);
    let img = random_image(&mut r, 3, 3, 4);
    let txt = random_text(&mut r, 5, 12);
    let cfg = AttributionConfig {
        integration: IntegrationConfig::new(4, Scheme::Right),
        ..Default::default()
    };
    let black = ImageInput::black(3, 3, 4);
    let t = interaction_attributions(&m, &black, &txt, &cfg).unwrap();
    assert!(t.values().iter().all(|&v| v == 0.0));
    let t = interaction_attributions(&m, &img, &TextInput::padding(5, 0), &cfg).unwrap();
    assert!(t.values().iter().all(|&v| v == 0.0));
    let t = intra_modal_attributions(&m, Input::Text(&txt), Input::Text(&TextInput::padding(3, 0)), &cfg).unwrap();
    assert_eq!(t.shape(), vec![5, 3]);
    assert!(t.values().iter().all(|&v| v == 0.0));
}

#[test]
fn text_text_tensor_is_symmetric_under_swap() {
    for seed in 0..4 {
        let m = model(seed);
        let mut r = rng(100 + seed);
        let t1 = random_text(&mut r, 3, 12);
        let t2 = random_text(&mut r, 5, 12);
        let cfg = AttributionConfig {
            integration: IntegrationConfig::new(6, Scheme::Midpoint),
            ..Default::default()
        };
        let x = intra_modal_attributions(&m, Input::Text(&t1), Input::Text(&t2), &cfg).unwrap();
        let y = intra_modal_attributions(&m, Input::Text(&t2), Input::Text(&t1), &cfg).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(x.get(i, j).to_bits(), y.get(j, i).to_bits());
            }
        }
    }
}

#[test]
fn image_image_layout() {
    let m = model(8);
    let mut r = rng(9);
    let a = random_image(&mut r, 3, 3, 4);
    let b = random_image(&mut r, 3, 3, 4);
    let cfg = AttributionConfig {
        integration: IntegrationConfig::new(3, Scheme::Right),
        ..Default::default()
    };
    let t = intra_modal_attributions(&m, Input::Image(&a), Input::Image(&b), &cfg).unwrap();
    assert_eq!(t.layout(), Layout::ImageImage { height: 3, width: 3 });
    assert_eq!(t.shape(), vec![9, 9]);
    let txt = random_text(&mut r, 2, 12);
    assert!(intra_modal_attributions(&m, Input::Image(&a), Input::Text(&txt), &cfg).is_err());
}

#[test]
fn residual_shrinks_with_steps_on_random_models() {
    let mut shrank = 0;
    let trials = 20;
    for seed in 0..trials {
        let m = model(seed);
        let mut r = rng(1000 + seed);
        let img = random_image(&mut r, 3, 3, 4);
        let txt = random_text(&mut r, 4, 12);
        let run = |steps, scheme| {
            let cfg = AttributionConfig {
                integration: IntegrationConfig::new(steps, scheme),
                ..Default::default()
            };
            interaction_attributions(&m, &img, &txt, &cfg).unwrap()
        };
        let residual = |steps, scheme| completeness_residual(&run(steps, scheme)).unwrap();
        let (coarse, fine) = (residual(5, Scheme::Right), residual(125, Scheme::Right));
        if fine.abs() <= coarse.abs() {
            shrank += 1;
        }
        let target = run(1, Scheme::Right).corners().unwrap().four_term();
        if target.abs() >= 0.05 {
            assert!(residual(200, Scheme::Right).abs() < 0.05 * target.abs(), "seed {seed}");
            assert!(residual(200, Scheme::Midpoint).abs() < 0.01 * target.abs(), "seed {seed}");
        }
    }
    assert!(shrank as f64 >= 0.95 * trials as f64);
}

#[test]
fn zero_reference_mode_uses_zero_tap_values() {
    let m = model(5);
    let mut r = rng(6);
    let img = random_image(&mut r, 3, 3, 4);
    let txt = random_text(&mut r, 3, 12);
    let cfg = AttributionConfig {
        integration: IntegrationConfig::new(1, Scheme::Right),
        reference: ReferenceMode::ZeroAtTap,
        ..Default::default()
    };
    let t = interaction_attributions(&m, &img, &txt, &cfg).unwrap();
    let img_enc = m.image_encoder(&img).unwrap();
    let zero = Tensor::zeros(&[9, 8]);
    let g0 = img_enc.embed_from("hidden1", &zero).unwrap();
    let h = m.encode_text(&txt).unwrap();
    let expected: f64 = g0.iter().zip(&h).map(|(a, b)| a * b).sum();
    assert_eq!(t.corners().unwrap().f_ra_b.to_bits(), expected.to_bits());
}

fn small_tensor() -> InteractionTensor {
    let layout = Layout::ImageText {
        height: 2,
        width: 2,
        tokens: 2,
    };
    let values = vec![1.0, -2.0, 0.5, 0.25, -1.5, 3.0, 2.0, -0.75];
    let corners = Corners {
        f_ab: 1.0,
        f_ra_b: 0.25,
        f_a_rb: -0.5,
        f_ra_rb: 0.125,
    };
    InteractionTensor::new(layout, values, Some(corners), Provenance::new("ours", "abc")).unwrap()
}

#[test]
fn single_token_span_selects_a_slice() {
    let t = small_tensor();
    let map = slice_project(&t, &Selection::Span(Span::new(0, 1))).unwrap();
    assert_eq!(map.shape(), &[2, 2]);
    assert_eq!(map.data(), &[1.0, 0.5, -1.5, 2.0]);
}

#[test]
fn projections_are_additive() {
    let t = small_tensor();
    let full = slice_project(&t, &Selection::Span(Span::new(0, 2))).unwrap();
    let s0 = slice_project(&t, &Selection::Span(Span::new(0, 1))).unwrap();
    let s1 = slice_project(&t, &Selection::Span(Span::new(1, 2))).unwrap();
    for i in 0..4 {
        assert!((s0.data()[i] + s1.data()[i] - full.data()[i]).abs() < 1e-12);
    }
    let all = slice_project(&t, &Selection::Bbox(BBox::new(0, 0, 2, 2))).unwrap();
    let top = slice_project(&t, &Selection::Bbox(BBox::new(0, 0, 1, 2))).unwrap();
    let bottom = slice_project(&t, &Selection::Bbox(BBox::new(1, 0, 2, 2))).unwrap();
    for i in 0..2 {
        assert!((top.data()[i] + bottom.data()[i] - all.data()[i]).abs() < 1e-12);
    }
    let a: f64 = full.data().iter().sum();
    let b: f64 = all.data().iter().sum();
    assert!((a - t.total()).abs() < 1e-12 && (b - t.total()).abs() < 1e-12);
    assert_eq!(t.total(), 2.5);
    assert_eq!(completeness_residual(&t).unwrap(), 2.5 - (1.0 - 0.25 + 0.5 + 0.125));
}

#[test]
fn bad_selections_are_rejected() {
    let t = small_tensor();
    for sel in [
        Selection::Span(Span::new(1, 1)),
        Selection::Span(Span::new(1, 3)),
        Selection::Bbox(BBox::new(0, 0, 0, 2)),
        Selection::Bbox(BBox::new(0, 1, 2, 3)),
    ] {
        assert!(matches!(slice_project(&t, &sel), Err(Error::InvalidInput(_))), "{sel:?}");
    }
    let tt = InteractionTensor::new(
        Layout::TextText { left: 2, right: 3 },
        vec![0.0; 6],
        None,
        Provenance::new("ours", "x"),
    )
    .unwrap();
    assert!(slice_project(&tt, &Selection::Bbox(BBox::new(0, 0, 1, 1))).is_err());
    assert_eq!(slice_project(&tt, &Selection::Span(Span::new(0, 3))).unwrap().shape(), &[2]);
    assert!(completeness_residual(&tt).is_err());
}

#[test]
fn selection_json_forms() {
    let s: Selection = serde_json::from_str(r#"{"span":[1,3]}"#).unwrap();
    assert_eq!(s, Selection::Span(Span::new(1, 3)));
    let b: Selection = serde_json::from_str(r#"{"bbox":[0,1,2,3]}"#).unwrap();
    assert_eq!(b, Selection::Bbox(BBox::new(0, 1, 2, 3)));
    assert_eq!(serde_json::to_string(&b).unwrap(), r#"{"bbox":[0,1,2,3]}"#);
}

#[test]
fn tensor_files_round_trip_bit_exactly() {
    let m = model(2);
    let mut r = rng(3);
    let img = random_image(&mut r, 3, 3, 4);
    let txt = random_text(&mut r, 4, 12);
    let cfg = AttributionConfig {
        integration: IntegrationConfig::new(3, Scheme::Right),
        ..Default::default()
    };
    let t = interaction_attributions(&m, &img, &txt, &cfg).unwrap();
    let mut buf = Vec::new();
    t.write_to(&mut buf).unwrap();
    let back = InteractionTensor::from_bytes(&buf).unwrap();
    assert_eq!(back, t);
    let json = InteractionTensor::from_json(&t.to_json().unwrap()).unwrap();
    assert_eq!(json, t);
    assert!(json.values().iter().zip(t.values()).all(|(a, b)| a.to_bits() == b.to_bits()));

    assert!(matches!(InteractionTensor::from_bytes(&buf[..buf.len() - 8]), Err(Error::Format(_))));
    assert!(matches!(InteractionTensor::from_bytes(b"garbage!"), Err(Error::Format(_))));
    let mut doc: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
    doc["version"] = 7.into();
    assert!(matches!(InteractionTensor::from_json(&doc.to_string()), Err(Error::Version { found: 7, .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.iat");
    t.save(&path).unwrap();
    assert_eq!(InteractionTensor::load(&path).unwrap(), t);
}

#[test]
fn tensor_rejects_bad_values() {
    let layout = Layout::TextText { left: 1, right: 2 };
    assert!(matches!(
        InteractionTensor::new(layout, vec![1.0], None, Provenance::new("x", "y")),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(matches!(
        InteractionTensor::new(layout, vec![1.0, f64::NAN], None, Provenance::new("x", "y")),
        Err(Error::NonFinite(_))
    ));
}
