#![allow(dead_code)]

use interattr::tensor::{Feed, Graph, GraphBuilder, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Central-difference gradient of `sum(seed * output)` with respect to one feed entry.
pub fn finite_difference(
    graph: &Graph,
    inputs: &Feed,
    wrt: &str,
    output: &str,
    seed: &Tensor,
    step: f64,
) -> Vec<f64> {
    let objective = |feed: &Feed| -> f64 {
        let fwd = graph.forward(feed, &Feed::new()).unwrap();
        let y = fwd.output(output).unwrap();
        y.data().iter().zip(seed.data()).map(|(a, b)| a * b).sum()
    };
    let base = inputs[wrt].clone();
    (0..base.numel())
        .map(|i| {
            let mut plus = base.data().to_vec();
            let mut minus = base.data().to_vec();
            plus[i] += step;
            minus[i] -= step;
            let mut feed = inputs.clone();
            feed.insert(wrt.into(), Tensor::new(base.shape().to_vec(), plus).unwrap());
            let fp = objective(&feed);
            feed.insert(wrt.into(), Tensor::new(base.shape().to_vec(), minus).unwrap());
            let fm = objective(&feed);
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Component-wise relative error with a 1e-3 floor on the magnitude.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

pub fn tiny_config(seed: u64) -> interattr::encoders::ModelConfig {
    interattr::encoders::ModelConfig {
        grid_height: 3,
        grid_width: 3,
        patch_features: 4,
        vocab_size: 12,
        max_len: 6,
        width: 8,
        mlp_width: 12,
        blocks: 2,
        embed_dim: 5,
        init_seed: seed,
        ..Default::default()
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, f: usize) -> interattr::encoders::ImageInput {
    let data = (0..h * w * f).map(|_| rng.random_range(0.0..1.0)).collect();
    interattr::encoders::ImageInput::new(h, w, f, data).unwrap()
}

pub fn random_text(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> interattr::encoders::TextInput {
    interattr::encoders::TextInput::new((0..len).map(|_| rng.random_range(1..vocab)).collect()).unwrap()
}

/// `x [len, D] -> mean_p (m x_p)` for `m: [K, D]`, with the tap `t` on `x`.
pub fn linear_mean_side(m: &Tensor, len: usize) -> (Graph, Feed) {
    let (k, d) = (m.rows(), m.cols());
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[len, d]).unwrap();
    b.tap("t", x).unwrap();
    let mt = b.input("mt", &[d, k]).unwrap();
    let y = b.matmul(x, mt).unwrap();
    let y = b.mean_rows(y);
    b.output("embedding", y).unwrap();
    let t: Vec<f64> = (0..d).flat_map(|j| (0..k).map(move |i| (i, j))).map(|(i, j)| m.get(i, j)).collect();
    (b.build(), Feed::from([("mt".to_string(), Tensor::matrix(d, k, t).unwrap())]))
}

/// Checks the vjp of every leaf against central differences.
pub fn check_against_fd(g: &Graph, inputs: &Feed, seed_rng: u64) -> f64 {
    let mut r = rng(seed_rng);
    let fwd = g.forward(inputs, &Feed::new()).unwrap();
    let y_shape = fwd.output("y").unwrap().shape().to_vec();
    let seed = uniform(&mut r, &y_shape, -1.0, 1.0);
    let names: Vec<&str> = inputs.keys().map(String::as_str).filter(|n| *n != "ids").collect();
    let grads = fwd.vjp(&[("y", &seed)], &names).unwrap();
    names
        .iter()
        .map(|n| {
            let fd = finite_difference(g, inputs, n, "y", &seed, 1e-5);
            max_relative_error(grads[*n].data(), &fd)
        })
        .fold(0.0, f64::max)
}

fn unary(f: fn(&mut GraphBuilder, usize) -> usize) -> impl Fn(&mut GraphBuilder) {
    move |b: &mut GraphBuilder| {
        let x = b.input("x", &[3, 4]).unwrap();
        let y = f(b, x);
        b.output("y", y).unwrap();
    }
}

pub fn primitive_graphs() -> Vec<(&'static str, Graph)> {
    let mut out = Vec::new();
    let mut add = |name: &'static str, build: &dyn Fn(&mut GraphBuilder)| {
        let mut b = GraphBuilder::new();
        build(&mut b);
        out.push((name, b.build()));
    };
    add("matmul", &|b| {
        let x = b.input("x", &[3, 4]).unwrap();
        let w = b.input("w", &[4, 2]).unwrap();
        let y = b.matmul(x, w).unwrap();
        b.output("y", y).unwrap();
    });
    add("transpose", &unary(|b, x| b.transpose(x).unwrap()));
    add("add", &|b| {
        let x = b.input("x", &[3, 4]).unwrap();
        let w = b.input("w", &[3, 4]).unwrap();
        let y = b.add(x, w).unwrap();
        b.output("y", y).unwrap();
    });
    add("add_row", &|b| {
        let x = b.input("x", &[3, 4]).unwrap();
        let w = b.input("w", &[4]).unwrap();
        let y = b.add_row(x, w).unwrap();
        b.output("y", y).unwrap();
    });
    add("mul", &|b| {
        let x = b.input("x", &[3, 4]).unwrap();
        let w = b.input("w", &[3, 4]).unwrap();
        let y = b.mul(x, w).unwrap();
        b.output("y", y).unwrap();
    });
    add("scale", &unary(|b, x| b.scale(x, -1.7).unwrap()));
    add("relu", &unary(|b, x| b.relu(x)));
    add("gelu", &unary(|b, x| b.gelu(x)));
    add("layer_norm", &|b| {
        let x = b.input("x", &[3, 4]).unwrap();
        let g = b.input("gamma", &[4]).unwrap();
        let be = b.input("beta", &[4]).unwrap();
        let y = b.layer_norm(x, g, be).unwrap();
        b.output("y", y).unwrap();
    });
    add("softmax", &unary(|b, x| b.softmax(x)));
    add("embedding", &|b| {
        let t = b.input("table", &[5, 3]).unwrap();
        let ids = b.input("ids", &[4]).unwrap();
        let y = b.embedding(t, ids).unwrap();
        b.output("y", y).unwrap();
    });
    add("mean_rows", &unary(|b, x| b.mean_rows(x)));
    add("sum", &unary(|b, x| b.sum(x)));
    add("l2_normalize", &unary(|b, x| b.l2_normalize(x)));
    out
}

pub fn random_feed(g: &Graph, r: &mut ChaCha8Rng) -> Feed {
    g.input_names()
        .map(|n| {
            let shape = g.input_shape(n).unwrap().to_vec();
            let t = if n == "ids" {
                let k: usize = shape.iter().product();
                Tensor::new(shape, (0..k).map(|_| r.random_range(0..5) as f64).collect()).unwrap()
            } else {
                // keep relu inputs away from the kink
                let mut t = uniform(r, &shape, -2.0, 2.0).into_data();
                for v in &mut t {
                    if v.abs() < 1e-2 {
                        *v += 0.05;
                    }
                }
                Tensor::new(shape, t).unwrap()
            };
            (n.to_string(), t)
        })
        .collect()
}
