use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::Result;
use crate::tensor::{Feed, Graph, GraphBuilder, NodeId, Tensor};

pub(crate) const IMAGE: &str = "image";
pub(crate) const TEXT: &str = "text";

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

fn tower_shapes(cfg: &ModelConfig, prefix: &str, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.width;
    let m = cfg.mlp_width;
    let inv = |n: usize| 1.0 / (n as f64).sqrt();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    if prefix == IMAGE {
        push(format!("{prefix}.patch_w"), vec![cfg.patch_features, d], Init::Normal(inv(cfg.patch_features)));
        push(format!("{prefix}.patch_b"), vec![d], Init::Zeros);
        push(format!("{prefix}.pos"), vec![cfg.grid_height * cfg.grid_width, d], Init::Normal(0.1));
    } else {
        push(format!("{prefix}.tok"), vec![cfg.vocab_size, d], Init::Normal(1.0));
        push(format!("{prefix}.pos"), vec![cfg.max_len, d], Init::Normal(0.1));
    }
    let residual = 0.5 * inv(cfg.blocks.max(1));
    for t in 0..cfg.blocks {
        let b = format!("{prefix}.block{t}");
        push(format!("{b}.ln1_g"), vec![d], Init::Ones);
        push(format!("{b}.ln1_b"), vec![d], Init::Zeros);
        for w in ["wq", "wk", "wv"] {
            push(format!("{b}.{w}"), vec![d, d], Init::Normal(inv(d)));
        }
        push(format!("{b}.wo"), vec![d, d], Init::Normal(inv(d) * residual));
        push(format!("{b}.ln2_g"), vec![d], Init::Ones);
        push(format!("{b}.ln2_b"), vec![d], Init::Zeros);
        push(format!("{b}.w1"), vec![d, m], Init::Normal(inv(d)));
        push(format!("{b}.b1"), vec![m], Init::Zeros);
        push(format!("{b}.w2"), vec![m, d], Init::Normal(inv(m) * residual));
        push(format!("{b}.b2"), vec![d], Init::Zeros);
    }
    push(format!("{prefix}.lnf_g"), vec![d], Init::Ones);
    push(format!("{prefix}.lnf_b"), vec![d], Init::Zeros);
    push(format!("{prefix}.pool_q"), vec![1, d], Init::Normal(inv(d)));
    push(format!("{prefix}.pool_k"), vec![d, d], Init::Normal(inv(d)));
    push(format!("{prefix}.pool_v"), vec![d, d], Init::Normal(inv(d)));
    push(format!("{prefix}.proj"), vec![d, cfg.embed_dim], Init::Normal(inv(d)));
}

fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    tower_shapes(cfg, IMAGE, &mut out);
    tower_shapes(cfg, TEXT, &mut out);
    out
}

pub(crate) fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    shapes(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

pub(crate) fn init_params(cfg: &ModelConfig) -> Feed {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    shapes(cfg)
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            (name, Tensor::from_parts_unchecked(shape, data))
        })
        .collect()
}

struct Tower<'a> {
    b: GraphBuilder,
    cfg: &'a ModelConfig,
    prefix: &'static str,
}

impl Tower<'_> {
    fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.b.input(&format!("{}.{name}", self.prefix), shape)
    }

    fn layer_norm(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let d = self.cfg.width;
        let g = self.param(&format!("{name}_g"), &[d])?;
        let beta = self.param(&format!("{name}_b"), &[d])?;
        self.b.layer_norm(x, g, beta)
    }

    fn block(&mut self, h: NodeId, t: usize) -> Result<NodeId> {
        let d = self.cfg.width;
        let m = self.cfg.mlp_width;
        let p = format!("block{t}");
        let u = self.layer_norm(h, &format!("{p}.ln1"))?;
        let wq = self.param(&format!("{p}.wq"), &[d, d])?;
        let wk = self.param(&format!("{p}.wk"), &[d, d])?;
        let wv = self.param(&format!("{p}.wv"), &[d, d])?;
        let wo = self.param(&format!("{p}.wo"), &[d, d])?;
        let q = self.b.matmul(u, wq)?;
        let k = self.b.matmul(u, wk)?;
        let v = self.b.matmul(u, wv)?;
        let kt = self.b.transpose(k)?;
        let scores = self.b.matmul(q, kt)?;
        let scores = self.b.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = self.b.softmax(scores);
        let mixed = self.b.matmul(attn, v)?;
        let o = self.b.matmul(mixed, wo)?;
        let h = self.b.add(h, o)?;

        let u = self.layer_norm(h, &format!("{p}.ln2"))?;
        let w1 = self.param(&format!("{p}.w1"), &[d, m])?;
        let b1 = self.param(&format!("{p}.b1"), &[m])?;
        let w2 = self.param(&format!("{p}.w2"), &[m, d])?;
        let b2 = self.param(&format!("{p}.b2"), &[d])?;
        let z = self.b.matmul(u, w1)?;
        let z = self.b.add_row(z, b1)?;
        let z = self.b.gelu(z);
        let z = self.b.matmul(z, w2)?;
        let z = self.b.add_row(z, b2)?;
        self.b.add(h, z)
    }

    fn finish(mut self, h0: NodeId) -> Result<Graph> {
        let d = self.cfg.width;
        let k = self.cfg.embed_dim;
        self.b.tap("hidden0", h0)?;
        let mut h = h0;
        for t in 0..self.cfg.blocks {
            h = self.block(h, t)?;
            self.b.tap(&format!("hidden{}", t + 1), h)?;
        }
        let u = self.layer_norm(h, "lnf")?;
        let proj = self.param("proj", &[d, k])?;
        let tokens = self.b.matmul(u, proj)?;
        self.b.output("tokens", tokens)?;

        let q = self.param("pool_q", &[1, d])?;
        let wk = self.param("pool_k", &[d, d])?;
        let wv = self.param("pool_v", &[d, d])?;
        let keys = self.b.matmul(u, wk)?;
        let values = self.b.matmul(u, wv)?;
        let kt = self.b.transpose(keys)?;
        let scores = self.b.matmul(q, kt)?;
        let scores = self.b.scale(scores, 1.0 / (d as f64).sqrt())?;
        let weights = self.b.softmax(scores);
        let pooled = self.b.matmul(weights, values)?;
        let mut e = self.b.matmul(pooled, proj)?;
        if self.cfg.normalize {
            e = self.b.l2_normalize(e);
        }
        self.b.output("embedding", e)?;
        Ok(self.b.build())
    }
}

pub(crate) fn image_graph(cfg: &ModelConfig) -> Result<Graph> {
    let mut t = Tower {
        b: GraphBuilder::new(),
        cfg,
        prefix: IMAGE,
    };
    let p = cfg.grid_height * cfg.grid_width;
    let x = t.b.input("patches", &[p, cfg.patch_features])?;
    let w = t.param("patch_w", &[cfg.patch_features, cfg.width])?;
    let bias = t.param("patch_b", &[cfg.width])?;
    let pos = t.param("pos", &[p, cfg.width])?;
    let h = t.b.matmul(x, w)?;
    let h = t.b.add_row(h, bias)?;
    let h0 = t.b.add(h, pos)?;
    t.finish(h0)
}

pub(crate) fn text_graph(cfg: &ModelConfig, len: usize) -> Result<Graph> {
    let mut t = Tower {
        b: GraphBuilder::new(),
        cfg,
        prefix: TEXT,
    };
    let ids = t.b.input("ids", &[len])?;
    let positions = t.b.input("positions", &[len])?;
    let tok = t.param("tok", &[cfg.vocab_size, cfg.width])?;
    let pos = t.param("pos", &[cfg.max_len, cfg.width])?;
    let e = t.b.embedding(tok, ids)?;
    let pe = t.b.embedding(pos, positions)?;
    let h0 = t.b.add(e, pe)?;
    t.finish(h0)
}
