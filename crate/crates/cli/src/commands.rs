use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use interattr::attribution::{completeness_residual, slice_project, AttributionConfig, Corners, InteractionTensor, Selection};
use interattr::data::{generate_corpus, load_manifest, make_hard_negative, save_manifest, Corpus, CorpusConfig, GroundedPair, Split};
use interattr::encoders::{load_checkpoint, save_checkpoint, train_with, Checkpoint, DualEncoder, Modality, ModelConfig, TrainConfig};
use interattr::evaluation::{
    aso_test, cross_attribution_signs, hard_negative_deltas, perturbation_curve, point_game_records, AsoConfig, Comparison,
    EvalReport, MethodReport, PerturbationMode,
};
use interattr::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::heatmap::{write_heatmap, Sidecar};
use crate::{attribute_pair, Method};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Attribute(a) => cmd_attribute(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Perturb(a) => cmd_perturb(&a),
        Command::Serve(a) => crate::server::cmd_serve(&a),
    }
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{what} `{}` does not exist", path.display())))
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    existing(path, "corpus")?;
    load_manifest(path)
}

pub fn load_model(path: &Path) -> Result<DualEncoder> {
    existing(path, "checkpoint")?;
    Ok(load_checkpoint(path, None)?.model)
}

fn load(args: &ModelArgs) -> Result<(Corpus, DualEncoder)> {
    Ok((load_corpus(&args.corpus)?, load_model(&args.checkpoint)?))
}

fn test_items(corpus: &Corpus, limit: Option<usize>) -> Vec<GroundedPair> {
    let items = corpus.split(Split::Test).cloned();
    match limit {
        Some(n) => items.take(n).collect(),
        None => items.collect(),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = match a.domain {
        Domain::Primary => CorpusConfig::primary_domain(a.seed),
        Domain::Second => CorpusConfig::second_domain(a.seed),
    };
    if let Some(n) = a.train_size {
        cfg.train_size = n;
    }
    if let Some(n) = a.test_size {
        cfg.test_size = n;
    }
    let corpus = generate_corpus(&cfg)?;
    save_manifest(&corpus, &a.out)?;
    println!("wrote {} pairs to {}", corpus.items.len(), a.out.display());
    Ok(())
}

/// Encoder shapes matching a corpus's grid, vocabulary and caption cap.
pub fn model_config_for(corpus: &Corpus, init_seed: u64) -> ModelConfig {
    let c = &corpus.config;
    ModelConfig {
        grid_height: c.grid_height,
        grid_width: c.grid_width,
        patch_features: c.features,
        vocab_size: corpus.vocabulary.len(),
        max_len: c.max_caption_len,
        pad_id: corpus.vocabulary.pad_id(),
        init_seed,
        ..ModelConfig::default()
    }
}

pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    checkpoint.with_file_name(format!("{stem}.loss.csv"))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let mut model = match &a.init {
        Some(path) => load_model(path)?,
        None => DualEncoder::new(model_config_for(&corpus, a.seed))?,
    };
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        lr_start: a.lr_start.unwrap_or(defaults.lr_start),
        lr_end: a.lr_end.unwrap_or(defaults.lr_end),
        ..defaults
    };
    let pairs: Vec<_> = corpus
        .split(Split::Train)
        .map(|p| (p.image.clone(), p.caption.clone()))
        .collect();
    let report = train_with(&mut model, &pairs, &cfg, |e, loss| eprintln!("epoch {:>3}  loss {loss:.4}", e + 1))?;
    let mut log = String::from("epoch,loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        log.push_str(&format!("{},{l}\n", e + 1));
    }
    std::fs::write(loss_log_path(&a.out), log)?;
    let ckpt = Checkpoint {
        model,
        train_config: Some(cfg),
        epoch_losses: report.epoch_losses,
    };
    save_checkpoint(&ckpt, &a.out)?;
    println!("wrote {} (digest {})", a.out.display(), ckpt.model.digest());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub pair_id: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub total: f64,
    #[serde(default)]
    pub corners: Option<Corners>,
    #[serde(default)]
    pub completeness_residual: Option<f64>,
}

pub fn cmd_attribute(a: &AttributeArgs) -> Result<()> {
    let (corpus, model) = load(&a.model)?;
    let cfg = a.integration.config();
    let mut pairs: Vec<&GroundedPair> = if a.pairs.is_empty() {
        corpus
            .items
            .iter()
            .filter(|p| match a.split {
                SplitArg::Train => p.split == Split::Train,
                SplitArg::Test => p.split == Split::Test,
                SplitArg::All => true,
            })
            .collect()
    } else {
        a.pairs
            .iter()
            .map(|id| corpus.get(id).ok_or_else(|| Error::UnknownName(id.clone())))
            .collect::<Result<_>>()?
    };
    if let Some(n) = a.limit {
        pairs.truncate(n);
    }
    std::fs::create_dir_all(&a.out)?;
    let tensors: Vec<InteractionTensor> = pairs
        .par_iter()
        .map(|p| attribute_pair(&model, p, a.method, &cfg, a.seed))
        .collect::<Result<_>>()?;
    let mut index = Vec::with_capacity(pairs.len());
    for (p, t) in pairs.iter().zip(&tensors) {
        let file = format!("{}.iattr", p.id);
        t.save(a.out.join(&file))?;
        if a.heatmaps {
            for (k, ann) in p.annotations.iter().enumerate() {
                let map = slice_project(t, &Selection::Span(ann.span))?;
                let sidecar = Sidecar {
                    pair_id: p.id.clone(),
                    class: ann.class_name.clone(),
                    span: [ann.span.start, ann.span.end],
                    shape: map.shape().to_vec(),
                    scale: crate::heatmap::symmetric_scale(map.data()),
                    values: map.data().to_vec(),
                };
                write_heatmap(&a.out, &format!("{}.{k}", p.id), &map, &sidecar)?;
            }
        }
        index.push(IndexEntry {
            pair_id: p.id.clone(),
            file,
            shape: t.shape(),
            total: t.total(),
            corners: t.corners().copied(),
            completeness_residual: completeness_residual(t).ok(),
        });
    }
    std::fs::write(a.out.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    println!("wrote {} tensors to {}", index.len(), a.out.display());
    Ok(())
}

/// Patch scores (row sums) and token scores (column sums) used to order
/// removals in the perturbation curves.
pub fn rankings(t: &InteractionTensor) -> (Vec<f64>, Vec<f64>) {
    let m = t.matrix();
    let rows = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
    let cols = (0..m.cols()).map(|j| (0..m.rows()).map(|i| m.get(i, j)).sum()).collect();
    (rows, cols)
}

fn random_rankings(t: &InteractionTensor, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = t.layout();
    let rows = (0..layout.rows()).map(|_| rng.random()).collect();
    let cols = (0..layout.cols()).map(|_| rng.random()).collect();
    (rows, cols)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub pair_id: String,
    pub method: String,
    pub mode: PerturbationMode,
    pub fractions: Vec<f64>,
    pub scores: Vec<f64>,
    pub auc: f64,
}

fn curves_for(
    model: &DualEncoder,
    pair: &GroundedPair,
    method: &str,
    (rows, cols): &(Vec<f64>, Vec<f64>),
) -> Result<Vec<CurveRecord>> {
    PerturbationMode::ALL
        .iter()
        .map(|&mode| {
            let ranking = match mode.side() {
                Modality::Image => rows,
                Modality::Text => cols,
            };
            let c = perturbation_curve(model, &pair.image, &pair.caption, ranking, mode)?;
            Ok(CurveRecord {
                pair_id: pair.id.clone(),
                method: method.to_string(),
                mode,
                auc: c.auc()?,
                fractions: c.fractions,
                scores: c.scores,
            })
        })
        .collect()
}

fn mean_auc(curves: &[CurveRecord]) -> BTreeMap<PerturbationMode, f64> {
    let mut sums: BTreeMap<PerturbationMode, (f64, usize)> = BTreeMap::new();
    for c in curves {
        let e = sums.entry(c.mode).or_default();
        e.0 += c.auc;
        e.1 += 1;
    }
    sums.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()
}

fn attribute_all(
    model: &DualEncoder,
    items: &[GroundedPair],
    method: Method,
    cfg: &AttributionConfig,
    seed: u64,
) -> Result<HashMap<String, InteractionTensor>> {
    items
        .par_iter()
        .map(|p| Ok((p.id.clone(), attribute_pair(model, p, method, cfg, seed)?)))
        .collect()
}

fn cached(tensors: &HashMap<String, InteractionTensor>) -> impl Fn(&GroundedPair) -> Result<InteractionTensor> + Sync + '_ {
    |p| tensors.get(&p.id).cloned().ok_or_else(|| Error::UnknownName(p.id.clone()))
}

fn curves_all(
    model: &DualEncoder,
    items: &[GroundedPair],
    method: &str,
    ranking: impl Fn(usize, &InteractionTensor) -> (Vec<f64>, Vec<f64>) + Sync,
    tensors: &HashMap<String, InteractionTensor>,
) -> Result<Vec<CurveRecord>> {
    let per_item: Vec<Vec<CurveRecord>> = items
        .par_iter()
        .enumerate()
        .map(|(i, p)| curves_for(model, p, method, &ranking(i, &tensors[&p.id])))
        .collect::<Result<_>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

fn random_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64
}

fn compare(a: &MethodReport, b: &MethodReport, cfg: &AsoConfig) -> Result<Comparison> {
    Ok(Comparison {
        a: a.method.clone(),
        b: b.method.clone(),
        verdict: aso_test(&a.pge_values(), &b.pge_values(), cfg)?,
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let report = eval_report(a)?;
    let csv = a.out.with_extension("csv");
    report.save(&a.out, Some(&csv))?;
    for m in &report.methods {
        let pg = &m.point_game;
        println!("{:<12} mPGE {:>6.2}  PGE>0.8 {:>6.2}  PGA {:>6.2}", m.method, pg.mpge, pg.pge_above_08, pg.pga);
    }
    for c in &report.comparisons {
        println!("{} vs {}: {:?}", c.a, c.b, c.verdict.decision);
    }
    Ok(())
}

pub fn eval_report(a: &EvalArgs) -> Result<EvalReport> {
    if a.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    let aso = a.aso();
    aso.validate()?;
    let (corpus, model) = load(&a.model)?;
    let cfg = a.integration.config();
    let items = test_items(&corpus, a.limit);
    let mut report = EvalReport::new(&model.digest());

    let mut ours = None;
    for &method in &a.methods {
        let tensors = attribute_all(&model, &items, method, &cfg, a.seed)?;
        let mut m = MethodReport::new(method.as_str(), point_game_records(&items, cached(&tensors))?)?;
        if a.auc {
            m.auc = mean_auc(&curves_all(&model, &items, method.as_str(), |_, t| rankings(t), &tensors)?);
        }
        report.methods.push(m);
        if method == Method::Ours {
            ours = Some(tensors);
        }
    }
    for other in &report.methods[1..] {
        report.comparisons.push(compare(&report.methods[0], other, &aso)?);
    }

    if let Some(path) = &a.tuned_checkpoint {
        let tuned = load_model(path)?;
        let method = a.methods[0];
        let tensors = attribute_all(&tuned, &items, method, &cfg, a.seed)?;
        let m = MethodReport::new(&format!("{method}@tuned"), point_game_records(&items, cached(&tensors))?)?;
        report.comparisons.push(compare(&m, &report.methods[0], &aso)?);
        report.methods.push(m);
    }

    if let Some(tensors) = &ours {
        report.object_discrimination = match cross_attribution_signs(&items, cached(tensors)) {
            Ok(d) => Some(d),
            Err(Error::Empty(_)) => None,
            Err(e) => return Err(e),
        };
        let pairs: Vec<(GroundedPair, GroundedPair)> = items
            .iter()
            .filter(|p| !p.annotations.is_empty())
            .map(|p| Ok((p.clone(), make_hard_negative(p, &corpus.config.classes, &corpus.vocabulary, a.seed)?)))
            .collect::<Result<_>>()?;
        let negatives: Vec<GroundedPair> = pairs.iter().map(|(_, n)| n.clone()).collect();
        let mut all = attribute_all(&model, &negatives, Method::Ours, &cfg, a.seed)?;
        all.extend(tensors.iter().map(|(k, v)| (k.clone(), v.clone())));
        if !pairs.is_empty() {
            report.hard_negatives = Some(hard_negative_deltas(
                &pairs,
                |p: &GroundedPair| model.similarity(&p.image, &p.caption),
                cached(&all),
            )?);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub version: u32,
    pub model_digest: String,
    pub mean_auc: BTreeMap<String, BTreeMap<PerturbationMode, f64>>,
    pub curves: Vec<CurveRecord>,
}

pub fn perturb_report(a: &PerturbArgs) -> Result<PerturbReport> {
    let (corpus, model) = load(&a.model)?;
    let cfg = a.integration.config();
    let items = test_items(&corpus, a.limit);
    let mut curves = Vec::new();
    let mut first = None;
    for &method in &a.methods {
        let tensors = attribute_all(&model, &items, method, &cfg, a.seed)?;
        curves.extend(curves_all(&model, &items, method.as_str(), |_, t| rankings(t), &tensors)?);
        first.get_or_insert(tensors);
    }
    if let Some(tensors) = &first {
        let random = |i: usize, t: &InteractionTensor| random_rankings(t, random_seed(a.seed, i));
        curves.extend(curves_all(&model, &items, "random", random, tensors)?);
    }
    let mut by_method: BTreeMap<String, Vec<CurveRecord>> = BTreeMap::new();
    for c in &curves {
        by_method.entry(c.method.clone()).or_default().push(c.clone());
    }
    Ok(PerturbReport {
        version: 1,
        model_digest: model.digest(),
        mean_auc: by_method.iter().map(|(m, cs)| (m.clone(), mean_auc(cs))).collect(),
        curves,
    })
}

pub fn cmd_perturb(a: &PerturbArgs) -> Result<()> {
    let report = perturb_report(a)?;
    std::fs::write(&a.out, serde_json::to_string(&report)?)?;
    let mut table = String::from("method");
    for m in PerturbationMode::ALL {
        table.push_str(&format!(",{m}"));
    }
    table.push('\n');
    for (method, aucs) in &report.mean_auc {
        table.push_str(method);
        for m in PerturbationMode::ALL {
            table.push_str(&format!(",{:.4}", aucs[&m]));
        }
        table.push('\n');
    }
    std::fs::write(a.out.with_extension("csv"), &table)?;
    print!("{table}");
    Ok(())
}
