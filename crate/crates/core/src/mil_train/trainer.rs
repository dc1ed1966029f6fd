use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{ranking_loss, BagScores, RankingLossConfig};
use super::optimizer::{Optimizer, OptimizerKind};
use super::sampler::sample_pairs;
use crate::bagging::{Bag, BagLabel};
use crate::error::{Error, Result};
use crate::evalkit::{frame_level_auc, AnnotationTrack, RocCurve, ScoreMap, FRAMES_PER_SEGMENT};
use crate::feature_store::{DatasetManifest, FeatureLoader, VideoLabel};
use crate::net::{init, layers, ClassifierParams, Mode, NetConfig, ParamGrads, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub pairs_per_batch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// One epoch is enough iterations for `pairs_per_batch`-sized batches to
    /// cover the larger class once.
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub iterations: Option<usize>,
    pub seed: u64,
    /// Held-out evaluation period in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub precision: Precision,
    pub net: NetConfig,
    pub cell_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pairs_per_batch: 30,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adagrad,
            epochs: 10,
            iterations: None,
            seed: 0,
            eval_every: 0,
            precision: Precision::F32,
            net: NetConfig::default(),
            cell_size: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_batch == 0 {
            return Err(Error::Config("pairs_per_batch must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.cell_size == 0 {
            return Err(Error::Config("cell_size must be >= 1".into()));
        }
        self.net.validate()
    }

    pub fn iterations_for(&self, manifest: &DatasetManifest) -> usize {
        if let Some(n) = self.iterations {
            return n;
        }
        let larger = manifest
            .indices_with(VideoLabel::Anomalous)
            .len()
            .max(manifest.indices_with(VideoLabel::Normal).len());
        self.epochs * larger.div_ceil(self.pairs_per_batch)
    }
}

/// One bag with every instance already pooled to a feature vector, rows in
/// cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledBag {
    pub video_id: String,
    pub segment_index: u32,
    pub label: BagLabel,
    pub grid_cols: usize,
    /// (cells, channels)
    pub features: Array2<f64>,
}

impl PooledBag {
    pub fn from_bag(bag: &Bag) -> Result<Self> {
        let n = bag.instances.len();
        let cols = (n as f64).sqrt().round() as usize;
        if n == 0 || cols * cols != n {
            return Err(Error::Shape(format!("bag of {n} instances is not a square grid")));
        }
        let channels = bag.instances[0].data.dim().0;
        let mut features = Array2::zeros((n, channels));
        let mut seen = vec![false; n];
        for inst in &bag.instances {
            if inst.cell_row >= cols || inst.cell_col >= cols {
                return Err(Error::OutOfGrid {
                    row: inst.cell_row,
                    col: inst.cell_col,
                    rows: cols,
                    cols,
                });
            }
            let i = inst.cell_row * cols + inst.cell_col;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::GridCollision {
                    row: inst.cell_row,
                    col: inst.cell_col,
                });
            }
            if inst.data.dim().0 != channels {
                return Err(Error::Shape("instances disagree on channel count".into()));
            }
            features.row_mut(i).assign(&layers::pool_f32::<f64>(inst.data.view()));
        }
        Ok(PooledBag {
            video_id: bag.video_id.clone(),
            segment_index: bag.segment_index,
            label: bag.label,
            grid_cols: cols,
            features,
        })
    }

    fn features_as<F: Real>(&self) -> Array2<F> {
        self.features.mapv(|v| F::from_f64(v).unwrap())
    }
}

/// Loads, splits and pools every manifest entry, in manifest order.
pub fn pool_manifest(
    manifest: &DatasetManifest,
    loader: &dyn FeatureLoader,
    cell_size: usize,
) -> Result<Vec<PooledBag>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let cuboid = loader.load(e)?;
            PooledBag::from_bag(&Bag::from_cuboid(&cuboid, e.label, cell_size)?)
        })
        .collect()
}

fn bag_scores<F: Real>(scores: &Array1<F>, cols: usize) -> Result<BagScores<F>> {
    BagScores::new(scores.to_vec(), cols)
}

/// EVAL-mode per-cell scores of one bag, in row-major cell order.
pub fn score_bag<F: Real>(params: &ClassifierParams<F>, bag: &Bag) -> Result<BagScores<F>> {
    let pooled = PooledBag::from_bag(bag)?;
    score_pooled(params, &pooled)
}

pub fn score_pooled<F: Real>(params: &ClassifierParams<F>, bag: &PooledBag) -> Result<BagScores<F>> {
    bag_scores(&params.predict(bag.features_as::<F>().view())?, bag.grid_cols)
}

/// Scores every bag and groups the results per video, sorted by video id.
pub fn score_maps<F: Real>(params: &ClassifierParams<F>, bags: &[PooledBag]) -> Result<Vec<ScoreMap>> {
    let mut maps: BTreeMap<&str, ScoreMap> = BTreeMap::new();
    for bag in bags {
        let s = score_pooled(params, bag)?;
        let cells = s.scores.iter().map(|v| v.to_f32().unwrap()).collect();
        maps.entry(&bag.video_id)
            .or_insert_with(|| ScoreMap::new(bag.video_id.clone(), bag.grid_cols))
            .insert(bag.segment_index, cells)?;
    }
    Ok(maps.into_values().collect())
}

/// Evaluation set for periodic frame-level AUC during training.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub bags: Vec<PooledBag>,
    pub tracks: Vec<AnnotationTrack>,
    pub frames_per_segment: usize,
}

impl HeldOut {
    pub fn load(
        manifest: &DatasetManifest,
        loader: &dyn FeatureLoader,
        tracks: Vec<AnnotationTrack>,
        cell_size: usize,
    ) -> Result<Self> {
        Ok(HeldOut {
            bags: pool_manifest(manifest, loader, cell_size)?,
            tracks,
            frames_per_segment: FRAMES_PER_SEGMENT,
        })
    }

    pub fn evaluate<F: Real>(&self, params: &ClassifierParams<F>) -> Result<RocCurve> {
        frame_level_auc(&score_maps(params, &self.bags)?, &self.tracks, self.frames_per_segment)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub mean_loss: f64,
    pub eval_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub iteration: usize,
    pub positive: (String, u32),
    pub negative: (String, u32),
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    pub pairs: Vec<PairRecord>,
}

impl TrainingLog {
    /// `<iteration> <mean_loss> [<eval_auc>]` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            match e.eval_auc {
                Some(auc) => out.push_str(&format!("{} {} {}\n", e.iteration, e.mean_loss, auc)),
                None => out.push_str(&format!("{} {}\n", e.iteration, e.mean_loss)),
            }
        }
        out
    }

    /// `<iteration> <pos_video>:<seg> <neg_video>:<seg> <loss>` per sampled pair.
    pub fn pairs_to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&format!(
                "{} {}:{} {}:{} {}\n",
                p.iteration, p.positive.0, p.positive.1, p.negative.0, p.negative.1, p.loss
            ));
        }
        out
    }

    pub fn final_auc(&self) -> Option<f64> {
        self.entries.iter().rev().find_map(|e| e.eval_auc)
    }
}

/// Outcome of one optimizer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub mean_loss: f64,
    pub pair_losses: Vec<f64>,
    /// True when every pair contributed zero gradient.
    pub zero_gradient: bool,
}

/// Training state over a fixed set of pooled bags.
pub struct Trainer<F: Real> {
    pub params: ClassifierParams<F>,
    optimizer: Optimizer<F>,
    rng: ChaCha8Rng,
    loss_cfg: RankingLossConfig,
    features: Vec<Array2<F>>,
    bags: Vec<PooledBag>,
    iteration: usize,
}

impl<F: Real> Trainer<F> {
    pub fn new(
        params: ClassifierParams<F>,
        bags: Vec<PooledBag>,
        cfg: &TrainConfig,
        loss_cfg: &RankingLossConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        loss_cfg.validate()?;
        if let Some(b) = bags.iter().find(|b| b.features.ncols() != params.input_width()) {
            return Err(Error::Shape(format!(
                "{}:{} pools to {} features, network expects {}",
                b.video_id,
                b.segment_index,
                b.features.ncols(),
                params.input_width()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            params,
            optimizer: Optimizer::new(cfg.optimizer, cfg.learning_rate),
            rng,
            loss_cfg: *loss_cfg,
            features: bags.iter().map(|b| b.features_as::<F>()).collect(),
            bags,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn bags(&self) -> &[PooledBag] {
        &self.bags
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn bag_name(&self, i: usize) -> String {
        format!("{}:{}", self.bags[i].video_id, self.bags[i].segment_index)
    }

    /// TRAIN forward of one bag as its own batch, running statistics committed.
    fn forward_bag(&mut self, i: usize) -> Result<(BagScores<F>, crate::net::ForwardTape<F>)> {
        let masks = self.params.sample_masks(&mut self.rng, self.features[i].nrows());
        let (scores, tape) = self.params.forward(self.features[i].view(), Mode::Train, Some(&masks))?;
        self.params.commit_running_stats(&tape);
        Ok((bag_scores(&scores, self.bags[i].grid_cols)?, tape))
    }

    /// One iteration over the given (positive, negative) bag index pairs:
    /// gradients are averaged over pairs, weight decay added, one step taken.
    pub fn step(&mut self, pairs: &[(usize, usize)]) -> Result<StepReport> {
        self.iteration += 1;
        let mut grads = ParamGrads::zeros_like(&self.params);
        let mut pair_losses = Vec::with_capacity(pairs.len());
        for &(p, n) in pairs {
            let (pos, pos_tape) = self.forward_bag(p)?;
            let (neg, neg_tape) = self.forward_bag(n)?;
            let out = ranking_loss(&pos, &neg, &self.loss_cfg);
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: self.iteration,
                    bags: vec![self.bag_name(p), self.bag_name(n)],
                });
            }
            pair_losses.push(out.loss.to_f64().unwrap());
            for (tape, d) in [(pos_tape, out.d_pos), (neg_tape, out.d_neg)] {
                if d.iter().all(|&g| g == F::zero()) {
                    continue;
                }
                let g = self.params.backward_params(tape, Array1::from(d).view())?;
                grads.add_assign(&g);
            }
        }
        if !pairs.is_empty() {
            grads.scale(F::one() / F::from_usize(pairs.len()).unwrap());
        }
        let wd = F::from_f64(self.loss_cfg.weight_decay).unwrap();
        if wd > F::zero() {
            for (g, h) in grads.hidden.iter_mut().zip(&self.params.hidden) {
                g.weight.scaled_add(wd, &h.weight);
            }
            grads.out_weight.scaled_add(wd, &self.params.out_weight);
        }
        let zero_gradient = grads.is_zero();
        self.optimizer.step(&mut self.params, &grads);
        let mean_loss = if pair_losses.is_empty() {
            0.0
        } else {
            pair_losses.iter().sum::<f64>() / pair_losses.len() as f64
        };
        Ok(StepReport {
            mean_loss,
            pair_losses,
            zero_gradient,
        })
    }

    /// TRAIN-mode (max positive score, max negative score) with fixed masks
    /// of ones; does not touch running statistics.
    pub fn pair_gap(&self, p: usize, n: usize) -> Result<F> {
        let max = |i: usize| -> Result<F> {
            let (s, _) = self.params.forward(self.features[i].view(), Mode::Train, None)?;
            Ok(bag_scores(&s, self.bags[i].grid_cols)?.max_score)
        };
        Ok(max(p)? - max(n)?)
    }
}

fn train_in<F: Real>(
    manifest: &DatasetManifest,
    bags: Vec<PooledBag>,
    cfg: &TrainConfig,
    loss_cfg: &RankingLossConfig,
    held_out: Option<&HeldOut>,
) -> Result<(ClassifierParams<f32>, TrainingLog)> {
    let mut params = init::<F>(cfg.seed, &cfg.net)?;
    params.bn_group = bags.first().map_or(0, |b| b.features.nrows() as u32);
    let mut trainer = Trainer::new(params, bags, cfg, loss_cfg)?;
    let iterations = cfg.iterations_for(manifest);
    let mut log = TrainingLog::default();
    info!("training {iterations} iterations of {} pairs", cfg.pairs_per_batch);
    for it in 1..=iterations {
        let pairs = sample_pairs(manifest, cfg.pairs_per_batch, trainer.rng_mut())?;
        let report = trainer.step(&pairs)?;
        for (&(p, n), &loss) in pairs.iter().zip(&report.pair_losses) {
            let b = trainer.bags();
            log.pairs.push(PairRecord {
                iteration: it,
                positive: (b[p].video_id.clone(), b[p].segment_index),
                negative: (b[n].video_id.clone(), b[n].segment_index),
                loss,
            });
        }
        let due = it == iterations || (cfg.eval_every > 0 && it % cfg.eval_every == 0);
        let eval_auc = match held_out {
            Some(h) if due => Some(h.evaluate(&trainer.params)?.auc),
            _ => None,
        };
        debug!("iteration {it}: loss {} auc {eval_auc:?}", report.mean_loss);
        log.entries.push(LogEntry {
            iteration: it,
            mean_loss: report.mean_loss,
            eval_auc,
        });
    }
    Ok((trainer.params.cast::<f32>(), log))
}

/// Trains from a fresh initialization seeded by `cfg.seed`. Pair sampling
/// and dropout draw from a separate stream of the same seed. Deterministic.
pub fn train(
    manifest: &DatasetManifest,
    loader: &dyn FeatureLoader,
    cfg: &TrainConfig,
    loss_cfg: &RankingLossConfig,
    held_out: Option<&HeldOut>,
) -> Result<(ClassifierParams<f32>, TrainingLog)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let bags = pool_manifest(manifest, loader, cfg.cell_size)?;
    match cfg.precision {
        Precision::F32 => train_in::<f32>(manifest, bags, cfg, loss_cfg, held_out),
        Precision::F64 => train_in::<f64>(manifest, bags, cfg, loss_cfg, held_out),
    }
}
