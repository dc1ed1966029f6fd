use crate::error::{Error, Result};
use crate::net::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingLossConfig {
    pub margin: f64,
    /// Weight of the sum of positive-bag scores.
    pub lambda_sparsity: f64,
    /// Weight of squared differences between 4-neighbour cells of the positive bag.
    pub lambda_smooth: f64,
    pub weight_decay: f64,
}

impl Default for RankingLossConfig {
    fn default() -> Self {
        RankingLossConfig {
            margin: 1.0,
            lambda_sparsity: 0.0,
            lambda_smooth: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl RankingLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        for (name, v) in [
            ("lambda_sparsity", self.lambda_sparsity),
            ("lambda_smooth", self.lambda_smooth),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-cell scores of one bag, row-major, with the first index attaining the max.
#[derive(Debug, Clone, PartialEq)]
pub struct BagScores<F> {
    pub scores: Vec<F>,
    pub grid_cols: usize,
    pub max_score: F,
    pub argmax_index: usize,
}

impl<F: Real> BagScores<F> {
    pub fn new(scores: Vec<F>, grid_cols: usize) -> Result<Self> {
        if scores.is_empty() || grid_cols == 0 || !scores.len().is_multiple_of(grid_cols) {
            return Err(Error::Shape(format!(
                "{} scores do not fill rows of {grid_cols}",
                scores.len()
            )));
        }
        let mut argmax = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[argmax] {
                argmax = i;
            }
        }
        Ok(BagScores {
            max_score: scores[argmax],
            argmax_index: argmax,
            scores,
            grid_cols,
        })
    }

    pub fn argmax_cell(&self) -> (usize, usize) {
        (self.argmax_index / self.grid_cols, self.argmax_index % self.grid_cols)
    }

    /// Unordered 4-neighbour pairs (a, b) with a < b.
    pub fn neighbour_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.grid_cols;
        let rows = self.scores.len() / cols;
        (0..rows).flat_map(move |r| {
            (0..cols).flat_map(move |c| {
                let i = r * cols + c;
                let right = (c + 1 < cols).then_some((i, i + 1));
                let down = (r + 1 < rows).then_some((i, i + cols));
                right.into_iter().chain(down)
            })
        })
    }
}

/// Loss and its gradient with respect to the positive and negative scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingLoss<F> {
    pub loss: F,
    pub hinge: F,
    pub d_pos: Vec<F>,
    pub d_neg: Vec<F>,
}

/// `max(0, m - max(pos) + max(neg)) + λs Σ pos + λg Σ_{a~b} (pos_a - pos_b)²`.
///
/// The hinge subgradient goes to the two argmax cells only.
pub fn ranking_loss<F: Real>(pos: &BagScores<F>, neg: &BagScores<F>, cfg: &RankingLossConfig) -> RankingLoss<F> {
    let m = F::from_f64(cfg.margin).unwrap();
    let ls = F::from_f64(cfg.lambda_sparsity).unwrap();
    let lg = F::from_f64(cfg.lambda_smooth).unwrap();

    let raw = m - pos.max_score + neg.max_score;
    let hinge = raw.max(F::zero());
    let mut d_pos = vec![F::zero(); pos.scores.len()];
    let mut d_neg = vec![F::zero(); neg.scores.len()];
    if raw > F::zero() {
        d_pos[pos.argmax_index] = -F::one();
        d_neg[neg.argmax_index] = F::one();
    }

    let mut loss = hinge;
    if ls > F::zero() {
        let sum = pos.scores.iter().fold(F::zero(), |acc, &s| acc + s);
        loss += ls * sum;
        d_pos.iter_mut().for_each(|g| *g += ls);
    }
    if lg > F::zero() {
        let two = F::from_f64(2.0).unwrap();
        let mut smooth = F::zero();
        for (a, b) in pos.neighbour_pairs() {
            let d = pos.scores[a] - pos.scores[b];
            smooth += d * d;
            d_pos[a] += two * lg * d;
            d_pos[b] -= two * lg * d;
        }
        loss += lg * smooth;
    }
    RankingLoss {
        loss,
        hinge,
        d_pos,
        d_neg,
    }
}
