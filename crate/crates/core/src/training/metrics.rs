use serde::{Deserialize, Serialize};

use super::Regime;

pub const EPOCH_CSV_HEADER: &str = "epoch,regime,parameters,train_loss,val_loss,val_perplexity";
pub const COMPARISON_CSV_HEADER: &str = "seed,regime,parameters,train_loss,val_loss,val_perplexity";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub regime: Regime,
    pub parameters: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_perplexity: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.regime, self.parameters, self.train_loss, self.val_loss, self.val_perplexity
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub regime: Regime,
    pub trainable_params: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_perplexity: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Set when the first epoch failed to improve on the unadapted loss.
    pub flagged: bool,
}

impl RunMetrics {
    pub fn new(regime: Regime, trainable_params: usize) -> Self {
        RunMetrics {
            regime,
            trainable_params,
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            val_perplexity: Vec::new(),
            epoch_seconds: Vec::new(),
            flagged: false,
        }
    }

    pub(crate) fn push(&mut self, epoch: usize, train_loss: f64, val_loss: f64, seconds: f64) -> EpochRecord {
        let ppl = super::perplexity(val_loss);
        self.train_loss.push(train_loss);
        self.val_loss.push(val_loss);
        self.val_perplexity.push(ppl);
        self.epoch_seconds.push(seconds);
        EpochRecord {
            epoch,
            regime: self.regime,
            parameters: self.trainable_params,
            train_loss,
            val_loss,
            val_perplexity: ppl,
            seconds,
        }
    }

    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }

    pub fn records(&self) -> Vec<EpochRecord> {
        (0..self.epochs())
            .map(|i| EpochRecord {
                epoch: i + 1,
                regime: self.regime,
                parameters: self.trainable_params,
                train_loss: self.train_loss[i],
                val_loss: self.val_loss[i],
                val_perplexity: self.val_perplexity[i],
                seconds: self.epoch_seconds[i],
            })
            .collect()
    }

    pub fn final_train_loss(&self) -> f64 {
        self.train_loss.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_val_loss(&self) -> f64 {
        self.val_loss.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_val_perplexity(&self) -> f64 {
        self.val_perplexity.last().copied().unwrap_or(f64::NAN)
    }
}

/// Final-epoch numbers of one regime for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub regime: Regime,
    pub parameters: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_perplexity: f64,
}

impl ComparisonRow {
    pub fn from_metrics(seed: u64, m: &RunMetrics) -> Self {
        ComparisonRow {
            seed,
            regime: m.regime,
            parameters: m.trainable_params,
            train_loss: m.final_train_loss(),
            val_loss: m.final_val_loss(),
            val_perplexity: m.final_val_perplexity(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.seed, self.regime, self.parameters, self.train_loss, self.val_loss, self.val_perplexity
        )
    }
}

pub fn epoch_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(COMPARISON_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
