use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::evidential::DirichletOpinion;

pub const DEFAULT_BINS: usize = 20;

/// Histograms of predictive uncertainty split by whether the prediction
/// was correct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub bin_edges: Vec<f64>,
    pub correct: Vec<u64>,
    pub incorrect: Vec<u64>,
    pub mean_u_correct: Option<f64>,
    pub mean_u_incorrect: Option<f64>,
}

impl UncertaintySummary {
    pub fn n_correct(&self) -> u64 {
        self.correct.iter().sum()
    }

    pub fn n_incorrect(&self) -> u64 {
        self.incorrect.iter().sum()
    }

    /// Writes `bin_lo,bin_hi,count_correct,count_incorrect` rows.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "bin_lo,bin_hi,count_correct,count_incorrect")?;
        for i in 0..self.correct.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                self.correct[i],
                self.incorrect[i]
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

pub fn uncertainty_summary(opinions: &[DirichletOpinion], labels: &[usize]) -> Result<UncertaintySummary> {
    uncertainty_summary_with_bins(opinions, labels, DEFAULT_BINS)
}

pub fn uncertainty_summary_with_bins(
    opinions: &[DirichletOpinion],
    labels: &[usize],
    bins: usize,
) -> Result<UncertaintySummary> {
    if opinions.len() != labels.len() {
        return Err(invalid!("{} opinions but {} labels", opinions.len(), labels.len()));
    }
    if bins == 0 {
        return Err(invalid!("histogram needs at least one bin"));
    }
    let mut correct = vec![0u64; bins];
    let mut incorrect = vec![0u64; bins];
    let (mut sum_c, mut sum_i) = (0.0, 0.0);
    for (op, &y) in opinions.iter().zip(labels) {
        let u = op.uncertainty;
        let bin = ((u * bins as f64).floor() as usize).min(bins - 1);
        if op.predicted_class() == y {
            correct[bin] += 1;
            sum_c += u;
        } else {
            incorrect[bin] += 1;
            sum_i += u;
        }
    }
    let n_c: u64 = correct.iter().sum();
    let n_i: u64 = incorrect.iter().sum();
    Ok(UncertaintySummary {
        bin_edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        correct,
        incorrect,
        mean_u_correct: (n_c > 0).then(|| sum_c / n_c as f64),
        mean_u_incorrect: (n_i > 0).then(|| sum_i / n_i as f64),
    })
}
