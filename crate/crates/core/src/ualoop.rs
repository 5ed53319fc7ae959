//! Iterative label acquisition: fine-tune on a small labeled set, score the
//! unlabeled pool by predictive uncertainty, reveal the labels of the most
//! uncertain items and repeat.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{PatchDataset, PatchItem, SplitTag};
use crate::error::{invalid, Error, Result};
use crate::model::{check_fingerprint, HeadKind, Model, ModelCheckpoint};
use crate::report::MetricsReport;
use crate::rng::{self, Purpose};
use crate::sslpipe::{evaluate, finetune_labeled, predict_opinions, StageConfig};

/// Which ids join the labeled set after the first round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Uncertainty,
    /// Uniform over the pool; the control arm.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Labeled items after this round.
    pub budget: usize,
    pub added_ids: Vec<String>,
    pub acc: f64,
    pub f1: f64,
    pub mean_u_correct: Option<f64>,
    pub mean_u_incorrect: Option<f64>,
}

/// Labeled/pool partition of the training ids and the per-round history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelBudgetState {
    pub round: usize,
    pub labeled_ids: BTreeSet<String>,
    pub pool_ids: BTreeSet<String>,
    pub per_round_fraction: f64,
    pub history: Vec<RoundRecord>,
}

impl LabelBudgetState {
    pub fn new(ids: impl IntoIterator<Item = String>, per_round_fraction: f64) -> Self {
        Self {
            round: 0,
            labeled_ids: BTreeSet::new(),
            pool_ids: ids.into_iter().collect(),
            per_round_fraction,
            history: Vec::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.labeled_ids.len() + self.pool_ids.len()
    }

    /// Moves `ids` from the pool to the labeled set.
    pub fn label(&mut self, ids: &[String]) -> Result<()> {
        for id in ids {
            if !self.pool_ids.contains(id) {
                return Err(invalid!("id {id} is not in the unlabeled pool"));
            }
        }
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(invalid!("selection contains duplicate ids"));
        }
        for id in ids {
            self.pool_ids.remove(id);
            self.labeled_ids.insert(id.clone());
        }
        Ok(())
    }

    pub fn check(&self, all_ids: &BTreeSet<String>) -> Result<()> {
        if !self.labeled_ids.is_disjoint(&self.pool_ids) {
            return Err(invalid!("an id is both labeled and in the pool"));
        }
        let union: BTreeSet<String> = self.labeled_ids.union(&self.pool_ids).cloned().collect();
        if &union != all_ids {
            return Err(invalid!("labeled and pool ids do not cover the training set"));
        }
        Ok(())
    }
}

/// Items labeled in round `round` (1-based): `floor(fraction * n)` per
/// round, with the last round absorbing the rounding remainder of the
/// total `round(rounds * fraction * n)`.
pub fn round_budget(n: usize, fraction: f64, rounds: usize, round: usize) -> usize {
    let per = (fraction * n as f64).floor() as usize;
    if round == rounds {
        let total = ((rounds as f64 * fraction * n as f64).round() as usize).min(n);
        total.saturating_sub(per * (rounds - 1))
    } else {
        per
    }
}

/// Predictive uncertainty of every pool item. The model must have an
/// evidential head.
pub fn score_pool(model: &Model, pool: &PatchDataset) -> Result<BTreeMap<String, f64>> {
    let opinions = predict_opinions(model, pool)?;
    Ok(pool.ids().map(str::to_string).zip(opinions.into_iter().map(|o| o.uncertainty)).collect())
}

/// The `budget` ids with the largest scores; ties go to the smaller id.
pub fn select_top_uncertain(scores: &BTreeMap<String, f64>, budget: usize) -> Result<Vec<String>> {
    if budget > scores.len() {
        return Err(invalid!("budget {budget} exceeds the pool of {}", scores.len()));
    }
    let mut ranked: Vec<(&String, f64)> = scores.iter().map(|(k, &v)| (k, v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(ranked.into_iter().take(budget).map(|(k, _)| k.clone()).collect())
}

/// Simulated annotator: reveals ground-truth labels on request and keeps
/// count of what it was asked.
pub struct LabelOracle {
    labels: HashMap<String, usize>,
    revealed: BTreeSet<String>,
}

impl LabelOracle {
    pub fn new(ds: &PatchDataset) -> Result<Self> {
        let labels = ds.labels()?;
        Ok(Self {
            labels: ds.ids().map(str::to_string).zip(labels).collect(),
            revealed: BTreeSet::new(),
        })
    }

    pub fn reveal(&mut self, id: &str) -> Result<usize> {
        let l = *self.labels.get(id).ok_or_else(|| invalid!("oracle has no item {id}"))?;
        self.revealed.insert(id.to_string());
        Ok(l)
    }

    pub fn revealed(&self) -> &BTreeSet<String> {
        &self.revealed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UaLoopConfig {
    pub rounds: usize,
    pub per_round_fraction: f64,
    pub selection: Selection,
    /// Start each round from the previous round's classifier instead of
    /// the pretrained encoder.
    pub warm_start: bool,
    pub seed: u64,
    pub finetune: StageConfig,
}

impl Default for UaLoopConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            per_round_fraction: 0.01,
            selection: Selection::Uncertainty,
            warm_start: false,
            seed: 0,
            finetune: StageConfig::finetune_default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub checkpoint: ModelCheckpoint,
    pub metrics: MetricsReport,
    pub record: RoundRecord,
}

#[derive(Clone, Debug)]
pub struct UaLoopRun {
    pub rounds: Vec<RoundOutcome>,
    pub state: LabelBudgetState,
    pub warnings: Vec<String>,
}

/// Runs the acquisition loop. Only ids and model outputs drive selection;
/// labels reach training solely through the oracle.
pub fn run_ua_loop(
    pretrained: &ModelCheckpoint,
    train: &PatchDataset,
    test: &PatchDataset,
    cfg: &UaLoopConfig,
) -> Result<UaLoopRun> {
    if cfg.rounds == 0 {
        return Err(invalid!("rounds must be at least 1"));
    }
    if !(cfg.per_round_fraction > 0.0) || cfg.per_round_fraction * cfg.rounds as f64 > 1.0 + 1e-9 {
        return Err(invalid!(
            "per-round fraction {} over {} rounds must lie in (0, 1]",
            cfg.per_round_fraction,
            cfg.rounds
        ));
    }
    let n = train.len();
    if round_budget(n, cfg.per_round_fraction, cfg.rounds, 1) == 0 {
        return Err(Error::InsufficientData(format!(
            "fraction {} of {n} items is less than one item per round",
            cfg.per_round_fraction
        )));
    }
    let mut warnings: Vec<String> = check_fingerprint(&pretrained.meta, &train.fingerprint()).into_iter().collect();
    let mut oracle = LabelOracle::new(train)?;
    let hidden = train.without_labels();
    let all_ids: BTreeSet<String> = hidden.ids().map(str::to_string).collect();
    let by_id: HashMap<&str, &PatchItem> = hidden.items().iter().map(|it| (it.id.as_str(), it)).collect();
    let mut state = LabelBudgetState::new(all_ids.iter().cloned(), cfg.per_round_fraction);
    let mut revealed: Vec<PatchItem> = Vec::new();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut previous: Option<Model> = None;

    for r in 1..=cfg.rounds {
        let budget = round_budget(n, cfg.per_round_fraction, cfg.rounds, r);
        let added = if r == 1 || cfg.selection == Selection::Random {
            let mut pool: Vec<String> = state.pool_ids.iter().cloned().collect();
            rng::shuffle(&mut pool, &mut rng::stream(cfg.seed, Purpose::LabelSelect, r as u64, 0));
            pool.truncate(budget);
            pool.sort();
            pool
        } else {
            let model = previous.as_ref().expect("round 1 trains a model");
            let pool = hidden.filter(SplitTag::Train, |it| state.pool_ids.contains(&it.id));
            select_top_uncertain(&score_pool(model, &pool)?, budget)?
        };
        state.label(&added)?;
        state.round = r;
        state.check(&all_ids)?;
        for id in &added {
            let mut item = by_id[id.as_str()].clone();
            item.label = Some(oracle.reveal(id)?);
            revealed.push(item);
        }
        let labeled = PatchDataset::new(revealed.clone(), train.class_count(), SplitTag::Train)?;
        let warm = if cfg.warm_start { previous.as_ref() } else { None };
        let run = finetune_labeled(pretrained, &labeled, HeadKind::Evidential, &cfg.finetune, warm)?;
        warnings.extend(run.report.warnings.iter().map(|w| format!("round {r}: {w}")));
        let model = run.checkpoint.model()?;
        let eval = evaluate(&model, test)?;
        let u = eval.uncertainty.as_ref();
        let record = RoundRecord {
            round: r,
            budget: state.labeled_ids.len(),
            added_ids: added,
            acc: eval.metrics.accuracy,
            f1: eval.metrics.macro_f1,
            mean_u_correct: u.and_then(|s| s.mean_u_correct),
            mean_u_incorrect: u.and_then(|s| s.mean_u_incorrect),
        };
        state.history.push(record.clone());
        rounds.push(RoundOutcome {
            checkpoint: run.checkpoint,
            metrics: eval.metrics,
            record,
        });
        previous = Some(model);
    }
    debug_assert_eq!(oracle.revealed(), &state.labeled_ids);
    Ok(UaLoopRun { rounds, state, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{EncoderConfig, ProjectionHeadConfig};
    use crate::sslpipe::pretrain;

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn top_selection_and_ties() {
        let s = scores(&[("a", 0.9), ("b", 0.1), ("c", 0.5)]);
        assert_eq!(select_top_uncertain(&s, 1).unwrap(), vec!["a"]);
        let s = scores(&[("z", 0.5), ("m", 0.5), ("b", 0.5)]);
        assert_eq!(select_top_uncertain(&s, 2).unwrap(), vec!["b", "m"]);
        assert_eq!(select_top_uncertain(&s, 3).unwrap().len(), 3);
        assert!(select_top_uncertain(&s, 4).is_err());
    }

    #[test]
    fn budget_rounding() {
        let per: Vec<usize> = (1..=10).map(|r| round_budget(2400, 0.01, 10, r)).collect();
        assert_eq!(per, vec![24; 10]);
        let per: Vec<usize> = (1..=3).map(|r| round_budget(250, 0.01, 3, r)).collect();
        assert_eq!(per, vec![2, 2, 4]);
        assert_eq!(per.iter().sum::<usize>(), (3.0f64 * 2.5).round() as usize);
    }

    #[test]
    fn state_rejects_double_labeling() {
        let mut s = LabelBudgetState::new(["a", "b", "c"].map(String::from), 0.1);
        s.label(&["a".into()]).unwrap();
        assert!(s.label(&["a".into()]).is_err());
        assert!(s.label(&["b".into(), "b".into()]).is_err());
        let all: BTreeSet<String> = ["a", "b", "c"].map(String::from).into();
        s.check(&all).unwrap();
    }

    fn setup() -> (ModelCheckpoint, PatchDataset, PatchDataset, UaLoopConfig) {
        let spec = SyntheticSpec {
            samples_per_class: 20,
            image_side: 8,
            ..Default::default()
        };
        let train = generate_synthetic(&spec).unwrap();
        let test = generate_synthetic(&SyntheticSpec {
            texture_seed: 0,
            samples_per_class: 5,
            ..spec
        })
        .unwrap();
        let enc = EncoderConfig {
            input_side: 8,
            embedding_dim: 8,
            width_multiplier: 0.5,
            ..Default::default()
        };
        let proj = ProjectionHeadConfig {
            layer_count: 2,
            hidden_dim: 8,
            output_dim: 4,
            reattach_depth: 1,
        };
        let mut pcfg = StageConfig::pretrain_default();
        pcfg.epochs = 1;
        pcfg.batch_size = 16;
        let pre = pretrain(&train, &enc, &proj, &pcfg).unwrap();
        let mut fcfg = StageConfig::finetune_default();
        fcfg.epochs = 2;
        fcfg.batch_size = 4;
        let cfg = UaLoopConfig {
            rounds: 3,
            per_round_fraction: 0.05,
            finetune: fcfg,
            ..Default::default()
        };
        (pre.checkpoint, train, test, cfg)
    }

    #[test]
    fn loop_bookkeeping_and_leak_guard() {
        let (pre, train, test, cfg) = setup();
        let run = run_ua_loop(&pre, &train, &test, &cfg).unwrap();
        assert_eq!(run.rounds.len(), 3);
        let budgets: Vec<usize> = run.rounds.iter().map(|r| r.record.budget).collect();
        assert_eq!(budgets, vec![3, 6, 9]);
        assert_eq!(run.state.labeled_ids.len() + run.state.pool_ids.len(), 60);
        let chosen: BTreeSet<String> = run.state.labeled_ids.clone();

        // corrupt every label the oracle never revealed
        let corrupted = PatchDataset::new(
            train
                .items()
                .iter()
                .map(|it| {
                    let mut it = it.clone();
                    if !chosen.contains(&it.id) {
                        it.label = Some((it.label.unwrap() + 1) % 3);
                    }
                    it
                })
                .collect(),
            3,
            SplitTag::Train,
        )
        .unwrap();
        let again = run_ua_loop(&pre, &corrupted, &test, &cfg).unwrap();
        for (a, b) in run.rounds.iter().zip(&again.rounds) {
            assert_eq!(a.record.added_ids, b.record.added_ids);
        }
    }

    #[test]
    fn random_arm_shares_first_round() {
        let (pre, train, test, cfg) = setup();
        let control = UaLoopConfig {
            selection: Selection::Random,
            rounds: 1,
            ..cfg.clone()
        };
        let ua = UaLoopConfig { rounds: 1, ..cfg };
        let a = run_ua_loop(&pre, &train, &test, &ua).unwrap();
        let b = run_ua_loop(&pre, &train, &test, &control).unwrap();
        assert_eq!(a.rounds[0].record.added_ids, b.rounds[0].record.added_ids);
        let over = UaLoopConfig {
            rounds: 30,
            ..control
        };
        assert!(run_ua_loop(&pre, &train, &test, &over).is_err());
    }

    #[test]
    fn softmax_models_cannot_score() {
        let (pre, train, ..) = setup();
        let m = pre.model().unwrap().attach_head(HeadKind::Softmax, 3, 0).unwrap();
        assert!(score_pool(&m, &train).is_err());
    }
}
