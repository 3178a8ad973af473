//! The recursive loop: serve the current model as the game engine, harvest
//! matched frames from simulated players, fine-tune on everything harvested
//! so far, evaluate, repeat.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{cross_evaluate, evaluate, EvalReport};
use crate::game::{new_session, GameMode, Harvest, HarvestSink, NewSession, SpawnConfig, VerificationMatcher};
use crate::image::Image;
use crate::label::{ExpressionLabel, NUM_CLASSES};
use crate::nn::{fine_tune, Model, ModelId, TrainConfig};
use crate::simplayer::{play_session, SyntheticPlayer};
use crate::verify::ThresholdTable;

/// Seconds between the start of consecutive iterations on the simulated
/// clock; every harvest of iteration `k` is timestamped in
/// `[k·ITERATION_SPAN, (k+1)·ITERATION_SPAN)`.
pub const ITERATION_SPAN: f64 = 1.0e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringPolicy {
    Uniform,
    InverseCount,
}

/// Uniform, or `pᵢ ∝ 1/(countᵢ+1)`.
pub fn steering_probabilities(counts: &[usize; NUM_CLASSES], policy: SteeringPolicy) -> SpawnConfig {
    let p = match policy {
        SteeringPolicy::Uniform => [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
        SteeringPolicy::InverseCount => {
            let w: [f64; NUM_CLASSES] = std::array::from_fn(|i| 1.0 / (counts[i] as f64 + 1.0));
            let total: f64 = w.iter().sum();
            w.map(|v| v / total)
        }
    };
    SpawnConfig::with_probabilities(p).expect("normalized by construction")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub freeze_prefix: usize,
    pub head_width: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub iterations: usize,
    pub players_per_iteration: usize,
    pub sessions_per_player: usize,
    /// Frame cap per session.
    pub max_frames: usize,
    pub skill: f64,
    pub steering: SteeringPolicy,
    pub thresholds: ThresholdTable,
    pub fine_tune: FineTuneConfig,
    pub seed: u64,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.players_per_iteration == 0 || self.sessions_per_player == 0 || self.max_frames == 0 {
            return Err(Error::config("iterations, players, sessions and frame cap must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.skill) {
            return Err(Error::config("skill must be in [0,1]"));
        }
        Ok(())
    }
}

/// A frame kept by the engine, with what the player actually showed.
#[derive(Debug, Clone, PartialEq)]
pub struct HarvestedFrame {
    pub image: Image,
    pub label: ExpressionLabel,
    pub shown: ExpressionLabel,
    pub user_id: String,
    pub confidence: f64,
    pub ts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub spawn_probabilities: [f64; NUM_CLASSES],
    pub harvest_counts: [usize; NUM_CLASSES],
    /// Harvested frames whose rendered class differs from their label.
    pub mislabeled: usize,
    /// Class counts of everything harvested up to and including this
    /// iteration.
    pub cumulative_counts: [usize; NUM_CLASSES],
    pub base_model: ModelId,
    /// `None` when the harvest was empty and fine-tuning was skipped.
    pub model: Option<ModelId>,
    pub self_before: EvalReport,
    pub target_before: EvalReport,
    pub self_after: Option<EvalReport>,
    pub target_after: Option<EvalReport>,
    pub fine_tune_loss: Vec<f64>,
}

impl IterationReport {
    pub fn skipped(&self) -> bool {
        self.model.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub iterations: Vec<IterationReport>,
}

pub struct LoopOutput {
    pub report: LoopReport,
    /// Model after each iteration (the base model again for skipped ones).
    pub models: Vec<Model>,
    /// Frames harvested in each iteration.
    pub harvests: Vec<Vec<HarvestedFrame>>,
}

/// Labeled evaluation sets: the seed model's own test split and a split drawn
/// from the population being served.
pub struct EvalSets<'a> {
    pub self_id: &'a str,
    pub self_test: &'a [(Image, ExpressionLabel)],
    pub target_id: &'a str,
    pub target_test: &'a [(Image, ExpressionLabel)],
}

struct FrameCollector<'a> {
    frames: &'a mut Vec<HarvestedFrame>,
}

impl HarvestSink for FrameCollector<'_> {
    fn harvest(&mut self, h: Harvest<'_>) -> Result<()> {
        self.frames.push(HarvestedFrame {
            image: h.image.clone(),
            label: h.label,
            shown: h.label,
            user_id: h.user_id.unwrap_or_default().to_string(),
            confidence: h.confidence,
            ts: h.ts,
        });
        Ok(())
    }
}

fn counts_of(frames: &[HarvestedFrame]) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    frames.iter().for_each(|f| c[f.label.index()] += 1);
    c
}

/// Runs `cfg.iterations` rounds starting from `seed_model`. Players are taken
/// from `population` in rotation. Deterministic in the seeds of `cfg` and the
/// population.
pub fn run_loop(seed_model: &Model, population: &[SyntheticPlayer], sets: &EvalSets<'_>, cfg: &LoopConfig) -> Result<LoopOutput> {
    cfg.validate()?;
    if population.is_empty() {
        return Err(Error::config("empty population"));
    }
    let mut current = seed_model.clone();
    let mut cumulative = [0usize; NUM_CLASSES];
    let mut all: Vec<(Image, ExpressionLabel)> = Vec::new();
    let mut out = LoopOutput {
        report: LoopReport { iterations: Vec::new() },
        models: Vec::new(),
        harvests: Vec::new(),
    };

    for k in 0..cfg.iterations {
        let self_before = evaluate(&current, sets.self_id, sets.self_test)?;
        let target_before = cross_evaluate(&current, sets.target_id, sets.target_test)?;
        let spawn = steering_probabilities(&cumulative, cfg.steering);
        let matcher = VerificationMatcher {
            model: &current,
            thresholds: &cfg.thresholds,
        };

        let mut frames = Vec::new();
        let mut mislabeled = 0;
        let base_t = k as f64 * ITERATION_SPAN;
        let mut slot = 0usize;
        for j in 0..cfg.players_per_iteration {
            let player = population[(k * cfg.players_per_iteration + j) % population.len()]
                .clone()
                .with_skill(cfg.skill)?;
            for s in 0..cfg.sessions_per_player {
                let start = base_t + slot as f64 * (cfg.max_frames as f64 + 10.0);
                slot += 1;
                let session_seed = cfg.seed ^ ((k as u64) << 40) ^ ((j as u64) << 20) ^ s as u64;
                let mut session = new_session(NewSession {
                    id: format!("it{k}-{}-s{s}", player.id),
                    mode: GameMode::General,
                    user_id: Some(player.id.clone()),
                    templates: None,
                    spawn: spawn.clone(),
                    seed: session_seed,
                    now: start,
                })?;
                let before = frames.len();
                let trace = play_session(&player, &mut session, &matcher, &mut FrameCollector { frames: &mut frames }, cfg.max_frames)?;
                let mut kept = frames[before..].iter_mut();
                for ev in trace.iter().filter(|e| e.result.matched) {
                    let f = kept.next().expect("one harvest per match");
                    f.shown = ev.shown;
                    if ev.shown != f.label {
                        mislabeled += 1;
                    }
                }
            }
        }
        debug_assert!(frames.iter().all(|f| f.ts >= base_t && f.ts < base_t + ITERATION_SPAN));

        let harvest_counts = counts_of(&frames);
        for i in 0..NUM_CLASSES {
            cumulative[i] += harvest_counts[i];
        }
        all.extend(frames.iter().map(|f| (f.image.clone(), f.label)));

        let base_model = current.id.clone();
        let (model, self_after, target_after, loss) = if frames.is_empty() {
            (None, None, None, Vec::new())
        } else {
            let ft = &cfg.fine_tune;
            let train = TrainConfig {
                seed: ft.train.seed.wrapping_add(k as u64),
                ..ft.train
            };
            let (next, loss) = fine_tune(&current, &all, ft.freeze_prefix, ft.head_width, &train)?;
            let self_after = cross_evaluate(&next, sets.self_id, sets.self_test)?;
            let target_after = evaluate(&next, sets.target_id, sets.target_test)?;
            current = next;
            (Some(current.id.clone()), Some(self_after), Some(target_after), loss)
        };

        out.report.iterations.push(IterationReport {
            iteration: k + 1,
            spawn_probabilities: *spawn.probabilities(),
            harvest_counts,
            mislabeled,
            cumulative_counts: cumulative,
            base_model,
            model,
            self_before,
            target_before,
            self_after,
            target_after,
            fine_tune_loss: loss,
        });
        out.models.push(current.clone());
        out.harvests.push(frames);
    }
    Ok(out)
}

/// Population variance of class proportions; 0 for a perfectly balanced
/// (or empty) harvest.
pub fn proportion_variance(counts: &[usize; NUM_CLASSES]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let p = counts.map(|c| c as f64 / total as f64);
    let mean = 1.0 / NUM_CLASSES as f64;
    p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / NUM_CLASSES as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDelta {
    pub iteration: usize,
    /// `b − a` micro average on the target population after the iteration.
    pub target_accuracy: f64,
    /// `b − a` micro average on the self test set after the iteration.
    pub self_accuracy: f64,
    /// `b − a` proportion variance of the cumulative harvest; negative means
    /// `b` is better balanced.
    pub balance: f64,
}

fn final_micro(it: &IterationReport, target: bool) -> f64 {
    match (target, &it.target_after, &it.self_after) {
        (true, Some(r), _) | (false, _, Some(r)) => r.micro,
        (true, None, _) => it.target_before.micro,
        (false, _, None) => it.self_before.micro,
    }
}

pub fn compare_reports(a: &LoopReport, b: &LoopReport) -> Result<Vec<IterationDelta>> {
    if a.iterations.len() != b.iterations.len() {
        return Err(Error::contract(format!(
            "reports have {} and {} iterations",
            a.iterations.len(),
            b.iterations.len()
        )));
    }
    Ok(a.iterations
        .iter()
        .zip(&b.iterations)
        .map(|(x, y)| IterationDelta {
            iteration: x.iteration,
            target_accuracy: final_micro(y, true) - final_micro(x, true),
            self_accuracy: final_micro(y, false) - final_micro(x, false),
            balance: proportion_variance(&y.cumulative_counts) - proportion_variance(&x.cumulative_counts),
        })
        .collect())
}
