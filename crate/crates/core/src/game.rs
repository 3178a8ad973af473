//! The falling-target game: spawning, lives, scoring, frame throttling and
//! match-triggered harvesting. Times are seconds on the session's clock.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{record_harvest, DatasetManifest, ImageStore};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::label::{ExpressionLabel, NUM_CLASSES};
use crate::nn::{Model, ProbabilityVector};
use crate::verify::{classify_by_template, verify_expression, MatchDecision, MatchDetail, MatchMode, ThresholdTable, UserTemplateSet};

pub const INITIAL_LIVES: u32 = 5;
pub const DEFAULT_FALL_SECONDS: f64 = 8.0;
/// Frames closer than this to the last accepted frame are ignored.
pub const THROTTLE_SECONDS: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnConfig {
    probabilities: [f64; NUM_CLASSES],
    pub fall_seconds: f64,
    pub max_targets: usize,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        SpawnConfig {
            probabilities: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
            fall_seconds: DEFAULT_FALL_SECONDS,
            max_targets: 1,
        }
    }
}

impl SpawnConfig {
    pub fn new(probabilities: [f64; NUM_CLASSES], fall_seconds: f64, max_targets: usize) -> Result<Self> {
        if probabilities.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::config("spawn probabilities must be non-negative"));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("spawn probabilities sum to {sum}")));
        }
        if !(fall_seconds > 0.0) || max_targets == 0 {
            return Err(Error::config("fall duration and target slots must be positive"));
        }
        Ok(SpawnConfig {
            probabilities,
            fall_seconds,
            max_targets,
        })
    }

    pub fn with_probabilities(probabilities: [f64; NUM_CLASSES]) -> Result<Self> {
        let d = SpawnConfig::default();
        SpawnConfig::new(probabilities, d.fall_seconds, d.max_targets)
    }

    pub fn point_mass(label: ExpressionLabel) -> Self {
        let mut p = [0.0; NUM_CLASSES];
        p[label.index()] = 1.0;
        SpawnConfig::with_probabilities(p).expect("valid point mass")
    }

    pub fn probabilities(&self) -> &[f64; NUM_CLASSES] {
        &self.probabilities
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> ExpressionLabel {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in self.probabilities.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return ExpressionLabel::from_index(i).expect("index < 7");
                }
            }
        }
        // Only reachable through rounding in the cumulative sum.
        ExpressionLabel::from_index(last).expect("index < 7")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameMode {
    General,
    Customized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub id: u64,
    pub label: ExpressionLabel,
    /// Time at which the target reaches the ground.
    pub deadline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSession {
    pub id: String,
    pub mode: GameMode,
    pub user_id: Option<String>,
    lives: u32,
    score: u32,
    targets: Vec<Target>,
    now: f64,
    last_accepted: Option<f64>,
    next_target: u64,
    rng: ChaCha8Rng,
    spawn: SpawnConfig,
}

/// Serializable snapshot of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub mode: GameMode,
    pub lives: u32,
    pub score: u32,
    pub game_over: bool,
    pub target: Option<ExpressionLabel>,
    pub deadline: Option<f64>,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    /// `None` for throttled frames, which are not classified.
    pub probabilities: Option<ProbabilityVector>,
    pub matched: bool,
    /// Label of the target that was matched, if any.
    pub matched_target: Option<ExpressionLabel>,
    pub score: u32,
    pub lives: u32,
    pub game_over: bool,
    pub throttled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetEvent {
    pub target: Target,
}

pub struct NewSession<'a> {
    pub id: String,
    pub mode: GameMode,
    pub user_id: Option<String>,
    /// Must be present for customized sessions.
    pub templates: Option<&'a UserTemplateSet>,
    pub spawn: SpawnConfig,
    pub seed: u64,
    pub now: f64,
}

/// Starts a session with full lives and its target slots filled.
pub fn new_session(req: NewSession<'_>) -> Result<GameSession> {
    if req.mode == GameMode::Customized {
        let user = req
            .user_id
            .as_deref()
            .ok_or_else(|| Error::Precondition("customized mode needs a user id".into()))?;
        match req.templates {
            Some(t) if t.user_id == user => {}
            _ => return Err(Error::Precondition(format!("user {user} has no registered templates"))),
        }
    }
    let mut s = GameSession {
        id: req.id,
        mode: req.mode,
        user_id: req.user_id,
        lives: INITIAL_LIVES,
        score: 0,
        targets: Vec::new(),
        now: req.now,
        last_accepted: None,
        next_target: 0,
        rng: ChaCha8Rng::seed_from_u64(req.seed),
        spawn: req.spawn,
    };
    s.refill();
    Ok(s)
}

impl GameSession {
    pub fn lives(&self) -> u32 {
        self.lives
    }

    pub fn score(&self) -> u32 {
        self.score
    }

    pub fn is_over(&self) -> bool {
        self.lives == 0
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn spawn_config(&self) -> &SpawnConfig {
        &self.spawn
    }

    /// Takes effect for the next spawned target.
    pub fn set_spawn_config(&mut self, spawn: SpawnConfig) {
        self.spawn = spawn;
    }

    pub fn state(&self) -> SessionState {
        let first = self.targets.first();
        SessionState {
            session_id: self.id.clone(),
            mode: self.mode,
            lives: self.lives,
            score: self.score,
            game_over: self.is_over(),
            target: first.map(|t| t.label),
            deadline: first.map(|t| t.deadline),
            targets: self.targets.clone(),
        }
    }

    fn refill(&mut self) {
        while spawn_target(self).is_some() {}
    }
}

/// Draws a new target if a slot is free and the game is not over.
pub fn spawn_target(s: &mut GameSession) -> Option<TargetEvent> {
    if s.is_over() || s.targets.len() >= s.spawn.max_targets {
        return None;
    }
    let target = Target {
        id: s.next_target,
        label: s.spawn.draw(&mut s.rng),
        deadline: s.now + s.spawn.fall_seconds,
    };
    s.next_target += 1;
    s.targets.push(target);
    Some(TargetEvent { target })
}

/// Expires targets whose deadline is at or before `now`, one life each.
/// Time never moves backwards; an earlier `now` only expires nothing.
pub fn tick(s: &mut GameSession, now: f64) -> &GameSession {
    if s.is_over() {
        return s;
    }
    s.now = s.now.max(now);
    let mut expired: Vec<usize> = (0..s.targets.len()).filter(|&i| s.targets[i].deadline <= s.now).collect();
    expired.sort_by(|&a, &b| s.targets[a].deadline.total_cmp(&s.targets[b].deadline));
    let mut lost = 0;
    for _ in &expired {
        if s.lives - lost == 0 {
            break;
        }
        lost += 1;
    }
    s.lives -= lost;
    if s.is_over() {
        s.targets.clear();
    } else {
        let now = s.now;
        s.targets.retain(|t| t.deadline > now);
        s.refill();
    }
    s
}

/// Judges a frame against the active targets.
pub trait Matcher {
    fn mode(&self) -> MatchMode;

    /// Class probabilities plus one decision per target, in order.
    fn judge(&self, image: &Image, targets: &[ExpressionLabel]) -> Result<(ProbabilityVector, Vec<MatchDecision>)>;
}

/// General mode: softmax probability against a per-class threshold.
pub struct VerificationMatcher<'a> {
    pub model: &'a Model,
    pub thresholds: &'a ThresholdTable,
}

impl Matcher for VerificationMatcher<'_> {
    fn mode(&self) -> MatchMode {
        MatchMode::Verification
    }

    fn judge(&self, image: &Image, targets: &[ExpressionLabel]) -> Result<(ProbabilityVector, Vec<MatchDecision>)> {
        let p = self.model.predict(image)?;
        let d = targets.iter().map(|t| verify_expression(&p, *t, self.thresholds)).collect();
        Ok((p, d))
    }
}

/// Customized mode: nearest registered template must equal the target.
pub struct TemplateMatcher<'a> {
    pub model: &'a Model,
    pub templates: &'a UserTemplateSet,
}

impl Matcher for TemplateMatcher<'_> {
    fn mode(&self) -> MatchMode {
        MatchMode::Template
    }

    fn judge(&self, image: &Image, targets: &[ExpressionLabel]) -> Result<(ProbabilityVector, Vec<MatchDecision>)> {
        let (label, distances) = classify_by_template(self.templates, image, self.model)?;
        let p = self.model.predict(image)?;
        let d = targets
            .iter()
            .map(|t| MatchDecision {
                matched: *t == label,
                mode: MatchMode::Template,
                detail: MatchDetail::Distances(distances),
            })
            .collect();
        Ok((p, d))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Harvest<'a> {
    pub image: &'a Image,
    pub label: ExpressionLabel,
    /// Engine probability of `label`.
    pub confidence: f64,
    pub user_id: Option<&'a str>,
    pub ts: f64,
}

/// Receives matched frames. A failing sink aborts the frame with no state
/// change.
pub trait HarvestSink {
    fn harvest(&mut self, h: Harvest<'_>) -> Result<()>;
}

/// Discards harvests.
pub struct NoHarvest;

impl HarvestSink for NoHarvest {
    fn harvest(&mut self, _: Harvest<'_>) -> Result<()> {
        Ok(())
    }
}

impl HarvestSink for Vec<(Image, ExpressionLabel)> {
    fn harvest(&mut self, h: Harvest<'_>) -> Result<()> {
        self.push((h.image.clone(), h.label));
        Ok(())
    }
}

/// Writes harvested frames to an image store and appends them to a manifest.
/// Frames whose content is already stored are skipped.
pub struct ManifestSink<'a> {
    pub manifest: &'a mut DatasetManifest,
    pub store: &'a ImageStore,
}

impl HarvestSink for ManifestSink<'_> {
    fn harvest(&mut self, h: Harvest<'_>) -> Result<()> {
        let user = h.user_id.map(str::to_string);
        match record_harvest(self.manifest, self.store, h.image, h.label, h.confidence, user, h.ts.floor() as i64) {
            Err(Error::DuplicatePath(_)) => Ok(()),
            other => other,
        }
    }
}

/// Classifies a frame unless throttled; a match scores one point, harvests the
/// frame under the matched target's label and replaces that target. With
/// several active targets the earliest-deadline match wins.
pub fn submit_frame(
    s: &mut GameSession,
    matcher: &dyn Matcher,
    image: &Image,
    client_ts: f64,
    sink: &mut dyn HarvestSink,
) -> Result<FrameResult> {
    if s.is_over() {
        return Err(Error::SessionClosed);
    }
    let expected = match s.mode {
        GameMode::General => MatchMode::Verification,
        GameMode::Customized => MatchMode::Template,
    };
    if matcher.mode() != expected {
        return Err(Error::contract("matcher does not fit the session mode"));
    }
    if s.last_accepted.is_some_and(|last| client_ts - last < THROTTLE_SECONDS - 1e-9) {
        return Ok(FrameResult {
            probabilities: None,
            matched: false,
            matched_target: None,
            score: s.score,
            lives: s.lives,
            game_over: false,
            throttled: true,
        });
    }

    let mut order: Vec<usize> = (0..s.targets.len()).collect();
    order.sort_by(|&a, &b| s.targets[a].deadline.total_cmp(&s.targets[b].deadline));
    let labels: Vec<ExpressionLabel> = order.iter().map(|&i| s.targets[i].label).collect();
    let (p, decisions) = matcher.judge(image, &labels)?;
    if decisions.len() != labels.len() {
        return Err(Error::contract("matcher returned the wrong number of decisions"));
    }
    let hit = decisions.iter().position(|d| d.matched);
    if let Some(k) = hit {
        sink.harvest(Harvest {
            image,
            label: labels[k],
            confidence: p.get(labels[k]),
            user_id: s.user_id.as_deref(),
            ts: client_ts,
        })?;
    }

    s.last_accepted = Some(client_ts);
    s.now = s.now.max(client_ts);
    if let Some(k) = hit {
        s.score += 1;
        s.targets.remove(order[k]);
        s.refill();
    }
    Ok(FrameResult {
        probabilities: Some(p),
        matched: hit.is_some(),
        matched_target: hit.map(|k| labels[k]),
        score: s.score,
        lives: s.lives,
        game_over: false,
        throttled: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ExpressionLabel::*;

    /// Matches iff the frame's first pixel encodes the target's index.
    struct PixelMatcher;

    impl Matcher for PixelMatcher {
        fn mode(&self) -> MatchMode {
            MatchMode::Verification
        }

        fn judge(&self, image: &Image, targets: &[ExpressionLabel]) -> Result<(ProbabilityVector, Vec<MatchDecision>)> {
            let shown = (image.pixels()[0] * 10.0).round() as usize;
            let mut p = [0.0; 7];
            p[shown.min(6)] = 1.0;
            let d = targets
                .iter()
                .map(|t| MatchDecision {
                    matched: t.index() == shown,
                    mode: MatchMode::Verification,
                    detail: MatchDetail::TargetProbability(p[t.index()]),
                })
                .collect();
            Ok((ProbabilityVector(p), d))
        }
    }

    fn showing(label: ExpressionLabel) -> Image {
        Image::filled(label.index() as f32 / 10.0)
    }

    fn general(seed: u64, spawn: SpawnConfig) -> GameSession {
        new_session(NewSession {
            id: "s".into(),
            mode: GameMode::General,
            user_id: None,
            templates: None,
            spawn,
            seed,
            now: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn fresh_session() {
        let s = general(1, SpawnConfig::default());
        assert_eq!((s.lives(), s.score(), s.targets().len()), (5, 0, 1));
        assert_eq!(s.targets()[0].deadline, 8.0);
        assert_eq!(general(1, SpawnConfig::default()).targets(), s.targets());
    }

    #[test]
    fn customized_needs_templates() {
        let err = new_session(NewSession {
            id: "s".into(),
            mode: GameMode::Customized,
            user_id: Some("u".into()),
            templates: None,
            spawn: SpawnConfig::default(),
            seed: 0,
            now: 0.0,
        });
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn match_scores_and_harvests_under_target_label() {
        let mut s = general(2, SpawnConfig::point_mass(Fear));
        let mut got = Vec::new();
        let r = submit_frame(&mut s, &PixelMatcher, &showing(Fear), 1.0, &mut got).unwrap();
        assert!(r.matched && !r.throttled);
        assert_eq!((r.score, r.lives), (1, 5));
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].1, Fear);
        assert_eq!(s.targets()[0].id, 1);
    }

    #[test]
    fn miss_and_throttle_leave_state() {
        let mut s = general(3, SpawnConfig::point_mass(Sad));
        let before = s.targets().to_vec();
        let r = submit_frame(&mut s, &PixelMatcher, &showing(Happy), 1.0, &mut NoHarvest).unwrap();
        assert!(!r.matched);
        assert_eq!(s.targets(), &before[..]);
        let snapshot = s.clone();
        let r = submit_frame(&mut s, &PixelMatcher, &showing(Sad), 1.5, &mut NoHarvest).unwrap();
        assert!(r.throttled && !r.matched && r.probabilities.is_none());
        assert_eq!(s, snapshot);
        let r = submit_frame(&mut s, &PixelMatcher, &showing(Sad), 1.9, &mut NoHarvest).unwrap();
        assert!(r.matched);
    }

    #[test]
    fn expiries_end_the_game() {
        let mut s = general(4, SpawnConfig::default());
        tick(&mut s, 7.9);
        assert_eq!(s.lives(), 5);
        tick(&mut s, 8.0);
        assert_eq!(s.lives(), 4);
        assert_eq!(s.targets()[0].deadline, 16.0);
        for k in 2..=5 {
            tick(&mut s, 8.0 * k as f64);
        }
        assert!(s.is_over());
        assert_eq!(s.score(), 0);
        assert!(s.targets().is_empty());
        assert!(spawn_target(&mut s).is_none());
        assert!(matches!(
            submit_frame(&mut s, &PixelMatcher, &showing(Angry), 100.0, &mut NoHarvest),
            Err(Error::SessionClosed)
        ));
    }

    #[test]
    fn failing_sink_changes_nothing() {
        struct Broken;
        impl HarvestSink for Broken {
            fn harvest(&mut self, _: Harvest<'_>) -> Result<()> {
                Err(Error::contract("disk full"))
            }
        }
        let mut s = general(5, SpawnConfig::point_mass(Angry));
        let before = s.clone();
        assert!(submit_frame(&mut s, &PixelMatcher, &showing(Angry), 1.0, &mut Broken).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn point_mass_always_spawns_that_class() {
        let mut s = general(6, SpawnConfig::point_mass(Fear));
        for i in 0..200 {
            submit_frame(&mut s, &PixelMatcher, &showing(Fear), i as f64, &mut NoHarvest).unwrap();
            assert_eq!(s.targets()[0].label, Fear);
        }
    }

    #[test]
    fn spawn_config_validation() {
        assert!(SpawnConfig::with_probabilities([0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.1]).is_err());
        assert!(SpawnConfig::with_probabilities([-0.1, 0.6, 0.5, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(SpawnConfig::new([1.0 / 7.0; 7], 0.0, 1).is_err());
    }
}
