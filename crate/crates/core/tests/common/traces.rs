//! Random event traces against the game state machine with a stub matcher
//! whose decision is encoded in the frame itself.

use exloop_core::game::{
    new_session, submit_frame, tick, GameMode, GameSession, Harvest, HarvestSink, Matcher, NewSession, SpawnConfig,
};
use exloop_core::nn::ProbabilityVector;
use exloop_core::verify::{MatchDecision, MatchDetail, MatchMode};
use exloop_core::{Error, ExpressionLabel, Image, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reads the shown class from the first pixel (`index / 10`).
pub struct PixelMatcher;

impl Matcher for PixelMatcher {
    fn mode(&self) -> MatchMode {
        MatchMode::Verification
    }

    fn judge(&self, image: &Image, targets: &[ExpressionLabel]) -> Result<(ProbabilityVector, Vec<MatchDecision>)> {
        let shown = ((image.pixels()[0] * 10.0).round() as usize).min(6);
        let mut p = [0.0; 7];
        p[shown] = 1.0;
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

pub fn showing(label: ExpressionLabel) -> Image {
    Image::filled(label.index() as f32 / 10.0)
}

#[derive(Default)]
struct Labels(Vec<ExpressionLabel>);

impl HarvestSink for Labels {
    fn harvest(&mut self, h: Harvest<'_>) -> Result<()> {
        self.0.push(h.label);
        Ok(())
    }
}

/// Runs one random trace and checks the state-machine invariants. Returns
/// the visited session states for replay comparison.
pub fn check_random_trace(seed: u64) -> std::result::Result<Vec<GameSession>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: [f64; 7] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p[6] = 1.0 - p[..6].iter().sum::<f64>();
    let spawn = SpawnConfig::new(p, rng.random_range(1.0..10.0), 1).map_err(|e| e.to_string())?;
    let mut s = new_session(NewSession {
        id: format!("t{seed}"),
        mode: GameMode::General,
        user_id: None,
        templates: None,
        spawn,
        seed,
        now: 0.0,
    })
    .map_err(|e| e.to_string())?;

    let mut states = vec![s.clone()];
    let mut sink = Labels::default();
    let mut resolved = 0u32;
    let mut t = 0.0;
    let events = rng.random_range(1..80);
    for _ in 0..events {
        let before = s.clone();
        t += rng.random_range(0.05..3.0);
        if rng.random_bool(0.6) {
            let target = s.targets().first().map(|x| x.label);
            let shown = if rng.random_bool(0.5) {
                target.unwrap_or(ExpressionLabel::Neutral)
            } else {
                ExpressionLabel::from_index(rng.random_range(0..7)).unwrap()
            };
            match submit_frame(&mut s, &PixelMatcher, &showing(shown), t, &mut sink) {
                Ok(r) => {
                    if r.throttled && s != before {
                        return Err("throttled frame changed state".into());
                    }
                    if r.matched {
                        resolved += 1;
                        if r.throttled || r.matched_target != target || sink.0.last().copied() != target {
                            return Err("harvest label differs from the active target".into());
                        }
                    }
                }
                Err(Error::SessionClosed) if before.is_over() => {}
                Err(e) => return Err(format!("unexpected error {e}")),
            }
        } else {
            tick(&mut s, t);
            if !before.is_over() {
                resolved += before.targets().iter().filter(|x| x.deadline <= t).count() as u32;
            }
        }
        if before.is_over() && s != before {
            return Err("transition after game over".into());
        }
        if s.lives() > before.lives() || s.score() < before.score() {
            return Err("lives increased or score decreased".into());
        }
        if s.score() + (5 - s.lives()) != resolved {
            return Err(format!("score {} + lost {} != resolved {resolved}", s.score(), 5 - s.lives()));
        }
        if s.is_over() != (s.lives() == 0) || (!s.is_over() && s.targets().len() != 1) {
            return Err("target slot or game-over flag inconsistent".into());
        }
        states.push(s.clone());
    }
    if sink.0.len() as u32 != s.score() {
        return Err("harvest count differs from score".into());
    }
    Ok(states)
}
