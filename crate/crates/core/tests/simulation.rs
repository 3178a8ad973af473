use exloop_core::game::{new_session, GameMode, Matcher, NewSession, NoHarvest, SpawnConfig};
use exloop_core::nn::ProbabilityVector;
use exloop_core::simplayer::{make_population, play_session, render_expression, PopulationMode, RenderParams, SyntheticPlayer};
use exloop_core::verify::{MatchDecision, MatchDetail, MatchMode};
use exloop_core::{ExpressionLabel, Image, Result};

/// Nearest noise-free prototype of the player's own seven classes.
struct PrototypeMatcher {
    prototypes: Vec<Image>,
}

impl PrototypeMatcher {
    fn for_player(p: &SyntheticPlayer) -> Self {
        let mut clean = p.clone();
        clean.render = RenderParams {
            jitter_std: 0.0,
            noise_std: 0.0,
            ..p.render.clone()
        };
        PrototypeMatcher {
            prototypes: ExpressionLabel::ALL.iter().map(|&l| render_expression(&clean, l, 0)).collect(),
        }
    }
}

impl Matcher for PrototypeMatcher {
    fn mode(&self) -> MatchMode {
        MatchMode::Verification
    }

    fn judge(&self, image: &Image, targets: &[ExpressionLabel]) -> Result<(ProbabilityVector, Vec<MatchDecision>)> {
        let d: Vec<f64> = self
            .prototypes
            .iter()
            .map(|p| p.pixels().iter().zip(image.pixels()).map(|(a, b)| ((a - b) as f64).powi(2)).sum())
            .collect();
        let best = (0..7).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        let mut p = [0.0; 7];
        p[best] = 1.0;
        let decisions = targets
            .iter()
            .map(|t| MatchDecision {
                matched: t.index() == best,
                mode: MatchMode::Verification,
                detail: MatchDetail::TargetProbability(p[t.index()]),
            })
            .collect();
        Ok((ProbabilityVector(p), decisions))
    }
}

fn session(seed: u64) -> exloop_core::game::GameSession {
    new_session(NewSession {
        id: format!("s{seed}"),
        mode: GameMode::General,
        user_id: None,
        templates: None,
        spawn: SpawnConfig::default(),
        seed,
        now: 0.0,
    })
    .unwrap()
}

#[test]
fn skilled_player_with_perfect_engine_never_loses_a_life() {
    for p in make_population(3, PopulationMode::Exaggerated, 4).unwrap() {
        let m = PrototypeMatcher::for_player(&p);
        let mut s = session(p.seed);
        let trace = play_session(&p, &mut s, &m, &mut NoHarvest, 60).unwrap();
        assert_eq!(trace.len(), 60);
        assert!(trace.iter().all(|e| e.result.matched));
        assert_eq!((s.lives(), s.score()), (5, 60));
    }
}

#[test]
fn hopeless_player_loses() {
    let p = make_population(1, PopulationMode::Exaggerated, 5).unwrap().remove(0).with_skill(0.0).unwrap();
    let m = PrototypeMatcher::for_player(&p);
    let mut s = session(1);
    let trace = play_session(&p, &mut s, &m, &mut NoHarvest, 1000).unwrap();
    assert!(s.is_over());
    assert_eq!(s.score(), 0);
    assert!(trace.iter().all(|e| e.shown != e.target));
}

#[test]
fn uniform_spawning_gives_balanced_harvest() {
    let mut harvest: Vec<(Image, ExpressionLabel)> = Vec::new();
    for p in make_population(50, PopulationMode::Exaggerated, 6).unwrap() {
        let m = PrototypeMatcher::for_player(&p);
        let mut s = session(p.seed);
        play_session(&p, &mut s, &m, &mut harvest, 30).unwrap();
    }
    let mut counts = [0usize; 7];
    harvest.iter().for_each(|(_, l)| counts[l.index()] += 1);
    let mean = harvest.len() as f64 / 7.0;
    for c in counts {
        assert!((c as f64 - mean).abs() <= 0.2 * mean, "{counts:?}");
    }
}
