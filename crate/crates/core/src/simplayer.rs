//! Synthetic players: procedural expression glyphs (a face disc with brows,
//! eyes and a mouth) whose class separation is set by one scalar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::game::{submit_frame, tick, FrameResult, GameSession, HarvestSink, Matcher};
use crate::image::{Image, IMAGE_SIZE};
use crate::label::{ExpressionLabel, NUM_CLASSES};

/// Expression parameters of one glyph. Orientation is the brow tilt in
/// degrees (positive: inner ends lowered); the rest are unitless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlyphParams {
    pub orientation: f64,
    /// Mouth curvature; positive is a smile.
    pub curvature: f64,
    /// Eye openness.
    pub eccentricity: f64,
    /// Mouth opening.
    pub intensity: f64,
}

impl GlyphParams {
    const SCALE: [f64; 4] = [30.0, 1.0, 1.0, 1.0];

    fn to_array(self) -> [f64; 4] {
        [self.orientation, self.curvature, self.eccentricity, self.intensity]
    }

    fn from_array(a: [f64; 4]) -> Self {
        GlyphParams {
            orientation: a[0],
            curvature: a[1],
            eccentricity: a[2],
            intensity: a[3],
        }
    }
}

const fn glyph(orientation: f64, curvature: f64, eccentricity: f64, intensity: f64) -> GlyphParams {
    GlyphParams {
        orientation,
        curvature,
        eccentricity,
        intensity,
    }
}

/// Class means in canonical label order. Neutral is the origin the other
/// classes are pulled toward as separation shrinks.
pub const CLASS_MEANS: [GlyphParams; NUM_CLASSES] = [
    glyph(28.0, -0.5, 0.3, 0.25),  // Angry
    glyph(12.0, -0.9, 0.1, 0.55),  // Disgust
    glyph(-26.0, -0.4, 0.95, 0.55), // Fear
    glyph(0.0, 1.0, 0.4, 0.6),     // Happy
    glyph(0.0, 0.0, 0.5, 0.15),    // Neutral
    glyph(-22.0, -0.9, 0.35, 0.1),  // Sad
    glyph(-8.0, 0.0, 1.0, 1.0),    // Surprise
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub class_means: [GlyphParams; NUM_CLASSES],
    /// Scale of each class mean's distance from Neutral.
    pub separation: f64,
    /// Std of the per-player expression offset, in units of the parameter
    /// scale (30° for orientation, 1 otherwise).
    pub offset_std: f64,
    /// Std of per-frame parameter jitter, same units.
    pub jitter_std: f64,
    /// Std of additive per-pixel noise.
    pub noise_std: f64,
}

impl RenderParams {
    pub fn exaggerated() -> Self {
        RenderParams {
            class_means: CLASS_MEANS,
            separation: 1.0,
            offset_std: 0.05,
            jitter_std: 0.05,
            noise_std: 0.03,
        }
    }

    pub fn subtle() -> Self {
        RenderParams {
            class_means: CLASS_MEANS,
            separation: 0.35,
            offset_std: 0.15,
            jitter_std: 0.05,
            noise_std: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.separation) && ok(self.offset_std) && ok(self.jitter_std) && ok(self.noise_std) {
            Ok(())
        } else {
            Err(Error::config("render scales must be finite and non-negative"))
        }
    }

    /// `neutral + s·(mean − neutral)`.
    pub fn class_params(&self, label: ExpressionLabel) -> GlyphParams {
        let n = self.class_means[ExpressionLabel::Neutral.index()].to_array();
        let m = self.class_means[label.index()].to_array();
        GlyphParams::from_array(std::array::from_fn(|k| n[k] + self.separation * (m[k] - n[k])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationMode {
    Exaggerated,
    Subtle,
}

impl PopulationMode {
    pub fn render_params(self) -> RenderParams {
        match self {
            PopulationMode::Exaggerated => RenderParams::exaggerated(),
            PopulationMode::Subtle => RenderParams::subtle(),
        }
    }
}

/// How a player looks, independent of expression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub skin: [f32; 3],
    pub background: [f32; 3],
    pub center: (f32, f32),
    pub radius: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPlayer {
    pub id: String,
    pub seed: u64,
    /// Probability of showing the requested class.
    pub skill: f64,
    pub render: RenderParams,
    pub appearance: Appearance,
    /// Expression offset shared by all of this player's classes.
    pub offset: GlyphParams,
}

impl SyntheticPlayer {
    pub fn new(id: impl Into<String>, seed: u64, skill: f64, render: RenderParams) -> Result<Self> {
        if !(0.0..=1.0).contains(&skill) {
            return Err(Error::config(format!("skill {skill} outside [0,1]")));
        }
        render.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let tone: f32 = rng.random_range(0.75..1.0);
        let bg: f32 = rng.random_range(0.15..0.45);
        let appearance = Appearance {
            skin: [0.95 * tone, 0.78 * tone, 0.66 * tone],
            background: [bg, bg * rng.random_range(0.8..1.2), bg * rng.random_range(0.8..1.2)],
            center: (31.5 + rng.random_range(-2.0..2.0), 31.5 + rng.random_range(-2.0..2.0)),
            radius: rng.random_range(24.0..27.0),
        };
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let offset = GlyphParams::from_array(std::array::from_fn(|k| {
            render.offset_std * GlyphParams::SCALE[k] * unit.sample(&mut rng)
        }));
        Ok(SyntheticPlayer {
            id: id.into(),
            seed,
            skill,
            render,
            appearance,
            offset,
        })
    }

    pub fn with_skill(mut self, skill: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&skill) {
            return Err(Error::config(format!("skill {skill} outside [0,1]")));
        }
        self.skill = skill;
        Ok(self)
    }
}

fn smooth_cover(signed_distance: f32) -> f32 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

fn capsule_distance(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32, r: f32) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (px - ax - t * dx, py - ay - t * dy);
    (qx * qx + qy * qy).sqrt() - r
}

fn ellipse_distance(px: f32, py: f32, cx: f32, cy: f32, a: f32, b: f32) -> f32 {
    let k = ((px - cx) / a).hypot((py - cy) / b);
    (k - 1.0) * a.min(b)
}

/// Rasterizes one glyph with anti-aliased edges.
pub fn draw_glyph(g: &GlyphParams, look: &Appearance) -> Image {
    let (cx, cy) = look.center;
    let r = look.radius;
    let ink = [0.12f32, 0.08, 0.08];
    let eye_dx = 0.36 * r;
    let eye_y = cy - 0.18 * r;
    let eye_a = 0.16 * r;
    let eye_b = (0.04 + 0.2 * g.eccentricity.clamp(0.0, 1.3) as f32) * r;
    let brow_y = eye_y - 0.3 * r;
    let brow_half = 0.2 * r;
    let tilt = (g.orientation as f32).to_radians();
    let mouth_y = cy + 0.42 * r;
    let mouth_half = 0.34 * r;
    let bend = 0.16 * r * g.curvature as f32;
    let mouth_thick = 0.05 * r + 0.16 * r * g.intensity.clamp(0.0, 1.5) as f32;

    let mut img = vec![0.0f32; 3 * IMAGE_SIZE * IMAGE_SIZE];
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (px, py) = (x as f32, y as f32);
            let face = smooth_cover((px - cx).hypot(py - cy) - r);
            let mut d = f32::INFINITY;
            for side in [-1.0f32, 1.0] {
                let ex = cx + side * eye_dx;
                d = d.min(ellipse_distance(px, py, ex, eye_y, eye_a, eye_b));
                // Inner end sits at `ex - side·half`; positive tilt lowers it.
                let (ix, iy) = (ex - side * brow_half * tilt.cos(), brow_y + brow_half * tilt.sin());
                let (ox, oy) = (ex + side * brow_half * tilt.cos(), brow_y - brow_half * tilt.sin());
                d = d.min(capsule_distance(px, py, ix, iy, ox, oy, 0.06 * r));
            }
            let u = (px - cx) / mouth_half;
            if u.abs() <= 1.0 {
                let curve = mouth_y - bend * 0.5 + bend * (1.0 - u * u);
                d = d.min((py - curve).abs() - mouth_thick * 0.5 * (1.0 - 0.5 * u * u));
            } else {
                let end = mouth_y - bend * 0.5;
                let ex = cx + u.signum() * mouth_half;
                d = d.min((px - ex).hypot(py - end) - mouth_thick * 0.25);
            }
            let feature = smooth_cover(d) * face;
            for c in 0..3 {
                let base = look.background[c] * (1.0 - face) + look.skin[c] * face;
                img[c * plane + y * IMAGE_SIZE + x] = base * (1.0 - feature) + ink[c] * feature;
            }
        }
    }
    Image::from_planar_clamped(img).expect("full-size buffer")
}

fn frame_rng(player: &SyntheticPlayer, label: ExpressionLabel, frame_seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(player.seed.to_le_bytes());
    h.update([label.index() as u8]);
    h.update(frame_seed.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Deterministic in `(player seed, label, frame_seed)`.
pub fn render_expression(player: &SyntheticPlayer, label: ExpressionLabel, frame_seed: u64) -> Image {
    let mut rng = frame_rng(player, label, frame_seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mean = player.render.class_params(label).to_array();
    let offset = player.offset.to_array();
    let g = GlyphParams::from_array(std::array::from_fn(|k| {
        mean[k] + offset[k] + player.render.jitter_std * GlyphParams::SCALE[k] * unit.sample(&mut rng)
    }));
    let img = draw_glyph(&g, &player.appearance);
    if player.render.noise_std == 0.0 {
        return img;
    }
    let noise = Normal::new(0.0, player.render.noise_std as f32).expect("validated std");
    let mut pixels = img.into_pixels();
    pixels.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    Image::from_planar_clamped(pixels).expect("full-size buffer")
}

/// `n` players with distinct seeds derived from `seed`, all at skill 1.
pub fn make_population(n: usize, mode: PopulationMode, seed: u64) -> Result<Vec<SyntheticPlayer>> {
    if n == 0 {
        return Err(Error::config("population must have at least one player"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = std::collections::BTreeSet::new();
    let mut players = Vec::with_capacity(n);
    while players.len() < n {
        let s: u64 = rng.random();
        if seeds.insert(s) {
            let id = format!("{}-{seed}-{}", mode_name(mode), players.len());
            players.push(SyntheticPlayer::new(id, s, 1.0, mode.render_params())?);
        }
    }
    Ok(players)
}

fn mode_name(mode: PopulationMode) -> &'static str {
    match mode {
        PopulationMode::Exaggerated => "exaggerated",
        PopulationMode::Subtle => "subtle",
    }
}

/// `per_class` labeled renders per class, cycling through the players.
pub fn render_corpus(players: &[SyntheticPlayer], per_class: usize, seed: u64) -> Vec<(Image, ExpressionLabel)> {
    let mut out = Vec::with_capacity(per_class * NUM_CLASSES);
    for k in 0..per_class {
        let player = &players[k % players.len()];
        for label in ExpressionLabel::ALL {
            out.push((render_expression(player, label, seed.wrapping_mul(1_000_003).wrapping_add(k as u64)), label));
        }
    }
    out
}

/// One submitted frame of a simulated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayEvent {
    pub t: f64,
    pub target: ExpressionLabel,
    /// Class the player actually rendered.
    pub shown: ExpressionLabel,
    pub result: FrameResult,
}

/// Plays at 1 Hz until game over or `max_events` frames. Each step advances
/// the clock, expires due targets, then submits a render of the oldest
/// target (or, with probability `1 − skill`, of a uniformly drawn other
/// class).
pub fn play_session(
    player: &SyntheticPlayer,
    session: &mut GameSession,
    matcher: &dyn Matcher,
    sink: &mut dyn HarvestSink,
    max_events: usize,
) -> Result<Vec<PlayEvent>> {
    if session.is_over() {
        return Err(Error::SessionClosed);
    }
    let mut h = Sha256::new();
    h.update(player.seed.to_le_bytes());
    h.update(session.id.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let mut trace = Vec::with_capacity(max_events);
    let mut t = session.now();
    while trace.len() < max_events {
        t += 1.0;
        tick(session, t);
        if session.is_over() {
            break;
        }
        let target = session
            .targets()
            .iter()
            .min_by(|a, b| a.deadline.total_cmp(&b.deadline))
            .expect("open session has a target")
            .label;
        let shown = if rng.random::<f64>() < player.skill {
            target
        } else {
            let k = rng.random_range(0..NUM_CLASSES - 1);
            ExpressionLabel::from_index(if k >= target.index() { k + 1 } else { k }).expect("index < 7")
        };
        let image = render_expression(player, shown, rng.random());
        let result = submit_frame(session, matcher, &image, t, sink)?;
        trace.push(PlayEvent { t, target, shown, result });
    }
    Ok(trace)
}
