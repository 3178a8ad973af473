//! The two matching engines: per-class probability thresholds ("general"
//! mode) and nearest-template classification on penultimate features
//! ("customized" mode), plus template registration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, IMAGE_SIZE};
use crate::label::{ExpressionLabel, NUM_CLASSES};
use crate::nn::{FeatureVector, Model, ModelId, ProbabilityVector};

pub const DEFAULT_THRESHOLD: f64 = 0.40;

/// One acceptance threshold per class, each in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThresholdTable(pub [f64; NUM_CLASSES]);

impl Default for ThresholdTable {
    fn default() -> Self {
        ThresholdTable([DEFAULT_THRESHOLD; NUM_CLASSES])
    }
}

impl ThresholdTable {
    pub fn new(values: [f64; NUM_CLASSES]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::config(format!("threshold {v} outside (0,1)")));
        }
        Ok(ThresholdTable(values))
    }

    pub fn get(&self, label: ExpressionLabel) -> f64 {
        self.0[label.index()]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ThresholdTable::new(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Verification,
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchDetail {
    TargetProbability(f64),
    Distances([f64; NUM_CLASSES]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDecision {
    pub matched: bool,
    pub mode: MatchMode,
    pub detail: MatchDetail,
}

/// Matched iff `p[target] ≥ threshold[target]`.
pub fn verify_expression(p: &ProbabilityVector, target: ExpressionLabel, t: &ThresholdTable) -> MatchDecision {
    let prob = p.get(target);
    MatchDecision {
        matched: prob >= t.get(target),
        mode: MatchMode::Verification,
        detail: MatchDetail::TargetProbability(prob),
    }
}

/// Seven feature templates for one user, tied to the model that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTemplateSet {
    pub user_id: String,
    pub model_id: ModelId,
    templates: Vec<FeatureVector>,
}

impl UserTemplateSet {
    pub fn new(user_id: impl Into<String>, model_id: ModelId, templates: Vec<FeatureVector>) -> Result<Self> {
        if templates.len() != NUM_CLASSES {
            return Err(Error::contract(format!("need 7 templates, got {}", templates.len())));
        }
        let dim = templates[0].len();
        if dim == 0 || templates.iter().any(|t| t.len() != dim) {
            return Err(Error::contract("templates must share one non-zero dimension"));
        }
        if templates.iter().any(|t| t.0.iter().any(|v| !v.is_finite())) {
            return Err(Error::contract("templates must be finite"));
        }
        Ok(UserTemplateSet {
            user_id: user_id.into(),
            model_id,
            templates,
        })
    }

    pub fn dim(&self) -> usize {
        self.templates[0].len()
    }

    pub fn template(&self, label: ExpressionLabel) -> &FeatureVector {
        &self.templates[label.index()]
    }

    pub fn templates(&self) -> &[FeatureVector] {
        &self.templates
    }

    /// `EXPT | version u8 | model id (u16 len + utf8) | user id (u16 len + utf8)
    /// | dim u32 | 7 × dim little-endian f32`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"EXPT");
        out.push(1);
        for s in [&self.model_id.0, &self.user_id] {
            out.extend_from_slice(&(s.len() as u16).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for t in &self.templates {
            for v in &t.0 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Format("malformed template file".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        if take(4)? != b"EXPT" || take(1)?[0] != 1 {
            return Err(bad());
        }
        let mut strings = Vec::new();
        for _ in 0..2 {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            strings.push(String::from_utf8(take(len)?.to_vec()).map_err(|_| bad())?);
        }
        let dim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let payload = take(dim * 4 * NUM_CLASSES)?;
        if pos != bytes.len() {
            return Err(bad());
        }
        let templates = payload
            .chunks_exact(dim * 4)
            .map(|c| {
                FeatureVector(
                    c.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect(),
                )
            })
            .collect();
        let user = strings.pop().expect("two strings");
        let model = strings.pop().expect("two strings");
        UserTemplateSet::new(user, ModelId(model), templates)
    }
}

/// Decides whether a capture is usable as a face image.
pub trait FaceValidity: Send + Sync {
    fn is_valid(&self, image: &Image) -> bool;
}

/// Stand-in for a face detector: the capture needs enough luminance range and
/// a foreground (pixels that differ from the border's median luminance) that is
/// large enough and centered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenteredContrast {
    pub min_range: f32,
    pub foreground_delta: f32,
    pub min_foreground_fraction: f32,
    /// Largest allowed distance of the foreground centroid from the center,
    /// as a fraction of the image side.
    pub max_center_offset: f32,
}

impl Default for CenteredContrast {
    fn default() -> Self {
        CenteredContrast {
            min_range: 0.15,
            foreground_delta: 0.08,
            min_foreground_fraction: 0.05,
            max_center_offset: 0.2,
        }
    }
}

fn luminance(image: &Image, y: usize, x: usize) -> f32 {
    0.299 * image.get(0, y, x) + 0.587 * image.get(1, y, x) + 0.114 * image.get(2, y, x)
}

impl FaceValidity for CenteredContrast {
    fn is_valid(&self, image: &Image) -> bool {
        let n = IMAGE_SIZE;
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        let mut border = Vec::with_capacity(4 * n);
        for y in 0..n {
            for x in 0..n {
                let l = luminance(image, y, x);
                lo = lo.min(l);
                hi = hi.max(l);
                if y == 0 || x == 0 || y == n - 1 || x == n - 1 {
                    border.push(l);
                }
            }
        }
        if hi - lo < self.min_range {
            return false;
        }
        border.sort_by(f32::total_cmp);
        let background = border[border.len() / 2];
        let (mut count, mut sx, mut sy) = (0usize, 0.0f64, 0.0f64);
        for y in 0..n {
            for x in 0..n {
                if (luminance(image, y, x) - background).abs() > self.foreground_delta {
                    count += 1;
                    sx += x as f64;
                    sy += y as f64;
                }
            }
        }
        if (count as f32) < self.min_foreground_fraction * (n * n) as f32 {
            return false;
        }
        let center = (n as f64 - 1.0) / 2.0;
        let (cx, cy) = (sx / count as f64 - center, sy / count as f64 - center);
        ((cx * cx + cy * cy).sqrt() as f32) <= self.max_center_offset * n as f32
    }
}

/// Validates all seven captures (canonical label order) and extracts their
/// features. Any invalid capture fails the whole registration.
pub fn register_templates(
    user_id: &str,
    images: &[Image],
    model: &Model,
    validity: &dyn FaceValidity,
) -> Result<UserTemplateSet> {
    if images.len() != NUM_CLASSES {
        return Err(Error::contract(format!("registration needs 7 images, got {}", images.len())));
    }
    let failed: Vec<usize> = images
        .iter()
        .enumerate()
        .filter(|(_, img)| !validity.is_valid(img))
        .map(|(i, _)| i)
        .collect();
    if !failed.is_empty() {
        return Err(Error::Recapture { failed });
    }
    let templates = images.iter().map(|img| model.features(img)).collect::<Result<Vec<_>>>()?;
    UserTemplateSet::new(user_id, model.id.clone(), templates)
}

/// Nearest template by Euclidean distance over features of `query`; ties go
/// to the lowest class index.
pub fn classify_features(
    templates: &UserTemplateSet,
    query: &FeatureVector,
) -> Result<(ExpressionLabel, [f64; NUM_CLASSES])> {
    if query.len() != templates.dim() {
        return Err(Error::contract(format!(
            "feature dimension {} does not match templates ({})",
            query.len(),
            templates.dim()
        )));
    }
    let distances: [f64; NUM_CLASSES] = std::array::from_fn(|i| query.l2_distance(&templates.templates[i]));
    let mut best = 0;
    for i in 1..NUM_CLASSES {
        if distances[i] < distances[best] {
            best = i;
        }
    }
    Ok((ExpressionLabel::from_index(best).expect("index < 7"), distances))
}

pub fn classify_by_template(
    templates: &UserTemplateSet,
    image: &Image,
    model: &Model,
) -> Result<(ExpressionLabel, [f64; NUM_CLASSES])> {
    if templates.model_id != model.id {
        return Err(Error::contract(format!(
            "templates were extracted with model {}, serving model is {}",
            templates.model_id, model.id
        )));
    }
    match model.feature_dim() {
        Some(d) if d == templates.dim() => {}
        _ => return Err(Error::contract("model feature dimension does not match templates")),
    }
    classify_features(templates, &model.features(image)?)
}

/// In-memory template sets, optionally persisted as one file per user.
/// Registration for a user is serialized; lookups share immutable sets.
#[derive(Default)]
pub struct TemplateRegistry {
    dir: Option<PathBuf>,
    sets: RwLock<HashMap<String, Arc<UserTemplateSet>>>,
    registering: Mutex<()>,
}

impl TemplateRegistry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads every `*.tpl` file in `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut sets = HashMap::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "tpl") {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let set = UserTemplateSet::decode(&bytes)?;
                sets.insert(set.user_id.clone(), Arc::new(set));
            }
        }
        Ok(TemplateRegistry {
            dir: Some(dir),
            sets: RwLock::new(sets),
            registering: Mutex::new(()),
        })
    }

    pub fn register(
        &self,
        user_id: &str,
        images: &[Image],
        model: &Model,
        validity: &dyn FaceValidity,
    ) -> Result<Arc<UserTemplateSet>> {
        let _guard = self.registering.lock().expect("registration lock poisoned");
        let set = Arc::new(register_templates(user_id, images, model, validity)?);
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}.tpl", hex::encode(user_id.as_bytes())));
            let tmp = path.with_extension("tpl.tmp");
            std::fs::write(&tmp, set.encode()).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        self.sets
            .write()
            .expect("template lock poisoned")
            .insert(user_id.to_string(), set.clone());
        Ok(set)
    }

    /// The user's templates if they were extracted with `model`; stale sets
    /// from another model are treated as absent.
    pub fn get(&self, user_id: &str, model: &ModelId) -> Option<Arc<UserTemplateSet>> {
        self.sets
            .read()
            .expect("template lock poisoned")
            .get(user_id)
            .filter(|s| &s.model_id == model)
            .cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_initial_cnn;

    fn face(shift: isize) -> Image {
        Image::from_fn(|_, y, x| {
            let dy = y as f32 - 31.5 - shift as f32;
            let dx = x as f32 - 31.5 - shift as f32;
            if dx * dx + dy * dy < 400.0 { 0.8 } else { 0.2 }
        })
    }

    fn model() -> Model {
        let (spec, weights) = build_initial_cnn(11);
        Model::new(spec, weights).unwrap()
    }

    #[test]
    fn verification_is_inclusive() {
        let mut p = ProbabilityVector::uniform();
        p.0[3] = 0.9;
        let t = ThresholdTable::default();
        assert!(verify_expression(&p, ExpressionLabel::Happy, &t).matched);
        let p = ProbabilityVector([0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]);
        let d = verify_expression(&p, ExpressionLabel::Angry, &t);
        assert!(d.matched);
        assert_eq!(d.detail, MatchDetail::TargetProbability(0.4));
        assert!(!verify_expression(&p, ExpressionLabel::Sad, &t).matched);
    }

    #[test]
    fn threshold_table_bounds() {
        assert!(ThresholdTable::new([0.5; 7]).is_ok());
        assert!(ThresholdTable::new([0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5]).is_err());
        assert!(ThresholdTable::new([0.0; 7]).is_err());
    }

    #[test]
    fn default_validity_accepts_centered_faces_only() {
        let v = CenteredContrast::default();
        assert!(v.is_valid(&face(0)));
        assert!(!v.is_valid(&Image::filled(0.5)));
        assert!(!v.is_valid(&face(22)));
    }

    #[test]
    fn registration_reports_failed_indices() {
        let m = model();
        let mut images: Vec<Image> = (0..7).map(|_| face(0)).collect();
        images[2] = Image::filled(0.5);
        images[5] = Image::filled(0.1);
        let reg = TemplateRegistry::in_memory();
        let err = reg.register("u", &images, &m, &CenteredContrast::default()).unwrap_err();
        assert!(matches!(err, Error::Recapture { ref failed } if failed == &[2, 5]));
        assert!(reg.get("u", &m.id).is_none());

        let err = register_templates("u", &images[..6], &m, &CenteredContrast::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn registration_and_exact_match() {
        let m = model();
        let images: Vec<Image> = (0..7)
            .map(|i| Image::from_fn(|c, y, x| {
                let d = ((y as f32 - 31.5).powi(2) + (x as f32 - 31.5).powi(2)).sqrt();
                if d < 20.0 { 0.3 + 0.1 * i as f32 + 0.05 * c as f32 } else { 0.1 }
            }))
            .collect();
        let set = register_templates("u", &images, &m, &CenteredContrast::default()).unwrap();
        assert_eq!(set.dim(), 38);
        let (label, dist) = classify_by_template(&set, &images[5], &m).unwrap();
        assert_eq!(label, ExpressionLabel::Sad);
        assert_eq!(dist[5], 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let t: Vec<FeatureVector> = (0..7)
            .map(|i| FeatureVector(if i == 1 || i == 4 { vec![1.0, 0.0] } else { vec![10.0, 10.0] }))
            .collect();
        let set = UserTemplateSet::new("u", ModelId("m".into()), t).unwrap();
        let (label, d) = classify_features(&set, &FeatureVector(vec![0.0, 0.0])).unwrap();
        assert_eq!(label, ExpressionLabel::Disgust);
        assert_eq!(d[1], d[4]);
        assert!(classify_features(&set, &FeatureVector(vec![0.0])).is_err());
    }

    #[test]
    fn stale_templates_are_rejected() {
        let m = model();
        let t = (0..7).map(|_| FeatureVector(vec![0.0; 38])).collect();
        let set = UserTemplateSet::new("u", ModelId("other".into()), t).unwrap();
        assert!(matches!(classify_by_template(&set, &face(0), &m), Err(Error::Contract(_))));
    }

    #[test]
    fn template_file_round_trip() {
        let t = (0..7).map(|i| FeatureVector(vec![i as f32, -0.5, 1e-7])).collect();
        let set = UserTemplateSet::new("alice", ModelId("abc".into()), t).unwrap();
        let back = UserTemplateSet::decode(&set.encode()).unwrap();
        assert_eq!(back, set);
        assert!(UserTemplateSet::decode(&set.encode()[..20]).is_err());
    }

    #[test]
    fn registry_persists_sets() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let images: Vec<Image> = (0..7).map(|_| face(0)).collect();
        {
            let reg = TemplateRegistry::open(dir.path()).unwrap();
            reg.register("bob", &images, &m, &CenteredContrast::default()).unwrap();
        }
        let reg = TemplateRegistry::open(dir.path()).unwrap();
        assert!(reg.get("bob", &m.id).is_some());
        assert!(reg.get("bob", &ModelId("nope".into())).is_none());
    }
}
