//! Synthetic scenes and synthetic providers.
//!
//! Synthetic providers perturb a source (ground truth or an existing
//! provider): each object is kept with a per-category recall probability,
//! its corners are jittered with Gaussian noise proportional to the box size,
//! its score is drawn around a mean, and false positives are injected at a
//! Poisson rate. Everything is deterministic under the seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::detection::{BBox, RawDetection};
use crate::trace::{GtEntry, Trace, TraceHeader, TraceRecord};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("no provider profiles given")]
    NoProfiles,
    #[error("record {0} has no ground truth to perturb")]
    MissingGroundTruth(String),
    #[error("source provider {0} does not exist")]
    BadSource(usize),
    #[error("invalid parameter: {0}")]
    Param(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Source {
    #[default]
    GroundTruth,
    Provider(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderProfile {
    pub name: String,
    pub source: Source,
    /// Probability that a source object is reported.
    pub recall: f64,
    /// Per-category recall overrides, keyed by lowercased label.
    pub category_recall: BTreeMap<String, f64>,
    /// Corner noise std as a fraction of box width/height.
    pub jitter: f64,
    pub score_mean: f64,
    pub score_std: f64,
    /// Probability that a reported object gets a random wrong label.
    pub confusion: f64,
    /// Expected false positives per image.
    pub fp_rate: f64,
    pub fp_score_mean: f64,
    /// Probability that an object's detectability draw is shared across
    /// providers of one synthesis call (hard objects are hard for everyone).
    pub shared_difficulty: f64,
}

impl Default for ProviderProfile {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            source: Source::GroundTruth,
            recall: 1.0,
            category_recall: BTreeMap::new(),
            jitter: 0.0,
            score_mean: 1.0,
            score_std: 0.0,
            confusion: 0.0,
            fp_rate: 0.0,
            fp_score_mean: 0.5,
            shared_difficulty: 0.0,
        }
    }
}

impl ProviderProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let probs = [
            ("recall", self.recall),
            ("confusion", self.confusion),
            ("shared_difficulty", self.shared_difficulty),
            ("score_mean", self.score_mean),
            ("fp_score_mean", self.fp_score_mean),
        ];
        for (name, v) in probs.into_iter().chain(self.category_recall.values().map(|&v| ("category_recall", v))) {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::Param(format!("{name} = {v} outside [0,1]")));
            }
        }
        for (name, v) in [("jitter", self.jitter), ("score_std", self.score_std), ("fp_rate", self.fp_rate)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Param(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(0.01, 1.0)
}

fn jitter_box(b: &BBox, frac: f64, rng: &mut impl Rng) -> BBox {
    if frac == 0.0 {
        return *b;
    }
    let nx = Normal::new(0.0, frac * b.width().max(1e-9)).expect("finite std");
    let ny = Normal::new(0.0, frac * b.height().max(1e-9)).expect("finite std");
    let x0 = b.x_min + nx.sample(rng);
    let x1 = b.x_max + nx.sample(rng);
    let y0 = b.y_min + ny.sample(rng);
    let y1 = b.y_max + ny.sample(rng);
    BBox { x_min: x0.min(x1), y_min: y0.min(y1), x_max: x0.max(x1), y_max: y0.max(y1) }
}

/// Bounding extent of a record's boxes, used to place false positives.
fn canvas(objs: &[(String, BBox)]) -> (f64, f64, f64) {
    let w = objs.iter().map(|o| o.1.x_max).fold(1.0, f64::max);
    let h = objs.iter().map(|o| o.1.y_max).fold(1.0, f64::max);
    let size = if objs.is_empty() {
        0.2 * w.min(h)
    } else {
        objs.iter().map(|o| o.1.width().max(o.1.height())).sum::<f64>() / objs.len() as f64
    };
    (w, h, size.max(1e-3))
}

fn perturb(
    objs: &[(String, BBox)],
    difficulty: &[f64],
    profile: &ProviderProfile,
    labels: &[String],
    extent: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<RawDetection> {
    let score_noise = Normal::new(0.0, profile.score_std).expect("validated std");
    let mut out = Vec::new();
    for (k, (label, b)) in objs.iter().enumerate() {
        let recall = profile.category_recall.get(label).copied().unwrap_or(profile.recall);
        let own: f64 = rng.random();
        let u = if rng.random::<f64>() < profile.shared_difficulty { difficulty[k] } else { own };
        if u >= recall {
            continue;
        }
        let mut label = label.clone();
        if !labels.is_empty() && rng.random::<f64>() < profile.confusion {
            label = labels[rng.random_range(0..labels.len())].clone();
        }
        let score = clamp_score(profile.score_mean + score_noise.sample(rng));
        out.push(RawDetection { label, score, bbox: jitter_box(b, profile.jitter, rng) });
    }
    if profile.fp_rate > 0.0 && !labels.is_empty() {
        let n_fp = Poisson::new(profile.fp_rate).expect("positive rate").sample(rng) as usize;
        let (w, h, size) = extent;
        for _ in 0..n_fp {
            let bw = size * rng.random_range(0.5..1.5);
            let bh = size * rng.random_range(0.5..1.5);
            let x = rng.random_range(0.0..(w - bw).max(1e-6));
            let y = rng.random_range(0.0..(h - bh).max(1e-6));
            let label = labels[rng.random_range(0..labels.len())].clone();
            let score = clamp_score(profile.fp_score_mean + score_noise.sample(rng));
            out.push(RawDetection { label, score, bbox: BBox { x_min: x, y_min: y, x_max: x + bw, y_max: y + bh } });
        }
    }
    out
}

fn record_rng(seed: u64, record: usize, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ lane.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(record as u64);
    rng
}

fn source_objects(rec: &TraceRecord, source: Source) -> Result<Vec<(String, BBox)>, SynthError> {
    match source {
        Source::GroundTruth => rec
            .gt
            .as_ref()
            .map(|g| g.iter().map(|e| (crate::grouping::canonical_label(&e.label), e.bbox)).collect())
            .ok_or_else(|| SynthError::MissingGroundTruth(rec.image_id.clone())),
        Source::Provider(p) => rec
            .per_provider
            .get(p)
            .map(|l| l.iter().map(|d| (crate::grouping::canonical_label(&d.label), d.bbox)).collect())
            .ok_or(SynthError::BadSource(p)),
    }
}

/// Appends one synthetic provider per profile to every record.
pub fn synthesize_providers(base: &Trace, profiles: &[ProviderProfile], seed: u64) -> Result<Trace, SynthError> {
    if profiles.is_empty() {
        return Err(SynthError::NoProfiles);
    }
    for p in profiles {
        p.validate()?;
    }
    let labels: Vec<String> = match &base.header.categories {
        Some(c) => c.iter().map(|s| crate::grouping::canonical_label(s)).collect(),
        None => base.labels().into_iter().collect(),
    };
    let mut out = base.clone();
    out.header.n += profiles.len();
    out.header.providers.extend(profiles.iter().map(|p| p.name.clone()));
    for (ri, rec) in out.records.iter_mut().enumerate() {
        let mut shared = record_rng(seed, ri, 0);
        let max_objs = profiles
            .iter()
            .map(|p| source_objects(rec, p.source).map(|o| o.len()))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        let difficulty: Vec<f64> = (0..max_objs).map(|_| shared.random()).collect();
        let gt_objs: Vec<(String, BBox)> = rec
            .gt
            .iter()
            .flatten()
            .map(|e| (e.label.clone(), e.bbox))
            .chain(rec.per_provider.iter().flatten().map(|d| (d.label.clone(), d.bbox)))
            .collect();
        let extent = canvas(&gt_objs);
        let mut added = Vec::with_capacity(profiles.len());
        for (pi, p) in profiles.iter().enumerate() {
            let objs = source_objects(rec, p.source)?;
            let mut rng = record_rng(seed, ri, pi as u64 + 1);
            added.push(perturb(&objs, &difficulty, p, &labels, extent, &mut rng));
        }
        rec.per_provider.extend(added);
    }
    Ok(out)
}

/// Layout of generated ground-truth scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub images: usize,
    pub categories: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub width: f64,
    pub height: f64,
    pub feature_dim: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            images: 1000,
            categories: ["person", "car", "dog", "bottle", "chair"].map(String::from).to_vec(),
            min_objects: 1,
            max_objects: 5,
            width: 640.0,
            height: 480.0,
            feature_dim: 8,
        }
    }
}

fn random_object(p: &SceneParams, rng: &mut ChaCha8Rng) -> (String, BBox) {
    let w = rng.random_range(0.08..0.35) * p.width;
    let h = rng.random_range(0.08..0.35) * p.height;
    let x = rng.random_range(0.0..p.width - w);
    let y = rng.random_range(0.0..p.height - h);
    let label = p.categories[rng.random_range(0..p.categories.len())].clone();
    (label, BBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h })
}

/// Ground-truth-only trace with uniform random features and no providers.
pub fn scene_trace(p: &SceneParams, seed: u64) -> Result<Trace, SynthError> {
    if p.categories.is_empty() || p.min_objects > p.max_objects || p.width <= 0.0 || p.height <= 0.0 {
        return Err(SynthError::Param("need categories, min_objects <= max_objects and a positive canvas".into()));
    }
    let records = (0..p.images)
        .map(|i| {
            let mut rng = record_rng(seed, i, 0xA5);
            let n = rng.random_range(p.min_objects..=p.max_objects);
            let gt = (0..n)
                .map(|_| {
                    let (label, bbox) = random_object(p, &mut rng);
                    GtEntry { label, bbox }
                })
                .collect();
            let features = (0..p.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            TraceRecord { image_id: format!("{i:06}"), features, per_provider: Vec::new(), gt: Some(gt) }
        })
        .collect();
    Ok(Trace {
        header: TraceHeader {
            n: 0,
            providers: Vec::new(),
            feature_dim: p.feature_dim,
            coords: Default::default(),
            normalized: false,
            categories: Some(p.categories.clone()),
        },
        records,
    })
}

/// Three-provider trace in which feature 0 names the one provider that
/// reports the ground truth exactly (values 0, 0.5, 1 for providers 0, 1, 2).
/// The other two recall only part of the scene, with loose boxes, low scores
/// and occasional false positives.
pub fn expert_trace(p: &SceneParams, seed: u64) -> Result<Trace, SynthError> {
    if p.feature_dim == 0 {
        return Err(SynthError::Param("the expert trace needs feature_dim >= 1".into()));
    }
    let base = scene_trace(p, seed)?;
    let expert = ProviderProfile { score_mean: 0.9, score_std: 0.05, ..ProviderProfile::default() };
    let weak = ProviderProfile {
        recall: 0.35,
        jitter: 0.04,
        score_mean: 0.4,
        score_std: 0.1,
        fp_rate: 0.1,
        fp_score_mean: 0.3,
        ..ProviderProfile::default()
    };
    let labels: Vec<String> = p.categories.iter().map(|c| crate::grouping::canonical_label(c)).collect();
    let mut out = base;
    out.header.n = 3;
    out.header.providers = vec!["expert-a".into(), "expert-b".into(), "expert-c".into()];
    for (ri, rec) in out.records.iter_mut().enumerate() {
        let mut rng = record_rng(seed, ri, 0x5EED);
        let who = rng.random_range(0..3usize);
        rec.features[0] = who as f64 / 2.0;
        let objs: Vec<(String, BBox)> = rec.gt.iter().flatten().map(|e| (e.label.clone(), e.bbox)).collect();
        let difficulty: Vec<f64> = vec![0.0; objs.len()];
        let extent = canvas(&objs);
        rec.per_provider = (0..3)
            .map(|k| {
                let profile = if k == who { &expert } else { &weak };
                perturb(&objs, &difficulty, profile, &labels, extent, &mut rng)
            })
            .collect();
    }
    Ok(out)
}

/// Index of the strongest provider in [`scalability_profiles`].
pub const SCALABILITY_DOMINANT: usize = 4;

/// Ten providers of graded quality. Provider [`SCALABILITY_DOMINANT`] has the
/// best recall and localization; the rest trade recall for false positives.
/// Object difficulty is largely shared, so pooling everyone adds clutter
/// faster than it adds recall.
pub fn scalability_profiles() -> Vec<ProviderProfile> {
    (0..10)
        .map(|k| {
            let dominant = k == SCALABILITY_DOMINANT;
            // 0 for the strongest of the rest, 1 for the weakest
            let t = if dominant { 0.0 } else { ((k + 5) % 10) as f64 / 8.0 };
            ProviderProfile {
                name: format!("service-{}", k + 1),
                recall: if dominant { 0.55 } else { 0.52 - 0.16 * t },
                jitter: if dominant { 0.03 } else { 0.05 + 0.04 * t },
                score_mean: 0.7 - 0.15 * t,
                score_std: 0.15,
                confusion: if dominant { 0.0 } else { 0.05 + 0.1 * t },
                fp_rate: if dominant { 0.6 } else { 0.4 + 0.5 * t },
                fp_score_mean: if dominant { 0.4 } else { 0.55 },
                shared_difficulty: 0.8,
                ..ProviderProfile::default()
            }
        })
        .collect()
}

pub fn scalability_trace(p: &SceneParams, seed: u64) -> Result<Trace, SynthError> {
    let base = scene_trace(p, seed)?;
    synthesize_providers(&base, &scalability_profiles(), seed.wrapping_add(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::EnsembleConfig;
    use crate::env::{Action, Dataset, RewardConfig};
    use crate::eval::dataset_metrics;
    use crate::exec::Execution;
    use crate::grouping::GroupingTable;

    fn small() -> SceneParams {
        SceneParams { images: 60, ..SceneParams::default() }
    }

    fn provider_ap50(t: &Trace, provider: usize) -> f64 {
        let table = GroupingTable::identity(t.header.categories.as_ref().unwrap()).unwrap();
        let cfg = EnsembleConfig::default();
        let data = Dataset::prepare(t, &table, &RewardConfig::default(), &cfg);
        let act = Action::single(provider, t.header.n);
        let preds: Vec<_> = (0..data.len()).map(|i| data.ensemble_action(i, &act, &cfg)).collect();
        let gt: Vec<_> = (0..data.len()).map(|i| data.eval_reference(i).to_vec()).collect();
        dataset_metrics(&preds, &gt, Execution::Sequential).unwrap().ap50
    }

    #[test]
    fn perfect_and_empty_providers() {
        let base = scene_trace(&small(), 3).unwrap();
        let perfect = ProviderProfile::default();
        let empty = ProviderProfile { recall: 0.0, ..ProviderProfile::default() };
        let t = synthesize_providers(&base, &[perfect, empty], 11).unwrap();
        assert_eq!(t.header.n, 2);
        assert_eq!(provider_ap50(&t, 0), 1.0);
        assert_eq!(provider_ap50(&t, 1), 0.0);
        for r in &t.records {
            assert!(r.per_provider[0].iter().all(|d| d.score == 1.0));
            assert!(r.per_provider[1].is_empty());
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let base = scene_trace(&small(), 3).unwrap();
        let prof = ProviderProfile { recall: 0.6, jitter: 0.1, score_mean: 0.6, score_std: 0.2, fp_rate: 1.0, ..Default::default() };
        let a = synthesize_providers(&base, &[prof.clone()], 5).unwrap();
        let b = synthesize_providers(&base, &[prof.clone()], 5).unwrap();
        let c = synthesize_providers(&base, &[prof], 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(scene_trace(&small(), 3).unwrap(), base);
    }

    #[test]
    fn rejects_bad_input() {
        let base = scene_trace(&small(), 3).unwrap();
        assert!(matches!(synthesize_providers(&base, &[], 0), Err(SynthError::NoProfiles)));
        let bad = ProviderProfile { recall: 1.5, ..Default::default() };
        assert!(matches!(synthesize_providers(&base, &[bad], 0), Err(SynthError::Param(_))));
        let from_missing = ProviderProfile { source: Source::Provider(3), ..Default::default() };
        assert!(matches!(synthesize_providers(&base, &[from_missing], 0), Err(SynthError::BadSource(3))));
    }

    #[test]
    fn expert_feature_names_the_accurate_provider() {
        let t = expert_trace(&small(), 9).unwrap();
        for r in &t.records {
            let who = (r.features[0] * 2.0).round() as usize;
            let gt = r.gt.as_ref().unwrap();
            assert_eq!(r.per_provider[who].len(), gt.len());
            for (d, g) in r.per_provider[who].iter().zip(gt) {
                assert_eq!(d.bbox, g.bbox);
            }
        }
    }
}
