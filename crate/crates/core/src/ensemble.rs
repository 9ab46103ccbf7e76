//! Two-stage ensembling of per-provider detections: voting over detection
//! groups, then ablation of duplicates inside each surviving group.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detection::{iou, BBox, Detection, ImagePrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voting {
    #[default]
    Affirmative,
    Consensus,
    Unanimous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    Nms,
    SoftNms,
    #[default]
    Wbf,
}

/// Score decay applied by Soft-NMS to non-keeper members.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SoftNmsDecay {
    /// `s * (1 - iou)`
    #[default]
    Linear,
    /// `s * exp(-iou^2 / sigma)`
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub voting: Voting,
    pub ablation: Ablation,
    pub match_iou: f64,
    pub soft_nms_decay: SoftNmsDecay,
    pub score_floor: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            voting: Voting::Affirmative,
            ablation: Ablation::Wbf,
            match_iou: 0.5,
            soft_nms_decay: SoftNmsDecay::Linear,
            score_floor: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnsembleConfigError {
    #[error("{name} must lie in (0, 1], got {value}")]
    Threshold { name: &'static str, value: f64 },
    #[error("soft-nms sigma must be positive, got {0}")]
    Sigma(f64),
}

impl EnsembleConfig {
    pub fn new(voting: Voting, ablation: Ablation) -> Self {
        Self { voting, ablation, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EnsembleConfigError> {
        for (name, value) in [("match_iou", self.match_iou), ("score_floor", self.score_floor)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(EnsembleConfigError::Threshold { name, value });
            }
        }
        if let SoftNmsDecay::Gaussian { sigma } = self.soft_nms_decay {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(EnsembleConfigError::Sigma(sigma));
            }
        }
        Ok(())
    }
}

/// One provider's normalized detections, tagged with its provider index.
#[derive(Debug, Clone, Copy)]
pub struct ProviderDetections<'a> {
    pub provider: usize,
    pub detections: &'a [Detection],
}

/// Member of a detection group: (provider index, detection).
pub type Member = (usize, Detection);

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGroup {
    pub members: Vec<Member>,
    /// Index into `members` of the detection that seeded the group.
    pub seed: usize,
}

impl DetectionGroup {
    pub fn group(&self) -> usize {
        self.members[self.seed].1.group
    }

    pub fn seed_box(&self) -> &BBox {
        &self.members[self.seed].1.bbox
    }

    /// Number of distinct providers contributing.
    pub fn provider_count(&self) -> usize {
        self.members.iter().map(|m| m.0).collect::<BTreeSet<_>>().len()
    }
}

fn by_score_desc(a: &Member, b: &Member) -> Ordering {
    b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Greedy seed-based grouping.
///
/// Detections are visited by descending score (ties: lower provider index,
/// then input order). Each joins the first group whose seed has the same
/// category and IoU strictly above `match_iou`, else seeds a new group.
pub fn group_detections(per_provider: &[ProviderDetections<'_>], match_iou: f64) -> Vec<DetectionGroup> {
    let mut all: Vec<Member> = per_provider
        .iter()
        .flat_map(|p| p.detections.iter().map(move |d| (p.provider, *d)))
        .collect();
    // stable sort keeps input order within equal (score, provider)
    all.sort_by(by_score_desc);

    let mut groups: Vec<DetectionGroup> = Vec::new();
    for m in all {
        let found = groups
            .iter_mut()
            .find(|g| g.group() == m.1.group && iou(g.seed_box(), &m.1.bbox) > match_iou);
        match found {
            Some(g) => g.members.push(m),
            None => groups.push(DetectionGroup { members: vec![m], seed: 0 }),
        }
    }
    groups
}

pub fn vote(groups: Vec<DetectionGroup>, method: Voting, n_selected: usize) -> Vec<DetectionGroup> {
    match method {
        Voting::Affirmative => groups,
        Voting::Consensus => groups.into_iter().filter(|g| 2 * g.provider_count() > n_selected).collect(),
        Voting::Unanimous => groups.into_iter().filter(|g| g.provider_count() == n_selected).collect(),
    }
}

/// Index of the highest-scoring member; ties go to the lower provider index.
fn keeper_index(group: &DetectionGroup) -> usize {
    let mut best = 0;
    for (i, m) in group.members.iter().enumerate().skip(1) {
        if by_score_desc(m, &group.members[best]) == Ordering::Less {
            best = i;
        }
    }
    best
}

pub fn ablate_nms(group: &DetectionGroup) -> Detection {
    group.members[keeper_index(group)].1
}

/// Keeps the top member and decays the rest by their overlap with it.
/// Members decayed below `score_floor` are discarded. Keeper comes first.
pub fn ablate_soft_nms(group: &DetectionGroup, decay: SoftNmsDecay, score_floor: f64) -> Vec<Detection> {
    let k = keeper_index(group);
    let keeper = group.members[k].1;
    let mut out = vec![keeper];
    for (i, (_, d)) in group.members.iter().enumerate() {
        if i == k {
            continue;
        }
        let o = iou(&d.bbox, &keeper.bbox);
        let factor = match decay {
            SoftNmsDecay::Linear => 1.0 - o,
            SoftNmsDecay::Gaussian { sigma } => (-(o * o) / sigma).exp(),
        };
        let score = d.score * factor;
        if score >= score_floor {
            out.push(Detection { score, ..*d });
        }
    }
    out
}

/// Result of weighted box fusion. `all_zero_scores` flags the degenerate
/// case where the unweighted mean box is used with score 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fused {
    pub detection: Detection,
    pub all_zero_scores: bool,
}

/// Score-weighted average box; fused score is the plain mean of member scores.
pub fn ablate_wbf(group: &DetectionGroup) -> Fused {
    let n = group.members.len() as f64;
    let weight_sum: f64 = group.members.iter().map(|m| m.1.score).sum();
    let all_zero = weight_sum <= 0.0;
    let mut acc = [0.0f64; 4];
    for (_, d) in &group.members {
        let w = if all_zero { 1.0 } else { d.score };
        for (a, c) in acc.iter_mut().zip(d.bbox.to_array()) {
            *a += w * c;
        }
    }
    let denom = if all_zero { n } else { weight_sum };
    let mut c = acc.map(|a| a / denom);
    // rounding can push a coordinate a hair outside the member range
    for (j, v) in c.iter_mut().enumerate() {
        let (lo, hi) = group
            .members
            .iter()
            .map(|m| m.1.bbox.to_array()[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        *v = v.clamp(lo, hi);
    }
    let score = if all_zero { 0.0 } else { (weight_sum / n).clamp(0.0, 1.0) };
    let bbox = BBox { x_min: c[0], y_min: c[1], x_max: c[2].max(c[0]), y_max: c[3].max(c[1]) };
    Fused { detection: Detection { group: group.group(), score, bbox }, all_zero_scores: all_zero }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnsembleOutput {
    pub prediction: ImagePrediction,
    /// Number of groups fused with all-zero scores.
    pub all_zero_groups: usize,
}

/// group -> vote -> per-group ablation -> concatenation sorted by descending score.
pub fn ensemble_with_diagnostics(per_provider: &[ProviderDetections<'_>], config: &EnsembleConfig) -> EnsembleOutput {
    let n_selected = per_provider.iter().map(|p| p.provider).collect::<BTreeSet<_>>().len();
    let groups = group_detections(per_provider, config.match_iou);
    let groups = vote(groups, config.voting, n_selected.max(1));
    let mut all_zero_groups = 0;
    let mut out = Vec::new();
    for g in &groups {
        match config.ablation {
            Ablation::None => out.extend(g.members.iter().map(|m| m.1)),
            Ablation::Nms => out.push(ablate_nms(g)),
            Ablation::SoftNms => out.extend(ablate_soft_nms(g, config.soft_nms_decay, config.score_floor)),
            Ablation::Wbf => {
                let f = ablate_wbf(g);
                all_zero_groups += usize::from(f.all_zero_scores);
                out.push(f.detection);
            }
        }
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    EnsembleOutput { prediction: ImagePrediction::new(out), all_zero_groups }
}

pub fn ensemble(per_provider: &[ProviderDetections<'_>], config: &EnsembleConfig) -> ImagePrediction {
    ensemble_with_diagnostics(per_provider, config).prediction
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(group: usize, score: f64, b: [f64; 4]) -> Detection {
        Detection { group, score, bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap() }
    }

    fn pd(provider: usize, d: &[Detection]) -> ProviderDetections<'_> {
        ProviderDetections { provider, detections: d }
    }

    #[test]
    fn grouping_examples() {
        let a = [det(0, 0.9, [0., 0., 1., 1.]), det(0, 0.8, [5., 5., 6., 6.])];
        assert_eq!(group_detections(&[pd(0, &a)], 0.5).len(), 2);

        // iou([0,0,10,10],[0,0,10,8]) = 0.8
        let a = [det(3, 0.9, [0., 0., 10., 10.])];
        let b = [det(3, 0.7, [0., 0., 10., 8.])];
        let g = group_detections(&[pd(0, &a), pd(1, &b)], 0.5);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members.len(), 2);
        assert_eq!(g[0].provider_count(), 2);

        let b = [det(5, 0.7, [0., 0., 10., 10.])];
        assert_eq!(group_detections(&[pd(0, &a), pd(1, &b)], 0.5).len(), 2);
        assert!(group_detections(&[], 0.5).is_empty());
    }

    #[test]
    fn grouping_uses_strict_threshold() {
        // iou([0,0,2,1],[1,0,3,1]) = 1/3; pick boxes with iou exactly 0.5
        let a = [det(0, 0.9, [0., 0., 4., 1.])];
        let b = [det(0, 0.8, [0., 0., 2., 1.])];
        assert_eq!(iou(&a[0].bbox, &b[0].bbox), 0.5);
        assert_eq!(group_detections(&[pd(0, &a), pd(1, &b)], 0.5).len(), 2);
    }

    fn group_of(providers: &[usize]) -> DetectionGroup {
        DetectionGroup { members: providers.iter().map(|&p| (p, det(0, 0.5, [0., 0., 1., 1.]))).collect(), seed: 0 }
    }

    #[test]
    fn voting_examples() {
        let g = vec![group_of(&[0, 2])];
        assert_eq!(vote(g.clone(), Voting::Consensus, 3).len(), 1);
        assert_eq!(vote(g.clone(), Voting::Unanimous, 3).len(), 0);
        assert_eq!(vote(g.clone(), Voting::Affirmative, 3), g);
        // one provider detecting twice is not agreement
        assert_eq!(vote(vec![group_of(&[1, 1])], Voting::Consensus, 3).len(), 0);
    }

    #[test]
    fn nms_examples() {
        let g = DetectionGroup { members: vec![(0, det(0, 0.7, [0., 0., 1., 1.])), (1, det(0, 0.9, [0., 0., 1., 1.2]))], seed: 1 };
        assert_eq!(ablate_nms(&g), g.members[1].1);
        let single = group_of(&[4]);
        assert_eq!(ablate_nms(&single), single.members[0].1);
        let tie = DetectionGroup { members: vec![(1, det(0, 0.5, [0., 0., 1., 1.])), (0, det(0, 0.5, [0., 0., 2., 2.]))], seed: 0 };
        assert_eq!(ablate_nms(&tie), tie.members[1].1);
    }

    #[test]
    fn soft_nms_examples() {
        // iou([0,0,10,10],[0,0,10,8]) = 0.8
        let g = DetectionGroup { members: vec![(0, det(0, 0.9, [0., 0., 10., 10.])), (1, det(0, 0.6, [0., 0., 10., 8.]))], seed: 0 };
        let out = ablate_soft_nms(&g, SoftNmsDecay::Linear, 0.001);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.12).abs() < 1e-12);
        assert_eq!(out[1].bbox, g.members[1].1.bbox);

        let single = group_of(&[0]);
        assert_eq!(ablate_soft_nms(&single, SoftNmsDecay::Linear, 0.001), vec![single.members[0].1]);

        // iou 0.999 -> 0.6 * 0.001 = 0.0006 < floor
        let g = DetectionGroup { members: vec![(0, det(0, 0.9, [0., 0., 1000., 1.])), (1, det(0, 0.6, [0., 0., 999., 1.]))], seed: 0 };
        assert!((iou(&g.members[0].1.bbox, &g.members[1].1.bbox) - 0.999).abs() < 1e-12);
        assert_eq!(ablate_soft_nms(&g, SoftNmsDecay::Linear, 0.001).len(), 1);
    }

    #[test]
    fn wbf_examples() {
        let g = DetectionGroup { members: vec![(0, det(2, 0.8, [0., 0., 10., 10.])), (1, det(2, 0.4, [2., 2., 12., 12.]))], seed: 0 };
        let f = ablate_wbf(&g);
        assert!(!f.all_zero_scores);
        let expect = [2.0 / 3.0, 2.0 / 3.0, 32.0 / 3.0, 32.0 / 3.0];
        for (got, want) in f.detection.bbox.to_array().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((f.detection.score - 0.6).abs() < 1e-12);
        assert_eq!(f.detection.group, 2);

        let single = DetectionGroup { members: vec![(0, det(1, 0.3, [1., 2., 3., 4.]))], seed: 0 };
        assert_eq!(ablate_wbf(&single).detection, single.members[0].1);

        let same = DetectionGroup { members: vec![(0, det(1, 0.2, [1., 2., 3., 4.])), (1, det(1, 0.8, [1., 2., 3., 4.]))], seed: 1 };
        let f = ablate_wbf(&same);
        assert_eq!(f.detection.bbox, same.members[0].1.bbox);
        assert!((f.detection.score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wbf_all_zero_scores_flagged() {
        let g = DetectionGroup { members: vec![(0, det(0, 0.0, [0., 0., 2., 2.])), (1, det(0, 0.0, [2., 2., 4., 4.]))], seed: 0 };
        let f = ablate_wbf(&g);
        assert!(f.all_zero_scores);
        assert_eq!(f.detection.score, 0.0);
        assert_eq!(f.detection.bbox.to_array(), [1., 1., 3., 3.]);
    }

    #[test]
    fn ensemble_examples() {
        // the two boxes overlap at IoU 64/136, so grouping needs a looser threshold
        let cfg = EnsembleConfig { match_iou: 0.4, ..Default::default() };
        assert!(ensemble(&[], &cfg).is_empty());
        let a = [det(0, 0.8, [0., 0., 10., 10.])];
        let b = [det(0, 0.4, [2., 2., 12., 12.])];
        let out = ensemble(&[pd(0, &a), pd(1, &b)], &cfg);
        assert_eq!(out.len(), 1);
        assert!((out.detections[0].score - 0.6).abs() < 1e-12);
        assert!((out.detections[0].bbox.x_min - 2.0 / 3.0).abs() < 1e-12);
        let out = ensemble(&[pd(0, &a), pd(1, &b)], &EnsembleConfig::default());
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(EnsembleConfig::default().validate().is_ok());
        let bad = EnsembleConfig { match_iou: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EnsembleConfig { soft_nms_decay: SoftNmsDecay::Gaussian { sigma: -1.0 }, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn arb_dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0..3usize, 0.0..1.0f64, 0.0..20.0f64, 0.0..20.0f64, 0.5..8.0f64, 0.5..8.0f64)
                .prop_map(|(g, s, x, y, w, h)| det(g, s, [x, y, x + w, y + h])),
            0..max,
        )
    }

    proptest! {
        #[test]
        fn grouping_partitions_input(a in arb_dets(8), b in arb_dets(8), c in arb_dets(8)) {
            let groups = group_detections(&[pd(0, &a), pd(1, &b), pd(2, &c)], 0.5);
            let total: usize = groups.iter().map(|g| g.members.len()).sum();
            prop_assert_eq!(total, a.len() + b.len() + c.len());
            for g in &groups {
                for m in &g.members[1..] {
                    prop_assert_eq!(m.1.group, g.group());
                    prop_assert!(iou(&m.1.bbox, g.seed_box()) > 0.5);
                }
            }
        }

        #[test]
        fn wbf_stays_within_member_range(a in arb_dets(6)) {
            prop_assume!(!a.is_empty());
            let g = DetectionGroup { members: a.iter().map(|d| (0, *d)).collect(), seed: 0 };
            let f = ablate_wbf(&g).detection.bbox.to_array();
            for j in 0..4 {
                let lo = a.iter().map(|d| d.bbox.to_array()[j]).fold(f64::INFINITY, f64::min);
                let hi = a.iter().map(|d| d.bbox.to_array()[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(f[j] >= lo && f[j] <= hi);
            }
        }

        #[test]
        fn single_provider_fixed_point(a in arb_dets(8)) {
            let none = ensemble(&[pd(0, &a)], &EnsembleConfig::new(Voting::Affirmative, Ablation::None));
            let mut want = a.clone();
            want.sort_by(|x, y| y.score.partial_cmp(&x.score).unwrap());
            prop_assert_eq!(none.detections, want);
        }

        #[test]
        fn ensemble_deterministic(a in arb_dets(6), b in arb_dets(6)) {
            let cfg = EnsembleConfig::default();
            let x = ensemble(&[pd(0, &a), pd(1, &b)], &cfg);
            let y = ensemble(&[pd(0, &a), pd(1, &b)], &cfg);
            prop_assert_eq!(x, y);
        }
    }
}
