//! Confusion counts, intersection over union and region overlap scores.

use std::fmt::Write as _;

use crate::config::{parse_entries, parse_value, Entry};
use crate::error::{Error, FormatError, Result};
use crate::volume::LabelVolume;

/// `K x K` counts; entry `(t, p)` is the number of voxels of true class `t`
/// predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    /// Counts one pair of equally long label slices.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} predicted vs {} true voxels", pred.len(), truth.len()),
            ));
        }
        let k = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::LabelOutOfRange {
                    label: p.max(t),
                    classes: k,
                });
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "confusion",
                format!("{} vs {} classes", self.classes, other.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(
    pred: &LabelVolume,
    truth: &LabelVolume,
    classes: usize,
) -> Result<ConfusionMatrix> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "confusion",
            format!("{:?} vs {:?}", pred.dims(), truth.dims()),
        ));
    }
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred.data(), truth.data())?;
    Ok(cm)
}

/// Per-class IU (`None` when the class is in neither volume) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct IntersectionOverUnion {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn mean_iu(cm: &ConfusionMatrix) -> IntersectionOverUnion {
    let per_class: Vec<Option<f64>> = (0..cm.classes())
        .map(|c| {
            let inter = cm.get(c, c);
            let union = cm.row_sum(c) + cm.col_sum(c) - inter;
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    IntersectionOverUnion { per_class, mean }
}

/// A named set of foreground labels that is binarized for overlap scores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSpec {
    pub name: String,
    pub labels: Vec<u8>,
}

impl RegionSpec {
    pub fn new(name: impl Into<String>, labels: &[u8]) -> Result<Self> {
        let name = name.into();
        if labels.is_empty() || labels.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "region `{name}` needs a nonempty label set without 0"
            )));
        }
        if name.is_empty() || name.contains(|c: char| c.is_whitespace() || "[]=#.".contains(c)) {
            return Err(Error::InvalidArgument(format!(
                "invalid region name `{name}`"
            )));
        }
        let mut labels = labels.to_vec();
        labels.sort_unstable();
        labels.dedup();
        Ok(Self { name, labels })
    }

    /// complete {1,2,3,4}, core {1,3,4}, enhancing {4}.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::new("complete", &[1, 2, 3, 4]).expect("valid"),
            Self::new("core", &[1, 3, 4]).expect("valid"),
            Self::new("enhancing", &[4]).expect("valid"),
        ]
    }

    pub fn contains(&self, label: u8) -> bool {
        self.labels.contains(&label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionScores {
    pub dice: f64,
    pub ppv: f64,
    pub sensitivity: f64,
}

impl RegionScores {
    /// Scores from `|P|`, `|T|` and `|P ∩ T|`.
    pub fn from_counts(predicted: u64, truth: u64, both: u64) -> Self {
        if predicted == 0 && truth == 0 {
            return Self {
                dice: 1.0,
                ppv: 1.0,
                sensitivity: 1.0,
            };
        }
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self {
            dice: ratio(2 * both, predicted + truth),
            ppv: ratio(both, predicted),
            sensitivity: ratio(both, truth),
        }
    }
}

/// Region counts `(|P|, |T|, |P ∩ T|)` from voxel labels.
pub fn region_counts(pred: &[u8], truth: &[u8], region: &RegionSpec) -> Result<(u64, u64, u64)> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "region_scores",
            format!("{} vs {} voxels", pred.len(), truth.len()),
        ));
    }
    let mut counts = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (region.contains(p), region.contains(t));
        counts.0 += p as u64;
        counts.1 += t as u64;
        counts.2 += (p && t) as u64;
    }
    Ok(counts)
}

pub fn region_scores(
    pred: &LabelVolume,
    truth: &LabelVolume,
    region: &RegionSpec,
) -> Result<RegionScores> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "region_scores",
            format!("{:?} vs {:?}", pred.dims(), truth.dims()),
        ));
    }
    let (p, t, both) = region_counts(pred.data(), truth.data(), region)?;
    Ok(RegionScores::from_counts(p, t, both))
}

/// The same scores aggregated from a confusion matrix.
pub fn region_scores_from_confusion(cm: &ConfusionMatrix, region: &RegionSpec) -> RegionScores {
    let k = cm.classes();
    let inside = |c: usize| c < 256 && region.contains(c as u8);
    let (mut p, mut t, mut both) = (0, 0, 0);
    for ti in 0..k {
        for pi in 0..k {
            let n = cm.get(ti, pi);
            if inside(pi) {
                p += n;
            }
            if inside(ti) {
                t += n;
                if inside(pi) {
                    both += n;
                }
            }
        }
    }
    RegionScores::from_counts(p, t, both)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mean_iu: f64,
    pub iu: Vec<Option<f64>>,
    pub regions: Vec<(String, RegionScores)>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, regions: &[RegionSpec]) -> Self {
        let iu = mean_iu(cm);
        Self {
            mean_iu: iu.mean,
            iu: iu.per_class,
            regions: regions
                .iter()
                .map(|r| (r.name.clone(), region_scores_from_confusion(cm, r)))
                .collect(),
        }
    }

    /// Canonical text: `mean_iu`, then `iu[c]` by class (`none` when
    /// excluded), then `region[name].{dice,ppv,sensitivity}` in region order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mean_iu = {}", self.mean_iu);
        for (c, v) in self.iu.iter().enumerate() {
            match v {
                Some(v) => writeln!(s, "iu[{c}] = {v}"),
                None => writeln!(s, "iu[{c}] = none"),
            }
            .expect("write to string");
        }
        for (name, r) in &self.regions {
            let _ = writeln!(s, "region[{name}].dice = {}", r.dice);
            let _ = writeln!(s, "region[{name}].ppv = {}", r.ppv);
            let _ = writeln!(s, "region[{name}].sensitivity = {}", r.sensitivity);
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, FormatError> {
        let entries = parse_entries(text)?;
        let mut mean = None;
        let mut iu = Vec::new();
        let mut regions: Vec<(String, [Option<f64>; 3])> = Vec::new();
        for Entry { line, key, value } in entries {
            let err = || FormatError::Config(format!("line {line}: unexpected key `{key}`"));
            if key == "mean_iu" {
                mean = Some(parse_value(&key, &value)?);
            } else if let Some(idx) = key.strip_prefix("iu[").and_then(|r| r.strip_suffix(']')) {
                let c: usize = parse_value(&key, idx)?;
                if c != iu.len() {
                    return Err(err());
                }
                iu.push(if value == "none" {
                    None
                } else {
                    Some(parse_value(&key, &value)?)
                });
            } else if let Some(rest) = key.strip_prefix("region[") {
                let (name, field) = rest.split_once("].").ok_or_else(err)?;
                let slot = ["dice", "ppv", "sensitivity"]
                    .iter()
                    .position(|&f| f == field)
                    .ok_or_else(err)?;
                if regions.last().is_none_or(|(n, _)| n != name) {
                    regions.push((name.to_string(), [None; 3]));
                }
                regions.last_mut().expect("pushed").1[slot] = Some(parse_value(&key, &value)?);
            } else {
                return Err(err());
            }
        }
        let regions = regions
            .into_iter()
            .map(|(name, [d, p, s])| match (d, p, s) {
                (Some(dice), Some(ppv), Some(sensitivity)) => Ok((
                    name,
                    RegionScores {
                        dice,
                        ppv,
                        sensitivity,
                    },
                )),
                _ => Err(FormatError::Config(format!(
                    "region `{name}` is incomplete"
                ))),
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            mean_iu: mean.ok_or_else(|| FormatError::Config("missing `mean_iu`".into()))?,
            iu,
            regions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(data: Vec<u8>) -> LabelVolume {
        LabelVolume::new((1, 1, data.len()), data).unwrap()
    }

    #[test]
    fn two_voxel_hand_count() {
        let cm = confusion(&vol(vec![1, 1]), &vol(vec![0, 1]), 2).unwrap();
        assert_eq!(
            (cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)),
            (0, 1, 0, 1)
        );
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let t = vol(vec![0, 1, 2, 2, 4, 0]);
        let cm = confusion(&t, &t, 5).unwrap();
        assert!((0..5).all(|a| (0..5).all(|b| a == b || cm.get(a, b) == 0)));
        let iu = mean_iu(&cm);
        assert_eq!(iu.mean, 1.0);
        assert_eq!(iu.per_class[3], None);
    }

    #[test]
    fn iu_worked_example() {
        // truth: 6 voxels of class 1; prediction: 4 voxels of class 1, 3 overlapping
        let truth = vol(vec![1, 1, 1, 1, 1, 1, 0, 0]);
        let pred = vol(vec![1, 1, 1, 0, 0, 0, 1, 0]);
        let cm = confusion(&pred, &truth, 2).unwrap();
        assert_eq!(mean_iu(&cm).per_class[1], Some(3.0 / 7.0));

        let disjoint = confusion(&vol(vec![0, 1]), &vol(vec![1, 0]), 2).unwrap();
        assert_eq!(mean_iu(&disjoint).per_class, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn region_worked_example() {
        let region = RegionSpec::new("r", &[1]).unwrap();
        let truth = vol(vec![1, 1, 1, 1, 1, 1, 0, 0]);
        let pred = vol(vec![1, 1, 1, 0, 0, 0, 1, 0]);
        let s = region_scores(&pred, &truth, &region).unwrap();
        assert_eq!((s.dice, s.ppv, s.sensitivity), (0.6, 0.75, 0.5));
        let same = region_scores(&truth, &truth, &region).unwrap();
        assert_eq!((same.dice, same.ppv, same.sensitivity), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_region_conventions() {
        let r = RegionSpec::new("e", &[4]).unwrap();
        let zeros = vol(vec![0, 0, 0]);
        assert_eq!(
            region_scores(&zeros, &zeros, &r).unwrap(),
            RegionScores::from_counts(0, 0, 0)
        );
        assert_eq!(RegionScores::from_counts(0, 0, 0).dice, 1.0);
        let s = region_scores(&vol(vec![4, 0, 0]), &zeros, &r).unwrap();
        assert_eq!((s.dice, s.ppv, s.sensitivity), (0.0, 0.0, 0.0));
        let s = region_scores(&zeros, &vol(vec![4, 0, 0]), &r).unwrap();
        assert_eq!((s.dice, s.ppv, s.sensitivity), (0.0, 0.0, 0.0));
    }

    #[test]
    fn region_spec_rules() {
        assert!(RegionSpec::new("bad", &[0, 1]).is_err());
        assert!(RegionSpec::new("bad", &[]).is_err());
        assert_eq!(RegionSpec::new("x", &[4, 1, 4]).unwrap().labels, vec![1, 4]);
        let names: Vec<_> = RegionSpec::defaults().into_iter().map(|r| r.name).collect();
        assert_eq!(names, ["complete", "core", "enhancing"]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = vol(vec![0, 1]);
        let b = vol(vec![0, 1, 2]);
        assert!(confusion(&a, &b, 3).is_err());
        assert!(region_scores(&a, &b, &RegionSpec::defaults()[0]).is_err());
        assert!(confusion(&vol(vec![5]), &vol(vec![0]), 5).is_err());
    }

    #[test]
    fn report_text_round_trip() {
        let truth = vol(vec![0, 1, 2, 4, 4, 0]);
        let pred = vol(vec![0, 1, 1, 4, 0, 0]);
        let cm = confusion(&pred, &truth, 5).unwrap();
        let r = MetricsReport::from_confusion(&cm, &RegionSpec::defaults());
        let text = r.to_text();
        assert!(text.starts_with("mean_iu = "));
        assert!(text.contains("iu[3] = none\n"));
        assert!(text.contains("region[core].sensitivity = "));
        assert_eq!(MetricsReport::from_text(&text).unwrap(), r);
        assert!(MetricsReport::from_text("iu[1] = 0.5").is_err());
    }

    fn labels(n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (
            prop::collection::vec(0u8..5, n),
            prop::collection::vec(0u8..5, n),
        )
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_symmetric((p, t) in labels(64), set in prop::collection::btree_set(1u8..5, 1..4)) {
            let r = RegionSpec::new("r", &set.into_iter().collect::<Vec<_>>()).unwrap();
            let a = region_scores(&vol(p.clone()), &vol(t.clone()), &r).unwrap();
            let b = region_scores(&vol(t.clone()), &vol(p.clone()), &r).unwrap();
            prop_assert_eq!(a.dice, b.dice);
            prop_assert_eq!(a.ppv, b.sensitivity);
            for v in [a.dice, a.ppv, a.sensitivity] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let cm = confusion(&vol(p), &vol(t), 5).unwrap();
            prop_assert_eq!(region_scores_from_confusion(&cm, &r), a);
            let iu = mean_iu(&cm);
            prop_assert!((0.0..=1.0).contains(&iu.mean));
        }

        #[test]
        fn mean_iu_is_one_only_for_exact_match((p, t) in labels(16)) {
            let cm = confusion(&vol(p.clone()), &vol(t.clone()), 5).unwrap();
            prop_assert_eq!(cm.total(), 16);
            prop_assert_eq!(mean_iu(&cm).mean == 1.0, p == t);
        }

        #[test]
        fn merged_confusion_is_the_sum((a, b) in labels(32), (c, d) in labels(32)) {
            let mut m = confusion(&vol(a.clone()), &vol(b.clone()), 5).unwrap();
            m.merge(&confusion(&vol(c.clone()), &vol(d.clone()), 5).unwrap()).unwrap();
            let all = confusion(&vol([a, c].concat()), &vol([b, d].concat()), 5).unwrap();
            prop_assert_eq!(m, all);
        }
    }
}
