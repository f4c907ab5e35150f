//! Gradient masks selecting the child network.
//!
//! A mask is a per-scalar multiplier: 0 freezes the coordinate for the step,
//! a positive value scales its gradient. Head coordinates (the task head
//! listed in a [`HeadSet`]) are always kept with scale 1.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::fisher::FisherDiag;
use crate::fsio;
use crate::params::ParamVector;

/// Coordinates that bypass child selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadSet {
    member: Vec<bool>,
    count: usize,
}

impl HeadSet {
    pub fn new(param_count: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut member = vec![false; param_count];
        for i in indices {
            if i >= param_count {
                return Err(Error::invalid(format!(
                    "head index {i} >= parameter count {param_count}"
                )));
            }
            member[i] = true;
        }
        let count = member.iter().filter(|&&m| m).count();
        Ok(Self { member, count })
    }

    /// No head: every coordinate takes part in child selection.
    pub fn empty(param_count: usize) -> Self {
        Self {
            member: vec![false; param_count],
            count: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.member.len()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.member[i]
    }

    pub fn non_head_count(&self) -> usize {
        self.member.len() - self.count
    }

    fn non_head(&self) -> impl Iterator<Item = usize> + '_ {
        self.member
            .iter()
            .enumerate()
            .filter(|(_, &h)| !h)
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    BernoulliF,
    FisherD,
    RandomD,
    LowestD,
    TopkLayers,
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMask {
    scales: Vec<f64>,
    kind: MaskKind,
    p: f64,
}

impl GradMask {
    /// All-ones mask (plain fine-tuning).
    pub fn ones(param_count: usize) -> Self {
        Self {
            scales: vec![1.0; param_count],
            kind: MaskKind::Custom,
            p: 1.0,
        }
    }

    pub fn custom(scales: Vec<f64>) -> Result<Self> {
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid(
                "mask scales must be finite and non-negative",
            ));
        }
        Ok(Self {
            scales,
            kind: MaskKind::Custom,
            p: 1.0,
        })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.scales[i] > 0.0
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.scales.len())
            .filter(|&i| self.is_positive(i))
            .collect()
    }

    pub fn positive_count(&self) -> usize {
        self.scales.iter().filter(|&&s| s > 0.0).count()
    }

    /// Sub-mask over `range` (e.g. the backbone prefix), kind and p kept.
    pub fn restrict(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start > range.end {
            return Err(Error::invalid(format!(
                "range {range:?} outside mask of length {}",
                self.len()
            )));
        }
        Ok(Self {
            scales: self.scales[range].to_vec(),
            kind: self.kind,
            p: self.p,
        })
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.scales {
            h.update(s.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_file(&self, head: &HeadSet) -> MaskFile {
        MaskFile {
            format_version: MASK_FILE_VERSION,
            kind: self.kind,
            p: self.p,
            len: self.len(),
            positive: self.positive_indices(),
            head: (0..self.len()).filter(|&i| head.contains(i)).collect(),
        }
    }

    pub fn save(&self, path: &Path, head: &HeadSet) -> Result<()> {
        fsio::write_json(path, &self.to_file(head))
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsio::read_json::<MaskFile>(path)?.into_mask()
    }
}

pub const MASK_FILE_VERSION: u32 = 1;

/// On-disk mask: kind, ratio and the positive index list. Scales are
/// reconstructed as 1, except non-head entries of a Bernoulli mask which get
/// 1/p.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub format_version: u32,
    pub kind: MaskKind,
    pub p: f64,
    pub len: usize,
    pub positive: Vec<usize>,
    #[serde(default)]
    pub head: Vec<usize>,
}

impl MaskFile {
    pub fn into_mask(self) -> Result<GradMask> {
        if self.format_version != MASK_FILE_VERSION {
            return Err(Error::FormatVersion {
                expected: MASK_FILE_VERSION,
                found: self.format_version,
            });
        }
        if !matches!(self.kind, MaskKind::TopkLayers | MaskKind::Custom) {
            check_ratio(self.p)?;
        }
        let head = HeadSet::new(self.len, self.head.iter().copied())?;
        let mut scales = vec![0.0; self.len];
        for &i in &self.positive {
            if i >= self.len {
                return Err(Error::invalid(format!(
                    "mask index {i} >= length {}",
                    self.len
                )));
            }
            scales[i] = if self.kind == MaskKind::BernoulliF && !head.contains(i) {
                1.0 / self.p
            } else {
                1.0
            };
        }
        Ok(GradMask {
            scales,
            kind: self.kind,
            p: self.p,
        })
    }
}

fn check_ratio(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("ratio must lie in (0, 1], got {p}")))
    }
}

/// `⌈p·n⌉`, read with a relative slack of 1e-9 so that products like
/// 0.3·10 that land a rounding error above an integer are not bumped up.
pub fn child_count(p: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let x = p * n as f64;
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (c as usize).clamp(1, n)
}

/// Fresh task-free mask: each non-head entry is 1/p with probability p,
/// else 0. Head entries are 1.
pub fn bernoulli_mask<R: Rng + ?Sized>(
    param_count: usize,
    head: &HeadSet,
    p: f64,
    rng: &mut R,
) -> Result<GradMask> {
    check_ratio(p)?;
    check_len("bernoulli_mask head set", param_count, head.param_count())?;
    let keep = 1.0 / p;
    let scales = (0..param_count)
        .map(|i| {
            if head.contains(i) {
                1.0
            } else if rng.random::<f64>() < p {
                keep
            } else {
                0.0
            }
        })
        .collect();
    Ok(GradMask {
        scales,
        kind: MaskKind::BernoulliF,
        p,
    })
}

fn fixed_from_selection(
    head: &HeadSet,
    chosen: impl IntoIterator<Item = usize>,
    kind: MaskKind,
    p: f64,
) -> GradMask {
    let mut scales = vec![0.0; head.param_count()];
    for i in 0..scales.len() {
        if head.contains(i) {
            scales[i] = 1.0;
        }
    }
    for i in chosen {
        scales[i] = 1.0;
    }
    GradMask { scales, kind, p }
}

fn ranked_mask(fisher: &FisherDiag, head: &HeadSet, p: f64, highest: bool) -> Result<GradMask> {
    check_ratio(p)?;
    let scores = fisher.scores();
    check_len("fisher mask", scores.len(), head.param_count())?;
    let mut order: Vec<usize> = head.non_head().collect();
    let take = child_count(p, order.len());
    // Ties go to the lower index in both directions.
    order.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        let c = if highest { c.reverse() } else { c };
        c.then(a.cmp(&b))
    });
    let kind = if highest {
        MaskKind::FisherD
    } else {
        MaskKind::LowestD
    };
    Ok(fixed_from_selection(
        head,
        order.into_iter().take(take),
        kind,
        p,
    ))
}

/// Keeps the `⌈p·n⌉` non-head coordinates with the highest Fisher scores.
pub fn fisher_topk_mask(fisher: &FisherDiag, head: &HeadSet, p: f64) -> Result<GradMask> {
    ranked_mask(fisher, head, p, true)
}

/// Keeps the `⌈p·n⌉` non-head coordinates with the lowest Fisher scores.
pub fn lowest_fisher_mask(fisher: &FisherDiag, head: &HeadSet, p: f64) -> Result<GradMask> {
    ranked_mask(fisher, head, p, false)
}

/// `⌈p·n⌉` non-head coordinates drawn uniformly without replacement.
pub fn random_fixed_mask<R: Rng + ?Sized>(
    param_count: usize,
    head: &HeadSet,
    p: f64,
    rng: &mut R,
) -> Result<GradMask> {
    check_ratio(p)?;
    check_len(
        "random_fixed_mask head set",
        param_count,
        head.param_count(),
    )?;
    let pool: Vec<usize> = head.non_head().collect();
    let take = child_count(p, pool.len());
    let picked = rand::seq::index::sample(rng, pool.len(), take);
    Ok(fixed_from_selection(
        head,
        picked.into_iter().map(|j| pool[j]),
        MaskKind::RandomD,
        p,
    ))
}

/// Every tensor in the top `k` non-head layers, plus the head.
pub fn topk_layer_mask(registry: &ParamVector, k: usize, head: &HeadSet) -> Result<GradMask> {
    check_len(
        "topk_layer_mask head set",
        registry.len(),
        head.param_count(),
    )?;
    let depth = registry.layer_count().saturating_sub(1);
    if k > depth {
        return Err(Error::invalid(format!(
            "k = {k} exceeds {depth} trainable non-head layers"
        )));
    }
    let chosen = registry
        .entries()
        .iter()
        .filter(|e| e.layer >= depth - k)
        .flat_map(|e| e.range());
    let mut mask = fixed_from_selection(head, chosen, MaskKind::TopkLayers, 1.0);
    // No generating ratio here; record the kept fraction instead.
    mask.p = mask.positive_count() as f64 / mask.len().max(1) as f64;
    Ok(mask)
}

pub fn apply_mask(grads: &[f64], mask: &GradMask) -> Result<Vec<f64>> {
    check_len("apply_mask", mask.len(), grads.len())?;
    Ok(grads.iter().zip(&mask.scales).map(|(g, m)| g * m).collect())
}

/// Zeroes every coordinate outside the mask's positive set.
pub fn prune_params(params: &ParamVector, mask: &GradMask) -> Result<ParamVector> {
    check_len("prune_params", mask.len(), params.len())?;
    let values = params
        .values()
        .iter()
        .zip(&mask.scales)
        .map(|(&w, &m)| if m > 0.0 { w } else { 0.0 })
        .collect();
    params.with_values(values)
}

/// |A ∩ B| / |A ∪ B| over positive-entry index sets.
pub fn jaccard(a: &GradMask, b: &GradMask) -> Result<f64> {
    check_len("jaccard", a.len(), b.len())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.scales.iter().zip(&b.scales) {
        let (x, y) = (*x > 0.0, *y > 0.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::UndefinedOverlap);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fisher(v: &[f64]) -> FisherDiag {
        FisherDiag::from_scores(v.to_vec()).unwrap()
    }

    fn set(mask: &GradMask) -> Vec<usize> {
        mask.positive_indices()
    }

    #[test]
    fn child_count_rounding() {
        assert_eq!(child_count(0.25, 10), 3);
        assert_eq!(child_count(0.5, 4), 2);
        assert_eq!(child_count(0.3, 10), 3);
        assert_eq!(child_count(0.1, 30), 3);
        assert_eq!(child_count(1e-9, 10), 1);
        assert_eq!(child_count(1.0, 7), 7);
        assert_eq!(child_count(0.5, 0), 0);
    }

    #[test]
    fn bernoulli_degenerate_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = HeadSet::new(20, [18, 19]).unwrap();
        let ones = bernoulli_mask(20, &head, 1.0, &mut rng).unwrap();
        assert!(ones.scales().iter().all(|&s| s == 1.0));
        let half = bernoulli_mask(20, &head, 0.5, &mut rng).unwrap();
        for i in 0..18 {
            assert!(half.scales()[i] == 0.0 || half.scales()[i] == 2.0);
        }
        assert_eq!(&half.scales()[18..], &[1.0, 1.0]);
        assert!(bernoulli_mask(20, &head, 0.0, &mut rng).is_err());
        assert!(bernoulli_mask(20, &head, 1.5, &mut rng).is_err());
        assert!(bernoulli_mask(21, &head, 0.5, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_keep_fraction() {
        // 3 sigma of Binomial(1e6, 0.5) / 1e6 is 0.0015.
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = bernoulli_mask(n, &HeadSet::empty(n), 0.5, &mut rng).unwrap();
        let frac = m.positive_count() as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.002, "{frac}");
    }

    #[test]
    fn fisher_topk_examples() {
        let none = HeadSet::empty(4);
        let m = fisher_topk_mask(&fisher(&[0.1, 0.9, 0.5, 0.2]), &none, 0.5).unwrap();
        assert_eq!(set(&m), vec![1, 2]);
        assert_eq!(m.kind(), MaskKind::FisherD);
        let all = fisher_topk_mask(&fisher(&[0.1, 0.9, 0.5, 0.2]), &none, 1.0).unwrap();
        assert!(all.scales().iter().all(|&s| s == 1.0));
        let tie = fisher_topk_mask(&fisher(&[0.5, 0.5]), &HeadSet::empty(2), 0.5).unwrap();
        assert_eq!(set(&tie), vec![0]);
        assert!(fisher_topk_mask(&fisher(&[0.5, 0.5]), &none, 0.5).is_err());
    }

    #[test]
    fn fisher_topk_keeps_head() {
        let head = HeadSet::new(5, [4]).unwrap();
        let m = fisher_topk_mask(&fisher(&[0.1, 0.9, 0.5, 0.2, 0.0]), &head, 0.25).unwrap();
        assert_eq!(set(&m), vec![1, 4]);
    }

    #[test]
    fn lowest_examples() {
        let none = HeadSet::empty(4);
        let m = lowest_fisher_mask(&fisher(&[0.1, 0.9, 0.5, 0.2]), &none, 0.5).unwrap();
        assert_eq!(set(&m), vec![0, 3]);
        assert_eq!(m.kind(), MaskKind::LowestD);
        let all = lowest_fisher_mask(&fisher(&[0.1, 0.9, 0.5, 0.2]), &none, 1.0).unwrap();
        assert_eq!(all.positive_count(), 4);
        let tie = lowest_fisher_mask(&fisher(&[0.5, 0.5]), &HeadSet::empty(2), 0.5).unwrap();
        assert_eq!(set(&tie), vec![0]);
    }

    #[test]
    fn random_fixed_examples() {
        let head = HeadSet::new(12, [10, 11]).unwrap();
        let m = random_fixed_mask(12, &head, 0.25, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!((0..10).filter(|&i| m.is_positive(i)).count(), 3);
        assert!(m.is_positive(10) && m.is_positive(11));
        let again = random_fixed_mask(12, &head, 0.25, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(m, again);
        let full = random_fixed_mask(12, &head, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(full.positive_count(), 12);
        assert!(random_fixed_mask(12, &head, 0.0, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    fn two_hidden_registry() -> ParamVector {
        let mut p = ParamVector::new();
        p.push("layer0.weight", &[2, 3], 0).unwrap();
        p.push("layer0.bias", &[3], 0).unwrap();
        p.push("layer1.weight", &[3, 3], 1).unwrap();
        p.push("layer1.bias", &[3], 1).unwrap();
        p.push("layer2.weight", &[3, 2], 2).unwrap();
        p.push("layer2.bias", &[2], 2).unwrap();
        p
    }

    #[test]
    fn topk_layers() {
        let reg = two_hidden_registry();
        let head = HeadSet::new(
            reg.len(),
            reg.indices_of(["layer2.weight", "layer2.bias"]).unwrap(),
        )
        .unwrap();
        let all = topk_layer_mask(&reg, 2, &head).unwrap();
        assert_eq!(all.positive_count(), reg.len());
        let none = topk_layer_mask(&reg, 0, &head).unwrap();
        assert_eq!(set(&none), head_indices(&head));
        let one = topk_layer_mask(&reg, 1, &head).unwrap();
        let expected = reg
            .indices_of([
                "layer1.weight",
                "layer1.bias",
                "layer2.weight",
                "layer2.bias",
            ])
            .unwrap();
        assert_eq!(set(&one), expected);
        assert!(topk_layer_mask(&reg, 3, &head).is_err());
    }

    fn head_indices(h: &HeadSet) -> Vec<usize> {
        (0..h.param_count()).filter(|&i| h.contains(i)).collect()
    }

    #[test]
    fn apply_and_prune() {
        let ones = GradMask::ones(2);
        assert_eq!(apply_mask(&[1.0, 2.0], &ones).unwrap(), vec![1.0, 2.0]);
        let zeros = GradMask::custom(vec![0.0, 0.0]).unwrap();
        assert_eq!(apply_mask(&[1.0, 2.0], &zeros).unwrap(), vec![0.0, 0.0]);
        let m = GradMask::custom(vec![0.0, 2.0]).unwrap();
        assert_eq!(apply_mask(&[1.0, 2.0], &m).unwrap(), vec![0.0, 4.0]);
        assert!(apply_mask(&[1.0], &m).is_err());

        let mut p = ParamVector::new();
        p.push("w", &[2], 0).unwrap();
        p.values_mut().copy_from_slice(&[3.0, -1.0]);
        assert_eq!(prune_params(&p, &ones).unwrap(), p);
        assert_eq!(prune_params(&p, &zeros).unwrap().values(), &[0.0, 0.0]);
        let keep_first = GradMask::custom(vec![1.0, 0.0]).unwrap();
        assert_eq!(prune_params(&p, &keep_first).unwrap().values(), &[3.0, 0.0]);
        assert!(GradMask::custom(vec![-1.0]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let a = GradMask::custom(vec![1.0, 1.0, 0.0]).unwrap();
        let b = GradMask::custom(vec![0.0, 1.0, 1.0]).unwrap();
        let c = GradMask::custom(vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &c).unwrap(), 0.0);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = GradMask::custom(vec![0.0; 3]).unwrap();
        assert!(matches!(
            jaccard(&empty, &empty),
            Err(Error::UndefinedOverlap)
        ));
        assert!(jaccard(&a, &GradMask::ones(2)).is_err());
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let head = HeadSet::new(6, [5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in [
            bernoulli_mask(6, &head, 0.4, &mut rng).unwrap(),
            fisher_topk_mask(&fisher(&[0.3, 0.1, 0.2, 0.6, 0.0, 0.0]), &head, 0.4).unwrap(),
        ] {
            let path = dir.path().join("m.json");
            m.save(&path, &head).unwrap();
            assert_eq!(GradMask::load(&path).unwrap(), m);
        }
        let mut f = GradMask::ones(2).to_file(&HeadSet::empty(2));
        f.positive.push(7);
        assert!(f.into_mask().is_err());
    }
}
