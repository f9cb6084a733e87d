//! Target-domain label priors: mean lesions per subject, the size histogram
//! over volume bins, the per-subject budget and its bin-wise apportionment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{histogram, BinningConfig, Box3, Spacing};
use crate::scalar::{floor_count, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct PriorState<T> {
    /// Mean lesions per subject.
    pub mu: T,
    /// Size prior over volume bins; sums to one.
    pub hist: Vec<T>,
    /// Number of completed updates. Round `r` reads the state stamped `r - 1`.
    pub round: usize,
}

impl<T: Scalar> PriorState<T> {
    /// Round-0 priors from a labelled cohort: mean count per subject and the
    /// box histogram under the shared binning.
    pub fn from_labelled<'a, I>(
        subjects: I,
        spacing: &Spacing<T>,
        binning: &BinningConfig<T>,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [Box3<T>]>,
    {
        let mut boxes: Vec<&Box3<T>> = Vec::new();
        let mut n_subjects = 0usize;
        for s in subjects {
            n_subjects += 1;
            boxes.extend(s.iter());
        }
        if n_subjects == 0 {
            return Err(Error::EmptySubjectList);
        }
        let hist = histogram(boxes.iter().copied(), spacing, binning).ok_or(Error::NoGroundTruth)?;
        Ok(Self {
            mu: T::from_count(boxes.len()) / T::from_count(n_subjects),
            hist,
            round: 0,
        })
    }

    pub fn bins(&self) -> usize {
        self.hist.len()
    }
}

/// `(1 - alpha) * prev + alpha * mean(counts)`.
pub fn update_mu<T: Scalar>(prev_mu: T, counts: &[usize], alpha_mu: T) -> Result<T> {
    if counts.is_empty() {
        return Err(Error::EmptySubjectList);
    }
    let mean = T::from_count(counts.iter().sum()) / T::from_count(counts.len());
    Ok((T::one() - alpha_mu) * prev_mu + alpha_mu * mean)
}

/// Per-subject budget `round_half_up(lambda * mu)`.
pub fn budget<T: Scalar>(mu: T, lambda: T) -> usize {
    floor_count(lambda * mu + T::half())
}

/// EMA of the size prior toward `observed`, renormalized to the simplex.
/// `None` (nothing selected) leaves the prior unchanged.
pub fn update_hist<T: Scalar>(prev: &[T], observed: Option<&[T]>, alpha_h: T) -> Vec<T> {
    let Some(obs) = observed else {
        return prev.to_vec();
    };
    debug_assert_eq!(prev.len(), obs.len());
    let mixed: Vec<T> = prev
        .iter()
        .zip(obs)
        .map(|(&p, &o)| (T::one() - alpha_h) * p + alpha_h * o)
        .collect();
    let norm = mixed.iter().fold(T::zero(), |a, &v| a + v);
    if norm > T::zero() {
        mixed.into_iter().map(|v| v / norm).collect()
    } else {
        prev.to_vec()
    }
}

/// [`update_hist`] with the observation taken from a set of boxes.
pub fn update_hist_from_boxes<'a, T: Scalar>(
    prev: &[T],
    selected: impl IntoIterator<Item = &'a Box3<T>>,
    spacing: &Spacing<T>,
    binning: &BinningConfig<T>,
    alpha_h: T,
) -> Vec<T> {
    let obs = histogram(selected, spacing, binning);
    update_hist(prev, obs.as_deref(), alpha_h)
}

/// Integer slots per bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    pub counts: Vec<usize>,
    pub total: usize,
}

impl Quota {
    pub fn zeros(bins: usize) -> Self {
        Self {
            counts: vec![0; bins],
            total: 0,
        }
    }
}

/// Largest-remainder apportionment of `n_allow` slots over the bins of
/// `hist`. Fractional quotas are `hist_b / sum(hist) * n_allow`; each bin gets
/// its integer part and leftover slots go to the largest fractional parts,
/// ties to the lower bin index. A histogram with no mass is treated as
/// uniform.
pub fn allocate_quota<T: Scalar>(hist: &[T], n_allow: usize) -> Quota {
    let bins = hist.len();
    if bins == 0 || n_allow == 0 {
        return Quota::zeros(bins);
    }
    let mass = hist
        .iter()
        .fold(T::zero(), |a, &v| a + v.max_of(T::zero()));
    let n = T::from_count(n_allow);
    let fractional: Vec<T> = if mass > T::zero() {
        hist.iter()
            .map(|&h| h.max_of(T::zero()) / mass * n)
            .collect()
    } else {
        vec![n / T::from_count(bins); bins]
    };

    let mut counts: Vec<usize> = fractional.iter().map(|&q| floor_count(q)).collect();
    let assigned: usize = counts.iter().sum();
    if assigned > n_allow {
        // floating-point overshoot; trim from the smallest remainders
        trim_overshoot(&mut counts, &fractional, assigned - n_allow);
    } else {
        let mut order: Vec<usize> = (0..bins).collect();
        let rem = |b: usize| fractional[b] - T::from_count(counts[b]);
        order.sort_by(|&a, &b| {
            rem(b)
                .partial_cmp(&rem(a))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &b in order.iter().cycle().take(n_allow - assigned) {
            counts[b] += 1;
        }
    }
    Quota {
        counts,
        total: n_allow,
    }
}

fn trim_overshoot<T: Scalar>(counts: &mut [usize], fractional: &[T], mut excess: usize) {
    let mut order: Vec<usize> = (0..counts.len()).filter(|&b| counts[b] > 0).collect();
    order.sort_by(|&a, &b| {
        let ra = fractional[a] - T::from_count(counts[a]);
        let rb = fractional[b] - T::from_count(counts[b]);
        ra.partial_cmp(&rb).unwrap_or(std::cmp::Ordering::Equal)
    });
    for b in order.into_iter().cycle() {
        if excess == 0 {
            break;
        }
        if counts[b] > 0 {
            counts[b] -= 1;
            excess -= 1;
        }
    }
}
