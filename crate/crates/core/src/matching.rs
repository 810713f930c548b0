//! One-dimensional nearest-neighbor matching on propensity scores.
//!
//! Every query ranks candidates by `(|s_i - s_j|, j)` lexicographically, so
//! match sets always have exactly the requested size and are nested in `m`.
//! Units are 0-based throughout.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-arm sorted view of the scores.
#[derive(Debug, Clone)]
pub struct ScoreIndex<T> {
    scores: Vec<T>,
    treated: Vec<bool>,
    /// `sorted[arm]` lists the units of that arm ordered by `(score, index)`.
    sorted: [Vec<usize>; 2],
    /// Position of each unit within its own arm's sorted list.
    rank: Vec<usize>,
}

impl<T: Scalar> ScoreIndex<T> {
    pub fn build(scores: &[T], treated: &[bool]) -> Result<Self> {
        if scores.len() != treated.len() {
            return Err(Error::Shape(format!("{} scores for {} arm labels", scores.len(), treated.len())));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("score of unit {} is not finite", i + 1)));
        }
        let mut sorted = [Vec::new(), Vec::new()];
        for (i, &t) in treated.iter().enumerate() {
            sorted[t as usize].push(i);
        }
        if sorted[0].is_empty() || sorted[1].is_empty() {
            return Err(Error::DegenerateArm("both arms need at least one unit to match".into()));
        }
        let mut rank = vec![0; scores.len()];
        for arm in &mut sorted {
            // Stable sort keeps equal scores in index order.
            arm.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
            for (pos, &u) in arm.iter().enumerate() {
                rank[u] = pos;
            }
        }
        Ok(Self { scores: scores.to_vec(), treated: treated.to_vec(), sorted, rank })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    /// Units of one arm in `(score, index)` order.
    pub fn arm(&self, treated: bool) -> &[usize] {
        &self.sorted[treated as usize]
    }

    pub fn arm_size(&self, treated: bool) -> usize {
        self.sorted[treated as usize].len()
    }

    pub fn rank(&self, i: usize) -> usize {
        self.rank[i]
    }

    /// `J_m(i)`: the `m` nearest units of the opposite arm, nearest first.
    pub fn match_set_opposite(&self, i: usize, m: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(m);
        self.opposite_into(i, m, &mut out)?;
        Ok(out)
    }

    /// Same as [`Self::match_set_opposite`] writing into a reusable buffer.
    pub fn opposite_into(&self, i: usize, m: usize, out: &mut Vec<usize>) -> Result<()> {
        self.check_unit(i)?;
        let arm = !self.treated[i];
        self.check_m(m, arm, "opposite")?;
        out.clear();
        self.nearest(arm, self.scores[i], m, None, out);
        Ok(())
    }

    /// `H_m(i)`: the `m` nearest units of unit `i`'s own arm, starting with
    /// `i` itself.
    pub fn match_set_same(&self, i: usize, m: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(m);
        self.same_into(i, m, &mut out)?;
        Ok(out)
    }

    pub fn same_into(&self, i: usize, m: usize, out: &mut Vec<usize>) -> Result<()> {
        self.check_unit(i)?;
        let arm = self.treated[i];
        self.check_m(m, arm, "own")?;
        out.clear();
        out.push(i);
        if m > 1 {
            self.nearest(arm, self.scores[i], m - 1, Some(i), out);
        }
        Ok(())
    }

    /// `K_m(i)`: how many opposite-arm units include `i` in their match set.
    pub fn match_counts(&self, m: usize) -> Result<Vec<usize>> {
        let min_arm = self.arm_size(false).min(self.arm_size(true));
        if m == 0 || m > min_arm {
            return Err(Error::Bound(format!("m = {m} must lie in [1, min(n0, n1) = {min_arm}]")));
        }
        let mut counts = vec![0; self.len()];
        let mut buf = Vec::with_capacity(m);
        for j in 0..self.len() {
            self.opposite_into(j, m, &mut buf)?;
            for &i in &buf {
                counts[i] += 1;
            }
        }
        Ok(counts)
    }

    fn check_unit(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Bound(format!("unit {i} out of range for n = {}", self.len())));
        }
        Ok(())
    }

    fn check_m(&self, m: usize, arm: bool, which: &str) -> Result<()> {
        let size = self.arm_size(arm);
        if m == 0 || m > size {
            return Err(Error::Bound(format!("m = {m} must lie in [1, {size}] ({which} arm size)")));
        }
        Ok(())
    }

    /// Appends the `m` nearest units of `arm` to `target`, skipping `exclude`.
    ///
    /// Binary search locates `target`; the walk then expands outward. The
    /// right side is already in `(distance, index)` order. On the left side,
    /// runs of equal scores are consumed in ascending index order.
    fn nearest(&self, arm: bool, target: T, m: usize, exclude: Option<usize>, out: &mut Vec<usize>) {
        let units = &self.sorted[arm as usize];
        let s = &self.scores;
        let dist = |j: usize| (target - s[j]).abs();
        let start = units.partition_point(|&j| s[j] < target);

        let mut right = start;
        // Left side: the pending run is units[cursor..run_hi]; everything
        // before `left_end` is still unvisited.
        let mut left_end = start;
        let (mut cursor, mut run_hi) = (start, start);

        let mut taken = 0;
        while taken < m {
            while right < units.len() && Some(units[right]) == exclude {
                right += 1;
            }
            loop {
                if cursor < run_hi && Some(units[cursor]) == exclude {
                    cursor += 1;
                    continue;
                }
                if cursor == run_hi && left_end > 0 {
                    // Load the next run of equal scores to the left.
                    let v = s[units[left_end - 1]];
                    let lo = units[..left_end].partition_point(|&j| s[j] < v);
                    cursor = lo;
                    run_hi = left_end;
                    left_end = lo;
                    continue;
                }
                break;
            }
            let left_cand = (cursor < run_hi).then(|| units[cursor]);
            let right_cand = (right < units.len()).then(|| units[right]);
            let take_left = match (left_cand, right_cand) {
                (Some(l), Some(r)) => match dist(l).partial_cmp(&dist(r)).unwrap_or(Ordering::Equal) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => l < r,
                },
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            if take_left {
                out.push(units[cursor]);
                cursor += 1;
                if cursor == run_hi {
                    run_hi = left_end;
                    cursor = left_end;
                }
            } else {
                out.push(units[right]);
                right += 1;
            }
            taken += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // T4: scores (0.62, 0.50, 0.40, 0.71), w = (1, 0, 1, 0); 0-based here.
    fn t4() -> ScoreIndex<f64> {
        ScoreIndex::build(&[0.62, 0.50, 0.40, 0.71], &[true, false, true, false]).unwrap()
    }

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn index_orders_each_arm() {
        let idx = t4();
        assert_eq!(idx.arm(true), &[2, 0]);
        assert_eq!(idx.arm(false), &[1, 3]);
        assert_eq!(idx.rank(0), 1);
        assert_eq!(idx.rank(2), 0);
    }

    #[test]
    fn single_unit_per_arm() {
        let idx = ScoreIndex::build(&[0.3, 0.9], &[true, false]).unwrap();
        assert_eq!(idx.arm(true), &[0]);
        assert_eq!(idx.match_set_opposite(0, 1).unwrap(), vec![1]);
        assert_eq!(idx.match_set_opposite(1, 1).unwrap(), vec![0]);
    }

    #[test]
    fn duplicate_scores_keep_index_order() {
        let idx = ScoreIndex::build(&[0.5, 0.2, 0.5, 0.5, 0.4], &[true, false, true, true, false]).unwrap();
        assert_eq!(idx.arm(true), &[0, 2, 3]);
    }

    #[test]
    fn empty_arm_is_rejected() {
        assert!(matches!(ScoreIndex::build(&[0.1, 0.2], &[true, true]), Err(Error::DegenerateArm(_))));
    }

    #[test]
    fn opposite_matches_on_t4() {
        let idx = t4();
        assert_eq!(idx.match_set_opposite(0, 1).unwrap(), vec![3]);
        assert_eq!(sorted(idx.match_set_opposite(2, 2).unwrap()), vec![1, 3]);
        assert!(matches!(idx.match_set_opposite(0, 3), Err(Error::Bound(_))));
        assert!(matches!(idx.match_set_opposite(0, 0), Err(Error::Bound(_))));
    }

    #[test]
    fn same_arm_matches_on_t4() {
        let idx = t4();
        assert_eq!(idx.match_set_same(0, 1).unwrap(), vec![0]);
        assert_eq!(idx.match_set_same(0, 2).unwrap(), vec![0, 2]);
        assert_eq!(sorted(idx.match_set_same(3, 2).unwrap()), vec![1, 3]);
        assert!(matches!(idx.match_set_same(0, 3), Err(Error::Bound(_))));
    }

    #[test]
    fn counts_on_t4() {
        let idx = t4();
        assert_eq!(idx.match_counts(1).unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(idx.match_counts(2).unwrap(), vec![2, 2, 2, 2]);
        assert!(idx.match_counts(3).is_err());
    }

    #[test]
    fn left_ties_prefer_lower_index() {
        // Controls 1 and 3 share a score below the target; 1 must come first.
        let idx = ScoreIndex::build(&[0.5, 0.4, 0.7, 0.4], &[true, false, false, false]).unwrap();
        assert_eq!(idx.match_set_opposite(0, 1).unwrap(), vec![1]);
        assert_eq!(idx.match_set_opposite(0, 2).unwrap(), vec![1, 3]);
        assert_eq!(idx.match_set_opposite(0, 3).unwrap(), vec![1, 3, 2]);
    }

    #[test]
    fn cross_side_ties_prefer_lower_index() {
        // 0.25 and 0.75 are equidistant from 0.5 in binary floating point.
        let idx = ScoreIndex::build(&[0.5, 0.75, 0.25], &[true, false, false]).unwrap();
        assert_eq!(idx.match_set_opposite(0, 1).unwrap(), vec![1]);
        let idx = ScoreIndex::build(&[0.5, 0.25, 0.75], &[true, false, false]).unwrap();
        assert_eq!(idx.match_set_opposite(0, 1).unwrap(), vec![1]);
    }

    #[test]
    fn same_arm_skips_self_among_duplicates() {
        let idx = ScoreIndex::build(&[0.5, 0.5, 0.5, 0.1], &[true, true, true, false]).unwrap();
        assert_eq!(idx.match_set_same(1, 3).unwrap(), vec![1, 0, 2]);
        assert_eq!(idx.match_set_same(2, 2).unwrap(), vec![2, 0]);
    }
}
