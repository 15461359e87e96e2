use serde::Serialize;

use crate::patterns::ShardSpec;

const TWO_D: [ShardSpec; 3] = [ShardSpec::Replica, ShardSpec::Split(0), ShardSpec::Split(1)];
const ONE_D: [ShardSpec; 2] = [ShardSpec::Replica, ShardSpec::Split(0)];

/// Layouts a weight of the given rank may take.
pub fn weight_options(rank: usize) -> &'static [ShardSpec] {
    if rank >= 2 {
        &TWO_D
    } else {
        &ONE_D
    }
}

/// Cartesian product of per-weight layouts, indexed in mixed radix with the
/// first weight most significant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanSpace {
    pub weights: Vec<String>,
    #[serde(skip)]
    options: Vec<&'static [ShardSpec]>,
    /// Candidate count; saturates at `u128::MAX`.
    pub count: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct CandidatePlan {
    pub index: u64,
    pub assignments: Vec<ShardSpec>,
}

impl CandidatePlan {
    pub fn splits(&self) -> usize {
        self.assignments.iter().filter(|s| s.is_split()).count()
    }
}

impl PlanSpace {
    /// `weights` pairs each weight's name with its rank.
    pub fn new<S: Into<String>>(weights: impl IntoIterator<Item = (S, usize)>) -> Self {
        let (names, options): (Vec<String>, Vec<&'static [ShardSpec]>) = weights
            .into_iter()
            .map(|(n, rank)| (n.into(), weight_options(rank)))
            .unzip();
        let count = options
            .iter()
            .try_fold(1u128, |acc, o| acc.checked_mul(o.len() as u128))
            .unwrap_or(u128::MAX);
        PlanSpace {
            weights: names,
            options,
            count,
        }
    }

    pub fn decode(&self, index: u64) -> CandidatePlan {
        let mut rest = index;
        let mut assignments = vec![ShardSpec::Replica; self.options.len()];
        for (slot, opts) in self.options.iter().enumerate().rev() {
            let r = opts.len() as u64;
            assignments[slot] = opts[(rest % r) as usize];
            rest /= r;
        }
        CandidatePlan { index, assignments }
    }
}

/// Lazily yields every candidate in lexicographic order.
///
/// # Panics
/// If the space has more than `u64::MAX` candidates; bound it first.
pub fn enumerate_all_plans(space: &PlanSpace) -> impl Iterator<Item = CandidatePlan> + '_ {
    let count = u64::try_from(space.count).expect("plan space exceeds u64");
    (0..count).map(|i| space.decode(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_matrices_give_729() {
        let space = PlanSpace::new((0..6).map(|i| (format!("w{i}"), 2)));
        assert_eq!(space.count, 729);
        assert_eq!(enumerate_all_plans(&space).count(), 729);
    }

    #[test]
    fn no_weights_give_one_empty_plan() {
        let space = PlanSpace::new(Vec::<(String, usize)>::new());
        let plans: Vec<_> = enumerate_all_plans(&space).collect();
        assert_eq!(plans.len(), 1);
        assert!(plans[0].assignments.is_empty());
    }

    #[test]
    fn vectors_have_two_options() {
        let space = PlanSpace::new([("a", 2), ("g", 1)]);
        assert_eq!(space.count, 6);
        let last = enumerate_all_plans(&space).last().unwrap();
        assert_eq!(last.assignments, [ShardSpec::Split(1), ShardSpec::Split(0)]);
    }

    #[test]
    fn order_is_lexicographic() {
        let space = PlanSpace::new([("a", 2), ("b", 2)]);
        let plans: Vec<_> = enumerate_all_plans(&space).map(|p| p.assignments).collect();
        assert_eq!(plans[0], [ShardSpec::Replica, ShardSpec::Replica]);
        assert_eq!(plans[1], [ShardSpec::Replica, ShardSpec::Split(0)]);
        assert_eq!(plans[3], [ShardSpec::Split(0), ShardSpec::Replica]);
    }
}
