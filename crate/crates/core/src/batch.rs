//! Lazy partitioning of task inputs into batches.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// How to split a sequence of inputs. When both fields are set, `batch_count` wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BatchSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_count: Option<usize>,
}

impl BatchSpec {
    pub fn size(k: usize) -> Self {
        BatchSpec {
            batch_size: Some(k),
            batch_count: None,
        }
    }

    pub fn count(c: usize) -> Self {
        BatchSpec {
            batch_size: None,
            batch_count: Some(c),
        }
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        match (self.batch_size, self.batch_count) {
            (None, None) => Err(PartitionError::InvalidSpec("batch_size or batch_count must be set")),
            (Some(0), _) | (_, Some(0)) => Err(PartitionError::InvalidSpec("batch values must be >= 1")),
            _ => Ok(()),
        }
    }

    /// Batch sizes for `n` items, without materializing them.
    pub fn sizes(&self, n: usize) -> Result<Vec<usize>, PartitionError> {
        self.validate()?;
        let mut out = Vec::new();
        let mut plan = Plan::new(self, Some(n))?;
        let mut left = n;
        while left > 0 {
            let take = plan.next_size().min(left);
            out.push(take);
            left -= take;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PartitionError {
    #[error("invalid batch spec: {0}")]
    InvalidSpec(&'static str),
    #[error("batch_count needs an input sequence of known length")]
    UnknownLength,
}

#[derive(Debug, Clone)]
enum Plan {
    Size(usize),
    // `big` batches of `base + 1` followed by batches of `base`
    Count { big: usize, base: usize },
}

impl Plan {
    fn new(spec: &BatchSpec, len: Option<usize>) -> Result<Plan, PartitionError> {
        spec.validate()?;
        match spec.batch_count {
            Some(c) => {
                let n = len.ok_or(PartitionError::UnknownLength)?;
                Ok(Plan::Count {
                    big: n % c,
                    base: n / c,
                })
            }
            None => Ok(Plan::Size(spec.batch_size.expect("validated"))),
        }
    }

    fn next_size(&mut self) -> usize {
        match self {
            Plan::Size(k) => *k,
            Plan::Count { big, base } => {
                if *big > 0 {
                    *big -= 1;
                    *base + 1
                } else {
                    // n < c leaves base = 0; never emit empty batches
                    (*base).max(1)
                }
            }
        }
    }
}

/// Iterator over batches. Pulls at most one batch worth of items from the
/// source at a time.
#[derive(Debug, Clone)]
pub struct Partition<I> {
    iter: I,
    plan: Plan,
}

impl<I: Iterator> Iterator for Partition<I> {
    type Item = Vec<I::Item>;

    fn next(&mut self) -> Option<Self::Item> {
        let k = self.plan.next_size();
        let batch: Vec<_> = self.iter.by_ref().take(k).collect();
        if batch.is_empty() {
            None
        } else {
            Some(batch)
        }
    }
}

/// Partitions `items` lazily.
///
/// With `batch_count` set the length must be known up front, which is read
/// from an exact `size_hint`. Use [`partition_with_len`] otherwise.
pub fn partition<I: IntoIterator>(items: I, spec: BatchSpec) -> Result<Partition<I::IntoIter>, PartitionError> {
    let iter = items.into_iter();
    let len = match iter.size_hint() {
        (lo, Some(hi)) if lo == hi => Some(lo),
        _ => None,
    };
    Ok(Partition {
        plan: Plan::new(&spec, len)?,
        iter,
    })
}

/// Like [`partition`] with a caller-supplied length.
pub fn partition_with_len<I: IntoIterator>(
    items: I,
    len: usize,
    spec: BatchSpec,
) -> Result<Partition<I::IntoIter>, PartitionError> {
    Ok(Partition {
        plan: Plan::new(&spec, Some(len))?,
        iter: items.into_iter(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn sizes_of<T>(batches: &[Vec<T>]) -> Vec<usize> {
        batches.iter().map(Vec::len).collect()
    }

    #[test]
    fn fixed_size_chunks() {
        let b: Vec<_> = partition(0..10, BatchSpec::size(3)).unwrap().collect();
        assert_eq!(sizes_of(&b), vec![3, 3, 3, 1]);
    }

    #[test]
    fn count_takes_precedence_and_splits_evenly() {
        let spec = BatchSpec {
            batch_size: Some(2),
            batch_count: Some(4),
        };
        let b: Vec<_> = partition(0..10, spec).unwrap().collect();
        assert_eq!(sizes_of(&b), vec![3, 3, 2, 2]);
        assert_eq!(spec.sizes(10).unwrap(), vec![3, 3, 2, 2]);
    }

    #[test]
    fn fewer_items_than_batches() {
        let b: Vec<_> = partition(0..2, BatchSpec::count(4)).unwrap().collect();
        assert_eq!(sizes_of(&b), vec![1, 1]);
        assert!(partition(0..0, BatchSpec::count(4)).unwrap().next().is_none());
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            partition(0..3, BatchSpec::default()),
            Err(PartitionError::InvalidSpec(_))
        ));
        assert!(partition(0..3, BatchSpec::size(0)).is_err());
        assert!(partition(0..3, BatchSpec::count(0)).is_err());
    }

    #[test]
    fn count_needs_length() {
        let unknown = (0..10).filter(|x| x % 2 == 0);
        assert_eq!(
            partition(unknown.clone(), BatchSpec::count(2)).unwrap_err(),
            PartitionError::UnknownLength
        );
        let b: Vec<_> = partition_with_len(unknown, 5, BatchSpec::count(2)).unwrap().collect();
        assert_eq!(b, vec![vec![0, 2, 4], vec![6, 8]]);
    }

    #[test]
    fn size_only_works_on_unbounded_input() {
        let mut p = partition((0u64..).map(|x| x * 2), BatchSpec::size(4)).unwrap();
        assert_eq!(p.next().unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(p.next().unwrap(), vec![8, 10, 12, 14]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn order_multiplicity_and_size_laws(
            n in 0usize..300,
            size in proptest::option::of(1usize..40),
            count in proptest::option::of(1usize..40),
        ) {
            prop_assume!(size.is_some() || count.is_some());
            let spec = BatchSpec { batch_size: size, batch_count: count };
            let items: Vec<usize> = (0..n).collect();
            let batches: Vec<Vec<usize>> = partition(items.clone(), spec).unwrap().collect();
            let flat: Vec<usize> = batches.iter().flatten().copied().collect();
            prop_assert_eq!(&flat, &items);
            prop_assert!(batches.iter().all(|b| !b.is_empty()));
            prop_assert_eq!(spec.sizes(n).unwrap(), sizes_of(&batches));
            match count {
                Some(c) => {
                    prop_assert_eq!(batches.len(), c.min(n));
                    let max = batches.iter().map(Vec::len).max().unwrap_or(0);
                    let min = batches.iter().map(Vec::len).min().unwrap_or(0);
                    prop_assert!(max - min <= 1);
                    // larger batches first
                    prop_assert!(batches.windows(2).all(|w| w[0].len() >= w[1].len()));
                }
                None => {
                    let k = size.unwrap();
                    let (last, rest) = match batches.split_last() {
                        Some(x) => x,
                        None => return Ok(()),
                    };
                    prop_assert!(rest.iter().all(|b| b.len() == k));
                    prop_assert!(last.len() <= k);
                }
            }
        }
    }
}
