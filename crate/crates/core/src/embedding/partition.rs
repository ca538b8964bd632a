//! Table-grouped work partitioning across logical cores.
//!
//! Each table's IDs for the whole batch are contiguous in the KJT, so the
//! plan splits every table's slice evenly over the cores. Cores then walk the
//! same table together instead of hopping between tables per sample.

use std::ops::Range;

use rayon::prelude::*;

use super::{lookup::Lookup, EmbeddingTable, IndexStats, KeyedJaggedTensor};
use crate::error::{ensure, Result};
use crate::jagged::{JaggedTensor, Scalar};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorePartitionPlan {
    pub num_cores: usize,
    /// `ranges[table][core]`: positions in the KJT value array.
    pub ranges: Vec<Vec<Range<usize>>>,
}

impl CorePartitionPlan {
    /// IDs each core handles, summed over tables.
    pub fn per_core_totals(&self) -> Vec<usize> {
        (0..self.num_cores).map(|c| self.ranges.iter().map(|t| t[c].len()).sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedWork {
    /// `counts[core][table]` lookups performed.
    pub counts: Vec<Vec<usize>>,
}

pub fn build_core_partition(kjt: &KeyedJaggedTensor, num_cores: usize) -> CorePartitionPlan {
    let num_cores = num_cores.max(1);
    // The remainder of each table starts where the previous table's stopped,
    // so the +1 slots rotate over the cores.
    let mut extra_start = 0;
    let ranges = (0..kjt.keys().len())
        .map(|k| {
            let span = kjt.key_range(k);
            let n = span.len();
            let (base, rem) = (n / num_cores, n % num_cores);
            let mut at = span.start;
            let ranges = (0..num_cores)
                .map(|c| {
                    let gets_extra = (c + num_cores - extra_start) % num_cores < rem;
                    let len = base + usize::from(gets_extra);
                    let r = at..at + len;
                    at += len;
                    r
                })
                .collect();
            extra_start = (extra_start + rem) % num_cores;
            ranges
        })
        .collect();
    CorePartitionPlan { num_cores, ranges }
}

/// Same output as [`super::lookup_jagged`], computed core by core following
/// `plan`. Cores write disjoint output slices and run concurrently.
pub fn lookup_grouped<T: Scalar>(
    kjt: &KeyedJaggedTensor,
    tables: &[EmbeddingTable<T>],
    plan: &CorePartitionPlan,
) -> Result<(Lookup<T>, GroupedWork)> {
    let resolved = kjt.resolve_tables(tables)?;
    ensure!(plan.ranges.len() == resolved.len(), Validation, "plan covers {} tables, kjt has {}", plan.ranges.len(), resolved.len());
    let mut counts = vec![vec![0usize; resolved.len()]; plan.num_cores];
    let mut per_key = Vec::with_capacity(resolved.len());
    let mut processed = 0;
    for (k, table) in resolved.into_iter().enumerate() {
        let span = kjt.key_range(k);
        let ranges = &plan.ranges[k];
        ensure!(
            ranges.len() == plan.num_cores
                && ranges.first().is_some_and(|r| r.start == span.start)
                && ranges.last().is_some_and(|r| r.end == span.end)
                && ranges.windows(2).all(|w| w[0].end == w[1].start),
            Validation,
            "plan ranges for table `{}` do not tile its ids",
            table.name
        );
        let d = table.dim();
        let mut values = vec![T::zero(); span.len() * d];
        let mut chunks = Vec::with_capacity(ranges.len());
        let mut rest = values.as_mut_slice();
        for r in ranges {
            let (head, tail) = rest.split_at_mut(r.len() * d);
            chunks.push(head);
            rest = tail;
        }
        let ids = kjt.values();
        chunks.into_par_iter().zip(ranges.par_iter()).for_each(|(out, r)| {
            for (slot, &id) in out.chunks_exact_mut(d).zip(&ids[r.clone()]) {
                slot.copy_from_slice(table.row(id));
            }
        });
        for (c, r) in ranges.iter().enumerate() {
            counts[c][k] = r.len();
            processed += r.len();
        }
        per_key.push(JaggedTensor::new(values, kjt.jagged_ids(k).offsets().to_vec(), d)?);
    }
    Ok((Lookup { per_key, stats: IndexStats { total_processed: processed } }, GroupedWork { counts }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::lookup_jagged;

    fn kjt_with(sizes: &[usize]) -> KeyedJaggedTensor {
        let keys = (0..sizes.len()).map(|i| format!("t{i}")).collect();
        let ids: Vec<Vec<Vec<u64>>> = sizes.iter().map(|&n| vec![(0..n as u64).collect()]).collect();
        KeyedJaggedTensor::from_nested(keys, &ids).unwrap()
    }

    #[test]
    fn one_core_takes_everything() {
        let kjt = kjt_with(&[5, 3]);
        let plan = build_core_partition(&kjt, 1);
        assert_eq!(plan.ranges, vec![vec![0..5], vec![5..8]]);
    }

    #[test]
    fn even_split_over_four_cores() {
        let kjt = kjt_with(&[10, 10]);
        let plan = build_core_partition(&kjt, 4);
        for table in &plan.ranges {
            assert!(table.iter().all(|r| r.len() == 2 || r.len() == 3));
            assert_eq!(table.iter().map(|r| r.len()).sum::<usize>(), 10);
        }
        // Rotation: the second table's extras land on the cores the first skipped.
        assert_eq!(plan.per_core_totals(), vec![5, 5, 5, 5]);
    }

    #[test]
    fn inconsistent_plan_rejected() {
        let kjt = kjt_with(&[4]);
        let tables = vec![EmbeddingTable::<f32>::zeros("t0", 4, 2)];
        let mut plan = build_core_partition(&kjt, 2);
        plan.ranges[0][1] = 2..3;
        assert!(lookup_grouped(&kjt, &tables, &plan).is_err());
        let other = build_core_partition(&kjt_with(&[4, 1]), 2);
        assert!(lookup_grouped(&kjt, &tables, &other).is_err());
    }

    #[test]
    fn grouped_equals_baseline_on_small_case() {
        let kjt = kjt_with(&[7, 2, 0]);
        let tables: Vec<_> = (0..3)
            .map(|i| EmbeddingTable::from_weights(format!("t{i}"), 8, 2, (0..16).map(|x| x as f32 + i as f32).collect()).unwrap())
            .collect();
        let plan = build_core_partition(&kjt, 3);
        let (grouped, work) = lookup_grouped(&kjt, &tables, &plan).unwrap();
        assert_eq!(grouped, lookup_jagged(&kjt, &tables).unwrap());
        assert_eq!(work.counts.iter().map(|c| c.iter().sum::<usize>()).sum::<usize>(), 9);
    }
}
