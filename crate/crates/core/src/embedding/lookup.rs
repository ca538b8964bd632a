use std::collections::HashMap;

use half::f16;
use ndarray::Array3;

use super::{EmbeddingTable, KeyedJaggedTensor, SparseGradient};
use crate::error::{ensure, Result};
use crate::jagged::{JaggedTensor, Scalar};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IndexStats {
    /// Index slots the lookup read a table row for.
    pub total_processed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lookup<T> {
    /// One jagged tensor per key; row `b` holds sample `b`'s embeddings.
    pub per_key: Vec<JaggedTensor<T>>,
    pub stats: IndexStats,
}

/// Gathers embeddings for every stored ID. Padded slots do not exist here.
pub fn lookup_jagged<T: Scalar>(kjt: &KeyedJaggedTensor, tables: &[EmbeddingTable<T>]) -> Result<Lookup<T>> {
    let resolved = kjt.resolve_tables(tables)?;
    let mut per_key = Vec::with_capacity(resolved.len());
    let mut processed = 0;
    for (k, table) in resolved.into_iter().enumerate() {
        let ids = &kjt.values()[kjt.key_range(k)];
        let mut values = Vec::with_capacity(ids.len() * table.dim());
        for &id in ids {
            values.extend_from_slice(table.row(id));
            processed += 1;
        }
        let offsets = kjt.jagged_ids(k).offsets().to_vec();
        per_key.push(JaggedTensor::new(values, offsets, table.dim())?);
    }
    Ok(Lookup { per_key, stats: IndexStats { total_processed: processed } })
}

/// Baseline lookup over a padded `B x max_len` ID layout: every slot is
/// processed, padded ones as ID 0, and the result is a dense array per key.
pub fn lookup_padded<T: Scalar>(
    kjt: &KeyedJaggedTensor,
    tables: &[EmbeddingTable<T>],
    max_len: usize,
) -> Result<(Vec<Array3<T>>, IndexStats)> {
    let resolved = kjt.resolve_tables(tables)?;
    let b = kjt.batch_size();
    let mut outs = Vec::with_capacity(resolved.len());
    let mut processed = 0;
    for (k, table) in resolved.into_iter().enumerate() {
        let mut padded_ids = vec![0u64; b * max_len];
        for s in 0..b {
            let seg = kjt.segment(k, s);
            ensure!(seg.len() <= max_len, Validation, "sample {s} of key {k} exceeds max_len {max_len}");
            padded_ids[s * max_len..s * max_len + seg.len()].copy_from_slice(seg);
        }
        let d = table.dim();
        let mut out = Array3::from_elem((b, max_len, d), T::zero());
        let flat = out.as_slice_mut().expect("standard layout");
        for (slot, &id) in padded_ids.iter().enumerate() {
            flat[slot * d..(slot + 1) * d].copy_from_slice(table.row(id));
            processed += 1;
        }
        outs.push(out);
    }
    Ok((outs, IndexStats { total_processed: processed }))
}

/// Per-table sparse gradients: every touched row gets the sum of the
/// gradient rows at its positions, accumulated in ascending position order.
pub fn backward_accumulate<T: Scalar>(
    grads: &[JaggedTensor<T>],
    kjt: &KeyedJaggedTensor,
) -> Result<Vec<SparseGradient<T>>> {
    ensure!(grads.len() == kjt.keys().len(), Shape, "{} gradients for {} keys", grads.len(), kjt.keys().len());
    let mut out = Vec::with_capacity(grads.len());
    for (k, grad) in grads.iter().enumerate() {
        let ids = &kjt.values()[kjt.key_range(k)];
        ensure!(
            grad.offsets() == kjt.jagged_ids(k).offsets(),
            Shape,
            "gradient for key `{}` does not match the lookup layout",
            kjt.keys()[k]
        );
        out.push(accumulate_rows(ids, grad.values(), grad.dim()));
    }
    Ok(out)
}

pub(crate) fn accumulate_rows<T: Scalar>(ids: &[u64], rows: &[T], dim: usize) -> SparseGradient<T> {
    let mut slot_of: HashMap<u64, usize> = HashMap::new();
    let mut order = Vec::new();
    let mut sums: Vec<T> = Vec::new();
    for (pos, &id) in ids.iter().enumerate() {
        let slot = *slot_of.entry(id).or_insert_with(|| {
            order.push(id);
            sums.extend(std::iter::repeat_n(T::zero(), dim));
            order.len() - 1
        });
        let acc = &mut sums[slot * dim..(slot + 1) * dim];
        for (a, &g) in acc.iter_mut().zip(&rows[pos * dim..(pos + 1) * dim]) {
            *a = *a + g;
        }
    }
    let mut perm: Vec<usize> = (0..order.len()).collect();
    perm.sort_unstable_by_key(|&i| order[i]);
    let indices = perm.iter().map(|&i| order[i]).collect();
    let values = perm.iter().flat_map(|&i| sums[i * dim..(i + 1) * dim].iter().copied()).collect();
    SparseGradient::new(indices, values, dim).expect("sorted unique indices")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fp16Lookup {
    /// `ids.len() x dim` half-precision embeddings.
    pub values: Vec<f16>,
    /// Elements beyond the half range, clamped to +-65504.
    pub saturated: usize,
}

/// Half-precision gather used for negative samples.
pub fn lookup_fp16(ids: &[u64], table: &EmbeddingTable<f32>) -> Result<Fp16Lookup> {
    let mut values = Vec::with_capacity(ids.len() * table.dim());
    let mut saturated = 0;
    for &id in ids {
        table.check_id(id)?;
        for &w in table.row(id) {
            let h = f16::from_f32(w);
            if h.is_infinite() {
                saturated += 1;
                values.push(if w > 0.0 { f16::MAX } else { f16::MIN });
            } else {
                values.push(h);
            }
        }
    }
    Ok(Fp16Lookup { values, saturated })
}

/// Number of lookups each row of each key's table received.
pub fn access_histogram(kjt: &KeyedJaggedTensor) -> Vec<HashMap<u64, usize>> {
    (0..kjt.keys().len())
        .map(|k| {
            let mut h = HashMap::new();
            for &id in &kjt.values()[kjt.key_range(k)] {
                *h.entry(id).or_insert(0) += 1;
            }
            h
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tables(rng: &mut ChaCha8Rng) -> Vec<EmbeddingTable<f64>> {
        vec![EmbeddingTable::random("user", 13, 3, 1.0, rng), EmbeddingTable::random("item", 29, 5, 1.0, rng)]
    }

    fn random_kjt(rng: &mut ChaCha8Rng, batch: usize) -> KeyedJaggedTensor {
        let rows = [13u64, 29];
        let ids: Vec<Vec<Vec<u64>>> = rows
            .iter()
            .map(|&r| (0..batch).map(|_| (0..rng.random_range(0..7)).map(|_| rng.random_range(0..r)).collect()).collect())
            .collect();
        KeyedJaggedTensor::from_nested(vec!["user".into(), "item".into()], &ids).unwrap()
    }

    #[test]
    fn single_id_returns_its_row() {
        let t = EmbeddingTable::from_weights("t", 2, 2, vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let kjt = KeyedJaggedTensor::from_nested(vec!["t".into()], &[vec![vec![0]]]).unwrap();
        let out = lookup_jagged(&kjt, &[t]).unwrap();
        assert_eq!(out.per_key[0].values(), &[1.0, 0.0]);
        assert_eq!(out.stats.total_processed, 1);
    }

    #[test]
    fn gather_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tabs = tables(&mut rng);
        for _ in 0..20 {
            let kjt = random_kjt(&mut rng, 6);
            let out = lookup_jagged(&kjt, &tabs).unwrap();
            assert_eq!(out.stats.total_processed, kjt.values().len());
            for (k, table) in tabs.iter().enumerate() {
                for s in 0..kjt.batch_size() {
                    for (p, &id) in kjt.segment(k, s).iter().enumerate() {
                        for c in 0..table.dim() {
                            assert_eq!(out.per_key[k].item(s, p)[c], table.weights()[id as usize * table.dim() + c]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn errors_for_unknown_key_and_range() {
        let t = EmbeddingTable::<f32>::zeros("t", 2, 1);
        let unknown = KeyedJaggedTensor::from_nested(vec!["x".into()], &[vec![vec![0]]]).unwrap();
        assert!(matches!(lookup_jagged(&unknown, std::slice::from_ref(&t)), Err(Error::UnknownKey(_))));
        let oob = KeyedJaggedTensor::from_nested(vec!["t".into()], &[vec![vec![2]]]).unwrap();
        assert!(matches!(lookup_jagged(&oob, &[t]), Err(Error::IdOutOfRange { id: 2, .. })));
    }

    #[test]
    fn padded_lookup_counts_every_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tabs = tables(&mut rng);
        let kjt = random_kjt(&mut rng, 4);
        let (dense, stats) = lookup_padded(&kjt, &tabs, 8).unwrap();
        assert_eq!(stats.total_processed, 2 * 4 * 8);
        let jagged = lookup_jagged(&kjt, &tabs).unwrap();
        for k in 0..2 {
            let back = crate::jagged::dense_to_jagged(&dense[k], &jagged.per_key[k].lengths()).unwrap();
            assert_eq!(back, jagged.per_key[k]);
        }
    }

    #[test]
    fn backward_single_and_repeated_ids() {
        let kjt = KeyedJaggedTensor::from_nested(vec!["t".into()], &[vec![vec![3, 1], vec![3]]]).unwrap();
        let g = JaggedTensor::from_lengths(vec![1.0f64, 2.0, 10.0, 20.0, 100.0, 200.0], &[2, 1], 2).unwrap();
        let sg = &backward_accumulate(&[g], &kjt).unwrap()[0];
        assert_eq!(sg.indices(), &[1, 3]);
        assert_eq!(sg.values(), &[10.0, 20.0, 101.0, 202.0]);
    }

    #[test]
    fn backward_matches_dense_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tabs = tables(&mut rng);
        for _ in 0..20 {
            let kjt = random_kjt(&mut rng, 8);
            let fwd = lookup_jagged(&kjt, &tabs).unwrap();
            let grads: Vec<_> = fwd
                .per_key
                .iter()
                .map(|j| {
                    let vals = (0..j.values().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                    JaggedTensor::new(vals, j.offsets().to_vec(), j.dim()).unwrap()
                })
                .collect();
            let sparse = backward_accumulate(&grads, &kjt).unwrap();
            for (k, table) in tabs.iter().enumerate() {
                let d = table.dim();
                let mut dense = vec![0.0; table.rows() * d];
                let mut touched = vec![false; table.rows()];
                for (pos, &id) in kjt.values()[kjt.key_range(k)].iter().enumerate() {
                    touched[id as usize] = true;
                    for c in 0..d {
                        dense[id as usize * d + c] += grads[k].values()[pos * d + c];
                    }
                }
                let want: Vec<u64> = (0..table.rows() as u64).filter(|&r| touched[r as usize]).collect();
                assert_eq!(sparse[k].indices(), want.as_slice());
                assert_eq!(sparse[k].to_dense(table.rows()), dense);
            }
        }
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let kjt = KeyedJaggedTensor::from_nested(vec!["t".into()], &[vec![vec![0, 1]]]).unwrap();
        let g = JaggedTensor::from_lengths(vec![1.0f32], &[1], 1).unwrap();
        assert!(backward_accumulate(&[g], &kjt).is_err());
    }

    #[test]
    fn fp16_exact_and_saturating() {
        let t = EmbeddingTable::from_weights("t", 2, 3, vec![0.5f32, 1.0, 0.0, -1.0e6, 7e4, 0.25]).unwrap();
        let out = lookup_fp16(&[0, 1], &t).unwrap();
        assert_eq!(out.values[0].to_f32(), 0.5);
        assert_eq!(out.values[1].to_f32(), 1.0);
        assert_eq!(out.values[2].to_f32(), 0.0);
        assert_eq!(out.values[3], f16::MIN);
        assert_eq!(out.values[4], f16::MAX);
        assert_eq!(out.saturated, 2);
    }

    #[test]
    fn fp16_relative_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = EmbeddingTable::<f32>::random("t", 500, 16, 1.0, &mut rng);
        let ids: Vec<u64> = (0..500).collect();
        let out = lookup_fp16(&ids, &t).unwrap();
        let bound = 2f64.powi(-10);
        for (h, &w) in out.values.iter().zip(t.weights()) {
            // Oracle: round-trip through f64 -> nearest half, independent of the f32 path.
            let q = h.to_f64();
            assert_eq!(q, f16::from_f64(w as f64).to_f64());
            if (w as f64).abs() >= 6.103515625e-5 {
                assert!(((q - w as f64) / w as f64).abs() <= bound);
            }
        }
    }
}
