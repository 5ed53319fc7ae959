use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Purpose};

use super::{PatchDataset, SplitTag};

const SPLITS: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

/// Stratified, seeded train/val/test partition.
///
/// Split sizes are the largest-remainder rounding of `fractions * n`. Each
/// class (unlabeled items form their own stratum) receives either the floor
/// or the ceiling of its exact share in every split.
pub fn make_splits(
    ds: &PatchDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(PatchDataset, PatchDataset, PatchDataset)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid!("split fractions {fr:?} must lie in [0,1] and sum to 1"));
    }
    let active = fr.iter().filter(|&&f| f > 0.0).count();

    // stratum key: class index, unlabeled items last
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, it) in ds.items().iter().enumerate() {
        strata
            .entry(it.label.unwrap_or(usize::MAX))
            .or_default()
            .push(i);
    }
    for (&key, members) in &strata {
        if members.len() < active {
            let name = if key == usize::MAX {
                "unlabeled".to_string()
            } else {
                format!("class {key}")
            };
            return Err(Error::InsufficientData(format!(
                "{name} has {} items, fewer than the {active} requested splits",
                members.len()
            )));
        }
    }

    let counts: Vec<usize> = strata.values().map(Vec::len).collect();
    let table = controlled_rounding(&counts, &fr);

    let mut assignment = vec![SplitTag::Train; ds.len()];
    for ((&key, members), row) in strata.iter().zip(&table) {
        let mut order = members.clone();
        let stream_key = if key == usize::MAX { u64::MAX } else { key as u64 };
        rng::shuffle(&mut order, &mut rng::stream(seed, Purpose::Split, stream_key, 0));
        let mut cursor = 0;
        for (s, &n) in SPLITS.iter().zip(row) {
            for &idx in &order[cursor..cursor + n] {
                assignment[idx] = *s;
            }
            cursor += n;
        }
    }

    let pick = |tag: SplitTag| {
        let mut i = 0;
        ds.filter(tag, |_| {
            let keep = assignment[i] == tag;
            i += 1;
            keep
        })
    };
    Ok((pick(SplitTag::Train), pick(SplitTag::Val), pick(SplitTag::Test)))
}

fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Rounds the `strata x splits` table of exact shares so that every cell is
/// its floor or ceiling, rows sum to the stratum sizes and columns to the
/// largest-remainder split sizes.
fn controlled_rounding(counts: &[usize], fractions: &[f64]) -> Vec<Vec<usize>> {
    let total: usize = counts.iter().sum();
    let targets = largest_remainder(total, fractions);
    let exact: Vec<Vec<f64>> = counts
        .iter()
        .map(|&n| fractions.iter().map(|f| f * n as f64).collect())
        .collect();
    let mut table: Vec<Vec<usize>> = exact
        .iter()
        .map(|row| row.iter().map(|x| x.floor() as usize).collect())
        .collect();
    let mut row_left: Vec<usize> = counts
        .iter()
        .zip(&table)
        .map(|(&n, row)| n - row.iter().sum::<usize>())
        .collect();
    let mut col_left: Vec<usize> = (0..fractions.len())
        .map(|s| targets[s].saturating_sub(table.iter().map(|r| r[s]).sum::<usize>()))
        .collect();

    // Ryser-style greedy: rows with most units first, each unit to the
    // column with the largest remaining demand it may still take.
    let mut rows: Vec<usize> = (0..counts.len()).collect();
    rows.sort_by(|&a, &b| row_left[b].cmp(&row_left[a]).then(a.cmp(&b)));
    for r in rows {
        while row_left[r] > 0 {
            let candidate = (0..fractions.len())
                .filter(|&s| fractions[s] > 0.0 && (table[r][s] as f64) < exact[r][s].ceil())
                .filter(|&s| table[r][s] == exact[r][s].floor() as usize)
                .max_by(|&a, &b| col_left[a].cmp(&col_left[b]).then(b.cmp(&a)));
            // the fractional parts of a row sum to row_left, so a cell with
            // ceiling slack always exists
            let s = candidate.expect("row residue exceeds fractional cells");
            table[r][s] += 1;
            row_left[r] -= 1;
            col_left[s] = col_left[s].saturating_sub(1);
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, PatchItem};
    use proptest::prelude::*;

    fn dataset(class_sizes: &[usize]) -> PatchDataset {
        let mut items = Vec::new();
        for (c, &n) in class_sizes.iter().enumerate() {
            for i in 0..n {
                items.push(PatchItem {
                    id: format!("c{c}_{i:04}"),
                    image: Image::new(1, 1, 1, vec![0]).unwrap(),
                    label: Some(c),
                });
            }
        }
        PatchDataset::new(items, class_sizes.len().max(2), SplitTag::Train).unwrap()
    }

    fn ids(ds: &PatchDataset) -> Vec<String> {
        ds.ids().map(String::from).collect()
    }

    #[test]
    fn paper_ratios_on_800_items() {
        let ds = dataset(&[100; 8]);
        let (tr, va, te) = make_splits(&ds, (0.75, 0.125, 0.125), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (600, 100, 100));
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let ds = dataset(&[10, 10]);
        assert!(make_splits(&ds, (0.5, 0.5, 0.5), 1).is_err());
    }

    #[test]
    fn tiny_class_is_rejected() {
        let ds = dataset(&[10, 2]);
        assert!(matches!(
            make_splits(&ds, (0.6, 0.2, 0.2), 1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn determinism_over_many_seeds() {
        let ds = dataset(&[37, 23, 11]);
        for seed in 0..50 {
            let a = make_splits(&ds, (0.75, 0.125, 0.125), seed).unwrap();
            let b = make_splits(&ds, (0.75, 0.125, 0.125), seed).unwrap();
            assert_eq!(ids(&a.0), ids(&b.0));
            assert_eq!(ids(&a.1), ids(&b.1));
            assert_eq!(ids(&a.2), ids(&b.2));
        }
    }

    proptest! {
        #[test]
        fn stratified_disjoint_exhaustive(
            sizes in proptest::collection::vec(3usize..60, 2..6),
            a in 0.05f64..0.9,
            b in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let rest = 1.0 - a;
            let f = (a, rest * b, rest * (1.0 - b));
            let ds = dataset(&sizes);
            let active = [f.0, f.1, f.2].iter().filter(|&&x| x > 0.0).count();
            prop_assume!(sizes.iter().all(|&n| n >= active));
            let (tr, va, te) = make_splits(&ds, f, seed).unwrap();
            let mut all: Vec<String> = ids(&tr).into_iter().chain(ids(&va)).chain(ids(&te)).collect();
            prop_assert_eq!(all.len(), ds.len());
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), ds.len());
            for (part, frac) in [(&tr, f.0), (&va, f.1), (&te, f.2)] {
                let counts = part.class_counts();
                for (c, &n) in sizes.iter().enumerate() {
                    let exact = frac * n as f64;
                    prop_assert!((counts[c] as f64 - exact).abs() <= 1.0 + 1e-9,
                        "class {} split count {} vs exact {}", c, counts[c], exact);
                }
            }
        }
    }
}
