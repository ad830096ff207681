use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index;

use crate::error::DatasetError;
use crate::seed;

/// A labeled / unlabeled partition of image ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled: BTreeSet<u64>,
    pub unlabeled: BTreeSet<u64>,
    pub seed: u64,
    pub fraction: f64,
}

/// Samples `round(fraction * n)` ids uniformly without replacement.
pub fn split_dataset(ids: &[u64], fraction: f64, seed: u64) -> Result<DatasetSplit, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(crate::error::ConfigError::new("split.fraction", "must lie in (0, 1]").into());
    }
    let mut sorted: Vec<u64> = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let n = sorted.len();
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(DatasetError::EmptySplit { fraction, total: n });
    }
    let mut rng = seed::rng(seed, &[seed::tag::SPLIT]);
    let picked: BTreeSet<usize> = index::sample(&mut rng, n, k).into_iter().collect();
    let (labeled, unlabeled) = sorted
        .iter()
        .enumerate()
        .partition::<Vec<_>, _>(|(i, _)| picked.contains(i));
    Ok(DatasetSplit {
        labeled: labeled.into_iter().map(|(_, &id)| id).collect(),
        unlabeled: unlabeled.into_iter().map(|(_, &id)| id).collect(),
        seed,
        fraction,
    })
}

/// Writes the labeled ids, one per line, after a `# seed=.. fraction=..`
/// header. Unlabeled ids follow under a `# unlabeled` marker.
pub fn write_split(split: &DatasetSplit, path: &Path) -> Result<(), DatasetError> {
    let mut s = format!(
        "# seed={} fraction={} labeled={} total={}\n",
        split.seed,
        split.fraction,
        split.labeled.len(),
        split.labeled.len() + split.unlabeled.len()
    );
    for id in &split.labeled {
        s.push_str(&format!("{id}\n"));
    }
    s.push_str("# unlabeled\n");
    for id in &split.unlabeled {
        s.push_str(&format!("{id}\n"));
    }
    std::fs::write(path, s).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_split(path: &Path) -> Result<DatasetSplit, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DatasetError::SplitFile("empty file".into()))?;
    let mut seed = None;
    let mut fraction = None;
    for kv in header.trim_start_matches('#').split_whitespace() {
        match kv.split_once('=') {
            Some(("seed", v)) => seed = v.parse().ok(),
            Some(("fraction", v)) => fraction = v.parse().ok(),
            _ => {}
        }
    }
    let (Some(seed), Some(fraction)) = (seed, fraction) else {
        return Err(DatasetError::SplitFile("header lacks seed or fraction".into()));
    };
    let mut labeled = BTreeSet::new();
    let mut unlabeled = BTreeSet::new();
    let mut in_unlabeled = false;
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            in_unlabeled |= line.contains("unlabeled");
            continue;
        }
        let id: u64 = line
            .parse()
            .map_err(|_| DatasetError::SplitFile(format!("line {}: bad id `{line}`", n + 2)))?;
        if in_unlabeled {
            unlabeled.insert(id);
        } else {
            labeled.insert(id);
        }
    }
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        seed,
        fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_supervision() {
        let ids: Vec<u64> = (1..=7).collect();
        let s = split_dataset(&ids, 1.0, 3).unwrap();
        assert_eq!(s.labeled.len(), 7);
        assert!(s.unlabeled.is_empty());
    }

    #[test]
    fn ten_percent_of_ten_is_stable() {
        let ids: Vec<u64> = (0..10).collect();
        let a = split_dataset(&ids, 0.1, 42).unwrap();
        let b = split_dataset(&ids, 0.1, 42).unwrap();
        assert_eq!(a.labeled.len(), 1);
        assert_eq!(a, b);
        assert!(a.labeled.is_disjoint(&a.unlabeled));
        assert_eq!(a.labeled.len() + a.unlabeled.len(), 10);
    }

    #[test]
    fn sizes_fixed_across_seeds() {
        let ids: Vec<u64> = (0..50).collect();
        let sets: BTreeSet<Vec<u64>> = (0..100)
            .map(|seed| {
                let s = split_dataset(&ids, 0.2, seed).unwrap();
                assert_eq!(s.labeled.len(), 10);
                s.labeled.into_iter().collect()
            })
            .collect();
        assert!(sets.len() > 90);
    }

    #[test]
    fn empty_split_rejected() {
        let ids: Vec<u64> = (0..4).collect();
        assert!(matches!(
            split_dataset(&ids, 0.1, 0),
            Err(DatasetError::EmptySplit { .. })
        ));
        assert!(split_dataset(&ids, 0.0, 0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.txt");
        let ids: Vec<u64> = (0..20).collect();
        let s = split_dataset(&ids, 0.25, 9).unwrap();
        write_split(&s, &p).unwrap();
        assert_eq!(read_split(&p).unwrap(), s);
    }
}
