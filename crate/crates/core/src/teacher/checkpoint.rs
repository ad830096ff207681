use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{CropCacheEntry, IterationRecord, TrainerState};
use crate::detect::{Layout, WeightVector};
use crate::error::TrainError;
use crate::geometry::Box;

const MAGIC: &str = "cropzoom-checkpoint 1";

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Plain-text checkpoint: a layout header, both weight vectors, the crop
/// cache and the run history. Numbers use shortest round-trip formatting so
/// a resumed run continues bit for bit.
pub fn write_checkpoint(state: &TrainerState, path: &Path) -> Result<(), TrainError> {
    let l = state.student.layout;
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "layout {} {}", l.classes, l.features);
    let _ = writeln!(s, "iteration {}", state.iteration);
    let _ = writeln!(s, "burned_in {}", state.burned_in);
    let _ = writeln!(s, "student {}", join(&state.student.values));
    let _ = writeln!(s, "teacher {}", join(&state.teacher.values));
    for (id, e) in &state.crop_cache {
        let coords: Vec<f64> = e.crops.iter().flat_map(|b| b.coords()).collect();
        let _ = writeln!(s, "cache {id} {} {}", e.computed_at, join(&coords));
    }
    for r in &state.history {
        let _ = writeln!(
            s,
            "row {} {} {} {} {} {} {}",
            r.iter, r.l_sup, r.l_unsup, r.total, r.pseudo_per_image, r.crops, r.lr
        );
    }
    std::fs::write(path, s).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
}

fn bad(line: usize, what: impl std::fmt::Display) -> TrainError {
    TrainError::Checkpoint(format!("line {line}: {what}"))
}

fn parse_all<T: std::str::FromStr>(line: usize, parts: &[&str]) -> Result<Vec<T>, TrainError>
where
    T::Err: std::fmt::Display,
{
    parts
        .iter()
        .map(|p| p.parse::<T>().map_err(|e| bad(line, format!("`{p}`: {e}"))))
        .collect()
}

pub fn read_checkpoint(path: &Path) -> Result<TrainerState, TrainError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => return Err(bad(1, "not a checkpoint file")),
    }
    let mut layout = None;
    let mut iteration = None;
    let mut burned_in = None;
    let mut student = None;
    let mut teacher = None;
    let mut crop_cache = BTreeMap::new();
    let mut history = Vec::new();
    for (n, line) in lines {
        let n = n + 1;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let Some((&key, rest)) = parts.split_first() else {
            continue;
        };
        match key {
            "layout" => {
                let v: Vec<usize> = parse_all(n, rest)?;
                if v.len() != 2 || v[0] < 2 {
                    return Err(bad(n, "layout needs classes and features"));
                }
                layout = Some(Layout {
                    classes: v[0],
                    features: v[1],
                });
            }
            "iteration" => iteration = parse_all::<usize>(n, rest)?.first().copied(),
            "burned_in" => burned_in = parse_all::<bool>(n, rest)?.first().copied(),
            "student" => student = Some(parse_all::<f64>(n, rest)?),
            "teacher" => teacher = Some(parse_all::<f64>(n, rest)?),
            "cache" => {
                if rest.len() < 2 || (rest.len() - 2) % 4 != 0 {
                    return Err(bad(n, "cache needs id, iteration and 4 numbers per crop"));
                }
                let id: u64 = rest[0].parse().map_err(|e| bad(n, e))?;
                let computed_at: usize = rest[1].parse().map_err(|e| bad(n, e))?;
                let coords: Vec<f64> = parse_all(n, &rest[2..])?;
                let crops = coords
                    .chunks(4)
                    .map(|c| Box::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(n, e)))
                    .collect::<Result<_, _>>()?;
                crop_cache.insert(id, CropCacheEntry { crops, computed_at });
            }
            "row" => {
                if rest.len() != 7 {
                    return Err(bad(n, "row needs 7 fields"));
                }
                let f: Vec<f64> = parse_all(n, rest)?;
                history.push(IterationRecord {
                    iter: rest[0].parse().map_err(|e| bad(n, e))?,
                    l_sup: f[1],
                    l_unsup: f[2],
                    total: f[3],
                    pseudo_per_image: f[4],
                    crops: rest[5].parse().map_err(|e| bad(n, e))?,
                    lr: f[6],
                });
            }
            other => return Err(bad(n, format!("unknown key `{other}`"))),
        }
    }
    let missing = |what: &str| TrainError::Checkpoint(format!("missing `{what}`"));
    let layout = layout.ok_or_else(|| missing("layout"))?;
    Ok(TrainerState {
        student: WeightVector::from_values(layout, student.ok_or_else(|| missing("student"))?)?,
        teacher: WeightVector::from_values(layout, teacher.ok_or_else(|| missing("teacher"))?)?,
        iteration: iteration.ok_or_else(|| missing("iteration"))?,
        burned_in: burned_in.ok_or_else(|| missing("burned_in"))?,
        crop_cache,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_dataset, SceneConfig, SceneSpec};
    use crate::detect::{ToyModel, ToyModelConfig};
    use crate::teacher::{Trainer, TrainerConfig, TrainingData};

    #[test]
    fn resume_matches_uninterrupted_run() {
        let scenes: Vec<SceneSpec> = (1..=6).map(|i| SceneSpec::generate(&SceneConfig::default(), i)).collect();
        let ids: Vec<u64> = scenes.iter().map(|s| s.image_id).collect();
        let data = TrainingData::from_split(&scenes, &split_dataset(&ids, 0.5, 0).unwrap());
        let model = ToyModel::new(ToyModelConfig::default());
        let cfg = TrainerConfig {
            burn_in_iters: 4,
            max_iters: 14,
            crop_start_iter: 6,
            crop_labeled: true,
            crop_unlabeled: true,
            tau: 0.25,
            learning_rate: 0.5,
            checkpoint_every: 5,
            ..TrainerConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut full = Trainer::new(cfg.clone(), &model, &data).unwrap();
        let mut a = full.initial_state();
        full.run(&mut a, cfg.max_iters, Some(dir.path())).unwrap();

        let mut state = read_checkpoint(&super::super::checkpoint_path(dir.path(), 10)).unwrap();
        assert_eq!(state.iteration, 10);
        let mut resumed = Trainer::new(cfg.clone(), &model, &data).unwrap();
        resumed.run(&mut state, cfg.max_iters, None).unwrap();
        assert_eq!(state, a);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        std::fs::write(&p, "hello\n").unwrap();
        assert!(read_checkpoint(&p).is_err());
        std::fs::write(&p, format!("{MAGIC}\nlayout 3 2\nstudent 1 2\n")).unwrap();
        assert!(read_checkpoint(&p).is_err());
    }
}
