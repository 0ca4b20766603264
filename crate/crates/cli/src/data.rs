//! Datasets on disk: either `train/`, `val/` and optional `test/` subdirectories,
//! or a single flat directory split deterministically by position.

use std::path::Path;

use sivit::datasynth::{read_dataset, write_dataset, ImageSample, INDEX_FILE, POSITIVE};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Flat directories: of each class, every 10th sample goes to validation and
/// every 10th (offset 5) to test.
const FLAT_PERIOD: usize = 10;
const FLAT_VAL_SLOT: usize = 0;
const FLAT_TEST_SLOT: usize = 5;

impl Splits {
    pub fn get(&self, name: &str) -> CliResult<&[ImageSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(CliError::Usage(format!("unknown split '{name}' (expected train|val|test)"))),
        }
    }

    /// Test split when present, otherwise validation.
    pub fn held_out(&self) -> (&'static str, &[ImageSample]) {
        if self.test.is_empty() {
            ("val", &self.val)
        } else {
            ("test", &self.test)
        }
    }

    pub fn image_size(&self) -> CliResult<usize> {
        let s = self.train.first().ok_or_else(|| CliError::Usage("training split is empty".into()))?;
        if s.image.height != s.image.width {
            return Err(CliError::Usage(format!("images must be square, got {}x{}", s.image.width, s.image.height)));
        }
        Ok(s.image.height)
    }

    pub fn num_categories(&self) -> CliResult<u8> {
        self.train
            .first()
            .map(|s| s.num_categories)
            .ok_or_else(|| CliError::Usage("training split is empty".into()))
    }

    pub fn split_flat(samples: Vec<ImageSample>) -> Splits {
        let mut out = Splits::default();
        let mut seen = [0usize; 2];
        for s in samples {
            let class = (s.class_label == POSITIVE) as usize;
            let slot = seen[class] % FLAT_PERIOD;
            seen[class] += 1;
            match slot {
                FLAT_VAL_SLOT => out.val.push(s),
                FLAT_TEST_SLOT => out.test.push(s),
                _ => out.train.push(s),
            }
        }
        out
    }
}

pub fn load_splits(dir: &Path) -> CliResult<Splits> {
    if dir.join("train").join(INDEX_FILE).exists() {
        let test_dir = dir.join("test");
        let splits = Splits {
            train: read_dataset(&dir.join("train"))?,
            val: read_dataset(&dir.join("val"))?,
            test: if test_dir.join(INDEX_FILE).exists() { read_dataset(&test_dir)? } else { Vec::new() },
        };
        if splits.train.is_empty() || splits.val.is_empty() {
            return Err(CliError::Usage(format!("{}: train and val splits must be non-empty", dir.display())));
        }
        return Ok(splits);
    }
    let splits = Splits::split_flat(read_dataset(dir)?);
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: too few samples to split into train and val ({} and {})",
            dir.display(),
            splits.train.len(),
            splits.val.len()
        )));
    }
    Ok(splits)
}

/// Interleaves classes so consecutive blocks stay balanced, then carves
/// `val` and `test` samples off the front.
pub fn carve_splits(samples: Vec<ImageSample>, val: usize, test: usize) -> CliResult<Splits> {
    if val + test >= samples.len() {
        return Err(CliError::Usage(format!(
            "cannot hold out {val} + {test} of {} samples and still train",
            samples.len()
        )));
    }
    let (pos, neg): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.class_label == POSITIVE);
    let mut ordered = Vec::with_capacity(pos.len() + neg.len());
    let (mut pi, mut ni) = (pos.into_iter(), neg.into_iter());
    loop {
        match (pi.next(), ni.next()) {
            (None, None) => break,
            (a, b) => ordered.extend(a.into_iter().chain(b)),
        }
    }
    let mut rest = ordered.split_off(val);
    let val_set = ordered;
    let train = rest.split_off(test);
    Ok(Splits { train, val: val_set, test: rest })
}

pub fn write_splits(splits: &Splits, dir: &Path) -> CliResult<()> {
    write_dataset(&splits.train, &dir.join("train"))?;
    write_dataset(&splits.val, &dir.join("val"))?;
    if !splits.test.is_empty() {
        write_dataset(&splits.test, &dir.join("test"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sivit::datasynth::{generate_dataset, GenConfig};

    fn small(n_pos: usize, n_neg: usize) -> Vec<ImageSample> {
        let cfg = GenConfig { image_size: 32, ..GenConfig::default() };
        generate_dataset(&cfg, n_pos, n_neg).unwrap()
    }

    #[test]
    fn carving_is_balanced_and_exhaustive() {
        let s = carve_splits(small(6, 6), 4, 2).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 4, 2));
        assert_eq!(s.val.iter().filter(|x| x.class_label == POSITIVE).count(), 2);
        assert_eq!(s.test.iter().filter(|x| x.class_label == POSITIVE).count(), 1);
        let mut ids: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).map(|x| x.sample_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 12);
    }

    #[test]
    fn carving_everything_is_rejected() {
        assert!(carve_splits(small(2, 2), 2, 2).is_err());
    }

    #[test]
    fn flat_split_is_stratified() {
        let s = Splits::split_flat(small(20, 20));
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (32, 4, 4));
        assert_eq!(s.val.iter().filter(|x| x.class_label == POSITIVE).count(), 2);
    }
}
