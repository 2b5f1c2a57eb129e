//! Labeled multi-domain image collections and deterministic splits.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RasterImage,
    pub label: usize,
    pub domain: usize,
    /// Stable identifier, e.g. the relative file path.
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub samples: Vec<Sample>,
}

/// Indices into [`Dataset::samples`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domain_names
            .iter()
            .position(|d| d == name)
            .ok_or_else(|| Error::Config(format!("unknown domain {name:?}")))
    }

    pub fn in_domains(&self, domains: &[usize]) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| domains.contains(&self.samples[i].domain))
            .collect()
    }

    /// Per-domain, per-class split: the first `val_fraction` of each shuffled
    /// cell goes to validation.
    pub fn split(&self, domains: &[usize], val_fraction: f64, seed: u64) -> Result<Split> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("validation fraction {val_fraction} outside [0,1)")));
        }
        let mut split = Split {
            train: Vec::new(),
            val: Vec::new(),
        };
        for &d in domains {
            for c in 0..self.classes() {
                let mut cell: Vec<usize> = (0..self.samples.len())
                    .filter(|&i| self.samples[i].domain == d && self.samples[i].label == c)
                    .collect();
                if cell.is_empty() {
                    continue;
                }
                let mut r = rng::stream(seed, &[tag::SPLIT, d as u64, c as u64]);
                cell.shuffle(&mut r);
                let n_val = (cell.len() as f64 * val_fraction).round() as usize;
                split.val.extend_from_slice(&cell[..n_val]);
                split.train.extend_from_slice(&cell[n_val..]);
            }
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let mut samples = Vec::new();
        for d in 0..2 {
            for c in 0..3 {
                for i in 0..10 {
                    samples.push(Sample {
                        image: RasterImage::filled(2, 2, [0.0; 3]),
                        label: c,
                        domain: d,
                        id: format!("{d}/{c}/{i}"),
                    });
                }
            }
        }
        Dataset {
            class_names: vec!["a".into(), "b".into(), "c".into()],
            domain_names: vec!["x".into(), "y".into()],
            samples,
        }
    }

    #[test]
    fn split_is_disjoint_and_stratified() {
        let ds = toy();
        let s = ds.split(&[0, 1], 0.2, 3).unwrap();
        assert_eq!(s.val.len(), 12);
        assert_eq!(s.train.len(), 48);
        assert!(s.val.iter().all(|i| !s.train.contains(i)));
        for d in 0..2 {
            for c in 0..3 {
                let n = s
                    .val
                    .iter()
                    .filter(|&&i| ds.samples[i].domain == d && ds.samples[i].label == c)
                    .count();
                assert_eq!(n, 2);
            }
        }
        assert_eq!(s, ds.split(&[0, 1], 0.2, 3).unwrap());
        assert_ne!(s, ds.split(&[0, 1], 0.2, 4).unwrap());
    }

    #[test]
    fn split_respects_domains() {
        let ds = toy();
        let s = ds.split(&[1], 0.2, 0).unwrap();
        assert!(s.train.iter().chain(&s.val).all(|&i| ds.samples[i].domain == 1));
    }
}
