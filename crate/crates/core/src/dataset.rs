//! Labeled image datasets and their on-disk layout: one PNG per sample plus
//! `manifest.csv` (`id,label,nuisance,split[,domain]`) and `dataset.json`
//! holding class and nuisance names.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    /// Index into [`Dataset::nuisance_names`], when annotated.
    pub nuisance: Option<usize>,
    pub split: Split,
    pub domain: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub nuisance_names: Vec<String>,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    classes: Vec<String>,
    nuisance_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    label: usize,
    nuisance: String,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }

    pub fn class_counts(samples: &[&Sample], num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for s in samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir)?;
        let meta = DatasetMeta { classes: self.classes.clone(), nuisance_names: self.nuisance_names.clone() };
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
        let with_domain = self.samples.iter().any(|s| s.domain.is_some());
        let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
        if with_domain {
            w.write_record(["id", "label", "nuisance", "split", "domain"])?;
        } else {
            w.write_record(["id", "label", "nuisance", "split"])?;
        }
        for s in &self.samples {
            s.image.save_png(&img_dir.join(format!("{}.png", s.id)))?;
            let nuisance = s.nuisance.map(|n| self.nuisance_names[n].clone()).unwrap_or_default();
            let mut rec = vec![s.id.clone(), s.label.to_string(), nuisance, s.split.to_string()];
            if with_domain {
                rec.push(s.domain.clone().unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("dataset.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact(format!("dataset at {}", dir.display())));
        }
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let mut r = csv::Reader::from_path(dir.join("manifest.csv"))?;
        let mut samples = Vec::new();
        for row in r.deserialize() {
            let row: ManifestRow = row?;
            if row.label >= meta.classes.len() {
                return Err(Error::validation(format!(
                    "sample '{}' has label {} but only {} classes exist",
                    row.id,
                    row.label,
                    meta.classes.len()
                )));
            }
            let nuisance = if row.nuisance.is_empty() {
                None
            } else {
                Some(
                    meta.nuisance_names
                        .iter()
                        .position(|n| *n == row.nuisance)
                        .ok_or_else(|| Error::validation(format!("unknown nuisance '{}'", row.nuisance)))?,
                )
            };
            let image = Image::load_png(&dir.join("images").join(format!("{}.png", row.id)))?;
            samples.push(Sample {
                id: row.id,
                image,
                label: row.label,
                nuisance,
                split: row.split.parse()?,
                domain: row.domain.filter(|d| !d.is_empty()),
            });
        }
        Ok(Self { classes: meta.classes, nuisance_names: meta.nuisance_names, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(3, 4, 4);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 3) as f64 / 2.0);
        img.quantize_u8();
        let ds = Dataset {
            classes: vec!["circle".into(), "square".into()],
            nuisance_names: vec!["warm".into(), "cool".into()],
            samples: vec![
                Sample {
                    id: "s0".into(),
                    image: img.clone(),
                    label: 1,
                    nuisance: Some(0),
                    split: Split::Train,
                    domain: None,
                },
                Sample {
                    id: "s1".into(),
                    image: img,
                    label: 0,
                    nuisance: None,
                    split: Split::Test,
                    domain: Some("sketch".into()),
                },
            ],
        };
        ds.save(dir.path()).unwrap();
        let header = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(header.starts_with("id,label,nuisance,split,domain\n"));
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_dataset_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::MissingArtifact(_))));
    }
}
